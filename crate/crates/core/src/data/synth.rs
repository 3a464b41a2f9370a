//! Procedural flood scenes: value-noise water bodies, speckled SAR backscatter,
//! four-band reflectance and cloud occlusion of the optical bands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use smag_tensor::Tensor;

use crate::error::{config, data, Result};
use crate::rng::child_seed;

pub const SAR_BANDS: usize = 2;
pub const MSI_BANDS: usize = 4;
pub const RED: usize = 0;
pub const NIR: usize = 3;

const THRESHOLD_ITERS: usize = 100;
const FRACTION_TOL: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub size: usize,
    pub water_fraction: [f64; 2],
    /// Shape parameter of the unit-mean gamma speckle (number of looks).
    pub speckle_shape: f64,
    pub water_offset_db: f64,
    pub nir_absorption: f64,
    pub cloud_coverage: [f64; 2],
    /// Fraction of each scene covered by land that is as dark as water in SAR.
    pub confuser_fraction: f64,
    pub fill_value: f32,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            size: 64,
            water_fraction: [0.05, 0.45],
            speckle_shape: 4.0,
            water_offset_db: -8.0,
            nir_absorption: 0.35,
            cloud_coverage: [0.0, 0.4],
            confuser_fraction: 0.08,
            fill_value: 0.0,
            seed: 0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let unit = |r: [f64; 2]| (0.0..=1.0).contains(&r[0]) && (0.0..=1.0).contains(&r[1]) && r[0] <= r[1];
        if self.size < 4 {
            return Err(config(format!("scene size {} is too small", self.size)));
        }
        if !unit(self.water_fraction) {
            return Err(config(format!("water_fraction {:?} must be an ordered range in [0, 1]", self.water_fraction)));
        }
        if !unit(self.cloud_coverage) {
            return Err(config(format!("cloud_coverage {:?} must be an ordered range in [0, 1]", self.cloud_coverage)));
        }
        if !(self.speckle_shape > 0.0 && self.speckle_shape.is_finite()) {
            return Err(config("speckle_shape must be positive"));
        }
        if !(0.0..=1.0).contains(&self.nir_absorption) || !(0.0..1.0).contains(&self.confuser_fraction) {
            return Err(config("nir_absorption and confuser_fraction must lie in [0, 1)"));
        }
        if !self.water_offset_db.is_finite() || !self.fill_value.is_finite() {
            return Err(config("water_offset_db and fill_value must be finite"));
        }
        Ok(())
    }
}

/// One co-registered sample. Rasters are `[bands, H, W]`; masks are `H·W` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: String,
    pub sar: Tensor<f32>,
    pub msi: Tensor<f32>,
    pub validity: Vec<u8>,
    pub label: Vec<u8>,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.sar.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.sar.shape()[2]
    }

    pub fn pixels(&self) -> usize {
        self.label.len()
    }

    pub fn water_fraction(&self) -> f64 {
        self.label.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.pixels().max(1) as f64
    }

    pub fn valid_fraction(&self) -> f64 {
        self.validity.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.pixels().max(1) as f64
    }

    /// Checks shapes, binary masks and the fill value at missing pixels.
    pub fn check(&self, fill: f32) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let bad = |what: &str| data(format!("scene {}: {}", self.id, what));
        if self.sar.shape() != [SAR_BANDS, h, w] || self.msi.shape() != [MSI_BANDS, h, w] {
            return Err(bad("raster shapes disagree"));
        }
        if self.validity.len() != h * w || self.label.len() != h * w {
            return Err(bad("mask sizes disagree with rasters"));
        }
        if self.validity.iter().chain(&self.label).any(|&v| v > 1) {
            return Err(bad("masks must be binary"));
        }
        let plane = h * w;
        for b in 0..MSI_BANDS {
            let band = &self.msi.data()[b * plane..(b + 1) * plane];
            if band.iter().zip(&self.validity).any(|(&v, &ok)| ok == 0 && v != fill) {
                return Err(bad("missing MSI pixel differs from the fill value"));
            }
        }
        Ok(())
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise with the given cell size in pixels.
fn value_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64) -> Vec<f64> {
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * gw + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Multi-octave value noise rescaled to `[0, 1]`.
pub(crate) fn fractal_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: f64, octaves: usize) -> Vec<f64> {
    let mut acc = vec![0.0; h * w];
    let mut amp = 1.0;
    let mut c = cell;
    for _ in 0..octaves {
        let layer = value_noise(rng, h, w, c.max(1.0));
        acc.iter_mut().zip(&layer).for_each(|(a, l)| *a += amp * l);
        amp *= 0.5;
        c *= 0.5;
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    acc.iter_mut().for_each(|v| *v = (*v - lo) / span);
    acc
}

/// Marks the `round(fraction · n)` largest entries of `field`.
fn top_fraction(field: &[f64], fraction: f64) -> Vec<bool> {
    let n = field.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    order[..k].iter().for_each(|&i| mask[i] = true);
    mask
}

/// Bisection on the level `t` so that `field < t` covers `target` of the pixels.
fn threshold_water(field: &[f64], target: f64, seed: u64) -> Result<Vec<u8>> {
    let n = field.len() as f64;
    let frac = |t: f64| field.iter().filter(|&&v| v < t).count() as f64 / n;
    let (mut lo, mut hi) = (0.0f64, 1.0 + 1e-9);
    for _ in 0..THRESHOLD_ITERS {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (frac(hi) - target).abs() * n < 1.0 {
            break;
        }
    }
    let t = if (frac(lo) - target).abs() < (frac(hi) - target).abs() { lo } else { hi };
    let got = frac(t);
    if (got - target).abs() > FRACTION_TOL {
        return Err(data(format!(
            "seed {seed}: water fraction {target:.4} unreachable after {THRESHOLD_ITERS} threshold iterations (closest {got:.4})"
        )));
    }
    Ok(field.iter().map(|&v| u8::from(v < t)).collect())
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

/// Generates one scene; the output is a pure function of `(seed, params)`.
pub fn generate_scene(seed: u64, params: &GenParams) -> Result<Scene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = params.size;
    let n = s * s;
    let coarse = (s as f64 / 4.0).max(2.0);

    let target = sample_range(&mut rng, params.water_fraction);
    let water_field = fractal_noise(&mut rng, s, s, coarse, 3);
    let label = threshold_water(&water_field, target, seed)?;

    let terrain = fractal_noise(&mut rng, s, s, coarse / 2.0, 3);
    let roughness = fractal_noise(&mut rng, s, s, coarse / 2.0, 2);
    let vegetation = fractal_noise(&mut rng, s, s, coarse, 3);
    let confuser_field = fractal_noise(&mut rng, s, s, coarse / 2.0, 2);
    let land_share = 1.0 - label.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let confuser_share = if land_share > 0.0 {
        (params.confuser_fraction / land_share).min(1.0)
    } else {
        0.0
    };
    let land_field: Vec<f64> = confuser_field
        .iter()
        .zip(&label)
        .map(|(&v, &l)| if l == 1 { f64::NEG_INFINITY } else { v })
        .collect();
    let confuser = top_fraction(&land_field, confuser_share * land_share);

    let speckle = Gamma::new(params.speckle_shape, 1.0 / params.speckle_shape)
        .map_err(|e| config(format!("speckle distribution: {e}")))?;
    let mut sar = vec![0.0f32; SAR_BANDS * n];
    for i in 0..n {
        let dark = label[i] == 1 || confuser[i];
        let vv = -9.0 + 6.0 * (terrain[i] - 0.5) + if dark { params.water_offset_db } else { 0.0 };
        let vh = vv - 6.0 + 3.0 * (roughness[i] - 0.5);
        for (b, db) in [vv, vh].into_iter().enumerate() {
            let linear = 10f64.powf(db / 10.0) * speckle.sample(&mut rng);
            sar[b * n + i] = (10.0 * linear.max(1e-12).log10()) as f32;
        }
    }

    let noise = Normal::new(0.0, 0.01).expect("valid normal");
    let mut msi = vec![0.0f32; MSI_BANDS * n];
    for i in 0..n {
        let v = vegetation[i];
        let t = terrain[i];
        let land = [
            0.04 + 0.12 * (1.0 - v) + 0.03 * t,
            0.06 + 0.08 * (1.0 - v) + 0.02 * t,
            0.04 + 0.05 * (1.0 - v),
            0.22 + 0.28 * v + 0.05 * t,
        ];
        let refl = if label[i] == 1 {
            [
                0.05 + 0.04 * t,
                0.07 + 0.03 * t,
                0.06 + 0.02 * t,
                (land[NIR] - params.nir_absorption).max(0.01),
            ]
        } else {
            land
        };
        for b in 0..MSI_BANDS {
            let r: f64 = refl[b] + noise.sample(&mut rng);
            msi[b * n + i] = r.clamp(0.0, 1.0) as f32;
        }
    }

    let coverage = sample_range(&mut rng, params.cloud_coverage);
    let cloud_field = fractal_noise(&mut rng, s, s, coarse, 3);
    let cloud = top_fraction(&cloud_field, coverage);
    let validity: Vec<u8> = cloud.iter().map(|&c| u8::from(!c)).collect();
    for b in 0..MSI_BANDS {
        for i in 0..n {
            if validity[i] == 0 {
                msi[b * n + i] = params.fill_value;
            }
        }
    }

    Ok(Scene {
        id: String::new(),
        sar: Tensor::new(vec![SAR_BANDS, s, s], sar)?,
        msi: Tensor::new(vec![MSI_BANDS, s, s], msi)?,
        validity,
        label,
    })
}

pub fn scene_id(index: usize) -> String {
    format!("scene_{index:05}")
}

/// Scene `i` is generated from child seed `i` of `params.seed`.
pub fn generate_scenes(params: &GenParams, count: usize) -> Result<Vec<Scene>> {
    (0..count)
        .map(|i| {
            let mut scene = generate_scene(child_seed(params.seed, i as u64), params)?;
            scene.id = scene_id(i);
            Ok(scene)
        })
        .collect()
}
