//! Spatially masked gated fusion of SAR and MSI feature pyramids.

use serde::{Deserialize, Serialize};
use smag_tensor::{Graph, Real, Tensor, Var};

use crate::encoder::FeaturePyramid;
use crate::error::{config, data, Result};
use crate::layers::Conv;
use crate::params::{Ctx, ParamStore, Scope};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    /// One gate `G`: SAR weighted by `1 − SM·G`, MSI by `SM·G`.
    #[default]
    Complementary,
    /// Separate gates from the concatenated features for each modality.
    Independent,
    /// Each modality's gate is computed from the other modality.
    Cross,
}

/// How the validity raster is reduced to a feature level.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskDownsample {
    /// Fraction of valid pixels in each block.
    #[default]
    Avg,
    /// Validity of the block's center pixel.
    Nearest,
}

/// Reduces a `[B,1,H,W]` validity map to `[B,1,h,w]`; `h`, `w` must divide `H`, `W`.
pub fn downsample_mask<T: Real>(validity: &Tensor<T>, h: usize, w: usize, op: MaskDownsample) -> Result<Tensor<T>> {
    let [b, c, hh, ww] = validity.dims4()?;
    if c != 1 || h == 0 || w == 0 || hh % h != 0 || ww % w != 0 || hh / h != ww / w {
        return Err(data(format!(
            "validity {:?} cannot be pooled evenly to {h}x{w}",
            validity.shape()
        )));
    }
    let f = hh / h;
    let src = validity.data();
    let mut out = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        let plane = &src[bi * hh * ww..(bi + 1) * hh * ww];
        for y in 0..h {
            for x in 0..w {
                let v = match op {
                    MaskDownsample::Avg => {
                        let mut acc = T::zero();
                        for dy in 0..f {
                            for dx in 0..f {
                                acc += plane[(y * f + dy) * ww + x * f + dx];
                            }
                        }
                        acc / T::lit((f * f) as f64)
                    }
                    MaskDownsample::Nearest => plane[(y * f + f / 2) * ww + x * f + f / 2],
                };
                out.push(v);
            }
        }
    }
    Ok(Tensor::new(vec![b, 1, h, w], out)?)
}

/// One spatial mask per pyramid level, matching the given `(h, w)` extents.
pub fn build_mask_pyramid<T: Real>(
    validity: &Tensor<T>,
    level_shapes: &[(usize, usize)],
    op: MaskDownsample,
) -> Result<Vec<Tensor<T>>> {
    level_shapes
        .iter()
        .map(|&(h, w)| downsample_mask(validity, h, w, op))
        .collect()
}

/// Gate maps of one level: one map for complementary mode, two otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gates {
    Single(Var),
    Pair { sar: Var, msi: Var },
}

/// Gate, mask and their product at one level, as graph nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SmgLevel {
    /// Gate applied (through the mask) to the MSI features.
    pub gate: Var,
    pub mask: Var,
    pub smg: Var,
}

/// `σ(conv1×1(concat(f_sar, f_msi)))`, one channel.
pub fn gate_map<T: Real>(ctx: &mut Ctx<T>, f_sar: Var, f_msi: Var, conv: &Conv) -> Result<Var> {
    if ctx.g.shape(f_sar) != ctx.g.shape(f_msi) {
        return Err(data(format!(
            "gate inputs disagree: SAR {:?}, MSI {:?}",
            ctx.g.shape(f_sar),
            ctx.g.shape(f_msi)
        )));
    }
    let cat = ctx.g.concat_channels(f_sar, f_msi)?;
    let z = conv.forward(ctx, cat)?;
    Ok(ctx.g.sigmoid(z))
}

/// Fuses one level. Wherever `sm` is 0 the result equals `f_sar` exactly.
pub fn smag_fuse<T: Real>(
    g: &mut Graph<T>,
    f_sar: Var,
    f_msi: Var,
    gates: Gates,
    sm: Var,
    mode: FusionMode,
) -> Result<(Var, SmgLevel)> {
    if g.shape(f_sar) != g.shape(f_msi) {
        return Err(data(format!(
            "fusion inputs disagree: SAR {:?}, MSI {:?}",
            g.shape(f_sar),
            g.shape(f_msi)
        )));
    }
    let (sar_weight, gate, smg) = match (mode, gates) {
        (FusionMode::Complementary, Gates::Single(gate)) => {
            let smg = g.mul(sm, gate)?;
            (g.affine(smg, -1.0, 1.0), gate, smg)
        }
        (FusionMode::Independent | FusionMode::Cross, Gates::Pair { sar, msi }) => {
            let smg = g.mul(sm, msi)?;
            // SAR weight 1 − SM·(1 − G_sar): equals G_sar where MSI is fully
            // observed and 1 where it is absent.
            let closed = g.affine(sar, -1.0, 1.0);
            let masked = g.mul(sm, closed)?;
            (g.affine(masked, -1.0, 1.0), msi, smg)
        }
        (mode, _) => {
            return Err(config(format!("{mode:?} fusion received the wrong number of gate maps")));
        }
    };
    let a = g.mul(f_sar, sar_weight)?;
    let b = g.mul(f_msi, smg)?;
    let fused = g.add(a, b)?;
    Ok((fused, SmgLevel { gate, mask: sm, smg }))
}

#[derive(Clone, Debug)]
pub struct LevelGates {
    pub sar: Option<Conv>,
    pub msi: Conv,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub mode: FusionMode,
    pub spatial_mask: bool,
    pub downsample: MaskDownsample,
    pub levels: Vec<LevelGates>,
}

impl Fusion {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        widths: [usize; 5],
        mode: FusionMode,
        spatial_mask: bool,
        downsample: MaskDownsample,
    ) -> Self {
        let levels = widths
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let s = scope.child(&format!("level{}", k + 1));
                match mode {
                    FusionMode::Complementary => LevelGates {
                        sar: None,
                        msi: Conv::new(store, &s.child("gate"), 2 * c, 1, 1, 1, 0, true),
                    },
                    FusionMode::Independent => LevelGates {
                        sar: Some(Conv::new(store, &s.child("gate_sar"), 2 * c, 1, 1, 1, 0, true)),
                        msi: Conv::new(store, &s.child("gate_msi"), 2 * c, 1, 1, 1, 0, true),
                    },
                    FusionMode::Cross => LevelGates {
                        sar: Some(Conv::new(store, &s.child("gate_sar"), c, 1, 1, 1, 0, true)),
                        msi: Conv::new(store, &s.child("gate_msi"), c, 1, 1, 1, 0, true),
                    },
                }
            })
            .collect();
        Self {
            mode,
            spatial_mask,
            downsample,
            levels,
        }
    }

    fn gates<T: Real>(&self, ctx: &mut Ctx<T>, k: usize, f_sar: Var, f_msi: Var) -> Result<Gates> {
        let lvl = &self.levels[k];
        Ok(match (self.mode, &lvl.sar) {
            (FusionMode::Complementary, _) => Gates::Single(gate_map(ctx, f_sar, f_msi, &lvl.msi)?),
            (FusionMode::Independent, Some(sar)) => Gates::Pair {
                sar: gate_map(ctx, f_sar, f_msi, sar)?,
                msi: gate_map(ctx, f_sar, f_msi, &lvl.msi)?,
            },
            (FusionMode::Cross, Some(sar)) => {
                let zs = sar.forward(ctx, f_msi)?;
                let zm = lvl.msi.forward(ctx, f_sar)?;
                Gates::Pair {
                    sar: ctx.g.sigmoid(zs),
                    msi: ctx.g.sigmoid(zm),
                }
            }
            _ => return Err(config("gate parameters do not match the fusion mode")),
        })
    }

    /// Fuses every level. `validity` is `[B,1,H,W]`; with the spatial mask
    /// disabled every level uses a mask of ones.
    pub fn forward<T: Real>(
        &self,
        ctx: &mut Ctx<T>,
        sar: &FeaturePyramid,
        msi: &FeaturePyramid,
        validity: &Tensor<T>,
    ) -> Result<(FeaturePyramid, Vec<SmgLevel>)> {
        let mut fused = Vec::with_capacity(5);
        let mut states = Vec::with_capacity(5);
        for (k, (&fs, &fm)) in sar.levels.iter().zip(&msi.levels).enumerate() {
            let [b, _, h, w] = ctx.g.value(fs).dims4()?;
            let mask = if self.spatial_mask {
                downsample_mask(validity, h, w, self.downsample)?
            } else {
                Tensor::ones(vec![b, 1, h, w])
            };
            let sm = ctx.g.constant(mask);
            let gates = self.gates(ctx, k, fs, fm)?;
            let (f, state) = smag_fuse(&mut ctx.g, fs, fm, gates, sm, self.mode)?;
            fused.push(f);
            states.push(state);
        }
        Ok((FeaturePyramid { levels: fused }, states))
    }
}
