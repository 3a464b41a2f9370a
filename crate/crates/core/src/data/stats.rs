use serde::{Deserialize, Serialize};

use super::{Scene, MSI_BANDS, SAR_BANDS};
use crate::error::{data, Result};

pub const STD_FLOOR: f64 = 1e-6;

/// Per-band mean and population standard deviation, SAR bands first
/// (VV, VH, Red, Green, Blue, NIR).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

fn moments(values: impl Iterator<Item = f64> + Clone) -> Option<(f64, f64)> {
    let (n, sum) = values.clone().fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    if n == 0 {
        return None;
    }
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Some((mean, var.sqrt()))
}

/// Band statistics over `scenes`; MSI bands use observed pixels only.
pub fn compute_norm_stats(scenes: &[Scene]) -> Result<NormStats> {
    if scenes.is_empty() {
        return Err(data("cannot compute normalization statistics of an empty split"));
    }
    let mut mean = Vec::with_capacity(SAR_BANDS + MSI_BANDS);
    let mut std = Vec::with_capacity(SAR_BANDS + MSI_BANDS);
    for b in 0..SAR_BANDS {
        let values = scenes.iter().flat_map(move |s| {
            let plane = s.pixels();
            s.sar.data()[b * plane..(b + 1) * plane].iter().map(|&v| v as f64)
        });
        let (m, sd) = moments(values).expect("non-empty split");
        mean.push(m);
        std.push(sd.max(STD_FLOOR));
    }
    for b in 0..MSI_BANDS {
        let values = scenes.iter().flat_map(move |s| {
            let plane = s.pixels();
            s.msi.data()[b * plane..(b + 1) * plane]
                .iter()
                .zip(&s.validity)
                .filter(|(_, &ok)| ok == 1)
                .map(|(&v, _)| v as f64)
        });
        let (m, sd) = moments(values).ok_or_else(|| data(format!("MSI band {b} has no valid pixels in the split")))?;
        mean.push(m);
        std.push(sd.max(STD_FLOOR));
    }
    Ok(NormStats { mean, std })
}

impl NormStats {
    /// Standardizes one value of band `b`; bands whose spread sits at the
    /// floor carry no information and map to 0.
    pub fn apply(&self, b: usize, v: f32) -> f32 {
        if self.std[b] <= STD_FLOOR {
            0.0
        } else {
            ((v as f64 - self.mean[b]) / self.std[b]) as f32
        }
    }
}

/// Model inputs for one scene: standardized SAR `[2,H,W]` and MSI `[4,H,W]`,
/// with missing MSI pixels set to 0.
pub fn normalize_scene(scene: &Scene, stats: &NormStats) -> (Vec<f32>, Vec<f32>) {
    let plane = scene.pixels();
    let sar = scene
        .sar
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| stats.apply(i / plane, v))
        .collect();
    let msi = scene
        .msi
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            if scene.validity[i % plane] == 1 {
                stats.apply(SAR_BANDS + i / plane, v)
            } else {
                0.0
            }
        })
        .collect();
    (sar, msi)
}
