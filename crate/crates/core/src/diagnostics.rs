//! Gate-map pyramids and the per-pixel discrepancy between the two decoder paths.

use smag_tensor::{NormMode, Tensor, TensorArchive};

use crate::data::{NormStats, Scene};
use crate::error::{config, Result};
use crate::model::Model;
use crate::params::Ctx;
use crate::train::make_inputs;

#[derive(Clone, Debug, PartialEq)]
pub struct SmgExport {
    pub gate: Tensor<f32>,
    pub mask: Tensor<f32>,
    pub smg: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub scene: String,
    /// Finest level first, each map `[1, 1, h, w]`.
    pub levels: Vec<SmgExport>,
    /// Final pre-head decoder features of each path, `[1, C, H, W]`.
    pub features_fused: Tensor<f32>,
    pub features_sar: Tensor<f32>,
    /// Channel-mean squared difference of the two feature maps, `[H, W]`,
    /// accumulated and kept in double precision.
    pub mse: Tensor<f64>,
}

/// Mean over channels of `(a − b)²` per pixel; inputs are `[1, C, H, W]`.
pub fn mse_map(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Tensor<f64>> {
    let [_, c, h, w] = a.dims4()?;
    if a.shape() != b.shape() {
        return Err(config("feature maps differ in shape"));
    }
    let plane = h * w;
    let mut out = vec![0.0f64; plane];
    for ci in 0..c {
        for i in 0..plane {
            let d = a.data()[ci * plane + i] as f64 - b.data()[ci * plane + i] as f64;
            out[i] += d * d;
        }
    }
    Ok(Tensor::new(vec![h, w], out.into_iter().map(|v| v / c as f64).collect())?)
}

pub fn diagnose(model: &Model<f32>, scene: &Scene, stats: &NormStats) -> Result<Diagnostics> {
    if !model.is_dual() {
        return Err(config(format!(
            "diagnostics need a dual-path model, not {:?}",
            model.config.kind
        )));
    }
    let (inputs, _) = make_inputs::<f32>(&[scene], stats)?;
    let mut ctx = Ctx::new(&model.store, NormMode::RunningStats, false);
    let pred = model.forward(&mut ctx, &inputs)?;
    let levels = pred
        .smg
        .iter()
        .map(|l| SmgExport {
            gate: ctx.g.value(l.gate).clone(),
            mask: ctx.g.value(l.mask).clone(),
            smg: ctx.g.value(l.smg).clone(),
        })
        .collect();
    let features_fused = ctx.g.value(pred.features_primary).clone();
    let features_sar = ctx.g.value(pred.features_sar.expect("dual model")).clone();
    let mse = mse_map(&features_fused, &features_sar)?;
    Ok(Diagnostics {
        scene: scene.id.clone(),
        levels,
        features_fused,
        features_sar,
        mse,
    })
}

impl Diagnostics {
    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new(serde_json::json!({ "scene": self.scene }));
        for (k, l) in self.levels.iter().enumerate() {
            a.insert(format!("smg.level{}.gate", k + 1), &l.gate);
            a.insert(format!("smg.level{}.mask", k + 1), &l.mask);
            a.insert(format!("smg.level{}.smg", k + 1), &l.smg);
        }
        a.insert("decoder.fused", &self.features_fused);
        a.insert("decoder.sar", &self.features_sar);
        a.insert("mse", &self.mse);
        a
    }
}
