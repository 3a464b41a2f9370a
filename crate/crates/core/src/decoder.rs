//! U-Net style decoder with a one-channel prediction head.

use smag_tensor::{Real, Var};

use crate::encoder::FeaturePyramid;
use crate::error::{data, Result};
use crate::layers::{Conv, UpConv};
use crate::params::{Ctx, ParamStore, Scope};

/// Up-conv, optional skip concatenation, then two 3×3 conv + ReLU layers.
#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub up: UpConv,
    pub conv1: Conv,
    pub conv2: Conv,
}

impl DecoderBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, scope: &Scope, cin: usize, skip: usize, width: usize) -> Self {
        Self {
            up: UpConv::new(store, &scope.child("up"), cin, width),
            conv1: Conv::new(store, &scope.child("conv1"), width + skip, width, 3, 1, 1, true),
            conv2: Conv::new(store, &scope.child("conv2"), width, width, 3, 1, 1, true),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, prev: Var, skip: Option<Var>) -> Result<Var> {
        let up = self.up.forward(ctx, prev)?;
        let x = match skip {
            Some(s) => {
                let (us, ss) = (ctx.g.shape(up), ctx.g.shape(s));
                if us[0] != ss[0] || us[2..] != ss[2..] {
                    return Err(data(format!(
                        "decoder skip {ss:?} does not match upsampled features {us:?}"
                    )));
                }
                ctx.g.concat_channels(up, s)?
            }
            None => up,
        };
        let x = self.conv1.forward(ctx, x)?;
        let x = ctx.g.relu(x);
        let x = self.conv2.forward(ctx, x)?;
        Ok(ctx.g.relu(x))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
    pub head: Conv,
}

impl Decoder {
    /// `enc` are the encoder level widths (finest first), `dec` the five
    /// stage widths. Stage `k` consumes the skip at level `5 − k`; stage 5
    /// has no skip and restores the input resolution.
    pub fn new<T: Real>(store: &mut ParamStore<T>, scope: &Scope, enc: [usize; 5], dec: [usize; 5]) -> Self {
        let mut cin = enc[4];
        let blocks = (0..5)
            .map(|k| {
                let skip = if k < 4 { enc[3 - k] } else { 0 };
                let b = DecoderBlock::new(store, &scope.child(&format!("stage{}", k + 1)), cin, skip, dec[k]);
                cin = dec[k];
                b
            })
            .collect();
        let head = Conv::new(store, &scope.child("head"), dec[4], 1, 1, 1, 0, true);
        Self { blocks, head }
    }

    /// Returns the pre-head features and the one-channel logits.
    pub fn decode<T: Real>(&self, ctx: &mut Ctx<T>, pyramid: &FeaturePyramid) -> Result<(Var, Var)> {
        if pyramid.levels.len() != 5 {
            return Err(data(format!("decoder needs 5 pyramid levels, got {}", pyramid.levels.len())));
        }
        let mut x = pyramid.levels[4];
        for (k, block) in self.blocks.iter().enumerate() {
            let skip = (k < 4).then(|| pyramid.levels[3 - k]);
            x = block.forward(ctx, x, skip)?;
        }
        let logits = self.head.forward(ctx, x)?;
        Ok((x, logits))
    }
}
