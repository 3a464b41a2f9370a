//! Residual encoders producing five-level feature pyramids.

use serde::{Deserialize, Serialize};
use smag_tensor::{PoolKind, Real, Var};

use crate::error::{config, data, Result};
use crate::layers::{Conv, Norm};
use crate::params::{Ctx, ParamStore, Scope};

/// Input extents must be multiples of this (five stride-2 reductions).
pub const INPUT_MULTIPLE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    #[default]
    Tiny,
}

impl Preset {
    pub fn encoder_widths(self) -> [usize; 5] {
        match self {
            Preset::Paper => [64, 256, 512, 1024, 2048],
            Preset::Tiny => [16, 32, 64, 128, 256],
        }
    }

    pub fn decoder_widths(self) -> [usize; 5] {
        match self {
            Preset::Paper => [256, 128, 64, 32, 16],
            Preset::Tiny => [64, 32, 16, 16, 8],
        }
    }

    /// Residual blocks per stage; stage 1 is the stem.
    pub fn default_blocks(self) -> [usize; 5] {
        match self {
            Preset::Paper => [1, 3, 4, 6, 3],
            Preset::Tiny => [1, 1, 1, 1, 1],
        }
    }

    fn block_kind(self) -> BlockKind {
        match self {
            Preset::Paper => BlockKind::Bottleneck,
            Preset::Tiny => BlockKind::Basic,
        }
    }

    fn stem_kernel(self) -> usize {
        match self {
            Preset::Paper => 7,
            Preset::Tiny => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// 3×3 → 3×3.
    Basic,
    /// 1×1 → 3×3 → 1×1 with a four-fold narrower middle.
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub preset: Preset,
    pub in_channels: usize,
    pub blocks: [usize; 5],
}

impl EncoderConfig {
    pub fn new(preset: Preset, in_channels: usize) -> Self {
        Self {
            preset,
            in_channels,
            blocks: preset.default_blocks(),
        }
    }
}

/// Five feature maps at scales 1/2 … 1/32 of the input, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub kind: BlockKind,
    pub layers: Vec<(Conv, Norm)>,
    pub shortcut: Option<(Conv, Norm)>,
}

impl ResidualBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        scope: &Scope,
        kind: BlockKind,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let mut layer = |i: usize, ci: usize, co: usize, k: usize, s: usize| {
            let conv = Conv::new(store, &scope.child(&format!("conv{i}")), ci, co, k, s, k / 2, false);
            let norm = Norm::new(store, &scope.child(&format!("norm{i}")), co);
            (conv, norm)
        };
        let layers = match kind {
            BlockKind::Basic => vec![layer(1, cin, cout, 3, stride), layer(2, cout, cout, 3, 1)],
            BlockKind::Bottleneck => {
                let mid = (cout / 4).max(1);
                vec![
                    layer(1, cin, mid, 1, 1),
                    layer(2, mid, mid, 3, stride),
                    layer(3, mid, cout, 1, 1),
                ]
            }
        };
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv::new(store, &scope.child("proj"), cin, cout, 1, stride, 0, false),
                Norm::new(store, &scope.child("proj_norm"), cout),
            )
        });
        Self { kind, layers, shortcut }
    }

    /// `relu(shortcut(x) + branch(x))`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (conv, norm)) in self.layers.iter().enumerate() {
            h = conv.forward(ctx, h)?;
            h = norm.forward(ctx, h)?;
            if i + 1 < self.layers.len() {
                h = ctx.g.relu(h);
            }
        }
        let s = match &self.shortcut {
            Some((conv, norm)) => {
                let p = conv.forward(ctx, x)?;
                norm.forward(ctx, p)?
            }
            None => x,
        };
        if ctx.g.shape(h) != ctx.g.shape(s) {
            return Err(data(format!(
                "residual branch {:?} and shortcut {:?} disagree",
                ctx.g.shape(h),
                ctx.g.shape(s)
            )));
        }
        let sum = ctx.g.add(h, s)?;
        Ok(ctx.g.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stem: (Conv, Norm),
    /// Stages 2..=5.
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, scope: &Scope, config: EncoderConfig) -> Result<Self> {
        if config.blocks[0] != 1 || config.blocks.iter().any(|&b| b == 0) {
            return Err(config_err(&config));
        }
        let widths = config.preset.encoder_widths();
        let k = config.preset.stem_kernel();
        let stem_scope = scope.child("stage1").child("block0");
        let stem = (
            Conv::new(store, &stem_scope.child("conv"), config.in_channels, widths[0], k, 2, k / 2, false),
            Norm::new(store, &stem_scope.child("norm"), widths[0]),
        );
        let kind = config.preset.block_kind();
        let mut stages = Vec::new();
        for s in 1..5 {
            let stage_scope = scope.child(&format!("stage{}", s + 1));
            let first_stride = if s == 1 { 1 } else { 2 };
            let blocks = (0..config.blocks[s])
                .map(|j| {
                    let (cin, stride) = if j == 0 { (widths[s - 1], first_stride) } else { (widths[s], 1) };
                    ResidualBlock::new(store, &stage_scope.child(&format!("block{j}")), kind, cin, widths[s], stride)
                })
                .collect();
            stages.push(blocks);
        }
        Ok(Self { config, stem, stages })
    }

    pub fn encode<T: Real>(&self, ctx: &mut Ctx<T>, image: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = ctx.g.value(image).dims4()?;
        if c != self.config.in_channels {
            return Err(data(format!(
                "encoder expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        if h % INPUT_MULTIPLE != 0 || w % INPUT_MULTIPLE != 0 || h == 0 || w == 0 {
            return Err(data(format!(
                "input extents {h}x{w} must be positive multiples of {INPUT_MULTIPLE}"
            )));
        }
        let (conv, norm) = &self.stem;
        let x = conv.forward(ctx, image)?;
        let x = norm.forward(ctx, x)?;
        let level1 = ctx.g.relu(x);
        let mut levels = vec![level1];
        let mut x = ctx.g.pool2d(PoolKind::Max, level1, 2, 2)?;
        for stage in &self.stages {
            for block in stage {
                x = block.forward(ctx, x)?;
            }
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }
}

fn config_err(c: &EncoderConfig) -> crate::error::Error {
    config(format!(
        "blocks per stage {:?}: the stem stage holds exactly one block and every stage needs at least one",
        c.blocks
    ))
}
