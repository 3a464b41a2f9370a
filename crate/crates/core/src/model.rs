//! Full networks: SMAGNet and the two single-decoder baselines.

use serde::{Deserialize, Serialize};
use smag_tensor::{Real, Tensor, Var};

use crate::data::{MSI_BANDS, SAR_BANDS};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderConfig, Preset};
use crate::error::{config, data, Result};
use crate::fusion::{Fusion, FusionMode, MaskDownsample, SmgLevel};
use crate::params::{Ctx, ParamStore, Scope};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    /// Dual encoders, gated fusion, two decoder paths.
    #[default]
    #[serde(rename = "smagnet")]
    Smagnet,
    /// Single encoder/decoder on the SAR bands.
    #[serde(rename = "unet-sar")]
    UnetSar,
    /// Single encoder/decoder on SAR and MSI stacked as six channels.
    #[serde(rename = "unet-concat")]
    UnetConcat,
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| format!("unknown model {s:?} (expected smagnet, unet-sar or unet-concat)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub preset: Preset,
    /// Residual blocks per stage; the preset's default when absent.
    pub blocks: Option<[usize; 5]>,
    pub spatial_mask: bool,
    pub shared_decoder: bool,
    pub fusion_mode: FusionMode,
    pub mask_downsample: MaskDownsample,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: ModelKind::Smagnet,
            preset: Preset::Tiny,
            blocks: None,
            spatial_mask: true,
            shared_decoder: true,
            fusion_mode: FusionMode::Complementary,
            mask_downsample: MaskDownsample::Avg,
        }
    }
}

impl ModelConfig {
    fn encoder(&self, in_channels: usize) -> EncoderConfig {
        EncoderConfig {
            preset: self.preset,
            in_channels,
            blocks: self.blocks.unwrap_or(self.preset.default_blocks()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind != ModelKind::Smagnet
            && (!self.spatial_mask || !self.shared_decoder || self.fusion_mode != FusionMode::Complementary)
        {
            return Err(config(format!(
                "fusion and decoder switches only apply to smagnet, not {:?}",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Network inputs: standardized rasters and the MSI validity map.
#[derive(Clone, Debug, PartialEq)]
pub struct Inputs<T> {
    /// `[B, 2, H, W]`.
    pub sar: Tensor<T>,
    /// `[B, 4, H, W]`, zero where MSI is missing.
    pub msi: Tensor<T>,
    /// `[B, 1, H, W]` in {0, 1}.
    pub validity: Tensor<T>,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Fused-head logits for SMAGNet, the only head otherwise.
    pub primary: Var,
    /// SAR-path logits (SMAGNet only).
    pub sar: Option<Var>,
    pub features_primary: Var,
    pub features_sar: Option<Var>,
    pub smg: Vec<SmgLevel>,
}

#[derive(Clone, Debug)]
enum Arch {
    Smagnet {
        enc_sar: Encoder,
        enc_msi: Encoder,
        fusion: Fusion,
        dec_fused: Decoder,
        /// Separate SAR-path decoder in the independent-decoder ablation.
        dec_sar: Option<Decoder>,
    },
    Single {
        enc: Encoder,
        dec: Decoder,
        concat: bool,
    },
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    arch: Arch,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(init_seed);
        let enc_w = config.preset.encoder_widths();
        let dec_w = config.preset.decoder_widths();
        let arch = match config.kind {
            ModelKind::Smagnet => {
                let enc_sar = Encoder::new(&mut store, &Scope::new("enc_sar"), config.encoder(SAR_BANDS))?;
                let enc_msi = Encoder::new(&mut store, &Scope::new("enc_msi"), config.encoder(MSI_BANDS))?;
                let fusion = Fusion::new(
                    &mut store,
                    &Scope::new("fusion"),
                    enc_w,
                    config.fusion_mode,
                    config.spatial_mask,
                    config.mask_downsample,
                );
                let (dec_fused, dec_sar) = if config.shared_decoder {
                    (Decoder::new(&mut store, &Scope::new("dec"), enc_w, dec_w), None)
                } else {
                    let f = Decoder::new(&mut store, &Scope::cloned_from("dec_fused", "dec"), enc_w, dec_w);
                    let s = Decoder::new(&mut store, &Scope::cloned_from("dec_sar", "dec"), enc_w, dec_w);
                    (f, Some(s))
                };
                Arch::Smagnet {
                    enc_sar,
                    enc_msi,
                    fusion,
                    dec_fused,
                    dec_sar,
                }
            }
            ModelKind::UnetSar | ModelKind::UnetConcat => {
                let concat = config.kind == ModelKind::UnetConcat;
                let (name, bands) = if concat {
                    ("enc_cat", SAR_BANDS + MSI_BANDS)
                } else {
                    ("enc_sar", SAR_BANDS)
                };
                let enc = Encoder::new(&mut store, &Scope::new(name), config.encoder(bands))?;
                let dec = Decoder::new(&mut store, &Scope::new("dec"), enc_w, dec_w);
                Arch::Single { enc, dec, concat }
            }
        };
        Ok(Self { config, store, arch })
    }

    /// Whether the model produces a separate SAR-path prediction.
    pub fn is_dual(&self) -> bool {
        matches!(self.arch, Arch::Smagnet { .. })
    }

    pub fn forward(&self, ctx: &mut Ctx<T>, inputs: &Inputs<T>) -> Result<Prediction> {
        let [b, _, h, w] = inputs.sar.dims4()?;
        if inputs.msi.shape() != [b, MSI_BANDS, h, w] || inputs.validity.shape() != [b, 1, h, w] {
            return Err(data(format!(
                "input shapes disagree: sar {:?}, msi {:?}, validity {:?}",
                inputs.sar.shape(),
                inputs.msi.shape(),
                inputs.validity.shape()
            )));
        }
        match &self.arch {
            Arch::Smagnet {
                enc_sar,
                enc_msi,
                fusion,
                dec_fused,
                dec_sar,
            } => {
                let sar = ctx.g.constant(inputs.sar.clone());
                let msi = ctx.g.constant(inputs.msi.clone());
                let p_sar = enc_sar.encode(ctx, sar)?;
                let p_msi = enc_msi.encode(ctx, msi)?;
                let (p_fused, smg) = fusion.forward(ctx, &p_sar, &p_msi, &inputs.validity)?;
                let (f_fused, l_fused) = dec_fused.decode(ctx, &p_fused)?;
                let (f_sar, l_sar) = dec_sar.as_ref().unwrap_or(dec_fused).decode(ctx, &p_sar)?;
                Ok(Prediction {
                    primary: l_fused,
                    sar: Some(l_sar),
                    features_primary: f_fused,
                    features_sar: Some(f_sar),
                    smg,
                })
            }
            Arch::Single { enc, dec, concat } => {
                let sar = ctx.g.constant(inputs.sar.clone());
                let x = if *concat {
                    let msi = ctx.g.constant(inputs.msi.clone());
                    ctx.g.concat_channels(sar, msi)?
                } else {
                    sar
                };
                let p = enc.encode(ctx, x)?;
                let (f, l) = dec.decode(ctx, &p)?;
                Ok(Prediction {
                    primary: l,
                    sar: None,
                    features_primary: f,
                    features_sar: None,
                    smg: Vec::new(),
                })
            }
        }
    }
}
