use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Named encoder sizes: (layers, width, heads).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VitSize {
    Ti,
    S,
    B,
}

impl VitSize {
    pub const ALL: [VitSize; 3] = [VitSize::Ti, VitSize::S, VitSize::B];

    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            VitSize::Ti => (12, 192, 3),
            VitSize::S => (12, 384, 6),
            VitSize::B => (12, 768, 12),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VitSize::Ti => "ti",
            VitSize::S => "s",
            VitSize::B => "b",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ti" | "tiny" | "vit-ti" => Ok(VitSize::Ti),
            "s" | "small" | "vit-s" => Ok(VitSize::S),
            "b" | "base" | "vit-b" => Ok(VitSize::B),
            other => Err(Error::Config(format!("unknown model size {other:?} (expected ti, s or b)"))),
        }
    }
}

/// Architecture hyperparameters of the encoder, the MAE decoder and the regression head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub in_channels: usize,
    pub head_hidden: usize,
    pub mask_ratio: f64,
    pub decoder_layers: usize,
    pub decoder_width: usize,
    pub decoder_heads: usize,
    /// Prepend the class token to the visible tokens during pre-training.
    pub pretrain_class_token: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::sized(VitSize::Ti)
    }
}

impl ModelConfig {
    /// Domain configuration (64×64×1 inputs, 8×8 patches, 75 % masking) at a named size.
    pub fn sized(size: VitSize) -> Self {
        let (layers, width, heads) = size.dims();
        ModelConfig {
            layers,
            width,
            heads,
            patch_size: 8,
            image_size: 64,
            in_channels: 1,
            head_hidden: 2048,
            mask_ratio: 0.75,
            decoder_layers: 4,
            decoder_width: 192,
            decoder_heads: 3,
            pretrain_class_token: true,
            norm_eps: 1e-6,
        }
    }

    /// 224×224×3 inputs with 16×16 patches.
    pub fn imagenet(size: VitSize) -> Self {
        ModelConfig { image_size: 224, in_channels: 3, patch_size: 16, ..ModelConfig::sized(size) }
    }

    pub fn size(&self) -> Option<VitSize> {
        VitSize::ALL.into_iter().find(|s| s.dims() == (self.layers, self.width, self.heads))
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.image_size, self.image_size, self.patch_size).expect("validated config")
    }

    pub fn num_patches(&self) -> usize {
        self.grid().n()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Patches hidden per image: ⌊N·S⌋.
    pub fn masked_count(&self) -> usize {
        masked_count(self.num_patches(), self.mask_ratio)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.head_hidden == 0 {
            return fail("layers, width, heads and head_hidden must be positive".into());
        }
        if self.width % self.heads != 0 {
            return fail(format!("width {} is not divisible by heads {}", self.width, self.heads));
        }
        if self.width % 4 != 0 || self.decoder_width % 4 != 0 {
            return fail("sine-cosine positions need widths divisible by 4".into());
        }
        if self.decoder_layers == 0 || self.decoder_heads == 0 || self.decoder_width % self.decoder_heads != 0 {
            return fail(format!(
                "decoder width {} must be divisible by decoder heads {}",
                self.decoder_width, self.decoder_heads
            ));
        }
        if self.in_channels == 0 {
            return fail("in_channels must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !(self.norm_eps > 0.0) {
            return fail("norm_eps must be positive".into());
        }
        PatchGrid::new(self.image_size, self.image_size, self.patch_size)?;
        Ok(())
    }
}

pub fn masked_count(n: usize, ratio: f64) -> usize {
    (n as f64 * ratio).floor() as usize
}

/// Partition of an image into square patches, ordered row-major over the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height == 0 || width == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::Config(format!(
                "image {height}x{width} is not divisible into {patch_size}x{patch_size} patches"
            )));
        }
        Ok(PatchGrid { patch_size, grid_h: height / patch_size, grid_w: width / patch_size })
    }

    /// N = H·W / P².
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn height(&self) -> usize {
        self.grid_h * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.grid_w * self.patch_size
    }
}

/// Exact parameter count of the encoder backbone: patch projection, positional
/// table, class token, transformer blocks and the final norm. Task heads excluded.
pub fn count_params(cfg: &ModelConfig) -> usize {
    let d = cfg.width;
    let n = cfg.num_patches();
    let patch = cfg.patch_dim() * d + d;
    let cls = d;
    let pos = (n + 1) * d;
    let block = 12 * d * d + 13 * d;
    patch + cls + pos + cfg.layers * block + 2 * d
}

/// Single linear classifier on the class token (`width × classes` plus bias).
pub fn linear_classifier_params(width: usize, classes: usize) -> usize {
    width * classes + classes
}

/// Parameter count in the conventional ImageNet reporting form: backbone at
/// 224×224×3 with 16×16 patches plus the 1000-way linear classifier.
pub fn imagenet_param_count(size: VitSize) -> usize {
    let cfg = ModelConfig::imagenet(size);
    count_params(&cfg) + linear_classifier_params(cfg.width, 1000)
}

/// Regression head size: dense(width → hidden), dense(hidden → 1).
pub fn head_params(cfg: &ModelConfig) -> usize {
    cfg.width * cfg.head_hidden + cfg.head_hidden + cfg.head_hidden + 1
}

/// MAE decoder size including the fixed positional table.
pub fn decoder_params(cfg: &ModelConfig) -> usize {
    let (d, dd) = (cfg.width, cfg.decoder_width);
    let embed = d * dd + dd;
    let mask = dd;
    let pos = (cfg.num_patches() + 1) * dd;
    let block = 12 * dd * dd + 13 * dd;
    let norm = 2 * dd;
    let pred = dd * cfg.patch_dim() + cfg.patch_dim();
    embed + mask + pos + cfg.decoder_layers * block + norm + pred
}
