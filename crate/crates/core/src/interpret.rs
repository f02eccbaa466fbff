//! GradCAM relevance maps over transformer token activations.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::data::bilinear_resize;
use crate::params::Graph;
use crate::tensor::{Real, Tensor};
use crate::vit::{patch_batch, NormSite, Taps, VitRegressor};
use crate::{Error, Result};

/// Blend weight of the colour map in overlays.
pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Upsample {
    Bilinear,
    /// Patch-faithful blocks.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradCamOptions {
    /// Block index; `None` means the last block.
    pub block: Option<usize>,
    pub site: NormSite,
    pub upsample: Upsample,
}

impl Default for GradCamOptions {
    fn default() -> Self {
        GradCamOptions { block: None, site: NormSite::PreAttention, upsample: Upsample::Bilinear }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`, min-max normalized to [0, 1] (all zeros when constant).
    pub values: Tensor<f64>,
    /// Relevance per patch before upsampling and normalization, `[grid_h, grid_w]`.
    pub patch_relevance: Tensor<f64>,
    pub source: String,
    pub layer: String,
}

impl Heatmap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Mean value inside and outside a boolean mask; `None` if either side is empty.
    pub fn mask_means(&self, mask: &[bool]) -> Option<(f64, f64)> {
        let (mut si, mut ni, mut so, mut no) = (0.0, 0usize, 0.0, 0usize);
        for (&v, &m) in self.values.data().iter().zip(mask) {
            if m {
                si += v;
                ni += 1;
            } else {
                so += v;
                no += 1;
            }
        }
        (ni > 0 && no > 0).then(|| (si / ni as f64, so / no as f64))
    }

    /// Comma-separated rows, one line per image row.
    pub fn to_csv(&self) -> String {
        let w = self.width();
        self.values
            .data()
            .chunks(w)
            .map(|r| r.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }
}

fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if !(range > 1e-12 * hi.abs().max(f64::MIN_POSITIVE)) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

/// GradCAM for the scalar output: token-mean gradient weights at the chosen
/// norm output, ReLU of the weighted activations over patch tokens (the class
/// token is excluded), upsampled to image size and min-max normalized.
pub fn gradcam<T: Real>(model: &VitRegressor<T>, image: &Tensor<f32>, source: &str, opts: GradCamOptions) -> Result<Heatmap> {
    model.check_image(image)?;
    let layers = model.encoder.stack.layers();
    let block = opts.block.unwrap_or(layers.saturating_sub(1));
    if block >= layers {
        return Err(Error::Contract(format!("block {block} out of range for {layers} blocks")));
    }
    let patches = patch_batch::<T, f32>(&[image], model.config.patch_size)?;
    let mut g = Graph::new(&model.store, false);
    let p = g.tape.constant(patches);
    let mut taps = Taps { watch: Some((block, opts.site)), ..Taps::default() };
    let out = model.forward(&mut g, p, 1, &mut taps)?;
    let watched = taps.watched.ok_or_else(|| Error::Contract("activation tap was not reached".into()))?;
    let y = g.tape.sum(out)?;
    g.tape.backward(y)?;
    let a = g.tape.value(watched);
    let d = a.last_dim();
    let n = model.encoder.num_patches();
    let zeros = vec![T::zero(); a.len()];
    let grad = g.tape.grad(watched).unwrap_or(&zeros);
    let mut w = vec![0.0f64; d];
    for k in 1..=n {
        for (wd, gv) in w.iter_mut().zip(&grad[k * d..(k + 1) * d]) {
            *wd += gv.f64();
        }
    }
    w.iter_mut().for_each(|v| *v /= n as f64);
    let relevance: Vec<f64> = (1..=n)
        .map(|k| a.row(k).iter().zip(&w).map(|(x, wd)| x.f64() * wd).sum::<f64>().max(0.0))
        .collect();
    let grid = model.encoder.grid;
    let (h, wi) = (grid.height(), grid.width());
    let up: Vec<f64> = match opts.upsample {
        Upsample::Bilinear => {
            let small = Tensor::from_fn(&[grid.grid_h, grid.grid_w, 1], |i| relevance[i]);
            bilinear_resize(&small.cast::<f32>(), h, wi).to_f64_vec()
        }
        Upsample::Nearest => (0..h * wi)
            .map(|i| relevance[(i / wi) / grid.patch_size * grid.grid_w + (i % wi) / grid.patch_size])
            .collect(),
    };
    let up = if opts.upsample == Upsample::Bilinear && min_max(&relevance).iter().all(|&v| v == 0.0) {
        vec![0.0; h * wi]
    } else {
        min_max(&up)
    };
    let site = match opts.site {
        NormSite::PreAttention => "norm1",
        NormSite::PreMlp => "norm2",
    };
    Ok(Heatmap {
        values: Tensor::new(&[h, wi], up)?,
        patch_relevance: Tensor::new(&[grid.grid_h, grid.grid_w], relevance)?,
        source: source.to_string(),
        layer: format!("encoder.blocks.{block}.{site}"),
    })
}

/// Jet-like colour map on [0, 1].
pub fn colormap(v: f64) -> [f64; 3] {
    let c = |x: f64| (1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0);
    [c(3.0), c(2.0), c(1.0)]
}

fn byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Grayscale input on the left, colour-mapped blend on the right.
pub fn overlay_image(image: &Tensor<f32>, heatmap: &Heatmap) -> Result<RgbImage> {
    let (h, w) = (heatmap.height(), heatmap.width());
    if image.shape()[0] != h || image.shape()[1] != w {
        return Err(Error::Contract(format!("image {:?} and heatmap {h}x{w} differ in size", image.shape())));
    }
    let c = image.shape()[2];
    Ok(RgbImage::from_fn((2 * w) as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = image.data()[(y * w + x % w) * c] as f64;
        if x < w {
            let b = byte(g);
            return Rgb([b, b, b]);
        }
        let cm = colormap(heatmap.values.data()[y * w + x - w]);
        Rgb(cm.map(|ch| byte((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * ch)))
    }))
}

pub fn export_overlay(image: &Tensor<f32>, heatmap: &Heatmap, path: &Path) -> Result<()> {
    overlay_image(image, heatmap)?.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}
