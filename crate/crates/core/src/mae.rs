//! Random patch masking, visible-only encoding, mask-token decoding and the
//! masked-patch reconstruction loss.

use std::path::Path;

use image::GrayImage;
use rand::SeedableRng;

use crate::params::{Graph, ParamId, ParamKind, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::vit::{
    patch_batch, patchify, sincos_2d, unpatchify, Linear, ModelConfig, PatchGrid, Taps, TokenSequence,
    TransformerStack, VitEncoder, INIT_STD,
};
use crate::{Error, Result};

/// Gray level written into masked patches of the "masked input" panel.
pub const MASK_SENTINEL: f64 = 0.5;

/// A split of the patch indices `0..n` into masked and visible sets.
///
/// Indices are zero-based positions in the row-major patch grid; both lists
/// are sorted ascending as sampled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn is_masked(&self, k: usize) -> bool {
        self.masked.binary_search(&k).is_ok()
    }

    /// Plan with an explicit masked set (validated), mainly for experiments.
    pub fn with_masked(n: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&k| k >= n) {
            return Err(Error::Config(format!("masked index out of range for {n} patches")));
        }
        let visible = (0..n).filter(|k| masked.binary_search(k).is_err()).collect();
        Ok(MaskPlan { n, masked, visible, seed: 0 })
    }
}

/// Draws ⌊n·ratio⌋ distinct patch indices uniformly without replacement.
pub fn sample_mask(n: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = crate::vit::masked_count(n, ratio);
    let mut rng = Rng::seed_from_u64(seed);
    let mut masked = rand::seq::index::sample(&mut rng, n, count).into_vec();
    masked.sort_unstable();
    let mut plan = MaskPlan::with_masked(n, masked)?;
    plan.seed = seed;
    Ok(plan)
}

#[derive(Debug, Clone)]
pub struct MaeOutput<T> {
    /// Predictions for every patch, `[N, P²C]`.
    pub predicted_patches: Tensor<T>,
    /// Masked-patch loss; zero when nothing is masked.
    pub loss: f64,
    pub plan: MaskPlan,
}

/// Lightweight decoder: embed, shared mask token, fixed positions, blocks, pixel projection.
#[derive(Debug, Clone)]
pub struct MaeDecoder {
    pub(crate) embed: Linear,
    pub(crate) mask_token: ParamId,
    pub(crate) pos: ParamId,
    pub stack: TransformerStack,
    pub(crate) pred: Linear,
}

impl MaeDecoder {
    pub const PREFIX: &'static str = "decoder";

    fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let dd = cfg.decoder_width;
        let embed = Linear::new(store, "decoder.embed", cfg.width, dd, rng);
        let mask_token = store.add("decoder.mask_token", Tensor::trunc_normal(&[1, dd], INIT_STD, rng), ParamKind::NoDecay);
        let pos = store.add("decoder.pos_embed", sincos_2d(dd, cfg.grid()), ParamKind::Buffer);
        let stack = TransformerStack::new(store, "decoder", cfg.decoder_layers, dd, cfg.decoder_heads, cfg.norm_eps, rng);
        let pred = Linear::new(store, "decoder.pred", dd, cfg.patch_dim(), rng);
        MaeDecoder { embed, mask_token, pos, stack, pred }
    }

    pub fn pred_ids(&self) -> (ParamId, ParamId) {
        (self.pred.w, self.pred.b)
    }
}

/// Recorded batch forward: predictions for every patch and the masked loss.
pub struct MaeForward {
    pub predicted: Var,
    pub loss: Option<Var>,
    /// Encoder sequence length per image.
    pub encoder_len: usize,
}

#[derive(Debug, Clone)]
pub struct MaeModel<T: Real> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub encoder: VitEncoder,
    pub decoder: MaeDecoder,
}

impl<T: Real> MaeModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let encoder = VitEncoder::new(&mut store, config, &mut rng::stream(seed, "init.encoder", 0))?;
        let decoder = MaeDecoder::new(&mut store, config, &mut rng::stream(seed, "init.decoder", 0));
        Ok(MaeModel { config: config.clone(), store, encoder, decoder })
    }

    pub fn grid(&self) -> PatchGrid {
        self.encoder.grid
    }

    /// Visible tokens (plus the class token when configured) through the encoder.
    /// Returns latents `[batch·len, D]` and `len`.
    pub fn encode_batch(&self, g: &mut Graph<'_, T>, patches: Var, plans: &[MaskPlan]) -> Result<(Var, usize)> {
        let batch = plans.len();
        self.check_plans(plans)?;
        let tokens = self.encoder.patch_tokens(g, patches, batch)?;
        let cls = if self.config.pretrain_class_token { Some(self.encoder.class_token(g)?) } else { None };
        let keep: Vec<Vec<usize>> = plans.iter().map(|p| p.visible.clone()).collect();
        let (seq, len) = self.encoder.assemble(g, cls, tokens, batch, Some(&keep))?;
        let latent = self.encoder.stack.forward(g, seq, batch, len, &mut Taps::default())?;
        Ok((latent, len))
    }

    /// Scatters embedded latents back to grid order, filling masked slots with
    /// the mask token, and predicts pixels for all `N` patches: `[batch·N, P²C]`.
    pub fn decode_batch(&self, g: &mut Graph<'_, T>, latent: Var, len: usize, plans: &[MaskPlan]) -> Result<Var> {
        let n = self.encoder.num_patches();
        let batch = plans.len();
        let cls = self.config.pretrain_class_token;
        let off = usize::from(cls);
        let emb = self.decoder.embed.forward(g, latent)?;
        let mask = g.p(self.decoder.mask_token);
        let mut idx = Vec::with_capacity(batch * (n + off));
        let mut slot = vec![usize::MAX; n];
        for (b, plan) in plans.iter().enumerate() {
            slot.iter_mut().for_each(|s| *s = usize::MAX);
            for (r, &k) in plan.visible.iter().enumerate() {
                slot[k] = r;
            }
            if cls {
                idx.push((0, b * len));
            }
            for &s in &slot {
                idx.push(if s == usize::MAX { (1, 0) } else { (0, b * len + off + s) });
            }
        }
        let full = g.tape.rows(&[emb, mask], &idx)?;
        let pos = g.p(self.decoder.pos);
        let pos_rows: Vec<(usize, usize)> = (1 - off..=n).map(|r| (0, r)).collect();
        let pos = g.tape.rows(&[pos], &pos_rows)?;
        let full = g.tape.add_tiled(full, pos)?;
        let seq = n + off;
        let h = self.decoder.stack.forward(g, full, batch, seq, &mut Taps::default())?;
        let h = if cls {
            let rows: Vec<(usize, usize)> =
                (0..batch).flat_map(|b| (0..n).map(move |k| (0, b * seq + 1 + k))).collect();
            g.tape.rows(&[h], &rows)?
        } else {
            h
        };
        self.decoder.pred.forward(g, h)
    }

    /// Full recorded forward over `[batch·N, P²C]` patches with one plan per image.
    pub fn forward_batch(&self, g: &mut Graph<'_, T>, patches: &Tensor<T>, plans: &[MaskPlan]) -> Result<MaeForward> {
        let p = g.tape.constant(patches.clone());
        let (latent, len) = self.encode_batch(g, p, plans)?;
        let predicted = self.decode_batch(g, latent, len, plans)?;
        let loss = masked_loss(&mut g.tape, predicted, patches, plans)?;
        Ok(MaeForward { predicted, loss, encoder_len: len })
    }

    fn check_plans(&self, plans: &[MaskPlan]) -> Result<()> {
        let n = self.encoder.num_patches();
        if plans.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(p) = plans.iter().find(|p| p.n != n || p.masked.len() + p.visible.len() != n) {
            return Err(Error::Contract(format!("mask plan covers {} patches, model has {n}", p.n)));
        }
        let v = plans[0].visible.len();
        if plans.iter().any(|p| p.visible.len() != v) {
            return Err(Error::Contract("all mask plans in a batch must keep the same number of patches".into()));
        }
        Ok(())
    }

    /// Embedded token sequence of one image (class token first).
    pub fn embed<U: Real>(&self, image: &Tensor<U>) -> Result<TokenSequence<T>> {
        let patches = patch_batch::<T, U>(&[image], self.config.patch_size)?;
        self.encoder.embed_patches(&self.store, &patches)
    }

    /// Runs the encoder on the class token (when configured) and the visible
    /// tokens of an embedded sequence: `[|visible| (+1), D]`.
    pub fn encode_visible(&self, tokens: &TokenSequence<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
        let n = self.encoder.num_patches();
        let off = usize::from(tokens.has_class_token);
        if plan.n != n || tokens.len() != n + off {
            return Err(Error::Contract(format!(
                "mask plan over {} patches does not match a sequence of {} tokens",
                plan.n,
                tokens.len()
            )));
        }
        let mut g = Graph::new(&self.store, false);
        let t = g.tape.constant(tokens.tokens.clone());
        let mut idx = Vec::new();
        if self.config.pretrain_class_token {
            if !tokens.has_class_token {
                return Err(Error::Contract("sequence has no class token".into()));
            }
            idx.push((0, 0));
        }
        idx.extend(plan.visible.iter().map(|&k| (0, k + off)));
        let seq = g.tape.rows(&[t], &idx)?;
        let out = self.encoder.stack.forward(&mut g, seq, 1, idx.len(), &mut Taps::default())?;
        Ok(g.tape.value(out).clone())
    }

    /// Decoder pass over latents from [`MaeModel::encode_visible`]: `[N, P²C]`.
    pub fn decode_full(&self, latents: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>> {
        let len = plan.visible.len() + usize::from(self.config.pretrain_class_token);
        if latents.rows() != len {
            return Err(Error::Contract(format!("expected {len} latent rows, got {}", latents.rows())));
        }
        let mut g = Graph::new(&self.store, false);
        let l = g.tape.constant(latents.clone());
        let out = self.decode_batch(&mut g, l, len, std::slice::from_ref(plan))?;
        Ok(g.tape.value(out).clone())
    }

    /// Single-image forward with a given plan.
    pub fn run<U: Real>(&self, image: &Tensor<U>, plan: &MaskPlan) -> Result<MaeOutput<T>> {
        let tokens = self.embed(image)?;
        let latents = self.encode_visible(&tokens, plan)?;
        let predicted = self.decode_full(&latents, plan)?;
        let target = patchify(&image.cast::<T>(), self.config.patch_size)?;
        let loss = mae_loss(&predicted, &target, plan)?;
        Ok(MaeOutput { predicted_patches: predicted, loss, plan: plan.clone() })
    }
}

/// Records the masked-patch loss for a batch of stacked predictions: mean
/// squared error over the masked rows only. `None` when no patch is masked.
pub fn masked_loss<T: Real>(tape: &mut Tape<T>, predicted: Var, target: &Tensor<T>, plans: &[MaskPlan]) -> Result<Option<Var>> {
    let n = plans.first().map_or(0, |p| p.n);
    let width = target.last_dim();
    let rows: Vec<(usize, usize)> =
        plans.iter().enumerate().flat_map(|(b, p)| p.masked.iter().map(move |&k| (0, b * n + k))).collect();
    if rows.is_empty() {
        log::warn!("mask ratio leaves no masked patch; reconstruction loss is zero");
        return Ok(None);
    }
    if tape.shape(predicted) != target.shape() {
        return Err(Error::Contract(format!(
            "prediction shape {:?} differs from target {:?}",
            tape.shape(predicted),
            target.shape()
        )));
    }
    let gathered = tape.rows(&[predicted], &rows)?;
    let mut t = Vec::with_capacity(rows.len() * width);
    for &(_, r) in &rows {
        t.extend_from_slice(target.row(r));
    }
    Ok(Some(tape.mse(gathered, &t)?))
}

/// Mean over masked patches and pixels of the squared error. Zero (with a
/// warning) when the plan masks nothing.
pub fn mae_loss<T: Real>(predicted: &Tensor<T>, target: &Tensor<T>, plan: &MaskPlan) -> Result<f64> {
    if predicted.shape() != target.shape() || predicted.rows() != plan.n {
        return Err(Error::Contract(format!(
            "prediction {:?}, target {:?} and a plan over {} patches disagree",
            predicted.shape(),
            target.shape(),
            plan.n
        )));
    }
    if plan.masked.is_empty() {
        log::warn!("mask ratio leaves no masked patch; reconstruction loss is zero");
        return Ok(0.0);
    }
    let sum: f64 = plan
        .masked
        .iter()
        .flat_map(|&k| predicted.row(k).iter().zip(target.row(k)))
        .map(|(&p, &t)| (p.f64() - t.f64()).powi(2))
        .sum();
    Ok(sum / (plan.masked.len() * target.last_dim()) as f64)
}

fn compose<T: Real>(original: &Tensor<T>, plan: &MaskPlan, grid: PatchGrid, fill: impl Fn(usize) -> Vec<T>) -> Result<Tensor<T>> {
    let mut patches = patchify(original, grid.patch_size)?;
    if patches.rows() != plan.n {
        return Err(Error::Contract(format!("image has {} patches, plan covers {}", patches.rows(), plan.n)));
    }
    let w = patches.last_dim();
    for &k in &plan.masked {
        let v = fill(k);
        patches.data_mut()[k * w..(k + 1) * w].copy_from_slice(&v);
    }
    unpatchify(&patches, grid)
}

/// Visible patches from the original, masked patches from the predictions.
pub fn reconstruct_image<T: Real>(original: &Tensor<T>, output: &MaeOutput<T>, grid: PatchGrid) -> Result<Tensor<T>> {
    if output.predicted_patches.rows() != output.plan.n {
        return Err(Error::Contract("prediction count differs from the plan".into()));
    }
    compose(original, &output.plan, grid, |k| output.predicted_patches.row(k).to_vec())
}

/// The original with every masked patch set to `sentinel`.
pub fn masked_input<T: Real>(original: &Tensor<T>, plan: &MaskPlan, grid: PatchGrid, sentinel: T) -> Result<Tensor<T>> {
    let w = grid.patch_size * grid.patch_size * original.shape().get(2).copied().unwrap_or(1);
    compose(original, plan, grid, |_| vec![sentinel; w])
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// original | masked input | reconstruction, side by side, 8-bit grayscale.
pub fn triptych<T: Real>(original: &Tensor<T>, output: &MaeOutput<T>, grid: PatchGrid) -> Result<GrayImage> {
    let masked = masked_input(original, &output.plan, grid, T::of(MASK_SENTINEL))?;
    let recon = reconstruct_image(original, output, grid)?;
    let (h, w) = (grid.height(), grid.width());
    let c = original.shape()[2];
    let panels = [original, &masked, &recon];
    Ok(GrayImage::from_fn((3 * w) as u32, h as u32, |x, y| {
        let (p, x) = (x as usize / w, x as usize % w);
        image::Luma([to_u8(panels[p].data()[(y as usize * w + x) * c].f64())])
    }))
}

pub fn export_triptych<T: Real>(original: &Tensor<T>, output: &MaeOutput<T>, grid: PatchGrid, path: &Path) -> Result<()> {
    triptych(original, output, grid)?
        .save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_mask_sizes() {
        let p = sample_mask(64, 0.75, 3).unwrap();
        assert_eq!((p.masked.len(), p.visible.len()), (48, 16));
        let p = sample_mask(4, 0.0, 3).unwrap();
        assert!(p.masked.is_empty());
        assert_eq!(p.visible, vec![0, 1, 2, 3]);
        assert_eq!(sample_mask(10, 0.75, 1).unwrap().masked.len(), 7);
    }

    #[test]
    fn bad_ratio_is_config_error() {
        assert!(matches!(sample_mask(8, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(sample_mask(8, -0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_plan() {
        assert_eq!(sample_mask(64, 0.75, 9).unwrap(), sample_mask(64, 0.75, 9).unwrap());
        assert_ne!(sample_mask(64, 0.75, 9).unwrap().masked, sample_mask(64, 0.75, 10).unwrap().masked);
    }
}
