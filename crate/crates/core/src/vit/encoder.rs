use rand::Rng;

use super::block::{Linear, Taps, TransformerStack, INIT_STD};
use super::config::{ModelConfig, PatchGrid};
use super::patch::patchify;
use super::posembed::sincos_2d;
use crate::params::{Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor, Var};
use crate::{Error, Result};

/// Embedded tokens of one image: row 0 is the class token when present.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub has_class_token: bool,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.last_dim()
    }
}

/// ViT encoder: linear patch projection, fixed positional table, class token
/// and a [`TransformerStack`].
#[derive(Debug, Clone)]
pub struct VitEncoder {
    pub grid: PatchGrid,
    pub width: usize,
    pub(crate) patch: Linear,
    pub(crate) cls: ParamId,
    pub(crate) pos: ParamId,
    pub stack: TransformerStack,
}

impl VitEncoder {
    pub const PREFIX: &'static str = "encoder";

    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.grid();
        let d = cfg.width;
        let patch = Linear::new(store, "encoder.patch_embed", cfg.patch_dim(), d, rng);
        let cls = store.add("encoder.cls_token", Tensor::trunc_normal(&[1, d], INIT_STD, rng), ParamKind::NoDecay);
        let pos = store.add("encoder.pos_embed", sincos_2d(d, grid), ParamKind::Buffer);
        let stack = TransformerStack::new(store, "encoder", cfg.layers, d, cfg.heads, cfg.norm_eps, rng);
        Ok(VitEncoder { grid, width: d, patch, cls, pos, stack })
    }

    pub fn num_patches(&self) -> usize {
        self.grid.n()
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos
    }

    pub fn patch_embed_ids(&self) -> (ParamId, ParamId) {
        (self.patch.w, self.patch.b)
    }

    /// `E·x_k + E_pos,k` for every patch of every image: `[batch·N, P²C]` to `[batch·N, D]`.
    pub fn patch_tokens<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var, batch: usize) -> Result<Var> {
        let n = self.grid.n();
        if g.tape.shape(patches)[0] != batch * n {
            return Err(Error::Contract(format!(
                "expected {} patch rows for batch {batch}, got {:?}",
                batch * n,
                g.tape.shape(patches)
            )));
        }
        let x = self.patch.forward(g, patches)?;
        let pos = g.p(self.pos);
        let idx: Vec<(usize, usize)> = (1..=n).map(|k| (0, k)).collect();
        let pos_patches = g.tape.rows(&[pos], &idx)?;
        Ok(g.tape.add_tiled(x, pos_patches)?)
    }

    /// Class token plus its (zero) positional row: `[1, D]`.
    pub fn class_token<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let cls = g.p(self.cls);
        let pos = g.p(self.pos);
        let pos0 = g.tape.rows(&[pos], &[(0, 0)])?;
        Ok(g.tape.add(cls, pos0)?)
    }

    /// Per image: optional class token, then the patch tokens listed in `keep`
    /// (all patches when `None`). Returns `[batch·len, D]` and `len`.
    pub fn assemble<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        cls: Option<Var>,
        tokens: Var,
        batch: usize,
        keep: Option<&[Vec<usize>]>,
    ) -> Result<(Var, usize)> {
        let n = self.grid.n();
        let mut idx = Vec::new();
        let mut len = None;
        for b in 0..batch {
            let start = idx.len();
            if cls.is_some() {
                idx.push((1, 0));
            }
            match keep {
                Some(k) => idx.extend(k[b].iter().map(|&j| (0, b * n + j))),
                None => idx.extend((0..n).map(|j| (0, b * n + j))),
            }
            let l = idx.len() - start;
            if *len.get_or_insert(l) != l {
                return Err(Error::Contract("every image in a batch must keep the same number of tokens".into()));
            }
        }
        let sources: Vec<Var> = match cls {
            Some(c) => vec![tokens, c],
            None => vec![tokens],
        };
        let v = g.tape.rows(&sources, &idx)?;
        Ok((v, len.unwrap_or(0)))
    }

    /// Full-sequence forward for `batch` images given their stacked patches.
    /// Returns the normalized output tokens `[batch·(N+1), D]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, patches: Var, batch: usize, taps: &mut Taps) -> Result<Var> {
        let tokens = self.patch_tokens(g, patches, batch)?;
        let cls = self.class_token(g)?;
        let (seq, len) = self.assemble(g, Some(cls), tokens, batch, None)?;
        self.stack.forward(g, seq, batch, len, taps)
    }

    /// Embeds one `[H, W, C]` image into its `N + 1` token sequence (no gradient tracking).
    pub fn embed<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<TokenSequence<T>> {
        let patches = patchify(image, self.grid.patch_size)?;
        self.embed_patches(store, &patches)
    }

    pub fn embed_patches<T: Real>(&self, store: &ParamStore<T>, patches: &Tensor<T>) -> Result<TokenSequence<T>> {
        let mut g = Graph::new(store, false);
        let p = g.tape.constant(patches.clone());
        let tokens = self.patch_tokens(&mut g, p, 1)?;
        let cls = self.class_token(&mut g)?;
        let (seq, _) = self.assemble(&mut g, Some(cls), tokens, 1, None)?;
        Ok(TokenSequence { tokens: g.tape.value(seq).clone(), has_class_token: true })
    }

    /// Runs the transformer stack over an already embedded sequence.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, seq: &TokenSequence<T>) -> Result<TokenSequence<T>> {
        if seq.width() != self.width {
            return Err(Error::Contract(format!("token width {} != encoder width {}", seq.width(), self.width)));
        }
        let mut g = Graph::new(store, false);
        let x = g.tape.constant(seq.tokens.clone());
        let y = self.stack.forward(&mut g, x, 1, seq.len(), &mut Taps::default())?;
        Ok(TokenSequence { tokens: g.tape.value(y).clone(), has_class_token: seq.has_class_token })
    }
}

/// Stacks images into the `[batch·N, P²C]` patch matrix the encoder consumes.
pub fn patch_batch<T: Real, U: Real>(images: &[&Tensor<U>], patch_size: usize) -> Result<Tensor<T>> {
    let mut rows = 0;
    let mut cols = 0;
    let mut data = Vec::new();
    for img in images {
        let p = patchify(img, patch_size)?;
        rows += p.shape()[0];
        cols = p.shape()[1];
        data.extend(p.data().iter().map(|&v| T::of(v.f64())));
    }
    if images.is_empty() {
        return Err(Error::Contract("empty image batch".into()));
    }
    Ok(Tensor::new(&[rows, cols], data)?)
}
