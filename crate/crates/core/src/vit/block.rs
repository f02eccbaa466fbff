use rand::Rng;

use crate::params::{Graph, ParamId, ParamKind, ParamStore};
use crate::tensor::{Real, Tensor, Var};
use crate::Result;

pub(crate) const INIT_STD: f64 = 0.02;

/// Which of a block's two layer norms an activation tap refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NormSite {
    /// The first norm of the block, feeding self-attention.
    PreAttention,
    /// The second norm, feeding the MLP.
    PreMlp,
}

/// Optional captures during a transformer forward pass.
#[derive(Debug, Default)]
pub struct Taps {
    /// Norm output to mark for gradient retention: (block index, site).
    pub watch: Option<(usize, NormSite)>,
    pub record_attention: bool,
    pub watched: Option<Var>,
    /// Attention probabilities `[batch·heads, seq, seq]` per block, when recorded.
    pub attention: Vec<Var>,
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::xavier_uniform(inp, out, rng), ParamKind::Weight);
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out]), ParamKind::NoDecay);
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.p(self.w), g.p(self.b));
        Ok(g.tape.linear(x, w, b)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[width], T::one()), ParamKind::NoDecay);
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[width]), ParamKind::NoDecay);
        Norm { gamma, beta }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, eps: f64) -> Result<Var> {
        let (gm, bt) = (g.p(self.gamma), g.p(self.beta));
        Ok(g.tape.layer_norm(x, gm, bt, eps)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub norm1: Norm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Pre-norm transformer blocks followed by a final layer norm.
///
/// Block layout: `x + MSA(LN(x))`, then `x + MLP(LN(x))` with a 4× GELU MLP.
#[derive(Debug, Clone)]
pub struct TransformerStack {
    pub(crate) blocks: Vec<Block>,
    pub(crate) norm: Norm,
    pub width: usize,
    pub heads: usize,
    pub eps: f64,
}

impl TransformerStack {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        layers: usize,
        width: usize,
        heads: usize,
        eps: f64,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| {
                let n = format!("{prefix}.blocks.{i}");
                Block {
                    norm1: Norm::new(store, &format!("{n}.norm1"), width),
                    qkv: Linear::new(store, &format!("{n}.attn.qkv"), width, 3 * width, rng),
                    proj: Linear::new(store, &format!("{n}.attn.proj"), width, width, rng),
                    norm2: Norm::new(store, &format!("{n}.norm2"), width),
                    fc1: Linear::new(store, &format!("{n}.mlp.fc1"), width, 4 * width, rng),
                    fc2: Linear::new(store, &format!("{n}.mlp.fc2"), 4 * width, width, rng),
                }
            })
            .collect();
        let norm = Norm::new(store, &format!("{prefix}.norm"), width);
        TransformerStack { blocks, norm, width, heads, eps }
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    /// Runs every block and the final norm over `x: [batch·seq, width]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, mut x: Var, batch: usize, seq: usize, taps: &mut Taps) -> Result<Var> {
        let hd = self.width / self.heads;
        let scale = T::of(1.0 / (hd as f64).sqrt());
        for (i, blk) in self.blocks.iter().enumerate() {
            let h = blk.norm1.forward(g, x, self.eps)?;
            if taps.watch == Some((i, NormSite::PreAttention)) {
                g.tape.watch(h);
                taps.watched = Some(h);
            }
            let qkv = blk.qkv.forward(g, h)?;
            let q = g.tape.split_heads(qkv, batch, seq, self.heads, hd, 0)?;
            let k = g.tape.split_heads(qkv, batch, seq, self.heads, hd, self.width)?;
            let v = g.tape.split_heads(qkv, batch, seq, self.heads, hd, 2 * self.width)?;
            let q = g.tape.scale(q, scale)?;
            let scores = g.tape.bmm(q, k, false, true)?;
            let attn = g.tape.softmax(scores)?;
            if taps.record_attention {
                taps.attention.push(attn);
            }
            let ctx = g.tape.bmm(attn, v, false, false)?;
            let ctx = g.tape.merge_heads(ctx, batch, self.heads)?;
            let out = blk.proj.forward(g, ctx)?;
            x = g.tape.add(x, out)?;

            let h = blk.norm2.forward(g, x, self.eps)?;
            if taps.watch == Some((i, NormSite::PreMlp)) {
                g.tape.watch(h);
                taps.watched = Some(h);
            }
            let m = blk.fc1.forward(g, h)?;
            let m = g.tape.gelu(m)?;
            let m = blk.fc2.forward(g, m)?;
            x = g.tape.add(x, m)?;
        }
        self.norm.forward(g, x, self.eps)
    }
}
