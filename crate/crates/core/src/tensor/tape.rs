use super::gemm::{gemm, View};
use super::real::Real;
use super::{Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    BatchMatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddTiled { x: Var, y: Var },
    Scale { x: Var, c: T },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax { x: Var },
    Gelu { x: Var },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize, offset: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    Rows { sources: Vec<Var>, index: Vec<(u32, u32)> },
    Mse { x: Var, target: Vec<T> },
    Sum { x: Var },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    retain: bool,
    /// Per-op saved statistics (layer norm keeps mean and reciprocal std per row).
    aux: Vec<T>,
    grad: Option<Vec<T>>,
}

/// Execution-ordered record of primitive ops.
///
/// Every node is appended after the nodes it reads, so reverse insertion order
/// is a valid reverse topological order. Gradients land on leaves created with
/// `requires_grad` and on nodes passed to [`Tape::watch`]; repeated calls to
/// [`Tape::backward`] accumulate into those buffers until [`Tape::zero_grad`].
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

const LN_OP: &str = "layer_norm";

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf or watched node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Marks an intermediate node so later ops track it and backward keeps its gradient.
    pub fn watch(&mut self, v: Var) {
        let n = &mut self.nodes[v.0];
        n.requires_grad = true;
        n.retain = true;
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, retain: false, aux: Vec::new(), grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var], aux: Vec<T>) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, retain: false, aux, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::Shape(format!("{op} expects a 2-D operand, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (ra, ca) = self.dims2(a, "matmul")?;
        let (rb, cb) = self.dims2(b, "matmul")?;
        let av = View::stored(ra, ca, ta);
        let bv = View::stored(rb, cb, tb);
        if av.cols != bv.rows {
            return Err(TensorError::Dimension {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[av.rows, bv.cols]);
        gemm(
            T::one(),
            self.value(a).data(),
            av,
            self.value(b).data(),
            bv,
            T::zero(),
            out.data_mut(),
            View::row_major(av.rows, bv.cols),
        );
        self.push("matmul", out, Op::MatMul { a, b, ta, tb }, &[a, b], Vec::new())
    }

    /// Batched product over the leading axis of two rank-3 operands.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(TensorError::Dimension { op: "bmm", left: sa, right: sb });
        }
        let av = View::stored(sa[1], sa[2], ta);
        let bv = View::stored(sb[1], sb[2], tb);
        if av.cols != bv.rows {
            return Err(TensorError::Dimension { op: "bmm", left: sa, right: sb });
        }
        let g = sa[0];
        let (m, n) = (av.rows, bv.cols);
        let mut out = Tensor::zeros(&[g, m, n]);
        let (asz, bsz) = (sa[1] * sa[2], sb[1] * sb[2]);
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for (i, oc) in out.data_mut().chunks_exact_mut(m * n).enumerate() {
                gemm(
                    T::one(),
                    &ad[i * asz..(i + 1) * asz],
                    av,
                    &bd[i * bsz..(i + 1) * bsz],
                    bv,
                    T::zero(),
                    oc,
                    View::row_major(m, n),
                );
            }
        }
        self.push("bmm", out, Op::BatchMatMul { a, b, ta, tb }, &[a, b], Vec::new())
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Dimension { op, left: self.shape(a).to_vec(), right: self.shape(b).to_vec() });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "add")?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect(),
        )?;
        self.push("add", out, Op::Add { a, b }, &[a, b], Vec::new())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape(a, b, "mul")?;
        let out = Tensor::new(
            self.shape(a),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect(),
        )?;
        self.push("mul", out, Op::Mul { a, b }, &[a, b], Vec::new())
    }

    /// `x + y` where the rows of `y` repeat cyclically down the rows of `x`
    /// (a bias when `y` has one row, a positional table when it has `seq` rows).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var, TensorError> {
        let (xv, yv) = (self.value(x), self.value(y));
        let c = xv.last_dim();
        if yv.last_dim() != c || xv.rows() % yv.rows() != 0 {
            return Err(TensorError::Dimension { op: "add_tiled", left: xv.shape().to_vec(), right: yv.shape().to_vec() });
        }
        let yd = yv.data();
        let period = yd.len();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_exact_mut(period) {
            for (o, &b) in chunk.iter_mut().zip(yd) {
                *o = *o + b;
            }
        }
        self.push("add_tiled", out, Op::AddTiled { x, y }, &[x, y], Vec::new())
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, Op::Scale { x, c }, &[x], Vec::new())
    }

    /// `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let h = self.matmul(x, w)?;
        self.add_tiled(h, b)
    }

    /// Normalizes each row of the trailing axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        if !(eps > 0.0) {
            return Err(TensorError::Invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.last_dim();
        if gv.len() != d || bv.len() != d {
            return Err(TensorError::Dimension { op: LN_OP, left: xv.shape().to_vec(), right: gv.shape().to_vec() });
        }
        let (g, b) = (gv.data(), bv.data());
        let eps = T::of(eps);
        let inv_d = T::one() / T::of(d as f64);
        let mut out = xv.clone();
        let mut aux = Vec::with_capacity(2 * xv.rows());
        for row in out.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
                *o = (*o - mean) * rstd * gi + bi;
            }
            aux.push(mean);
            aux.push(rstd);
        }
        self.push(LN_OP, out, Op::LayerNorm { x, gamma, beta }, &[x, gamma, beta], aux)
    }

    /// Softmax over the trailing axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let n = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).kexp();
                s = s + *v;
            }
            let inv = T::one() / s;
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        self.push("softmax", out, Op::Softmax { x }, &[x], Vec::new())
    }

    /// Gaussian-error linear unit, erf form.
    pub fn gelu(&mut self, x: Var) -> Result<Var, TensorError> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let out = self.value(x).map(|v| half * v * (T::one() + (v * inv_sqrt2).erf()));
        self.push("gelu", out, Op::Gelu { x }, &[x], Vec::new())
    }

    /// `[batch*seq, width]` columns `offset..offset+heads*head_dim` to `[batch*heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize, head_dim: usize, offset: usize) -> Result<Var, TensorError> {
        let (rows, width) = self.dims2(x, "split_heads")?;
        if rows != batch * seq || offset + heads * head_dim > width {
            return Err(TensorError::Shape(format!(
                "split_heads: [{rows}, {width}] cannot hold batch {batch} x seq {seq} x {heads} heads of {head_dim} at column {offset}"
            )));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(batch * heads * seq * head_dim);
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let start = (b * seq + t) * width + offset + h * head_dim;
                    out.extend_from_slice(&xd[start..start + head_dim]);
                }
            }
        }
        let out = Tensor::new(&[batch * heads, seq, head_dim], out)?;
        self.push("split_heads", out, Op::SplitHeads { x, batch, seq, heads, head_dim, offset }, &[x], Vec::new())
    }

    /// Inverse layout of [`Tape::split_heads`]: `[batch*heads, seq, d]` to `[batch*seq, heads*d]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[0] != batch * heads {
            return Err(TensorError::Shape(format!("merge_heads: {s:?} is not [{batch}*{heads}, seq, d]")));
        }
        let (seq, hd) = (s[1], s[2]);
        let xd = self.value(x).data();
        let width = heads * hd;
        let mut out = vec![T::zero(); batch * seq * width];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let src = ((b * heads + h) * seq + t) * hd;
                    let dst = (b * seq + t) * width + h * hd;
                    out[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
                }
            }
        }
        let out = Tensor::new(&[batch * seq, width], out)?;
        self.push("merge_heads", out, Op::MergeHeads { x, batch, seq, heads }, &[x], Vec::new())
    }

    /// Builds a `[index.len(), C]` matrix whose row `i` is row `index[i].1` of `sources[index[i].0]`.
    ///
    /// Covers token selection, class-token prepending and mask-token scattering.
    pub fn rows(&mut self, sources: &[Var], index: &[(usize, usize)]) -> Result<Var, TensorError> {
        if sources.is_empty() || index.is_empty() {
            return Err(TensorError::Shape("rows: empty selection".into()));
        }
        let c = self.value(sources[0]).last_dim();
        for &s in sources {
            if self.value(s).last_dim() != c {
                return Err(TensorError::Dimension {
                    op: "rows",
                    left: self.shape(sources[0]).to_vec(),
                    right: self.shape(s).to_vec(),
                });
            }
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &(s, r) in index {
            let src = sources.get(s).ok_or_else(|| TensorError::Shape(format!("rows: source {s} out of range")))?;
            let v = self.value(*src);
            if r >= v.rows() {
                return Err(TensorError::Shape(format!("rows: row {r} out of range for {:?}", v.shape())));
            }
            out.extend_from_slice(v.row(r));
        }
        let out = Tensor::new(&[index.len(), c], out)?;
        let packed = index.iter().map(|&(s, r)| (s as u32, r as u32)).collect();
        self.push("rows", out, Op::Rows { sources: sources.to_vec(), index: packed }, sources, Vec::new())
    }

    /// Mean squared difference against a constant target.
    pub fn mse(&mut self, x: Var, target: &[T]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(TensorError::Dimension { op: "mse", left: xv.shape().to_vec(), right: vec![target.len()] });
        }
        let n = T::of(xv.len() as f64);
        let s = xv.data().iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        self.push("mse", Tensor::scalar(s), Op::Mse { x, target: target.to_vec() }, &[x], Vec::new())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum { x }, &[x], Vec::new())
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Each recorded op between the leaves and `loss` is visited exactly once.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            let node = &mut self.nodes[i];
            if matches!(node.op, Op::Leaf) || node.retain {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => node.grad = Some(g),
                }
            }
        }
        for n in &self.nodes {
            if let Some(g) = &n.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "backward" });
                }
            }
        }
        Ok(())
    }

    /// Hands `f` the gradient buffer of `v`, allocating it on first use.
    /// Inputs that do not require gradients are skipped.
    fn with_slot(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut buf = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(&mut buf);
        grads[v.0] = Some(buf);
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<(), TensorError> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ad, bd) = (&nodes[a.0].value, &nodes[b.0].value);
                let av = View::stored(ad.shape()[0], ad.shape()[1], *ta);
                let bv = View::stored(bd.shape()[0], bd.shape()[1], *tb);
                let gv = View::row_major(av.rows, bv.cols);
                self.with_slot(grads, *a, |ga| gemm(T::one(), g, gv, bd.data(), bv.t(), T::one(), ga, av));
                self.with_slot(grads, *b, |gb| gemm(T::one(), ad.data(), av.t(), g, gv, T::one(), gb, bv));
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (ad, bd) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (ad.shape(), bd.shape());
                let av = View::stored(sa[1], sa[2], *ta);
                let bv = View::stored(sb[1], sb[2], *tb);
                let gv = View::row_major(av.rows, bv.cols);
                let (asz, bsz, gsz) = (sa[1] * sa[2], sb[1] * sb[2], av.rows * bv.cols);
                self.with_slot(grads, *a, |ga| {
                    for k in 0..sa[0] {
                        gemm(
                            T::one(),
                            &g[k * gsz..(k + 1) * gsz],
                            gv,
                            &bd.data()[k * bsz..(k + 1) * bsz],
                            bv.t(),
                            T::one(),
                            &mut ga[k * asz..(k + 1) * asz],
                            av,
                        );
                    }
                });
                self.with_slot(grads, *b, |gb| {
                    for k in 0..sa[0] {
                        gemm(
                            T::one(),
                            &ad.data()[k * asz..(k + 1) * asz],
                            av.t(),
                            &g[k * gsz..(k + 1) * gsz],
                            gv,
                            T::one(),
                            &mut gb[k * bsz..(k + 1) * bsz],
                            bv,
                        );
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    self.with_slot(grads, *v, |gv| gv.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d));
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                self.with_slot(grads, *a, |ga| {
                    for ((o, &d), &y) in ga.iter_mut().zip(g).zip(bd) {
                        *o = *o + d * y;
                    }
                });
                self.with_slot(grads, *b, |gb| {
                    for ((o, &d), &x) in gb.iter_mut().zip(g).zip(ad) {
                        *o = *o + d * x;
                    }
                });
            }
            Op::AddTiled { x, y } => {
                self.with_slot(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d));
                self.with_slot(grads, *y, |gy| {
                    let period = gy.len();
                    for chunk in g.chunks_exact(period) {
                        gy.iter_mut().zip(chunk).for_each(|(o, &d)| *o = *o + d);
                    }
                });
            }
            Op::Scale { x, c } => {
                self.with_slot(grads, *x, |gx| gx.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *c));
            }
            Op::LayerNorm { x, gamma, beta } => {
                let xv = &nodes[x.0].value;
                let d = xv.last_dim();
                let gam = nodes[gamma.0].value.data();
                let aux = &node.aux;
                let inv_d = T::one() / T::of(d as f64);
                self.with_slot(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    let rows = xv.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(gx.chunks_exact_mut(d));
                    for (r, ((xr, gr), dxr)) in rows.enumerate() {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gam[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * (xr[j] - mean) * rstd;
                        }
                        s1 = s1 * inv_d;
                        s2 = s2 * inv_d;
                        for j in 0..d {
                            let xhat = (xr[j] - mean) * rstd;
                            dxr[j] = dxr[j] + rstd * (dxhat[j] - s1 - xhat * s2);
                        }
                    }
                });
                self.with_slot(grads, *gamma, |gg| {
                    for (r, (xr, gr)) in xv.data().chunks_exact(d).zip(g.chunks_exact(d)).enumerate() {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for j in 0..d {
                            gg[j] = gg[j] + gr[j] * (xr[j] - mean) * rstd;
                        }
                    }
                });
                self.with_slot(grads, *beta, |gb| {
                    for gr in g.chunks_exact(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, &v)| *o = *o + v);
                    }
                });
            }
            Op::Softmax { x } => {
                let y = &node.value;
                let n = y.last_dim();
                self.with_slot(grads, *x, |gx| {
                    for ((yr, gr), dxr) in y.data().chunks_exact(n).zip(g.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            dxr[j] = dxr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Gelu { x } => {
                let half = T::of(0.5);
                let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt2pi = T::of(0.398_942_280_401_432_7);
                self.with_slot(grads, *x, |gx| {
                    for ((o, &d), &v) in gx.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                        let cdf = half * (T::one() + (v * inv_sqrt2).erf());
                        let pdf = inv_sqrt2pi * (-half * v * v).kexp();
                        *o = *o + d * (cdf + v * pdf);
                    }
                });
            }
            Op::SplitHeads { x, batch, seq, heads, head_dim, offset } => {
                let width = nodes[x.0].value.last_dim();
                self.with_slot(grads, *x, |gx| {
                    let mut src = 0;
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let dst = (b * seq + t) * width + offset + h * head_dim;
                                for e in 0..*head_dim {
                                    gx[dst + e] = gx[dst + e] + g[src + e];
                                }
                                src += head_dim;
                            }
                        }
                    }
                });
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let hd = nodes[x.0].value.last_dim();
                let width = heads * hd;
                self.with_slot(grads, *x, |gx| {
                    for b in 0..*batch {
                        for h in 0..*heads {
                            for t in 0..*seq {
                                let dst = ((b * heads + h) * seq + t) * hd;
                                let src = (b * seq + t) * width + h * hd;
                                for e in 0..hd {
                                    gx[dst + e] = gx[dst + e] + g[src + e];
                                }
                            }
                        }
                    }
                });
            }
            Op::Rows { sources, index } => {
                let c = node.value.last_dim();
                for (si, &src) in sources.iter().enumerate() {
                    self.with_slot(grads, src, |gs| {
                        for (i, &(s, r)) in index.iter().enumerate() {
                            if s as usize != si {
                                continue;
                            }
                            let r = r as usize;
                            for j in 0..c {
                                gs[r * c + j] = gs[r * c + j] + g[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::Mse { x, target } => {
                let k = T::of(2.0) * g[0] / T::of(target.len() as f64);
                self.with_slot(grads, *x, |gx| {
                    for ((o, &v), &t) in gx.iter_mut().zip(nodes[x.0].value.data()).zip(target) {
                        *o = *o + k * (v - t);
                    }
                });
            }
            Op::Sum { x } => {
                self.with_slot(grads, *x, |gx| gx.iter_mut().for_each(|o| *o = *o + g[0]));
            }
        }
        Ok(())
    }
}
