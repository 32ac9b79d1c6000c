//! Reverse-mode differentiation over a flat operation tape.
//!
//! Every op appends a node holding its output value and the rule needed to
//! push gradients back to its inputs. Because nodes are only ever appended,
//! the tape is already in topological order and [`Tape::backward`] walks it
//! once, back to front. A leaf used several times (a weight shared across
//! loop iterations, say) receives the sum of all contributions.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::nn::{self, AttnGeometry, CausalMask, HeadLayout, RopeConfig};
use crate::tensor::{softmax_in_place, MatmulDims, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var, MatmulDims),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Silu(Var),
    Sum(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<f32>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        cfg: RopeConfig,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geo: AttnGeometry,
        probs: Vec<f32>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f32>,
        probs: Vec<f32>,
        total_weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[self.index(v).expect("variable from another tape")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.index(v).ok().and_then(|i| self.nodes[i].value.grad())
    }

    /// Clears leaf gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            let _ = node.value.set_grad(None);
        }
        self.backward_done = false;
    }

    fn index(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable is not recorded on this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].needs_grad)
    }

    fn check(&self, vars: &[Var]) -> Result<()> {
        for &v in vars {
            self.index(v)?;
        }
        Ok(())
    }

    // -- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let dims = MatmulDims::infer(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; dims.out_len()];
        dims.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::from_parts(dims.out_shape.clone(), out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b, dims), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let value = self.value(a).add(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(&[a, b])?;
        let value = self.value(a).mul(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        self.check(&[a])?;
        let x = self.value(a);
        let value = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect());
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Scale(a, c), needs))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let value = self.value(a).silu();
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Silu(a), needs))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(a), needs))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.check(&[a])?;
        let value = self.value(a).softmax_rows();
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a), needs))
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f32) -> Result<Var> {
        self.check(&[x, w])?;
        let (xt, wt) = (self.value(x), self.value(w));
        let d = xt.last_dim();
        if wt.rank() != 1 || wt.numel() != d {
            return Err(Error::shape("rms_norm", xt.shape(), wt.shape()));
        }
        let mut out = vec![0.0; xt.numel()];
        let mut inv_rms = Vec::with_capacity(xt.rows());
        nn::rms_norm_forward(xt.data(), wt.data(), d, eps, &mut out, Some(&mut inv_rms));
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        let needs = self.needs(&[x, w]);
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms }, needs))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], cfg: RopeConfig) -> Result<Var> {
        self.check(&[x])?;
        cfg.validate()?;
        let xt = self.value(x);
        nn::check_rope_shape(xt.shape(), positions.len(), cfg.head_dim)?;
        let mut out = xt.data().to_vec();
        nn::rope_rotate(&mut out, xt.last_dim(), positions, &cfg, false);
        let value = Tensor::from_parts(xt.shape().to_vec(), out);
        let needs = self.needs(&[x]);
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            cfg,
        };
        Ok(self.push(value, op, needs))
    }

    /// Multi-head attention core; see [`nn::masked_attention`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: HeadLayout, mask: CausalMask) -> Result<Var> {
        self.check(&[q, k, v])?;
        let geo = AttnGeometry::infer(self.shape(q), self.shape(k), self.shape(v), layout, mask)?;
        let needs = self.needs(&[q, k, v]);
        let mut out = vec![0.0; self.value(q).numel()];
        let mut probs = if needs { vec![0.0; geo.probs_len()] } else { Vec::new() };
        geo.forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &mut out,
            needs.then_some(probs.as_mut_slice()),
        );
        let value = Tensor::from_parts(self.shape(q).to_vec(), out);
        Ok(self.push(value, Op::Attention { q, k, v, geo, probs }, needs))
    }

    /// Gathers rows of `table: [V, d]`; the result has shape `batch_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], batch_shape: &[usize]) -> Result<Var> {
        self.check(&[table])?;
        let t = self.value(table);
        if t.rank() != 2 || batch_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", t.shape(), batch_shape));
        }
        let (vocab, d) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::InvalidArgument(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let mut shape = batch_shape.to_vec();
        shape.push(d);
        let value = Tensor::from_parts(shape, out);
        let needs = self.needs(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, needs))
    }

    /// Weighted mean next-token cross-entropy:
    /// `Σ w_r · -log softmax(logits_r)[t_r] / Σ w_r` over trailing-axis rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f32]) -> Result<Var> {
        self.check(&[logits])?;
        let lt = self.value(logits);
        let (rows, vocab) = (lt.rows(), lt.last_dim());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: {rows} rows but {} targets and {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::InvalidArgument(format!("target {bad} outside vocabulary of {vocab}")));
        }
        let total_weight: f64 = weights.iter().map(|&w| w as f64).sum();
        if !(total_weight > 0.0) {
            return Err(Error::InvalidArgument("cross_entropy: loss mask selects no positions".into()));
        }
        let mut probs = lt.data().to_vec();
        let mut loss = 0.0f64;
        for (r, row) in probs.chunks_mut(vocab).enumerate() {
            softmax_in_place(row);
            if weights[r] != 0.0 {
                let p = (row[targets[r]] as f64).max(1e-30);
                loss -= weights[r] as f64 * p.ln();
            }
        }
        let value = Tensor::scalar((loss / total_weight) as f32);
        let needs = self.needs(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            total_weight,
        };
        Ok(self.push(value, op, needs))
    }

    // -- backward ----------------------------------------------------------

    /// Populates the gradient of every `requires_grad` leaf with
    /// d`loss`/d`leaf`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let end = self.index(loss)?;
        if !self.nodes[end].value.is_scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[end].value.shape()
            )));
        }
        if self.backward_done {
            return Err(Error::Tape("backward already ran; call zero_grad first".into()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[end] = Some(vec![1.0]);

        for i in (0..=end).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }

        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.numel()]);
                node.value.set_grad(Some(g))?;
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.idx].value.data();
        let wants = |v: Var| nodes[v.idx].needs_grad;
        // Accumulator for input `v`, allocated on first use.
        fn acc<'g>(grads: &'g mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> &'g mut [f32] {
            grads[v.idx].get_or_insert_with(|| vec![0.0; nodes[v.idx].value.numel()])
        }

        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b, dims) => {
                let (a, b) = (*a, *b);
                if wants(a) && wants(b) && a != b {
                    let mut da = grads[a.idx].take().unwrap_or_else(|| vec![0.0; nodes[a.idx].value.numel()]);
                    let db = acc(grads, nodes, b);
                    dims.backward(val(a), val(b), g, Some(&mut da), Some(db));
                    grads[a.idx] = Some(da);
                } else {
                    if wants(a) {
                        dims.backward(val(a), val(b), g, Some(acc(grads, nodes, a)), None);
                    }
                    if wants(b) {
                        dims.backward(val(a), val(b), g, None, Some(acc(grads, nodes, b)));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(acc(grads, nodes, v), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let other = val(b);
                    for ((d, &gi), &o) in acc(grads, nodes, a).iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
                if wants(b) {
                    let other = val(a);
                    for ((d, &gi), &o) in acc(grads, nodes, b).iter_mut().zip(g).zip(other) {
                        *d += gi * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    for (d, &gi) in acc(grads, nodes, *a).iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::Silu(a) => {
                if wants(*a) {
                    let x = val(*a);
                    for ((d, &gi), &xv) in acc(grads, nodes, *a).iter_mut().zip(g).zip(x) {
                        *d += gi * nn::silu_grad(xv);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    for d in acc(grads, nodes, *a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = nodes[i].value.data();
                    let w = nodes[i].value.last_dim();
                    let da = acc(grads, nodes, *a);
                    for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(da.chunks_mut(w)) {
                        let dot: f32 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, &p), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += p * (gi - dot);
                        }
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (x, w) = (*x, *w);
                let mut dx = wants(x).then(|| grads[x.idx].take().unwrap_or_else(|| vec![0.0; nodes[x.idx].value.numel()]));
                let dw = if wants(w) && w != x { Some(acc(grads, nodes, w)) } else { None };
                nn::rms_norm_backward(val(x), val(w), inv_rms, g, dx.as_deref_mut(), dw);
                if let Some(dx) = dx {
                    grads[x.idx] = Some(dx);
                }
            }
            Op::Rope { x, positions, cfg } => {
                if wants(*x) {
                    let mut back = g.to_vec();
                    nn::rope_rotate(&mut back, nodes[i].value.last_dim(), positions, cfg, true);
                    add_into(acc(grads, nodes, *x), &back);
                }
            }
            Op::Attention { q, k, v, geo, probs } => {
                let (q, k, v) = (*q, *k, *v);
                let mut dq = wants(q).then(|| vec![0.0; nodes[q.idx].value.numel()]);
                let mut dk = wants(k).then(|| vec![0.0; nodes[k.idx].value.numel()]);
                let mut dv = wants(v).then(|| vec![0.0; nodes[v.idx].value.numel()]);
                geo.backward(val(q), val(k), val(v), probs, g, dq.as_deref_mut(), dk.as_deref_mut(), dv.as_deref_mut());
                for (var, d) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = d {
                        add_into(acc(grads, nodes, var), &d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if wants(*table) {
                    let d = nodes[table.idx].value.last_dim();
                    let dt = acc(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                if wants(*logits) {
                    let vocab = nodes[logits.idx].value.last_dim();
                    let scale = g[0] as f64 / total_weight;
                    let dl = acc(grads, nodes, *logits);
                    for (r, (pr, dr)) in probs.chunks(vocab).zip(dl.chunks_mut(vocab)).enumerate() {
                        if weights[r] == 0.0 {
                            continue;
                        }
                        let c = (weights[r] as f64 * scale) as f32;
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d += c * p;
                        }
                        dr[targets[r]] -= c;
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Checks tape gradients against central finite differences.
///
/// `f` builds a scalar on a fresh tape from leaves holding `params`. Each
/// checked coordinate `p` is compared with
/// `(f(p + eps) - f(p - eps)) / (2 eps)` under the relative error
/// `|a - b| / max(|a|, |b|, 1e-8)`; the maximum is returned.
///
/// With `sample = Some(k)` only the `k` coordinates of each tensor with the
/// largest tape-gradient magnitude are probed. In 32-bit arithmetic the
/// finite difference carries an absolute error near `ulp(f) / eps`, so
/// coordinates whose true gradient is below that floor cannot be checked in
/// relative terms.
pub fn grad_check_fd<F>(f: F, params: &[Tensor], eps: f32, sample: Option<usize>) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1e-2], got {eps}")));
    }
    let eval = |ps: &[Tensor]| -> Result<f32> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if !v.is_scalar() {
            return Err(Error::Tape(format!("grad_check_fd: f returned shape {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic(format!(
            "f evaluated to {base} and then {again} at the same point"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();

    let mut worst = 0.0f32;
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        let coords: Vec<usize> = match sample {
            None => (0..grad.len()).collect(),
            Some(k) => {
                let mut idx: Vec<usize> = (0..grad.len()).collect();
                idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()).then(a.cmp(&b)));
                idx.truncate(k);
                idx
            }
        };
        for c in coords {
            let orig = params[pi].data()[c];
            let hi = orig + eps;
            let lo = orig - eps;
            probe[pi].data_mut()[c] = hi;
            let f_hi = eval(&probe)?;
            probe[pi].data_mut()[c] = lo;
            let f_lo = eval(&probe)?;
            probe[pi].data_mut()[c] = orig;
            // Divide by the step actually taken after rounding.
            let numeric = ((f_hi as f64 - f_lo as f64) / (hi as f64 - lo as f64)) as f32;
            let a = grad[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
