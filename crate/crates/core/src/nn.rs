//! Neural building blocks: RMSNorm, SwiGLU, rotary embeddings and masked
//! multi-head attention with grouped KV heads.
//!
//! The numeric kernels here are shared by the eager functions in this module
//! and by the differentiable ops on [`crate::autodiff::Tape`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_NORM_EPS: f32 = 1e-6;
pub const DEFAULT_ROPE_BASE: f32 = 10_000.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f32,
}

impl RopeConfig {
    pub fn new(head_dim: usize) -> Result<Self> {
        let cfg = Self {
            head_dim,
            base: DEFAULT_ROPE_BASE,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::InvalidArgument(format!("rope base must exceed 1, got {}", self.base)));
        }
        Ok(())
    }

    fn inv_freq(&self) -> Vec<f32> {
        (0..self.head_dim / 2)
            .map(|i| self.base.powf(-2.0 * i as f32 / self.head_dim as f32))
            .collect()
    }
}

/// Query/KV head arrangement. Query head `h` reads KV head
/// `h / (n_heads / n_kv_heads)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(n_heads: usize, n_kv_heads: usize, head_dim: usize) -> Result<Self> {
        if n_heads == 0 || n_kv_heads == 0 || head_dim == 0 {
            return Err(Error::InvalidArgument("head counts and head_dim must be positive".into()));
        }
        if n_heads % n_kv_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "n_heads ({n_heads}) must be a multiple of n_kv_heads ({n_kv_heads})"
            )));
        }
        Ok(Self {
            n_heads,
            n_kv_heads,
            head_dim,
        })
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    fn group(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

/// Which keys a query may attend.
///
/// Query `i` sits at key position `i + offset` and attends keys
/// `[i + offset + 1 - window, i + offset]` (clamped at 0). Without a window
/// the whole causal prefix is visible.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub offset: usize,
    pub window: Option<usize>,
}

impl CausalMask {
    pub const fn causal() -> Self {
        Self {
            offset: 0,
            window: None,
        }
    }

    pub const fn sliding(window: usize) -> Self {
        Self {
            offset: 0,
            window: Some(window),
        }
    }

    /// Half-open key range for query `i`.
    pub fn span(&self, i: usize) -> (usize, usize) {
        let hi = i + self.offset + 1;
        let lo = match self.window {
            Some(w) => hi.saturating_sub(w),
            None => 0,
        };
        (lo, hi)
    }
}

/// Projection weights for one attention block. No biases.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub layout: HeadLayout,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl AttnParams {
    pub fn new(layout: HeadLayout, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor) -> Result<Self> {
        let d = wq.shape()[0];
        let expect = [
            (&wq, [d, layout.q_width()]),
            (&wk, [d, layout.kv_width()]),
            (&wv, [d, layout.kv_width()]),
            (&wo, [layout.q_width(), d]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::shape("attn_params", t.shape(), &shape));
            }
        }
        Ok(Self { layout, wq, wk, wv, wo })
    }

    pub fn project(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        Ok((x.matmul(&self.wq)?, x.matmul(&self.wk)?, x.matmul(&self.wv)?))
    }
}

pub fn rms_norm(x: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.last_dim();
    if weight.numel() != d || weight.rank() != 1 {
        return Err(Error::shape("rms_norm", x.shape(), weight.shape()));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("rms_norm eps must be positive, got {eps}")));
    }
    let mut out = vec![0.0; x.numel()];
    rms_norm_forward(x.data(), weight.data(), d, eps, &mut out, None);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// `(swish(x W_G) ⊙ x W_1) W_2`.
pub fn swiglu(x: &Tensor, w_gate: &Tensor, w_up: &Tensor, w_down: &Tensor) -> Result<Tensor> {
    let gate = x.matmul(w_gate)?.silu();
    let up = x.matmul(w_up)?;
    gate.mul(&up)?.matmul(w_down)
}

/// Rotates consecutive pairs of every `head_dim` chunk of the trailing axis.
///
/// `x` has shape `[.., n, k * head_dim]`; `positions[r]` is the position of
/// sequence row `r`.
pub fn rope_apply(x: &Tensor, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_rope_shape(x.shape(), positions.len(), cfg.head_dim)?;
    let mut out = x.data().to_vec();
    rope_rotate(&mut out, x.last_dim(), positions, cfg, false);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn check_rope_shape(shape: &[usize], n_pos: usize, head_dim: usize) -> Result<()> {
    if shape.len() < 2 || shape[shape.len() - 2] != n_pos || shape[shape.len() - 1] % head_dim != 0 {
        return Err(Error::shape("rope_apply", shape, &[n_pos, head_dim]));
    }
    Ok(())
}

/// Multi-head attention core, before the output projection.
///
/// `q: [.., nq, n_heads*head_dim]`, `k`, `v`: `[.., nk, n_kv_heads*head_dim]`
/// with equal leading axes. Returns `[.., nq, n_heads*head_dim]`.
pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, layout: HeadLayout, mask: CausalMask) -> Result<Tensor> {
    let geo = AttnGeometry::infer(q.shape(), k.shape(), v.shape(), layout, mask)?;
    let mut out = vec![0.0; q.numel()];
    geo.forward(q.data(), k.data(), v.data(), &mut out, None);
    Ok(Tensor::from_parts(q.shape().to_vec(), out))
}

/// Attention probabilities, shape `[batch, n_heads, nq, nk]`; zero outside
/// each query's span.
pub fn attention_weights(q: &Tensor, k: &Tensor, v: &Tensor, layout: HeadLayout, mask: CausalMask) -> Result<Tensor> {
    let geo = AttnGeometry::infer(q.shape(), k.shape(), v.shape(), layout, mask)?;
    let mut out = vec![0.0; q.numel()];
    let mut probs = vec![0.0; geo.probs_len()];
    geo.forward(q.data(), k.data(), v.data(), &mut out, Some(&mut probs));
    Ok(Tensor::from_parts(
        vec![geo.batch, layout.n_heads, geo.nq, geo.nk],
        probs,
    ))
}

/// Causal self-attention over the full prefix, projected through `W_O`.
pub fn attention_full_causal(q: &Tensor, k: &Tensor, v: &Tensor, params: &AttnParams) -> Result<Tensor> {
    same_length(q, k)?;
    masked_attention(q, k, v, params.layout, CausalMask::causal())?.matmul(&params.wo)
}

/// Causal self-attention restricted to the last `window` positions
/// (the query's own position included).
pub fn attention_swa(q: &Tensor, k: &Tensor, v: &Tensor, window: usize, params: &AttnParams) -> Result<Tensor> {
    if window < 1 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    same_length(q, k)?;
    masked_attention(q, k, v, params.layout, CausalMask::sliding(window))?.matmul(&params.wo)
}

/// Queries attending a shared key/value cache; query `i` sees cache rows
/// `0..=i + causal_offset`. No positional transform is applied.
pub fn attention_cross(
    q: &Tensor,
    k_hat: &Tensor,
    v_hat: &Tensor,
    causal_offset: usize,
    params: &AttnParams,
) -> Result<Tensor> {
    let mask = CausalMask {
        offset: causal_offset,
        window: None,
    };
    masked_attention(q, k_hat, v_hat, params.layout, mask)?.matmul(&params.wo)
}

fn same_length(q: &Tensor, k: &Tensor) -> Result<()> {
    let nq = q.shape().get(q.rank().wrapping_sub(2));
    let nk = k.shape().get(k.rank().wrapping_sub(2));
    if nq != nk {
        return Err(Error::shape("self_attention", q.shape(), k.shape()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// kernels

pub(crate) fn rms_norm_forward(x: &[f32], w: &[f32], d: usize, eps: f32, out: &mut [f32], mut inv_rms: Option<&mut Vec<f32>>) {
    for (row, (xr, yr)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let ms = xr.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
        let r = (1.0 / (ms + eps as f64).sqrt()) as f32;
        for ((y, &xv), &wv) in yr.iter_mut().zip(xr).zip(w) {
            *y = xv * r * wv;
        }
        if let Some(buf) = inv_rms.as_deref_mut() {
            debug_assert_eq!(buf.len(), row);
            buf.push(r);
        }
    }
}

pub(crate) fn rms_norm_backward(
    x: &[f32],
    w: &[f32],
    inv_rms: &[f32],
    dy: &[f32],
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let d = w.len();
    for (row, (xr, dyr)) in x.chunks(d).zip(dy.chunks(d)).enumerate() {
        let r = inv_rms[row];
        if let Some(dw) = dw.as_deref_mut() {
            for j in 0..d {
                dw[j] += dyr[j] * xr[j] * r;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dot: f32 = (0..d).map(|j| dyr[j] * w[j] * xr[j]).sum();
            let coef = r * r * r * dot / d as f32;
            let dxr = &mut dx[row * d..(row + 1) * d];
            for j in 0..d {
                dxr[j] += r * w[j] * dyr[j] - coef * xr[j];
            }
        }
    }
}

/// In-place rotation; `inverse` rotates by the negated angle (the adjoint).
pub(crate) fn rope_rotate(data: &mut [f32], width: usize, positions: &[usize], cfg: &RopeConfig, inverse: bool) {
    let inv_freq = cfg.inv_freq();
    let n = positions.len();
    let sign = if inverse { -1.0 } else { 1.0 };
    for (r, row) in data.chunks_mut(width).enumerate() {
        let pos = positions[r % n] as f32;
        if pos == 0.0 {
            continue;
        }
        for head in row.chunks_mut(cfg.head_dim) {
            for (i, &f) in inv_freq.iter().enumerate() {
                let (s, c) = (pos * f).sin_cos();
                let s = sign * s;
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AttnGeometry {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub layout: HeadLayout,
    pub mask: CausalMask,
}

impl AttnGeometry {
    pub fn infer(q: &[usize], k: &[usize], v: &[usize], layout: HeadLayout, mask: CausalMask) -> Result<Self> {
        if q.len() < 2 || k.len() != q.len() || k != v {
            return Err(Error::shape("attention", q, k));
        }
        let r = q.len();
        if q[..r - 2] != k[..r - 2] || q[r - 1] != layout.q_width() || k[r - 1] != layout.kv_width() {
            return Err(Error::shape("attention", q, k));
        }
        if mask.window == Some(0) {
            return Err(Error::InvalidArgument("attention window must be at least 1".into()));
        }
        let (nq, nk) = (q[r - 2], k[r - 2]);
        if nq + mask.offset > nk {
            return Err(Error::InvalidArgument(format!(
                "causal offset {} places query {} beyond a cache of {nk} rows",
                mask.offset,
                nq - 1
            )));
        }
        Ok(Self {
            batch: q[..r - 2].iter().product(),
            nq,
            nk,
            layout,
            mask,
        })
    }

    pub fn probs_len(&self) -> usize {
        self.batch * self.layout.n_heads * self.nq * self.nk
    }

    /// Score and value-mixing MACs: `2 * q_width` per attended (query, key).
    pub fn macs(&self) -> u64 {
        let pairs: usize = (0..self.nq).map(|i| {
            let (lo, hi) = self.mask.span(i);
            hi - lo
        }).sum();
        (self.batch * pairs * 2 * self.layout.q_width()) as u64
    }

    #[inline]
    fn q_off(&self, b: usize, i: usize, h: usize) -> usize {
        ((b * self.nq + i) * self.layout.n_heads + h) * self.layout.head_dim
    }

    #[inline]
    fn k_off(&self, b: usize, j: usize, kh: usize) -> usize {
        ((b * self.nk + j) * self.layout.n_kv_heads + kh) * self.layout.head_dim
    }

    pub fn forward(&self, q: &[f32], k: &[f32], v: &[f32], out: &mut [f32], mut probs: Option<&mut [f32]>) {
        let hd = self.layout.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut scores = vec![0.0f32; self.nk];
        for b in 0..self.batch {
            for h in 0..self.layout.n_heads {
                let kh = h / self.layout.group();
                for i in 0..self.nq {
                    let (lo, hi) = self.mask.span(i);
                    let qi = &q[self.q_off(b, i, h)..][..hd];
                    let s = &mut scores[lo..hi];
                    for (j, sj) in (lo..hi).zip(s.iter_mut()) {
                        let kj = &k[self.k_off(b, j, kh)..][..hd];
                        *sj = scale * dot(qi, kj);
                    }
                    crate::tensor::softmax_in_place(s);
                    let o = &mut out[self.q_off(b, i, h)..][..hd];
                    o.fill(0.0);
                    for (j, &p) in (lo..hi).zip(s.iter()) {
                        let vj = &v[self.k_off(b, j, kh)..][..hd];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += p * vv;
                        }
                    }
                    if let Some(pbuf) = probs.as_deref_mut() {
                        let base = ((b * self.layout.n_heads + h) * self.nq + i) * self.nk;
                        pbuf[base + lo..base + hi].copy_from_slice(s);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        q: &[f32],
        k: &[f32],
        v: &[f32],
        probs: &[f32],
        dout: &[f32],
        mut dq: Option<&mut [f32]>,
        mut dk: Option<&mut [f32]>,
        mut dv: Option<&mut [f32]>,
    ) {
        let hd = self.layout.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut ds = vec![0.0f32; self.nk];
        for b in 0..self.batch {
            for h in 0..self.layout.n_heads {
                let kh = h / self.layout.group();
                for i in 0..self.nq {
                    let (lo, hi) = self.mask.span(i);
                    let base = ((b * self.layout.n_heads + h) * self.nq + i) * self.nk;
                    let p = &probs[base + lo..base + hi];
                    let qo = self.q_off(b, i, h);
                    let go = &dout[qo..qo + hd];
                    // dP_j = dO · v_j ; dS_j = P_j (dP_j - Σ P dP)
                    let mut weighted = 0.0f32;
                    for (idx, j) in (lo..hi).enumerate() {
                        let vj = &v[self.k_off(b, j, kh)..][..hd];
                        let dp = dot(go, vj);
                        ds[idx] = dp;
                        weighted += p[idx] * dp;
                    }
                    for idx in 0..hi - lo {
                        ds[idx] = p[idx] * (ds[idx] - weighted) * scale;
                    }
                    if let Some(dv) = dv.as_deref_mut() {
                        for (idx, j) in (lo..hi).enumerate() {
                            let dvj = &mut dv[self.k_off(b, j, kh)..][..hd];
                            for (d, &g) in dvj.iter_mut().zip(go) {
                                *d += p[idx] * g;
                            }
                        }
                    }
                    if let Some(dq) = dq.as_deref_mut() {
                        let dqi = &mut dq[qo..qo + hd];
                        for (idx, j) in (lo..hi).enumerate() {
                            let kj = &k[self.k_off(b, j, kh)..][..hd];
                            for (d, &kv) in dqi.iter_mut().zip(kj) {
                                *d += ds[idx] * kv;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        let qi = &q[qo..qo + hd];
                        for (idx, j) in (lo..hi).enumerate() {
                            let dkj = &mut dk[self.k_off(b, j, kh)..][..hd];
                            for (d, &qv) in dkj.iter_mut().zip(qi) {
                                *d += ds[idx] * qv;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// d/dx of `x * sigmoid(x)`.
pub(crate) fn silu_grad(x: f32) -> f32 {
    let s = crate::tensor::sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}
