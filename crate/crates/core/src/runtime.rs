//! Incremental inference: prefill, single-token decode and cache accounting.
//!
//! Every self-attention layer pass (layer × loop iteration) owns a key/value
//! cache. Windowed passes keep a ring of the last `W` rows; full-attention
//! passes keep every row. Decoder-decoder models additionally keep one
//! global `k̂`/`v̂` buffer shared by all cross-attention layers.

use std::fmt::Write as _;

use crate::config::{Block, ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::model::{CrossLayer, Ffn, ModelParams, SelfLayer};
use crate::nn::{masked_attention, rms_norm, rope_apply, swiglu, AttnGeometry, CausalMask, HeadLayout};
use crate::tensor::Tensor;

/// Matmul multiply-accumulates executed so far, by component.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MacCounter {
    /// Score and value mixing in self-attention passes.
    pub self_attn: u64,
    /// Score and value mixing against the global cache.
    pub global_attn: u64,
    /// Projections, feed-forward networks and the output head.
    pub linear: u64,
}

impl MacCounter {
    pub fn total(&self) -> u64 {
        self.self_attn + self.global_attn + self.linear
    }
}

/// Rows of keys and values for one layer pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub block: Block,
    pub layer: usize,
    pub iteration: usize,
    /// `Some(W)` for a ring holding at most `W` rows.
    pub window: Option<usize>,
    width: usize,
    k: Vec<f32>,
    v: Vec<f32>,
    /// Rows ever appended; ring slot of position `p` is `p % W`.
    written: usize,
}

impl LayerCache {
    fn new(block: Block, layer: usize, iteration: usize, window: Option<usize>, width: usize) -> Self {
        Self {
            block,
            layer,
            iteration,
            window,
            width,
            k: Vec::new(),
            v: Vec::new(),
            written: 0,
        }
    }

    /// Rows currently held.
    pub fn len(&self) -> usize {
        match self.window {
            Some(w) => self.written.min(w),
            None => self.written,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Live key plus value elements.
    pub fn elems(&self) -> usize {
        2 * self.len() * self.width
    }

    /// Oldest position still held.
    pub fn first_position(&self) -> usize {
        self.written - self.len()
    }

    fn slot(&self, pos: usize) -> usize {
        match self.window {
            Some(w) => pos % w,
            None => pos,
        }
    }

    /// Held rows in position order, as `[len, width]` key and value tensors.
    fn gather(&self) -> (Vec<f32>, Vec<f32>) {
        let w = self.width;
        let mut k = Vec::with_capacity(self.len() * w);
        let mut v = Vec::with_capacity(self.len() * w);
        for p in self.first_position()..self.written {
            let s = self.slot(p) * w;
            k.extend_from_slice(&self.k[s..s + w]);
            v.extend_from_slice(&self.v[s..s + w]);
        }
        (k, v)
    }

    fn append(&mut self, k: &[f32], v: &[f32]) {
        let w = self.width;
        let rows = k.len() / w;
        // rows that would be evicted within this same append are skipped
        let skip = match self.window {
            Some(win) => rows.saturating_sub(win),
            None => 0,
        };
        let need = match self.window {
            Some(win) => win * w,
            None => (self.written + rows) * w,
        };
        if self.k.len() < need {
            self.k.resize(need, 0.0);
            self.v.resize(need, 0.0);
        }
        for r in skip..rows {
            let s = self.slot(self.written + r) * w;
            self.k[s..s + w].copy_from_slice(&k[r * w..(r + 1) * w]);
            self.v[s..s + w].copy_from_slice(&v[r * w..(r + 1) * w]);
        }
        self.written += rows;
    }
}

/// Element counts of the live caches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    /// Buffers whose length equals the context: the global `k̂`/`v̂` and
    /// full-attention layer caches.
    pub global_elems: usize,
    /// Window-bounded ring buffers.
    pub local_elems: usize,
}

impl CacheStats {
    pub fn total_elems(&self) -> usize {
        self.global_elems + self.local_elems
    }

    pub fn total_bytes(&self, bytes_per_elem: usize) -> usize {
        self.total_elems() * bytes_per_elem
    }
}

/// Decoding state of one sequence.
#[derive(Debug, Clone)]
pub struct KvState {
    cfg: ModelConfig,
    global_k: Vec<f32>,
    global_v: Vec<f32>,
    /// One entry per self-attention layer pass, in execution order.
    caches: Vec<LayerCache>,
    produced_len: usize,
    macs: MacCounter,
}

impl KvState {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let kw = cfg.kv_width();
        let mut caches = Vec::new();
        for stage in cfg.plan() {
            if let Stage::SelfAttn {
                block,
                layers,
                window,
                loops,
                ..
            } = stage
            {
                for it in 0..loops {
                    for l in layers.clone() {
                        caches.push(LayerCache::new(block, l, it, window, kw));
                    }
                }
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            global_k: Vec::new(),
            global_v: Vec::new(),
            caches,
            produced_len: 0,
            macs: MacCounter::default(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn produced_len(&self) -> usize {
        self.produced_len
    }

    pub fn caches(&self) -> &[LayerCache] {
        &self.caches
    }

    /// Rows in the global `k̂`/`v̂` buffer.
    pub fn global_len(&self) -> usize {
        self.global_k.len() / self.cfg.kv_width()
    }

    pub fn global_k(&self) -> Option<Tensor> {
        self.global_tensor(&self.global_k)
    }

    pub fn global_v(&self) -> Option<Tensor> {
        self.global_tensor(&self.global_v)
    }

    fn global_tensor(&self, data: &[f32]) -> Option<Tensor> {
        (!data.is_empty()).then(|| Tensor::from_parts(vec![self.global_len(), self.cfg.kv_width()], data.to_vec()))
    }

    pub fn macs(&self) -> MacCounter {
        self.macs
    }

    pub fn reset_macs(&mut self) {
        self.macs = MacCounter::default();
    }

    /// Structured-text report of every buffer.
    pub fn dump(&self, bytes_per_elem: usize) -> String {
        let mut s = String::new();
        let stats = cache_stats(self);
        let _ = writeln!(s, "family = {}", self.cfg.family);
        let _ = writeln!(s, "loops = {}", self.cfg.loops);
        let _ = writeln!(s, "produced_len = {}", self.produced_len);
        let _ = writeln!(s, "kv_width = {}", self.cfg.kv_width());
        if self.cfg.has_global_kv() {
            let _ = writeln!(s, "[global] rows = {} elems = {}", self.global_len(), self.global_k.len() * 2);
        }
        for c in &self.caches {
            let kind = match c.window {
                Some(w) => format!("window({w})"),
                None => "full".to_string(),
            };
            let _ = writeln!(
                s,
                "[{}.{}.{}] kind = {kind} rows = {} first_position = {} elems = {}",
                c.block.name(),
                c.layer,
                c.iteration,
                c.len(),
                c.first_position(),
                c.elems()
            );
        }
        let _ = writeln!(s, "global_elems = {}", stats.global_elems);
        let _ = writeln!(s, "local_elems = {}", stats.local_elems);
        let _ = writeln!(s, "bytes_per_elem = {bytes_per_elem}");
        let _ = writeln!(s, "total_bytes = {}", stats.total_bytes(bytes_per_elem));
        s
    }
}

pub fn cache_stats(state: &KvState) -> CacheStats {
    let mut stats = CacheStats {
        global_elems: state.global_k.len() + state.global_v.len(),
        local_elems: 0,
    };
    for c in &state.caches {
        match c.window {
            Some(_) => stats.local_elems += c.elems(),
            None => stats.global_elems += c.elems(),
        }
    }
    stats
}

/// Absorbs `tokens` into fresh caches.
///
/// With `need_all_logits` false only the last position is pushed through
/// the cross-attention layers and the head, and `[1, V]` logits are
/// returned; otherwise `[n, V]`.
pub fn prefill(tokens: &[usize], params: &ModelParams, cfg: &ModelConfig, need_all_logits: bool) -> Result<(KvState, Tensor)> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("prefill needs at least one token".into()));
    }
    params.check_against(cfg)?;
    let mut state = KvState::new(cfg)?;
    let logits = state.absorb(tokens, params, need_all_logits)?;
    Ok((state, logits))
}

/// Extends the sequence by one token and returns its next-token logits `[V]`.
pub fn decode_step(state: &mut KvState, token: usize, params: &ModelParams, cfg: &ModelConfig) -> Result<Tensor> {
    if &state.cfg != cfg {
        return Err(Error::InvalidArgument("decode state was built for a different config".into()));
    }
    let logits = state.absorb(&[token], params, false)?;
    logits.reshape(&[cfg.vocab])
}

/// Greedy continuation of `prompt` by `steps` tokens using the caches.
pub fn greedy_generate(prompt: &[usize], steps: usize, params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<usize>> {
    let (mut state, logits) = prefill(prompt, params, cfg, false)?;
    let mut out = Vec::with_capacity(steps);
    let mut next = argmax(logits.data());
    for i in 0..steps {
        out.push(next);
        if i + 1 < steps {
            next = argmax(decode_step(&mut state, next, params, cfg)?.data());
        }
    }
    Ok(out)
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl KvState {
    /// Runs `tokens` (positions `produced_len..`) through every stage,
    /// appending to the caches.
    fn absorb(&mut self, tokens: &[usize], params: &ModelParams, need_all_logits: bool) -> Result<Tensor> {
        let cfg = self.cfg.clone();
        let (d, kw) = (cfg.d_model, cfg.kv_width());
        let p0 = self.produced_len;
        let m = tokens.len();
        let positions: Vec<usize> = (p0..p0 + m).collect();

        let mut rows = Vec::with_capacity(m * d);
        for &t in tokens {
            if t >= cfg.vocab {
                return Err(Error::InvalidArgument(format!("token {t} outside vocabulary of {}", cfg.vocab)));
            }
            rows.extend_from_slice(params.embed.row(t));
        }
        let mut x = Tensor::from_parts(vec![m, d], rows);
        // rows still carried through the network; shrinks to the last one
        // at the first cross stage unless every logit is wanted
        let mut live_rows = m;
        let mut cache_idx = 0;

        for stage in cfg.plan() {
            match stage {
                Stage::SelfAttn {
                    layers,
                    window,
                    rope,
                    loops,
                    ..
                } => {
                    for _ in 0..loops {
                        for li in layers.clone() {
                            x = self.self_pass(&x, &params.self_layers[li], cache_idx, &positions, window, rope)?;
                            cache_idx += 1;
                        }
                    }
                }
                Stage::GlobalKv => {
                    let g = params
                        .global_kv
                        .as_ref()
                        .ok_or_else(|| Error::InvalidArgument("missing global KV projection".into()))?;
                    let h = rms_norm(&x, &g.norm, cfg.norm_eps)?;
                    self.global_k.extend_from_slice(h.matmul(&g.wk)?.data());
                    self.global_v.extend_from_slice(h.matmul(&g.wv)?.data());
                    self.macs.linear += (2 * m * d * kw) as u64;
                }
                Stage::Cross { layers, loops } => {
                    if !need_all_logits && live_rows > 1 {
                        x = x.select_rows(&[live_rows - 1]);
                        live_rows = 1;
                    }
                    for _ in 0..loops {
                        for li in layers.clone() {
                            x = self.cross_pass(&x, &params.cross_layers[li])?;
                        }
                    }
                }
            }
        }
        if !need_all_logits && live_rows > 1 {
            x = x.select_rows(&[live_rows - 1]);
            live_rows = 1;
        }
        self.produced_len += m;
        let h = rms_norm(&x, &params.final_norm, cfg.norm_eps)?;
        self.macs.linear += (live_rows * d * cfg.vocab) as u64;
        h.matmul(&params.head)
    }

    fn self_pass(
        &mut self,
        x: &Tensor,
        layer: &SelfLayer<Tensor>,
        cache_idx: usize,
        positions: &[usize],
        window: Option<usize>,
        rope: bool,
    ) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (m, d, kw, qw) = (x.rows(), cfg.d_model, cfg.kv_width(), cfg.layout().q_width());
        let h = rms_norm(x, &layer.attn_norm, cfg.norm_eps)?;
        let mut q = h.matmul(&layer.wq)?;
        let mut k = h.matmul(&layer.wk)?;
        let v = h.matmul(&layer.wv)?;
        if rope {
            let rc = cfg.rope();
            q = rope_apply(&q, positions, &rc)?;
            k = rope_apply(&k, positions, &rc)?;
        }
        let cache = &mut self.caches[cache_idx];
        debug_assert_eq!(cache.written, positions[0]);
        let (mut k_all, mut v_all) = cache.gather();
        let held = k_all.len() / kw;
        k_all.extend_from_slice(k.data());
        v_all.extend_from_slice(v.data());
        cache.append(k.data(), v.data());

        let nk = held + m;
        let k_all = Tensor::from_parts(vec![nk, kw], k_all);
        let v_all = Tensor::from_parts(vec![nk, kw], v_all);
        let mask = CausalMask { offset: held, window };
        let a = masked_attention(&q, &k_all, &v_all, cfg.layout(), mask)?;
        self.macs.self_attn += attn_macs(&q, &k_all, cfg.layout(), mask)?;
        self.macs.linear += (m * (d * qw + 2 * d * kw + qw * d)) as u64;
        let y = x.add(&a.matmul(&layer.wo)?)?;
        self.ffn(&y, &layer.ffn)
    }

    fn cross_pass(&mut self, x: &Tensor, layer: &CrossLayer<Tensor>) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (m, d, kw, qw) = (x.rows(), cfg.d_model, cfg.kv_width(), cfg.layout().q_width());
        let nk = self.global_len();
        let h = rms_norm(x, &layer.attn_norm, cfg.norm_eps)?;
        let q = h.matmul(&layer.wq)?;
        let k = Tensor::from_parts(vec![nk, kw], self.global_k.clone());
        let v = Tensor::from_parts(vec![nk, kw], self.global_v.clone());
        let mask = CausalMask {
            offset: nk - m,
            window: None,
        };
        let a = masked_attention(&q, &k, &v, cfg.layout(), mask)?;
        self.macs.global_attn += attn_macs(&q, &k, cfg.layout(), mask)?;
        self.macs.linear += (m * 2 * d * qw) as u64;
        let y = x.add(&a.matmul(&layer.wo)?)?;
        self.ffn(&y, &layer.ffn)
    }

    fn ffn(&mut self, y: &Tensor, ffn: &Ffn<Tensor>) -> Result<Tensor> {
        let h = rms_norm(y, &ffn.norm, self.cfg.norm_eps)?;
        self.macs.linear += (y.rows() * 3 * self.cfg.d_model * self.cfg.ffn_hidden) as u64;
        y.add(&swiglu(&h, &ffn.w_gate, &ffn.w_up, &ffn.w_down)?)
    }
}

fn attn_macs(q: &Tensor, k: &Tensor, layout: HeadLayout, mask: CausalMask) -> Result<u64> {
    Ok(AttnGeometry::infer(q.shape(), k.shape(), k.shape(), layout, mask)?.macs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Family;
    use crate::model::{build_model, model_forward};

    fn tokens(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 37 + 11) % 256).collect()
    }

    #[test]
    fn full_prefill_matches_forward() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let p = build_model(&cfg).unwrap();
        let t = tokens(20);
        let (_, logits) = prefill(&t, &p, &cfg, true).unwrap();
        let full = model_forward(&t, &cfg, &p).unwrap();
        assert!(logits.max_abs_diff(&full) <= 1e-6);
    }

    #[test]
    fn early_exit_returns_last_row() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let p = build_model(&cfg).unwrap();
        let t = tokens(12);
        let (_, logits) = prefill(&t, &p, &cfg, false).unwrap();
        let full = model_forward(&t, &cfg, &p).unwrap();
        assert_eq!(logits.shape(), &[1, 256]);
        let last = full.select_rows(&[11]);
        assert!(logits.max_abs_diff(&last) <= 1e-6);
    }

    #[test]
    fn desk_cache_counts() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let p = build_model(&cfg).unwrap();
        let (state, _) = prefill(&tokens(100), &p, &cfg, false).unwrap();
        let s = cache_stats(&state);
        assert_eq!(s.global_elems, 2 * 100 * 32);
        assert_eq!(s.local_elems, 2 * 2 * 3 * 8 * 32);
        assert_eq!(s.total_bytes(2), (6400 + 3072) * 2);
    }

    #[test]
    fn empty_state_is_zero() {
        let state = KvState::new(&ModelConfig::desk(Family::Uyoco)).unwrap();
        assert_eq!(cache_stats(&state), CacheStats::default());
    }

    #[test]
    fn ring_keeps_last_window() {
        let cfg = ModelConfig::desk(Family::Yoco);
        let p = build_model(&cfg).unwrap();
        let (mut state, _) = prefill(&tokens(5), &p, &cfg, false).unwrap();
        for t in 0..10 {
            decode_step(&mut state, t, &p, &cfg).unwrap();
        }
        assert_eq!(state.produced_len(), 15);
        assert_eq!(state.global_len(), 15);
        for c in state.caches() {
            assert_eq!(c.len(), 8);
            assert_eq!(c.first_position(), 15 - 8);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let p = build_model(&cfg).unwrap();
        assert!(prefill(&[], &p, &cfg, false).is_err());
        let (mut state, _) = prefill(&[1, 2], &p, &cfg, false).unwrap();
        assert!(decode_step(&mut state, 999, &p, &cfg).is_err());
        let other = cfg.clone().with_loops(2);
        assert!(decode_step(&mut state, 1, &p, &other).is_err());
    }

    #[test]
    fn argmax_prefers_first_tie() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0, 1.0]), 1);
    }

    #[test]
    fn dump_lists_every_buffer() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let p = build_model(&cfg).unwrap();
        let (state, _) = prefill(&tokens(10), &p, &cfg, false).unwrap();
        let text = state.dump(2);
        assert_eq!(text.lines().filter(|l| l.starts_with("[self.")).count(), 6);
        assert!(text.contains("[global] rows = 10"));
        assert!(text.contains("local_elems = 3072"));
    }
}
