//! Model weights and the differentiable forward pass for every family.
//!
//! Weight containers are generic over their storage so the same structure
//! holds concrete tensors ([`ModelParams`]), shapes, or tape handles
//! ([`BoundParams`]).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{LayerTrace, PassLabel};
use crate::autodiff::{Tape, Var};
use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::nn::CausalMask;
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<T> {
    pub norm: T,
    pub w_gate: T,
    pub w_up: T,
    pub w_down: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfLayer<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
    pub ffn: Ffn<T>,
}

/// Cross-decoder layer: queries only; keys and values come from the shared
/// global projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLayer<T> {
    pub attn_norm: T,
    pub wq: T,
    pub wo: T,
    pub ffn: Ffn<T>,
}

/// The single key/value projection reused by every cross layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalKv<T> {
    pub norm: T,
    pub wk: T,
    pub wv: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights<T> {
    pub embed: T,
    pub self_layers: Vec<SelfLayer<T>>,
    pub cross_layers: Vec<CrossLayer<T>>,
    pub global_kv: Option<GlobalKv<T>>,
    pub final_norm: T,
    pub head: T,
}

pub type ModelParams = Weights<Tensor>;
pub type BoundParams = Weights<Var>;

/// Which residual branch a weight closes; used for depth-scaled init.
fn is_residual_out(name: &str) -> bool {
    name.ends_with(".wo") || name.ends_with(".w_down")
}

fn is_norm(name: &str) -> bool {
    name.ends_with("norm")
}

impl<T> Ffn<T> {
    fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Ffn<U> {
        Ffn {
            norm: f(&format!("{prefix}.ffn_norm"), &self.norm),
            w_gate: f(&format!("{prefix}.w_gate"), &self.w_gate),
            w_up: f(&format!("{prefix}.w_up"), &self.w_up),
            w_down: f(&format!("{prefix}.w_down"), &self.w_down),
        }
    }
}

impl<T> Weights<T> {
    /// Structure-preserving map; `f` sees each weight's dotted name.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        let embed = f("embed", &self.embed);
        let self_layers = self
            .self_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("self.{i}");
                SelfLayer {
                    attn_norm: f(&format!("{p}.attn_norm"), &l.attn_norm),
                    wq: f(&format!("{p}.wq"), &l.wq),
                    wk: f(&format!("{p}.wk"), &l.wk),
                    wv: f(&format!("{p}.wv"), &l.wv),
                    wo: f(&format!("{p}.wo"), &l.wo),
                    ffn: l.ffn.map(&p, &mut f),
                }
            })
            .collect();
        let global_kv = self.global_kv.as_ref().map(|g| GlobalKv {
            norm: f("global_kv.norm", &g.norm),
            wk: f("global_kv.wk", &g.wk),
            wv: f("global_kv.wv", &g.wv),
        });
        let cross_layers = self
            .cross_layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let p = format!("cross.{i}");
                CrossLayer {
                    attn_norm: f(&format!("{p}.attn_norm"), &l.attn_norm),
                    wq: f(&format!("{p}.wq"), &l.wq),
                    wo: f(&format!("{p}.wo"), &l.wo),
                    ffn: l.ffn.map(&p, &mut f),
                }
            })
            .collect();
        let final_norm = f("final_norm", &self.final_norm);
        let head = f("head", &self.head);
        Weights {
            embed,
            self_layers,
            cross_layers,
            global_kv,
            final_norm,
            head,
        }
    }

    /// Same structure filled from a flat list in [`Weights::entries`] order.
    pub fn with_values<U: Clone>(&self, values: &[U]) -> Result<Weights<U>> {
        let n = self.entries().len();
        if values.len() != n {
            return Err(Error::InvalidArgument(format!("expected {n} values, got {}", values.len())));
        }
        let mut it = values.iter();
        Ok(self.map(|_, _| it.next().expect("length checked").clone()))
    }

    /// All weights with their names, in [`Weights::map`] order.
    pub fn entries(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        out.push(("embed".to_string(), &self.embed));
        for (i, l) in self.self_layers.iter().enumerate() {
            let p = format!("self.{i}");
            out.push((format!("{p}.attn_norm"), &l.attn_norm));
            out.push((format!("{p}.wq"), &l.wq));
            out.push((format!("{p}.wk"), &l.wk));
            out.push((format!("{p}.wv"), &l.wv));
            out.push((format!("{p}.wo"), &l.wo));
            ffn_entries(&mut out, &p, &l.ffn);
        }
        if let Some(g) = &self.global_kv {
            out.push(("global_kv.norm".to_string(), &g.norm));
            out.push(("global_kv.wk".to_string(), &g.wk));
            out.push(("global_kv.wv".to_string(), &g.wv));
        }
        for (i, l) in self.cross_layers.iter().enumerate() {
            let p = format!("cross.{i}");
            out.push((format!("{p}.attn_norm"), &l.attn_norm));
            out.push((format!("{p}.wq"), &l.wq));
            out.push((format!("{p}.wo"), &l.wo));
            ffn_entries(&mut out, &p, &l.ffn);
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable references in [`Weights::entries`] order.
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.embed];
        for l in &mut self.self_layers {
            out.extend([&mut l.attn_norm, &mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo]);
            out.extend([&mut l.ffn.norm, &mut l.ffn.w_gate, &mut l.ffn.w_up, &mut l.ffn.w_down]);
        }
        if let Some(g) = &mut self.global_kv {
            out.extend([&mut g.norm, &mut g.wk, &mut g.wv]);
        }
        for l in &mut self.cross_layers {
            out.extend([&mut l.attn_norm, &mut l.wq, &mut l.wo]);
            out.extend([&mut l.ffn.norm, &mut l.ffn.w_gate, &mut l.ffn.w_up, &mut l.ffn.w_down]);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }
}

fn ffn_entries<'a, T>(out: &mut Vec<(String, &'a T)>, p: &str, f: &'a Ffn<T>) {
    out.push((format!("{p}.ffn_norm"), &f.norm));
    out.push((format!("{p}.w_gate"), &f.w_gate));
    out.push((format!("{p}.w_up"), &f.w_up));
    out.push((format!("{p}.w_down"), &f.w_down));
}

/// Shape of every weight implied by `cfg`.
pub fn weight_shapes(cfg: &ModelConfig) -> Weights<Vec<usize>> {
    let (d, h, v) = (cfg.d_model, cfg.ffn_hidden, cfg.vocab);
    let (qw, kw) = (cfg.layout().q_width(), cfg.kv_width());
    let ffn = || Ffn {
        norm: vec![d],
        w_gate: vec![d, h],
        w_up: vec![d, h],
        w_down: vec![h, d],
    };
    Weights {
        embed: vec![v, d],
        self_layers: (0..cfg.n_self_layers())
            .map(|_| SelfLayer {
                attn_norm: vec![d],
                wq: vec![d, qw],
                wk: vec![d, kw],
                wv: vec![d, kw],
                wo: vec![qw, d],
                ffn: ffn(),
            })
            .collect(),
        cross_layers: (0..cfg.n_cross_layers())
            .map(|_| CrossLayer {
                attn_norm: vec![d],
                wq: vec![d, qw],
                wo: vec![qw, d],
                ffn: ffn(),
            })
            .collect(),
        global_kv: cfg.has_global_kv().then(|| GlobalKv {
            norm: vec![d],
            wk: vec![d, kw],
            wv: vec![d, kw],
        }),
        final_norm: vec![d],
        head: vec![d, v],
    }
}

/// Deterministic initialization from `cfg.seed`.
///
/// Projections and embeddings draw from a normal truncated at two standard
/// deviations with std 0.02; the projections closing a residual branch are
/// further scaled by `1/sqrt(2 * layer_passes)`, loop iterations included.
/// Norm gains start at one.
pub fn build_model(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let residual_scale = 1.0 / (2.0 * cfg.total_layer_passes() as f32).sqrt();
    Ok(weight_shapes(cfg).map(|name, shape| {
        if is_norm(name) {
            Tensor::ones(shape)
        } else {
            let std = if is_residual_out(name) { INIT_STD * residual_scale } else { INIT_STD };
            Tensor::truncated_normal(shape, std, &mut rng)
        }
    }))
}

/// Closed-form parameter count. Loop count does not enter.
pub fn param_count(cfg: &ModelConfig) -> usize {
    let (d, h, v) = (cfg.d_model, cfg.ffn_hidden, cfg.vocab);
    let (qw, kw) = (cfg.layout().q_width(), cfg.kv_width());
    let ffn = d + 3 * d * h;
    let self_layer = d + d * qw + 2 * d * kw + qw * d + ffn;
    let cross_layer = d + d * qw + qw * d + ffn;
    let global = if cfg.has_global_kv() { d + 2 * d * kw } else { 0 };
    2 * v * d + d + cfg.n_self_layers() * self_layer + cfg.n_cross_layers() * cross_layer + global
}

impl ModelParams {
    pub fn num_elements(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Errors unless every weight has the shape `cfg` implies.
    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        let want = weight_shapes(cfg);
        let want = want.entries();
        let have = self.entries();
        if want.len() != have.len() {
            return Err(Error::InvalidArgument(format!(
                "parameters hold {} tensors, config {} expects {}",
                have.len(),
                cfg.family,
                want.len()
            )));
        }
        for ((_, w), (_, t)) in want.iter().zip(&have) {
            if t.shape() != w.as_slice() {
                return Err(Error::shape("params", t.shape(), w));
            }
        }
        Ok(())
    }

    /// Records every weight as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        self.map(|_, t| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

// ---------------------------------------------------------------------------
// forward pass on a tape

fn ffn_block(tape: &mut Tape, y: Var, ffn: &Ffn<Var>, eps: f32) -> Result<Var> {
    let h = tape.rms_norm(y, ffn.norm, eps)?;
    let gate = tape.matmul(h, ffn.w_gate)?;
    let gate = tape.silu(gate)?;
    let up = tape.matmul(h, ffn.w_up)?;
    let mixed = tape.mul(gate, up)?;
    let down = tape.matmul(mixed, ffn.w_down)?;
    tape.add(y, down)
}

/// One pre-norm self-attention block:
/// `y = x + Attn(norm(x))`, `out = y + SwiGLU(norm(y))`.
///
/// `window = None` gives full causal attention; `rope` rotates queries and
/// keys by their position.
pub fn self_attention_layer(
    tape: &mut Tape,
    x: Var,
    layer: &SelfLayer<Var>,
    positions: &[usize],
    cfg: &ModelConfig,
    window: Option<usize>,
    rope: bool,
) -> Result<Var> {
    let h = tape.rms_norm(x, layer.attn_norm, cfg.norm_eps)?;
    let mut q = tape.matmul(h, layer.wq)?;
    let mut k = tape.matmul(h, layer.wk)?;
    let v = tape.matmul(h, layer.wv)?;
    if rope {
        q = tape.rope(q, positions, cfg.rope())?;
        k = tape.rope(k, positions, cfg.rope())?;
    }
    let mask = CausalMask { offset: 0, window };
    let a = tape.attention(q, k, v, cfg.layout(), mask)?;
    let o = tape.matmul(a, layer.wo)?;
    let y = tape.add(x, o)?;
    ffn_block(tape, y, &layer.ffn, cfg.norm_eps)
}

/// Self-decoder layer: sliding-window attention with rotary positions.
pub fn self_decoder_layer(
    tape: &mut Tape,
    x: Var,
    layer: &SelfLayer<Var>,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    self_attention_layer(tape, x, layer, positions, cfg, Some(cfg.window), true)
}

/// Applies the whole self-decoder stack `loops` times with the same weights
/// and the same positions in every iteration.
pub fn usd_forward(
    tape: &mut Tape,
    x: Var,
    layers: &[SelfLayer<Var>],
    loops: usize,
    positions: &[usize],
    cfg: &ModelConfig,
) -> Result<Var> {
    if loops < 1 {
        return Err(Error::InvalidArgument("loop count must be at least 1".into()));
    }
    let mut x = x;
    for _ in 0..loops {
        for layer in layers {
            x = self_decoder_layer(tape, x, layer, positions, cfg)?;
        }
    }
    Ok(x)
}

/// `k̂ = norm(h) W_K`, `v̂ = norm(h) W_V`.
pub fn project_global_kv(tape: &mut Tape, h: Var, kv: &GlobalKv<Var>, eps: f32) -> Result<(Var, Var)> {
    let n = tape.rms_norm(h, kv.norm, eps)?;
    Ok((tape.matmul(n, kv.wk)?, tape.matmul(n, kv.wv)?))
}

/// One cross-decoder layer. Queries are aligned with the last rows of the
/// cache; no positional transform is applied.
pub fn cross_decoder_layer(
    tape: &mut Tape,
    x: Var,
    k_hat: Var,
    v_hat: Var,
    layer: &CrossLayer<Var>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let nq = seq_len(tape.shape(x));
    let nk = seq_len(tape.shape(k_hat));
    if nk < nq {
        return Err(Error::InvalidArgument(format!(
            "cache of {nk} rows is shorter than {nq} queries"
        )));
    }
    let h = tape.rms_norm(x, layer.attn_norm, cfg.norm_eps)?;
    let q = tape.matmul(h, layer.wq)?;
    let mask = CausalMask {
        offset: nk - nq,
        window: None,
    };
    let a = tape.attention(q, k_hat, v_hat, cfg.layout(), mask)?;
    let o = tape.matmul(a, layer.wo)?;
    let y = tape.add(x, o)?;
    ffn_block(tape, y, &layer.ffn, cfg.norm_eps)
}

pub fn cross_decoder_forward(
    tape: &mut Tape,
    x: Var,
    k_hat: Var,
    v_hat: Var,
    layers: &[CrossLayer<Var>],
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut x = x;
    for layer in layers {
        x = cross_decoder_layer(tape, x, k_hat, v_hat, layer, cfg)?;
    }
    Ok(x)
}

fn seq_len(shape: &[usize]) -> usize {
    shape[shape.len() - 2]
}

/// Hidden states after the last layer (before the final norm).
///
/// `tokens` is row-major with shape `batch_shape`, whose last axis is the
/// sequence. When `trace` is given, the state after every layer pass is
/// recorded.
pub fn forward_hidden(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &BoundParams,
    tokens: &[usize],
    batch_shape: &[usize],
    mut trace: Option<&mut LayerTrace>,
) -> Result<Var> {
    let n = *batch_shape
        .last()
        .ok_or_else(|| Error::InvalidArgument("empty batch shape".into()))?;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    let positions: Vec<usize> = (0..n).collect();
    let mut x = tape.embedding(w.embed, tokens, batch_shape)?;
    let mut shared: Option<(Var, Var)> = None;
    let mut record = |tape: &Tape, label: PassLabel, x: Var| {
        if let Some(t) = trace.as_deref_mut() {
            t.push(label, tape.value(x).clone());
        }
    };
    for stage in cfg.plan() {
        match stage {
            Stage::SelfAttn {
                block,
                layers,
                window,
                rope,
                loops,
            } => {
                for it in 0..loops {
                    for li in layers.clone() {
                        x = self_attention_layer(tape, x, &w.self_layers[li], &positions, cfg, window, rope)?;
                        record(tape, PassLabel { block, layer: li, iteration: it }, x);
                    }
                }
            }
            Stage::GlobalKv => {
                let g = w
                    .global_kv
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("missing global KV projection".into()))?;
                shared = Some(project_global_kv(tape, x, g, cfg.norm_eps)?);
            }
            Stage::Cross { layers, loops } => {
                let (k_hat, v_hat) =
                    shared.ok_or_else(|| Error::InvalidArgument("cross stage before global KV".into()))?;
                for it in 0..loops {
                    for li in layers.clone() {
                        x = cross_decoder_layer(tape, x, k_hat, v_hat, &w.cross_layers[li], cfg)?;
                        record(
                            tape,
                            PassLabel {
                                block: crate::config::Block::CrossDecoder,
                                layer: li,
                                iteration: it,
                            },
                            x,
                        );
                    }
                }
            }
        }
    }
    Ok(x)
}

/// Logits `[.., n, vocab]` on the tape.
pub fn logits_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &BoundParams,
    tokens: &[usize],
    batch_shape: &[usize],
) -> Result<Var> {
    let h = forward_hidden(tape, cfg, w, tokens, batch_shape, None)?;
    let h = tape.rms_norm(h, w.final_norm, cfg.norm_eps)?;
    tape.matmul(h, w.head)
}

/// Full-sequence logits `[n, vocab]` for one token sequence.
pub fn model_forward(tokens: &[usize], cfg: &ModelConfig, params: &ModelParams) -> Result<Tensor> {
    params.check_against(cfg)?;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let out = logits_on_tape(&mut tape, cfg, &w, tokens, &[tokens.len()])?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Family, LoopPosition};

    fn all_configs() -> Vec<ModelConfig> {
        let mut v: Vec<_> = Family::ALL.iter().map(|&f| ModelConfig::desk(f)).collect();
        for p in [LoopPosition::CrossDecoderSharedKv, LoopPosition::CrossDecoderSelfAttn] {
            let mut c = ModelConfig::desk(Family::Uyoco);
            c.loop_position = p;
            v.push(c);
        }
        v
    }

    #[test]
    fn closed_form_count_matches_enumeration() {
        for cfg in all_configs() {
            let p = build_model(&cfg).unwrap();
            assert_eq!(p.num_elements(), param_count(&cfg), "{:?}", cfg.family);
        }
    }

    #[test]
    fn count_ignores_loops() {
        for f in [Family::Uyoco, Family::UniversalTransformer, Family::Rins] {
            let a = param_count(&ModelConfig::desk(f).with_loops(1));
            let b = param_count(&ModelConfig::desk(f).with_loops(7));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn vocab_delta_is_embedding_plus_head_row() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        let mut bigger = cfg.clone();
        bigger.vocab += 1;
        assert_eq!(param_count(&bigger) - param_count(&cfg), 2 * cfg.d_model);
    }

    #[test]
    fn yoco_has_fewer_kv_projections() {
        let count = |cfg: &ModelConfig| {
            let p = build_model(cfg).unwrap();
            p.entries()
                .iter()
                .filter(|(n, _)| n.ends_with(".wk") || n.ends_with(".wv"))
                .count()
        };
        let t = ModelConfig::desk(Family::Transformer);
        let y = ModelConfig::desk(Family::Uyoco);
        assert_eq!(count(&t), 2 * 4);
        assert_eq!(count(&y), 2 * (2 + 1));
    }

    #[test]
    fn odd_layers_rejected() {
        let mut cfg = ModelConfig::desk(Family::Uyoco);
        cfg.n_layers = 5;
        assert!(matches!(build_model(&cfg), Err(Error::Config { field: "n_layers", .. })));
    }

    #[test]
    fn init_is_deterministic_and_seeded() {
        let cfg = ModelConfig::desk(Family::Uyoco);
        assert_eq!(build_model(&cfg).unwrap(), build_model(&cfg).unwrap());
        let mut other = cfg.clone();
        other.seed = 1;
        assert_ne!(build_model(&cfg).unwrap(), build_model(&other).unwrap());
    }

    #[test]
    fn out_of_vocab_token_is_an_error() {
        let cfg = ModelConfig::desk(Family::Yoco);
        let p = build_model(&cfg).unwrap();
        assert!(model_forward(&[1, 2, 256], &cfg, &p).is_err());
    }

    #[test]
    fn mismatched_params_rejected() {
        let p = build_model(&ModelConfig::desk(Family::Transformer)).unwrap();
        assert!(model_forward(&[1, 2], &ModelConfig::desk(Family::Yoco), &p).is_err());
    }
}
