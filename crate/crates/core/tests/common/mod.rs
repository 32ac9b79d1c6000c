//! Fixtures shared by the gradient tests and the acceptance target.
#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use uyoco::autodiff::{grad_check_fd, Tape, Var};
use uyoco::config::{Family, ModelConfig};
use uyoco::model::{logits_on_tape, weight_shapes};
use uyoco::nn::{CausalMask, HeadLayout, RopeConfig};
use uyoco::Tensor;

pub const PRIMITIVE_TOL: f32 = 1e-3;
pub const END_TO_END_TOL: f32 = 1e-2;
/// Largest step the checker accepts. A 32-bit scalar near 1 carries
/// rounding near 1e-7, so smaller steps push the quotient into the noise.
pub const EPS: f32 = 1e-2;
/// Coordinates probed per tensor, chosen by tape-gradient magnitude so the
/// relative error is measured where it rises above the rounding floor.
pub const SAMPLE: Option<usize> = Some(6);
pub const END_TO_END_SEEDS: [u64; 3] = [60, 61, 62];

pub fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Weighted sum of the output so every coordinate gets a distinct gradient.
pub fn probe(tape: &mut Tape, y: Var, seed: u64) -> uyoco::Result<Var> {
    let w = tape.constant(rand_t(tape.shape(y), seed));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

/// `probe` of `y - y0` for a constant `y0`. Finite differences ignore the
/// shift, while centring keeps the scalar near zero so its own rounding
/// stays far below the signal.
pub fn centred_probe(tape: &mut Tape, y: Var, y0: &Tensor, seed: u64) -> uyoco::Result<Var> {
    let c = tape.constant(Tensor::from_fn(y0.shape(), |i| -y0.data()[i]));
    let d = tape.add(y, c)?;
    probe(tape, d, seed)
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> uyoco::Result<Var>>;

/// Every tape primitive behind a random probe, with inputs in [-1, 1].
pub fn primitive_cases() -> Vec<(&'static str, Vec<Tensor>, Objective)> {
    let l = HeadLayout::new(4, 2, 2).unwrap();
    let mut cases: Vec<(&'static str, Vec<Tensor>, Objective)> = vec![
        (
            "matmul",
            vec![rand_t(&[3, 4], 1), rand_t(&[4, 2], 2)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, 9)
            }),
        ),
        (
            "batched matmul",
            vec![rand_t(&[2, 3, 4], 1), rand_t(&[4, 2], 2)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                probe(t, y, 9)
            }),
        ),
        (
            "add/mul/scale",
            vec![rand_t(&[3, 4], 3), rand_t(&[3, 4], 4)],
            Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let m = t.mul(s, v[0])?;
                let y = t.scale(m, 1.7)?;
                probe(t, y, 9)
            }),
        ),
        (
            "silu",
            vec![rand_t(&[3, 5], 5)],
            Box::new(|t, v| {
                let y = t.silu(v[0])?;
                probe(t, y, 9)
            }),
        ),
        (
            "softmax",
            vec![rand_t(&[3, 5], 6)],
            Box::new(|t, v| {
                let y = t.softmax_rows(v[0])?;
                probe(t, y, 9)
            }),
        ),
        (
            "rms_norm",
            vec![rand_t(&[4, 6], 7), rand_t(&[6], 8)],
            Box::new(|t, v| {
                let y = t.rms_norm(v[0], v[1], 1e-6)?;
                probe(t, y, 9)
            }),
        ),
        (
            "rope",
            vec![rand_t(&[5, 8], 10)],
            Box::new(|t, v| {
                let y = t.rope(v[0], &[0, 1, 4, 9, 30], RopeConfig::new(4).unwrap())?;
                probe(t, y, 9)
            }),
        ),
        (
            "embedding",
            vec![rand_t(&[6, 4], 11)],
            Box::new(|t, v| {
                let y = t.embedding(v[0], &[1, 5, 1, 0], &[4])?;
                probe(t, y, 9)
            }),
        ),
        (
            "cross_entropy",
            vec![rand_t(&[4, 6], 12)],
            Box::new(|t, v| t.cross_entropy(v[0], &[1, 5, 0, 2], &[1.0, 0.0, 2.0, 1.0])),
        ),
    ];
    let masks: [(&'static str, CausalMask); 3] = [
        ("attention causal", CausalMask::causal()),
        ("attention sliding", CausalMask::sliding(3)),
        (
            "attention cross",
            CausalMask {
                offset: 3,
                window: None,
            },
        ),
    ];
    for (name, mask) in masks {
        let nq = 7 - mask.offset;
        cases.push((
            name,
            vec![rand_t(&[nq, 8], 20), rand_t(&[7, 4], 21), rand_t(&[7, 4], 22)],
            Box::new(move |t, v| {
                let y = t.attention(v[0], v[1], v[2], l, mask)?;
                probe(t, y, 23)
            }),
        ));
    }
    cases
}

pub fn primitive_errors() -> Vec<(&'static str, f32)> {
    primitive_cases()
        .into_iter()
        .map(|(name, params, f)| (name, grad_check_fd(f, &params, EPS, SAMPLE).unwrap()))
        .collect()
}

/// The tiny end-to-end model: d=8, L=2, T=3.
pub fn tiny() -> ModelConfig {
    let mut cfg = ModelConfig::desk(Family::Uyoco);
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.ffn_hidden = 24;
    cfg.window = 3;
    cfg.vocab = 16;
    cfg.loops = 3;
    cfg.validate().unwrap();
    cfg
}

/// Parameters drawn well away from zero so the finite-difference signal
/// dominates 32-bit rounding.
pub fn wide_params(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    weight_shapes(cfg)
        .entries()
        .into_iter()
        .map(|(_, s)| Tensor::uniform(s, -0.5, 0.5, &mut rng))
        .collect()
}

/// Cross-entropy plus a random linear read of the logits. Near a uniform
/// softmax the cross-entropy alone sends only about 1/V of gradient to each
/// logit, which leaves the cross-attention tensors under the rounding floor.
pub fn end_to_end_objective<'a>(
    cfg: &'a ModelConfig,
    read: &'a Tensor,
) -> impl Fn(&mut Tape, &[Var]) -> uyoco::Result<Var> + 'a {
    let tokens = [3, 1, 4, 1, 5, 9];
    let targets = [1, 4, 1, 5, 9, 2];
    move |t, v| {
        let w = weight_shapes(cfg).with_values(v)?;
        let logits = logits_on_tape(t, cfg, &w, &tokens, &[6])?;
        let ce = t.cross_entropy(logits, &targets, &[1.0; 6])?;
        let r = t.constant(read.clone());
        let m = t.mul(logits, r)?;
        let lin = t.sum(m)?;
        t.add(ce, lin)
    }
}

/// Worst relative error of the end-to-end check at one seed, probing the
/// top three coordinates of every parameter tensor.
pub fn end_to_end_error(seed: u64) -> f32 {
    let cfg = tiny();
    let params = wide_params(&cfg, seed);
    let read = rand_t(&[6, cfg.vocab], seed + 1000);
    grad_check_fd(end_to_end_objective(&cfg, &read), &params, EPS, Some(3)).unwrap()
}

/// Dense attention in f64 with an explicit visibility predicate; `q` is
/// `[nq, n_heads*dh]`, `k`/`v` are `[nk, n_kv_heads*dh]`.
pub fn dense_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    layout: HeadLayout,
    visible: impl Fn(usize, usize) -> bool,
) -> Tensor {
    let (nq, nk, dh) = (q.rows(), k.rows(), layout.head_dim);
    let group = layout.n_heads / layout.n_kv_heads;
    let mut out = vec![0.0f32; nq * layout.q_width()];
    for h in 0..layout.n_heads {
        let kh = h / group;
        for i in 0..nq {
            let qi = &q.row(i)[h * dh..(h + 1) * dh];
            let scores: Vec<Option<f64>> = (0..nk)
                .map(|j| {
                    visible(i, j).then(|| {
                        let kj = &k.row(j)[kh * dh..(kh + 1) * dh];
                        qi.iter().zip(kj).map(|(a, b)| *a as f64 * *b as f64).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let m = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - m).exp()).sum();
            for c in 0..dh {
                let acc: f64 = scores
                    .iter()
                    .enumerate()
                    .filter_map(|(j, s)| s.map(|s| (s - m).exp() / z * v.row(j)[kh * dh + c] as f64))
                    .sum();
                out[i * layout.q_width() + h * dh + c] = acc as f32;
            }
        }
    }
    Tensor::new(&[nq, layout.q_width()], out).unwrap()
}
