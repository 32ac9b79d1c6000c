//! Self-checks behind `uyoco check`. Each returns a verdict line and
//! whether it passed.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use uyoco::autodiff::{grad_check_fd, Tape, Var};
use uyoco::cost::{kv_cache_split, ArchDescriptor};
use uyoco::model::{logits_on_tape, weight_shapes};
use uyoco::nn::{attention_cross, attention_swa, AttnParams, HeadLayout};
use uyoco::runtime::{argmax, cache_stats, decode_step, greedy_generate, prefill};
use uyoco::{build_model, model_forward, Family, LoopPosition, ModelConfig, Result, Tensor};

pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn uniform(shape: &[usize], scale: f32, seed: u64) -> Tensor {
    Tensor::uniform(shape, -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Every family at the configured dimensions; recursive ones keep `T`.
fn family_variants(base: &ModelConfig) -> Vec<ModelConfig> {
    let t = base.loops.max(1);
    let mut v = Vec::new();
    for f in Family::ALL {
        let mut c = base.clone().with_family(f);
        c.loops = if f.is_recursive() { t } else { 1 };
        c.loop_position = LoopPosition::SelfDecoder;
        v.push(c);
    }
    for p in [LoopPosition::CrossDecoderSharedKv, LoopPosition::CrossDecoderSelfAttn] {
        let mut c = base.clone().with_family(Family::Uyoco).with_loops(t);
        c.loop_position = p;
        v.push(c);
    }
    v
}

fn probe_tokens(n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 131 + 5) % vocab).collect()
}

/// End-to-end finite-difference check on a tiny uyoco (d=8, L=2, T=3):
/// summed cross-entropy plus a fixed linear read of the logits, top three
/// coordinates of every tensor, eps 1e-2.
pub fn grad() -> Result<CheckResult> {
    let mut cfg = ModelConfig::desk(Family::Uyoco);
    cfg.n_layers = 2;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_kv_heads = 1;
    cfg.ffn_hidden = 24;
    cfg.window = 3;
    cfg.vocab = 16;
    cfg.loops = 3;
    cfg.validate()?;
    let shapes = weight_shapes(&cfg);
    let tokens = [3, 1, 4, 1, 5, 9];
    let targets = [1, 4, 1, 5, 9, 2];
    let mut worst = 0.0f32;
    for seed in [60u64, 61, 62] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Tensor> = shapes
            .entries()
            .into_iter()
            .map(|(_, s)| Tensor::uniform(s, -0.5, 0.5, &mut rng))
            .collect();
        let read = uniform(&[6, cfg.vocab], 1.0, seed + 1000);
        let f = |t: &mut Tape, v: &[Var]| {
            let w = shapes.with_values(v)?;
            let logits = logits_on_tape(t, &cfg, &w, &tokens, &[6])?;
            let ce = t.cross_entropy(logits, &targets, &[1.0; 6])?;
            let r = t.constant(read.clone());
            let m = t.mul(logits, r)?;
            let lin = t.sum(m)?;
            t.add(ce, lin)
        };
        worst = worst.max(grad_check_fd(f, &params, 1e-2, Some(3))?);
    }
    Ok(CheckResult {
        name: "grad",
        passed: worst <= 1e-2,
        detail: format!("end-to-end max relative error {worst:.2e} (limit 1e-2)"),
    })
}

pub fn decode_equivalence(base: &ModelConfig) -> Result<CheckResult> {
    let mut worst = 0.0f32;
    let mut greedy_ok = true;
    let mut detail = String::new();
    for cfg in family_variants(base) {
        let params = build_model(&cfg)?;
        let tokens = probe_tokens(64, cfg.vocab);
        let full = model_forward(&tokens, &cfg, &params)?;
        let (mut state, first) = prefill(&tokens[..1], &params, &cfg, false)?;
        let mut drift = first.max_abs_diff(&full.select_rows(&[0]));
        for (i, &t) in tokens.iter().enumerate().skip(1) {
            let logits = decode_step(&mut state, t, &params, &cfg)?;
            drift = drift.max(logits.max_abs_diff(&full.select_rows(&[i]).reshape(&[cfg.vocab])?));
        }
        let prompt = &tokens[..8];
        let fast = greedy_generate(prompt, 8, &params, &cfg)?;
        let mut slow = prompt.to_vec();
        for _ in 0..8 {
            let logits = model_forward(&slow, &cfg, &params)?;
            slow.push(argmax(logits.row(slow.len() - 1)));
        }
        let same = fast == slow[prompt.len()..];
        greedy_ok &= same;
        worst = worst.max(drift);
        let _ = writeln!(
            detail,
            "  {} {} T={}: drift {drift:.2e}, greedy {}",
            cfg.family,
            cfg.loop_position,
            cfg.loops,
            if same { "identical" } else { "DIFFERS" }
        );
    }
    Ok(CheckResult {
        name: "decode-equivalence",
        passed: worst <= 1e-4 && greedy_ok,
        detail: format!("max drift {worst:.2e} (limit 1e-4) over 64 tokens\n{detail}"),
    })
}

/// f64 attention with an explicit visibility predicate.
fn dense_attention(q: &Tensor, k: &Tensor, v: &Tensor, l: HeadLayout, visible: impl Fn(usize, usize) -> bool) -> Tensor {
    let (nq, nk, dh) = (q.rows(), k.rows(), l.head_dim);
    let group = l.n_heads / l.n_kv_heads;
    let mut out = vec![0.0f32; nq * l.q_width()];
    for h in 0..l.n_heads {
        let kh = h / group;
        for i in 0..nq {
            let s: Vec<(usize, f64)> = (0..nk)
                .filter(|&j| visible(i, j))
                .map(|j| {
                    let dot: f64 = (0..dh)
                        .map(|c| q.row(i)[h * dh + c] as f64 * k.row(j)[kh * dh + c] as f64)
                        .sum();
                    (j, dot / (dh as f64).sqrt())
                })
                .collect();
            let m = s.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|p| (p.1 - m).exp()).sum();
            for c in 0..dh {
                let acc: f64 = s.iter().map(|&(j, x)| (x - m).exp() / z * v.row(j)[kh * dh + c] as f64).sum();
                out[i * l.q_width() + h * dh + c] = acc as f32;
            }
        }
    }
    Tensor::new(&[nq, l.q_width()], out).expect("shape matches data")
}

pub fn swa_oracle() -> Result<CheckResult> {
    let l = HeadLayout::new(4, 2, 4)?;
    let eye = Tensor::from_fn(&[16, 16], |i| if i % 17 == 0 { 1.0 } else { 0.0 });
    let unused = Tensor::zeros(&[16, 8]);
    let p = AttnParams::new(l, eye.clone(), unused.clone(), unused, eye)?;
    let mut swa = 0.0f32;
    for (n, w) in [(12, 1), (12, 4), (12, 12), (12, 40), (30, 8)] {
        let (q, k, v) = (uniform(&[n, 16], 1.0, 1), uniform(&[n, 8], 1.0, 2), uniform(&[n, 8], 1.0, 3));
        let got = attention_swa(&q, &k, &v, w, &p)?;
        swa = swa.max(got.max_abs_diff(&dense_attention(&q, &k, &v, l, |i, j| j <= i && i - j < w)));
    }
    let mut cross = 0.0f32;
    for (nq, nk) in [(1, 9), (5, 9), (9, 9)] {
        let (q, k, v) = (uniform(&[nq, 16], 1.0, 4), uniform(&[nk, 8], 1.0, 5), uniform(&[nk, 8], 1.0, 6));
        let off = nk - nq;
        let got = attention_cross(&q, &k, &v, off, &p)?;
        cross = cross.max(got.max_abs_diff(&dense_attention(&q, &k, &v, l, |i, j| j <= i + off)));
    }
    Ok(CheckResult {
        name: "swa-oracle",
        passed: swa <= 1e-6 && cross <= 1e-6,
        detail: format!("sliding window {swa:.1e}, cross {cross:.1e} vs dense oracle (limit 1e-6)"),
    })
}

pub fn cache_accounting(base: &ModelConfig) -> Result<CheckResult> {
    let mut mismatches = Vec::new();
    let mut points = 0;
    let n_max = 256;
    for cfg in family_variants(base) {
        let a = ArchDescriptor::from_config(&cfg, 4)?;
        let params = build_model(&cfg)?;
        let tokens = probe_tokens(n_max, cfg.vocab);
        let (mut state, _) = prefill(&tokens[..1], &params, &cfg, false)?;
        for n in 1..=n_max {
            if n > 1 {
                decode_step(&mut state, tokens[n - 1], &params, &cfg)?;
            }
            let s = cache_stats(&state);
            let f = kv_cache_split(&a, n as u64);
            points += 1;
            if (s.global_elems as u64 * 4, s.local_elems as u64 * 4) != (f.global, f.local) {
                mismatches.push(format!("{} {} N={n}", cfg.family, cfg.loop_position));
            }
        }
    }
    Ok(CheckResult {
        name: "cache-accounting",
        passed: mismatches.is_empty(),
        detail: format!(
            "{points} (config, N) points, {} mismatches{}",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(", first {m}"))
        ),
    })
}
