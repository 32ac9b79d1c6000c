mod common;

use common::*;
use uyoco::autodiff::{grad_check_fd, Tape, Var};
use uyoco::config::ModelConfig;
use uyoco::model::{self_decoder_layer, usd_forward, weight_shapes, Ffn, SelfLayer};
use uyoco::Tensor;

#[test]
fn primitive_gradients() {
    for (name, err) in primitive_errors() {
        assert!(err <= PRIMITIVE_TOL, "{name}: relative error {err}");
    }
}

fn layer_from(v: &[Var]) -> SelfLayer<Var> {
    SelfLayer {
        attn_norm: v[0],
        wq: v[1],
        wk: v[2],
        wv: v[3],
        wo: v[4],
        ffn: Ffn {
            norm: v[5],
            w_gate: v[6],
            w_up: v[7],
            w_down: v[8],
        },
    }
}

/// Input rows followed by the nine tensors of self layer 0.
fn layer_inputs(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
    let all = wide_params(cfg, seed);
    let mut out = vec![rand_t(&[6, cfg.d_model], seed + 1)];
    out.extend_from_slice(&all[1..10]);
    out
}

#[test]
fn one_layer_gradient() {
    let cfg = tiny();
    let positions: Vec<usize> = (0..6).collect();
    let err = grad_check_fd(
        |t, v| {
            let y = self_decoder_layer(t, v[0], &layer_from(&v[1..]), &positions, &cfg)?;
            probe(t, y, 40)
        },
        &layer_inputs(&cfg, 30),
        EPS,
        SAMPLE,
    )
    .unwrap();
    assert!(err <= PRIMITIVE_TOL, "self-decoder layer: {err}");
}

#[test]
fn shared_loop_weights_accumulate_per_iteration_gradients() {
    let cfg = tiny();
    let inputs = layer_inputs(&cfg, 50);
    let positions: Vec<usize> = (0..6).collect();
    let grad_wq = |loops: usize| {
        let mut t = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
        let y = usd_forward(&mut t, v[0], &[layer_from(&v[1..])], loops, &positions, &cfg).unwrap();
        let loss = probe(&mut t, y, 51).unwrap();
        t.backward(loss).unwrap();
        t.grad(v[2]).unwrap().to_vec()
    };
    // each iteration contributes at a different input, so the looped
    // gradient is not the single-pass gradient scaled
    let (g1, g3) = (grad_wq(1), grad_wq(3));
    assert!(g1.iter().zip(&g3).any(|(a, b)| (a * 3.0 - b).abs() > 1e-4));
    let y0 = {
        let mut t = Tape::new();
        let v: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let y = usd_forward(&mut t, v[0], &[layer_from(&v[1..])], 3, &positions, &cfg).unwrap();
        t.value(y).clone()
    };
    let err = grad_check_fd(
        |t, v| {
            let y = usd_forward(t, v[0], &[layer_from(&v[1..])], 3, &positions, &cfg)?;
            centred_probe(t, y, &y0, 51)
        },
        &inputs,
        EPS,
        SAMPLE,
    )
    .unwrap();
    assert!(err <= PRIMITIVE_TOL, "looped self-decoder: {err}");
}

#[test]
fn end_to_end_uyoco_gradient() {
    let cfg = tiny();
    for seed in END_TO_END_SEEDS {
        let err = end_to_end_error(seed);
        assert!(err <= END_TO_END_TOL, "seed {seed}: end-to-end relative error {err}");
    }

    // every tensor receives a nonzero gradient
    let params = wide_params(&cfg, 60);
    let read = rand_t(&[6, cfg.vocab], 1060);
    let f = end_to_end_objective(&cfg, &read);
    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
    let loss = f(&mut t, &vars).unwrap();
    t.backward(loss).unwrap();
    for ((name, _), v) in weight_shapes(&cfg).entries().iter().zip(&vars) {
        assert!(t.grad(*v).unwrap().iter().any(|&g| g != 0.0), "{name} has zero gradient");
    }
}

#[test]
fn shared_gradient_is_sum_over_untied_iterations() {
    let cfg = tiny();
    let inputs = layer_inputs(&cfg, 70);
    let positions: Vec<usize> = (0..6).collect();

    let mut t = Tape::new();
    let v: Vec<Var> = inputs.iter().map(|x| t.param(x.clone())).collect();
    let y = usd_forward(&mut t, v[0], &[layer_from(&v[1..])], 3, &positions, &cfg).unwrap();
    let loss = probe(&mut t, y, 71).unwrap();
    t.backward(loss).unwrap();
    let shared: Vec<Vec<f32>> = v[1..].iter().map(|&w| t.grad(w).unwrap().to_vec()).collect();

    // one private copy of the weights per iteration
    let mut u = Tape::new();
    let mut h = u.param(inputs[0].clone());
    let mut copies = Vec::new();
    for _ in 0..3 {
        let w: Vec<Var> = inputs[1..].iter().map(|x| u.param(x.clone())).collect();
        h = self_decoder_layer(&mut u, h, &layer_from(&w), &positions, &cfg).unwrap();
        copies.push(w);
    }
    let loss = probe(&mut u, h, 71).unwrap();
    u.backward(loss).unwrap();
    for (i, g) in shared.iter().enumerate() {
        let summed: Vec<f32> = (0..g.len())
            .map(|c| copies.iter().map(|w| u.grad(w[i]).unwrap()[c]).sum())
            .collect();
        let scale = g.iter().fold(1f32, |m, x| m.max(x.abs()));
        let diff = g.iter().zip(&summed).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-5 * scale, "tensor {i}: {diff}");
    }
}
