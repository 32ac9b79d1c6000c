use uyoco::autodiff::{Tape, Var};
use uyoco::config::{Family, ModelConfig};
use uyoco::model::{build_model, model_forward, project_global_kv, usd_forward, GlobalKv, ModelParams, SelfLayer};
use uyoco::nn::{
    attention_cross, attention_full_causal, attention_swa, attention_weights, rms_norm, rope_apply, swiglu, AttnParams,
    CausalMask,
};
use uyoco::Tensor;

fn tokens(n: usize) -> Vec<usize> {
    (0..n).map(|i| (i * 37 + 11) % 256).collect()
}

/// `x + SwiGLU(norm(x))`, eager.
fn eager_ffn(x: &Tensor, l: &uyoco::model::Ffn<Tensor>, eps: f32) -> Tensor {
    let h = rms_norm(x, &l.norm, eps).unwrap();
    x.add(&swiglu(&h, &l.w_gate, &l.w_up, &l.w_down).unwrap()).unwrap()
}

fn eager_self_layer(x: &Tensor, l: &SelfLayer<Tensor>, cfg: &ModelConfig, window: Option<usize>) -> Tensor {
    let p = AttnParams::new(cfg.layout(), l.wq.clone(), l.wk.clone(), l.wv.clone(), l.wo.clone()).unwrap();
    let h = rms_norm(x, &l.attn_norm, cfg.norm_eps).unwrap();
    let (q, k, v) = p.project(&h).unwrap();
    let pos: Vec<usize> = (0..x.rows()).collect();
    let q = rope_apply(&q, &pos, &cfg.rope()).unwrap();
    let k = rope_apply(&k, &pos, &cfg.rope()).unwrap();
    let a = match window {
        Some(w) => attention_swa(&q, &k, &v, w, &p).unwrap(),
        None => attention_full_causal(&q, &k, &v, &p).unwrap(),
    };
    eager_ffn(&x.add(&a).unwrap(), &l.ffn, cfg.norm_eps)
}

fn eager_head(x: &Tensor, params: &ModelParams, eps: f32) -> Tensor {
    rms_norm(x, &params.final_norm, eps).unwrap().matmul(&params.head).unwrap()
}

fn eager_transformer(toks: &[usize], cfg: &ModelConfig, params: &ModelParams) -> Tensor {
    let mut x = params.embed.select_rows(toks);
    for l in &params.self_layers {
        x = eager_self_layer(&x, l, cfg, None);
    }
    eager_head(&x, params, cfg.norm_eps)
}

fn eager_uyoco(toks: &[usize], cfg: &ModelConfig, params: &ModelParams) -> Tensor {
    let mut x = params.embed.select_rows(toks);
    for _ in 0..cfg.loops {
        for l in &params.self_layers {
            x = eager_self_layer(&x, l, cfg, Some(cfg.window));
        }
    }
    let g = params.global_kv.as_ref().unwrap();
    let h = rms_norm(&x, &g.norm, cfg.norm_eps).unwrap();
    let (k_hat, v_hat) = (h.matmul(&g.wk).unwrap(), h.matmul(&g.wv).unwrap());
    for l in &params.cross_layers {
        let unused = Tensor::zeros(&[cfg.d_model, cfg.kv_width()]);
        let p = AttnParams::new(cfg.layout(), l.wq.clone(), unused.clone(), unused, l.wo.clone()).unwrap();
        let q = rms_norm(&x, &l.attn_norm, cfg.norm_eps).unwrap().matmul(&l.wq).unwrap();
        let a = attention_cross(&q, &k_hat, &v_hat, 0, &p).unwrap();
        x = eager_ffn(&x.add(&a).unwrap(), &l.ffn, cfg.norm_eps);
    }
    eager_head(&x, params, cfg.norm_eps)
}

#[test]
fn transformer_matches_eager_composition() {
    let mut cfg = ModelConfig::desk(Family::Transformer);
    cfg.n_layers = 2;
    let params = build_model(&cfg).unwrap();
    let t = tokens(20);
    let diff = model_forward(&t, &cfg, &params).unwrap().max_abs_diff(&eager_transformer(&t, &cfg, &params));
    assert!(diff <= 1e-5, "{diff}");
}

#[test]
fn uyoco_matches_eager_composition() {
    let cfg = ModelConfig::desk(Family::Uyoco);
    let params = build_model(&cfg).unwrap();
    let t = tokens(20);
    let diff = model_forward(&t, &cfg, &params).unwrap().max_abs_diff(&eager_uyoco(&t, &cfg, &params));
    assert!(diff <= 1e-5, "{diff}");
}

#[test]
fn single_loop_families_reduce_to_their_base() {
    let t = tokens(24);
    for (looped, base) in [
        (Family::Uyoco, Family::Yoco),
        (Family::UniversalTransformer, Family::Transformer),
        (Family::Rins, Family::Transformer),
    ] {
        let base_cfg = ModelConfig::desk(base);
        let params = build_model(&base_cfg).unwrap();
        let cfg = ModelConfig::desk(looped).with_loops(1);
        let want = model_forward(&t, &base_cfg, &params).unwrap();
        let diff = model_forward(&t, &cfg, &params).unwrap().max_abs_diff(&want);
        assert!(diff <= 1e-6, "{looped} T=1 vs {base}: {diff}");
    }
}

#[test]
fn zero_residual_branches_leave_the_embedding() {
    for f in Family::ALL {
        let cfg = ModelConfig::desk(f);
        let mut params = build_model(&cfg).unwrap();
        let names: Vec<String> = params.entries().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(params.values_mut()) {
            if name.ends_with(".wo") || name.ends_with(".w_down") {
                *t = Tensor::zeros(t.shape());
            }
        }
        let toks = tokens(12);
        let want = eager_head(&params.embed.select_rows(&toks), &params, cfg.norm_eps);
        let diff = model_forward(&toks, &cfg, &params).unwrap().max_abs_diff(&want);
        assert!(diff <= 1e-6, "{f}: {diff}");
    }
}

fn bind_self_layers(tape: &mut Tape, params: &ModelParams) -> Vec<SelfLayer<Var>> {
    params.bind(tape, false).self_layers
}

#[test]
fn two_loops_equal_two_single_passes() {
    let cfg = ModelConfig::desk(Family::Uyoco);
    let params = build_model(&cfg).unwrap();
    let pos: Vec<usize> = (0..10).collect();
    let x0 = params.embed.select_rows(&tokens(10));
    let mut t = Tape::new();
    let layers = bind_self_layers(&mut t, &params);
    let x = t.constant(x0);
    let twice = usd_forward(&mut t, x, &layers, 2, &pos, &cfg).unwrap();
    let once = usd_forward(&mut t, x, &layers, 1, &pos, &cfg).unwrap();
    let again = usd_forward(&mut t, once, &layers, 1, &pos, &cfg).unwrap();
    assert_eq!(t.value(twice), t.value(again));
    assert!(usd_forward(&mut t, x, &layers, 0, &pos, &cfg).is_err());
}

#[test]
fn zero_key_projection_gives_zero_keys_and_uniform_attention() {
    let cfg = ModelConfig::desk(Family::Uyoco);
    let params = build_model(&cfg).unwrap();
    let g = params.global_kv.as_ref().unwrap();
    let mut t = Tape::new();
    let kv = GlobalKv {
        norm: t.constant(g.norm.clone()),
        wk: t.constant(Tensor::zeros(g.wk.shape())),
        wv: t.constant(g.wv.clone()),
    };
    let h = t.constant(params.embed.select_rows(&tokens(7)));
    let (k, v) = project_global_kv(&mut t, h, &kv, cfg.norm_eps).unwrap();
    assert!(t.value(k).data().iter().all(|&x| x == 0.0));
    let q = Tensor::from_fn(&[7, cfg.d_model], |i| (i as f32 * 0.37).sin());
    let w = attention_weights(&q, t.value(k), t.value(v), cfg.layout(), CausalMask::causal()).unwrap();
    // row i spreads evenly over its i + 1 visible keys
    for h in 0..cfg.n_heads {
        for i in 0..7 {
            for j in 0..=i {
                let p = w.data()[(h * 7 + i) * 7 + j];
                assert!((p - 1.0 / (i + 1) as f32).abs() <= 1e-6);
            }
        }
    }
}
