//! Desk-scale training: AdamW, synthetic tasks and the loop-scaling sweep.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tape;
use crate::config::{parse_kv_text, Family, ModelConfig};
use crate::error::{Error, Result};
use crate::model::{build_model, logits_on_tape, ModelParams};
use crate::runtime::argmax;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// optimizer

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled decay, applied to matrices only.
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u32,
}

impl AdamState {
    pub fn step_count(&self) -> u32 {
        self.step
    }
}

/// One bias-corrected AdamW update of `params` in place.
///
/// Moments are created on first use; later calls must pass tensors of the
/// same shapes in the same order.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[&[f32]], state: &mut AdamState, hp: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::InvalidArgument("optimizer state holds a different parameter list".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() || state.m[i].len() != g.len() {
            return Err(Error::shape("adamw_step", p.shape(), &[g.len()]));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - (hp.beta1 as f64).powi(t);
    let bc2 = 1.0 - (hp.beta2 as f64).powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let decay = if p.rank() >= 2 { hp.lr * hp.weight_decay } else { 0.0 };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
            v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
            let m_hat = m[j] as f64 / bc1;
            let v_hat = v[j] as f64 / bc2;
            *w -= decay * *w;
            *w -= (hp.lr as f64 * m_hat / (v_hat.sqrt() + hp.eps as f64)) as f32;
        }
    }
    Ok(())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let sq: f64 = grads.iter().flatten().map(|&g| (g as f64) * (g as f64)).sum();
    let norm = sq.sqrt() as f32;
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

// ---------------------------------------------------------------------------
// tasks

pub const CORPUS_SHA256: &str = "bbe5635616c6e0e0bcf01b7b8c324be8b42451c51848f11c283bd2f4442b1e0a";
static CORPUS_TEXT: &str = include_str!("../data/hamlet.txt");

/// The bundled character corpus, verified against [`CORPUS_SHA256`].
pub fn corpus() -> Result<&'static [u8]> {
    static CHECKED: OnceLock<bool> = OnceLock::new();
    let ok = *CHECKED.get_or_init(|| sha256_hex(CORPUS_TEXT.as_bytes()) == CORPUS_SHA256);
    if ok {
        Ok(CORPUS_TEXT.as_bytes())
    } else {
        Err(Error::InvalidArgument("bundled corpus does not match its checksum".into()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Held-out tail of the corpus used for evaluation.
const EVAL_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    CharLm,
    Copy,
    NeedleKv,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::CharLm, TaskKind::Copy, TaskKind::NeedleKv];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::CharLm => "char_lm",
            TaskKind::Copy => "copy",
            TaskKind::NeedleKv => "needle_kv",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task `{s}`")))
    }
}

/// Token ids reserved by the synthetic tasks.
pub const PAD: usize = 0;
pub const DELIM: usize = 1;
pub const QUERY: usize = 1;
const FIRST_SYMBOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Input length per sequence.
    pub seq_len: usize,
    /// Tokens the task may emit; must not exceed the model vocabulary.
    pub vocab: usize,
    /// Span reproduced by the copy task.
    pub copy_len: usize,
    /// Key/value pairs hidden in each needle sequence.
    pub n_pairs: usize,
    pub seed: u64,
}

impl TaskSpec {
    /// Copy of `copy_len` symbols: `src DELIM src`.
    pub fn copy(copy_len: usize, vocab: usize) -> Self {
        Self {
            kind: TaskKind::Copy,
            seq_len: 2 * copy_len + 1,
            vocab,
            copy_len,
            n_pairs: 0,
            seed: 0,
        }
    }

    pub fn needle(seq_len: usize, n_pairs: usize, vocab: usize) -> Self {
        Self {
            kind: TaskKind::NeedleKv,
            seq_len,
            vocab,
            copy_len: 0,
            n_pairs,
            seed: 0,
        }
    }

    pub fn char_lm(seq_len: usize) -> Self {
        Self {
            kind: TaskKind::CharLm,
            seq_len,
            vocab: 256,
            copy_len: 0,
            n_pairs: 0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, reason: String| Err(Error::config(field, reason));
        if self.seq_len < 2 {
            return bad("seq_len", "must be at least 2".into());
        }
        match self.kind {
            TaskKind::CharLm => {
                if self.vocab < 128 {
                    return bad("vocab", "character modelling needs all ASCII codes".into());
                }
            }
            TaskKind::Copy => {
                if self.copy_len < 1 || self.seq_len < 2 * self.copy_len + 1 {
                    return bad("seq_len", format!("copy of {} needs length {}", self.copy_len, 2 * self.copy_len + 1));
                }
                if self.vocab <= FIRST_SYMBOL {
                    return bad("vocab", "no symbols left after reserved tokens".into());
                }
            }
            TaskKind::NeedleKv => {
                if self.n_pairs < 1 || self.seq_len < 2 * self.n_pairs + 2 {
                    return bad(
                        "seq_len",
                        format!("{} pairs need length {}", self.n_pairs, 2 * self.n_pairs + 2),
                    );
                }
                let symbols = self.vocab.saturating_sub(FIRST_SYMBOL);
                if symbols / 2 < self.n_pairs {
                    return bad("vocab", format!("too few symbols for {} distinct keys", self.n_pairs));
                }
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(field: &'static str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::config(field, format!("cannot parse `{v}`")))
        }
        match key {
            "task" | "kind" => self.kind = value.parse()?,
            "seq_len" => self.seq_len = num("seq_len", value)?,
            "task_vocab" => self.vocab = num("task_vocab", value)?,
            "copy_len" => self.copy_len = num("copy_len", value)?,
            "n_pairs" => self.n_pairs = num("n_pairs", value)?,
            "task_seed" => self.seed = num("task_seed", value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown task key `{key}`"))),
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.kind.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("task_vocab", self.vocab.to_string()),
            ("copy_len", self.copy_len.to_string()),
            ("n_pairs", self.n_pairs.to_string()),
            ("task_seed", self.seed.to_string()),
        ]
    }
}

/// Row-major `[batch, seq_len]` inputs with per-position targets and loss
/// weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub mask: Vec<f32>,
}

impl Batch {
    pub fn masked_positions(&self) -> usize {
        self.mask.iter().filter(|&&w| w > 0.0).count()
    }
}

/// Deterministic stream of batches for one task.
#[derive(Debug, Clone)]
pub struct TaskSampler {
    spec: TaskSpec,
    rng: ChaCha8Rng,
    split: (usize, usize),
}

impl TaskSampler {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        Self::with_split(spec, false)
    }

    /// Sampler over held-out data: the corpus tail for `char_lm`, an
    /// independent seed stream for synthetic tasks.
    pub fn eval(spec: &TaskSpec) -> Result<Self> {
        Self::with_split(spec, true)
    }

    fn with_split(spec: &TaskSpec, eval: bool) -> Result<Self> {
        spec.validate()?;
        let mut split = (0, 0);
        if spec.kind == TaskKind::CharLm {
            let n = corpus()?.len();
            let cut = (n as f64 * (1.0 - EVAL_FRACTION)) as usize;
            split = if eval { (cut, n) } else { (0, cut) };
            if split.1 - split.0 <= spec.seq_len {
                return Err(Error::config("seq_len", "longer than the corpus split"));
            }
        }
        let stream = if eval { 0x5eed_e7a1_u64 } else { 0 };
        Ok(Self {
            spec: spec.clone(),
            rng: ChaCha8Rng::seed_from_u64(spec.seed ^ stream),
            split,
        })
    }

    pub fn next_batch(&mut self, batch: usize) -> Result<Batch> {
        if batch == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let n = self.spec.seq_len;
        let mut out = Batch {
            batch,
            seq_len: n,
            tokens: Vec::with_capacity(batch * n),
            targets: Vec::with_capacity(batch * n),
            mask: Vec::with_capacity(batch * n),
        };
        for _ in 0..batch {
            match self.spec.kind {
                TaskKind::CharLm => self.char_lm_row(&mut out)?,
                TaskKind::Copy => self.copy_row(&mut out),
                TaskKind::NeedleKv => self.needle_row(&mut out),
            }
        }
        Ok(out)
    }

    fn char_lm_row(&mut self, out: &mut Batch) -> Result<()> {
        let text = corpus()?;
        let n = self.spec.seq_len;
        let start = self.rng.random_range(self.split.0..self.split.1 - n);
        let window = &text[start..start + n + 1];
        out.tokens.extend(window[..n].iter().map(|&b| b as usize));
        out.targets.extend(window[1..].iter().map(|&b| b as usize));
        out.mask.extend(std::iter::repeat_n(1.0, n));
        Ok(())
    }

    fn copy_row(&mut self, out: &mut Batch) {
        let (n, k) = (self.spec.seq_len, self.spec.copy_len);
        let src: Vec<usize> = (0..k).map(|_| self.rng.random_range(FIRST_SYMBOL..self.spec.vocab)).collect();
        let mut s = src.clone();
        s.push(DELIM);
        s.extend_from_slice(&src);
        s.resize(n + 1, PAD);
        out.tokens.extend_from_slice(&s[..n]);
        out.targets.extend_from_slice(&s[1..]);
        out.mask.extend((0..n).map(|i| if (k..2 * k).contains(&i) { 1.0 } else { 0.0 }));
    }

    fn needle_row(&mut self, out: &mut Batch) {
        let (n, pairs) = (self.spec.seq_len, self.spec.n_pairs);
        let symbols = self.spec.vocab - FIRST_SYMBOL;
        let key_end = FIRST_SYMBOL + symbols / 2;
        let mut keys: Vec<usize> = Vec::with_capacity(pairs);
        while keys.len() < pairs {
            let k = self.rng.random_range(FIRST_SYMBOL..key_end);
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let values: Vec<usize> = (0..pairs).map(|_| self.rng.random_range(key_end..self.spec.vocab)).collect();
        // pairs occupy `pairs` of the `(n - 2) / 2` aligned slots before the query
        let slots = (n - 2) / 2;
        let mut chosen: Vec<usize> = Vec::with_capacity(pairs);
        while chosen.len() < pairs {
            let s = self.rng.random_range(0..slots);
            if !chosen.contains(&s) {
                chosen.push(s);
            }
        }
        let mut s = vec![PAD; n + 1];
        for (i, &slot) in chosen.iter().enumerate() {
            s[2 * slot] = keys[i];
            s[2 * slot + 1] = values[i];
        }
        let q = self.rng.random_range(0..pairs);
        s[n - 2] = QUERY;
        s[n - 1] = keys[q];
        s[n] = values[q];
        out.tokens.extend_from_slice(&s[..n]);
        out.targets.extend_from_slice(&s[1..]);
        out.mask.extend((0..n).map(|i| if i == n - 1 { 1.0 } else { 0.0 }));
    }
}

/// First batch of a fresh sampler for `task`.
pub fn make_batch(task: &TaskSpec, batch: usize) -> Result<Batch> {
    TaskSampler::new(task)?.next_batch(batch)
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm bound; `None` disables clipping.
    pub clip: Option<f32>,
    /// Train on the first batch only.
    pub fixed_batch: bool,
    pub eval_batches: usize,
    /// Stop once a step's loss falls below this value.
    pub stop_below: Option<f32>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
            clip: Some(1.0),
            fixed_batch: false,
            eval_batches: 4,
            stop_below: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: ModelConfig,
    pub task: TaskSpec,
    pub options: TrainOptions,
    /// Masked loss of every step run, before that step's update.
    pub losses: Vec<f32>,
    pub eval_loss: f32,
    pub eval_accuracy: f32,
    pub params: ModelParams,
}

/// Weighted mean cross-entropy and the gradient of every parameter, in
/// [`ModelParams::entries`] order.
pub fn loss_and_grads(cfg: &ModelConfig, params: &ModelParams, batch: &Batch) -> Result<(f32, Vec<Vec<f32>>)> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, true);
    let logits = logits_on_tape(&mut tape, cfg, &w, &batch.tokens, &[batch.batch, batch.seq_len])?;
    let loss = tape.cross_entropy(logits, &batch.targets, &batch.mask)?;
    tape.backward(loss)?;
    let grads = w
        .entries()
        .into_iter()
        .map(|(name, &v)| {
            tape.grad(v)
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::Tape(format!("no gradient for {name}")))
        })
        .collect::<Result<_>>()?;
    Ok((tape.value(loss).item(), grads))
}

/// Masked loss and argmax accuracy over the masked positions.
pub fn evaluate(cfg: &ModelConfig, params: &ModelParams, batch: &Batch) -> Result<(f32, f32)> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let logits = logits_on_tape(&mut tape, cfg, &w, &batch.tokens, &[batch.batch, batch.seq_len])?;
    let loss = tape.cross_entropy(logits, &batch.targets, &batch.mask)?;
    let out = tape.value(logits);
    let v = out.last_dim();
    let (mut hit, mut total) = (0.0f64, 0.0f64);
    for (i, (&t, &m)) in batch.targets.iter().zip(&batch.mask).enumerate() {
        if m > 0.0 {
            total += m as f64;
            if argmax(&out.data()[i * v..(i + 1) * v]) == t {
                hit += m as f64;
            }
        }
    }
    Ok((tape.value(loss).item(), (hit / total) as f32))
}

/// Constant-rate AdamW training from a fresh initialization.
pub fn train(cfg: &ModelConfig, task: &TaskSpec, opts: &TrainOptions) -> Result<TrainRun> {
    let params = build_model(cfg)?;
    train_from(cfg, params, task, opts)
}

pub fn train_from(cfg: &ModelConfig, mut params: ModelParams, task: &TaskSpec, opts: &TrainOptions) -> Result<TrainRun> {
    params.check_against(cfg)?;
    task.validate()?;
    if opts.steps < 1 {
        return Err(Error::InvalidArgument("training needs at least one step".into()));
    }
    if task.vocab > cfg.vocab {
        return Err(Error::config("vocab", format!("task emits {} tokens, model has {}", task.vocab, cfg.vocab)));
    }
    let mut sampler = TaskSampler::new(task)?;
    let fixed = opts.fixed_batch.then(|| sampler.next_batch(opts.batch_size)).transpose()?;
    let mut state = AdamState::default();
    let mut losses = Vec::with_capacity(opts.steps);
    for step in 0..opts.steps {
        let batch = match &fixed {
            Some(b) => b.clone(),
            None => sampler.next_batch(opts.batch_size)?,
        };
        let (loss, mut grads) = loss_and_grads(cfg, &params, &batch)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        losses.push(loss);
        if opts.stop_below.is_some_and(|t| loss < t) {
            break;
        }
        if let Some(c) = opts.clip {
            clip_grad_norm(&mut grads, c);
        }
        let grad_refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        adamw_step(&mut params.values_mut(), &grad_refs, &mut state, &opts.optimizer)?;
    }
    let (eval_loss, eval_accuracy) = match &fixed {
        Some(b) => evaluate(cfg, &params, b)?,
        None => {
            let mut eval = TaskSampler::eval(task)?;
            let (mut l, mut a) = (0.0, 0.0);
            let n = opts.eval_batches.max(1);
            for _ in 0..n {
                let (bl, ba) = evaluate(cfg, &params, &eval.next_batch(opts.batch_size)?)?;
                l += bl;
                a += ba;
            }
            (l / n as f32, a / n as f32)
        }
    };
    Ok(TrainRun {
        config: cfg.clone(),
        task: task.clone(),
        options: opts.clone(),
        losses,
        eval_loss,
        eval_accuracy,
        params,
    })
}

impl TrainRun {
    pub fn final_loss(&self) -> f32 {
        *self.losses.last().expect("at least one step")
    }

    /// Mean of the last `k` training losses.
    pub fn tail_loss(&self, k: usize) -> f32 {
        let k = k.clamp(1, self.losses.len());
        self.losses[self.losses.len() - k..].iter().sum::<f32>() / k as f32
    }

    /// Structured text: settings, metrics and the loss trace.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# model\n");
        s.push_str(&self.config.to_kv_text());
        s.push_str("# task\n");
        for (k, v) in self.task.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s.push_str("# training\n");
        let o = &self.options;
        let _ = writeln!(s, "steps = {}", o.steps);
        let _ = writeln!(s, "batch_size = {}", o.batch_size);
        let _ = writeln!(s, "lr = {}", o.optimizer.lr);
        let _ = writeln!(s, "weight_decay = {}", o.optimizer.weight_decay);
        let _ = writeln!(s, "clip = {}", o.clip.map_or("none".to_string(), |c| c.to_string()));
        let _ = writeln!(s, "fixed_batch = {}", o.fixed_batch);
        let _ = writeln!(s, "steps_run = {}", self.losses.len());
        s.push_str("# metrics\n");
        let _ = writeln!(s, "final_loss = {}", self.final_loss());
        let _ = writeln!(s, "eval_loss = {}", self.eval_loss);
        let _ = writeln!(s, "eval_accuracy = {}", self.eval_accuracy);
        let trace: Vec<String> = self.losses.iter().map(f32::to_string).collect();
        let _ = writeln!(s, "losses = {}", trace.join(" "));
        s
    }

    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l}");
        }
        s
    }
}

/// Loss trace stored by [`TrainRun::to_text`].
pub fn parse_loss_trace(text: &str) -> Result<Vec<f32>> {
    let (_, v) = parse_kv_text(text)?
        .into_iter()
        .find(|(k, _)| k == "losses")
        .ok_or_else(|| Error::Parse("no `losses` entry".into()))?;
    v.split_whitespace()
        .map(|x| x.parse().map_err(|_| Error::Parse(format!("bad loss value `{x}`"))))
        .collect()
}

// ---------------------------------------------------------------------------
// loop scaling

#[derive(Debug, Clone, PartialEq)]
pub struct LoopScalingRow {
    pub loops: usize,
    pub seed: u64,
    pub final_loss: f32,
    pub eval_loss: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopScalingReport {
    pub rows: Vec<LoopScalingRow>,
}

impl LoopScalingReport {
    /// Mean held-out loss per loop count, in increasing order of `T`.
    pub fn mean_eval_by_loops(&self) -> Vec<(usize, f32)> {
        let mut ts: Vec<usize> = self.rows.iter().map(|r| r.loops).collect();
        ts.sort_unstable();
        ts.dedup();
        ts.into_iter()
            .map(|t| {
                let xs: Vec<f32> = self.rows.iter().filter(|r| r.loops == t).map(|r| r.eval_loss).collect();
                (t, xs.iter().sum::<f32>() / xs.len() as f32)
            })
            .collect()
    }

    /// True when the mean held-out loss never increases with `T`.
    pub fn is_monotone(&self) -> bool {
        self.mean_eval_by_loops().windows(2).all(|w| w[1].1 <= w[0].1)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("loops,seed,final_loss,eval_loss\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.loops, r.seed, r.final_loss, r.eval_loss);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (t, l) in self.mean_eval_by_loops() {
            let _ = writeln!(s, "T={t} mean_eval_loss={l:.4}");
        }
        let _ = writeln!(s, "monotone_non_increasing={}", self.is_monotone());
        s
    }
}

/// Trains one model per `(T, seed)`; the seed sets both initialization and
/// data order.
pub fn loop_scaling_experiment(
    base: &ModelConfig,
    loop_values: &[usize],
    task: &TaskSpec,
    opts: &TrainOptions,
    seeds: &[u64],
) -> Result<LoopScalingReport> {
    if loop_values.is_empty() || loop_values.contains(&0) {
        return Err(Error::InvalidArgument("loop counts must be at least 1".into()));
    }
    if base.family == Family::Transformer || base.family == Family::Yoco {
        return Err(Error::config("family", format!("{} has no loop count", base.family)));
    }
    let mut rows = Vec::new();
    for &t in loop_values {
        for &seed in seeds {
            let mut cfg = base.clone().with_loops(t);
            cfg.seed = seed;
            let run = train(&cfg, &task.clone().with_seed(seed), opts)?;
            rows.push(LoopScalingRow {
                loops: t,
                seed,
                final_loss: run.final_loss(),
                eval_loss: run.eval_loss,
            });
        }
    }
    Ok(LoopScalingReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_run(hp: &AdamWConfig, w0: f32, steps: usize) -> f32 {
        let mut w = Tensor::scalar(w0).reshape(&[1]).unwrap();
        let mut state = AdamState::default();
        for _ in 0..steps {
            let g = [2.0 * w.data()[0]];
            adamw_step(&mut [&mut w], &[&g], &mut state, hp).unwrap();
        }
        w.data()[0]
    }

    /// Scalar Adam on `w²` in f64.
    fn quad_oracle(b1: f64, b2: f64, lr: f64, w0: f64, steps: i32) -> f64 {
        let (mut w, mut m, mut v) = (w0, 0.0, 0.0);
        for t in 1..=steps {
            let g = 2.0 * w;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + 1e-8);
        }
        w
    }

    fn no_decay(lr: f32, beta2: f32) -> AdamWConfig {
        AdamWConfig {
            lr,
            beta2,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut w = Tensor::from_fn(&[2, 2], |i| i as f32);
        let before = w.clone();
        let hp = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        adamw_step(&mut [&mut w], &[&[0.0; 4]], &mut AdamState::default(), &hp).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let w = quad_run(&no_decay(0.01, 0.95), 1.0, 1);
        assert!((1.0 - w - 0.01).abs() < 1e-6);
    }

    #[test]
    fn converges_on_quadratic() {
        assert!(quad_run(&no_decay(0.1, 0.999), 1.0, 50).abs() < 1e-2);
        assert!(quad_run(&no_decay(0.1, 0.95), 1.0, 100).abs() < 1e-2);
    }

    #[test]
    fn trajectory_matches_scalar_oracle() {
        for (b2, steps) in [(0.95, 37), (0.999, 50)] {
            let got = quad_run(&no_decay(0.05, b2 as f32), 0.7, steps) as f64;
            let want = quad_oracle(0.9, b2, 0.05, 0.7, steps as i32);
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn decay_skips_vectors() {
        let hp = AdamWConfig::default();
        let mut m = Tensor::ones(&[2, 2]);
        let mut v = Tensor::ones(&[2]);
        adamw_step(&mut [&mut m, &mut v], &[&[0.0; 4], &[0.0; 2]], &mut AdamState::default(), &hp).unwrap();
        assert!(m.data().iter().all(|&x| (x - (1.0 - 3e-4)).abs() < 1e-7));
        assert_eq!(v.data(), &[1.0, 1.0]);
    }

    #[test]
    fn optimizer_shape_mismatch() {
        let mut w = Tensor::ones(&[3]);
        assert!(adamw_step(&mut [&mut w], &[&[0.0; 2]], &mut AdamState::default(), &AdamWConfig::default()).is_err());
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[1][0] - 0.8).abs() < 1e-7);
    }

    #[test]
    fn corpus_checksum() {
        assert!(corpus().unwrap().len() >= 100_000);
    }

    #[test]
    fn copy_targets_reproduce_source() {
        let b = make_batch(&TaskSpec::copy(5, 20), 3).unwrap();
        for r in 0..3 {
            let row = |v: &[usize]| v[r * 11..(r + 1) * 11].to_vec();
            let (tok, tgt) = (row(&b.tokens), row(&b.targets));
            assert_eq!(tok[5], DELIM);
            assert_eq!(tgt[5..10], tok[..5]);
        }
        assert_eq!(b.masked_positions(), 3 * 5);
    }

    #[test]
    fn needle_has_one_target() {
        let spec = TaskSpec::needle(16, 3, 32);
        let b = make_batch(&spec, 4).unwrap();
        for r in 0..4 {
            let m = &b.mask[r * 16..(r + 1) * 16];
            assert_eq!(m.iter().filter(|&&w| w > 0.0).count(), 1);
            assert_eq!(m[15], 1.0);
            let tok = &b.tokens[r * 16..(r + 1) * 16];
            let key = tok[15];
            let at = tok[..14].iter().position(|&t| t == key).unwrap();
            assert_eq!(tok[at + 1], b.targets[r * 16 + 15]);
        }
    }

    #[test]
    fn batches_are_deterministic() {
        for spec in [TaskSpec::copy(4, 16), TaskSpec::needle(12, 2, 16), TaskSpec::char_lm(32)] {
            let spec = spec.with_seed(7);
            assert_eq!(make_batch(&spec, 2).unwrap(), make_batch(&spec, 2).unwrap());
            assert_ne!(make_batch(&spec, 2).unwrap(), make_batch(&spec.clone().with_seed(8), 2).unwrap());
        }
    }

    #[test]
    fn short_tasks_rejected() {
        let mut c = TaskSpec::copy(4, 16);
        c.seq_len = 8;
        assert!(make_batch(&c, 1).is_err());
        assert!(make_batch(&TaskSpec::needle(5, 2, 16), 1).is_err());
    }

    #[test]
    fn zero_lr_keeps_params() {
        let cfg = ModelConfig::desk(Family::Yoco);
        let opts = TrainOptions {
            steps: 3,
            batch_size: 2,
            optimizer: AdamWConfig {
                lr: 0.0,
                ..AdamWConfig::default()
            },
            fixed_batch: true,
            ..TrainOptions::default()
        };
        let run = train(&cfg, &TaskSpec::copy(3, 16), &opts).unwrap();
        assert_eq!(run.params, build_model(&cfg).unwrap());
        assert!(run.losses.iter().all(|&l| l == run.losses[0]));
        assert_eq!(parse_loss_trace(&run.to_text()).unwrap(), run.losses);
        assert_eq!(run.loss_csv().lines().count(), 4);
    }
}
