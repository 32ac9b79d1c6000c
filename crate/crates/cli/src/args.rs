//! Argument parsing and resolution of config file values and flag overrides.
//!
//! Resolution order, lowest to highest precedence: built-in desk defaults
//! for the chosen family and task, then the `--config` file, then `--set`
//! pairs, then the named flags.

use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use uyoco::config::parse_kv_text;
use uyoco::train::{TaskKind, TaskSpec, TrainOptions};
use uyoco::{Error, Family, ModelConfig, Result};

#[derive(Debug, Parser)]
#[command(name = "uyoco", version, about = "Recursive decoder-decoder model: build, train, decode, check, cost, analyze")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Flat `key = value` config file (`#` starts a comment).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for reports, CSVs and checkpoints.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Seed for initialization and data order.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub family: Option<String>,
    #[arg(long, global = true)]
    pub loops: Option<usize>,
    #[arg(long, global = true)]
    pub task: Option<String>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the configured model and verify its parameter accounting.
    BuildCheck,
    /// Train on the configured task and save a checkpoint.
    Train,
    /// Train one model per loop count and seed and compare held-out losses.
    LoopScale {
        #[arg(long, value_delimiter = ',', default_value = "1,3")]
        loop_values: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Greedy generation through the KV runtime.
    Decode {
        /// Checkpoint directory; a fresh model is built when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Prompt text, one byte per token.
        #[arg(long, conflicts_with = "tokens")]
        prompt: Option<String>,
        /// Prompt token ids.
        #[arg(long, value_delimiter = ',')]
        tokens: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        steps: usize,
    },
    /// Numerical self-checks; all of them run when none is selected.
    Check(CheckArgs),
    /// Analytic KV-cache bytes and MAC counts.
    Cost {
        /// Compare against the reference KV occupancy table.
        #[arg(long)]
        paper_table: bool,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512,1024,2048,4096")]
        contexts: Vec<u64>,
        #[arg(long, default_value_t = 2)]
        bytes: u64,
    },
    /// Layer-to-layer angular distance profile.
    Analyze {
        #[arg(long, required = true)]
        profile: bool,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        sequences: usize,
    },
}

#[derive(Debug, Clone, Copy, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub grad: bool,
    #[arg(long)]
    pub decode_equivalence: bool,
    #[arg(long)]
    pub swa_oracle: bool,
    #[arg(long)]
    pub cache_accounting: bool,
}

impl CheckArgs {
    pub fn any(&self) -> bool {
        self.grad || self.decode_equivalence || self.swa_oracle || self.cache_accounting
    }
}

/// Everything a subcommand needs, fully resolved.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainOptions,
    pub out: PathBuf,
}

const TRAIN_KEYS: [&str; 9] = [
    "steps",
    "batch_size",
    "lr",
    "weight_decay",
    "clip",
    "fixed_batch",
    "eval_batches",
    "stop_below",
    "beta2",
];

const MODEL_ALIASES: [&str; 3] = ["layers", "heads", "kv_heads"];

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::InvalidArgument(format!("cannot parse `{v}` for `{key}`")))
}

fn optional(key: &str, v: &str) -> Result<Option<f32>> {
    match v {
        "none" | "" => Ok(None),
        v => parse_num(key, v).map(Some),
    }
}

fn set_train(o: &mut TrainOptions, key: &str, v: &str) -> Result<()> {
    match key {
        "steps" => o.steps = parse_num(key, v)?,
        "batch_size" => o.batch_size = parse_num(key, v)?,
        "lr" => o.optimizer.lr = parse_num(key, v)?,
        "weight_decay" => o.optimizer.weight_decay = parse_num(key, v)?,
        "beta2" => o.optimizer.beta2 = parse_num(key, v)?,
        "clip" => o.clip = optional(key, v)?,
        "fixed_batch" => o.fixed_batch = parse_num(key, v)?,
        "eval_batches" => o.eval_batches = parse_num(key, v)?,
        "stop_below" => o.stop_below = optional(key, v)?,
        _ => unreachable!("caller checks TRAIN_KEYS"),
    }
    Ok(())
}

/// Desk defaults for each task.
pub fn default_task(kind: TaskKind) -> TaskSpec {
    match kind {
        TaskKind::Copy => TaskSpec::copy(6, 32),
        TaskKind::NeedleKv => TaskSpec::needle(32, 4, 32),
        TaskKind::CharLm => TaskSpec::char_lm(32),
    }
}

impl CommonArgs {
    /// All `(key, value)` pairs in increasing precedence, as one list.
    fn layered_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => parse_kv_text(&fs::read_to_string(path)?)?,
            None => Vec::new(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("--set expects key=value, got `{kv}`")))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut named = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        named("family", self.family.clone());
        named("loops", self.loops.map(|t| t.to_string()));
        named("task", self.task.clone());
        named("seed", self.seed.map(|s| s.to_string()));
        Ok(pairs)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let pairs = self.layered_pairs()?;
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());

        let family: Family = last("family").unwrap_or("uyoco").parse()?;
        let kind: TaskKind = last("task").unwrap_or("copy").parse()?;
        let mut model = ModelConfig::desk(family);
        let mut task = default_task(kind);
        let mut train = TrainOptions::default();
        let mut seq_len_given = false;
        for (k, v) in &pairs {
            match k.as_str() {
                "family" | "task" => {}
                // one seed drives initialization and data order
                "seed" => {
                    model.seed = parse_num(k, v)?;
                    task.seed = model.seed;
                }
                k if TRAIN_KEYS.contains(&k) => set_train(&mut train, k, v)?,
                k if ModelConfig::KEYS.contains(&k) || MODEL_ALIASES.contains(&k) => model.set(k, v)?,
                k => {
                    seq_len_given |= k == "seq_len";
                    task.set(k, v)?;
                }
            }
        }
        if task.kind == TaskKind::Copy && !seq_len_given {
            task.seq_len = 2 * task.copy_len + 1;
        }
        model.validate()?;
        task.validate()?;
        if task.vocab > model.vocab {
            return Err(Error::InvalidArgument(format!(
                "task vocabulary {} exceeds model vocabulary {}",
                task.vocab, model.vocab
            )));
        }
        Ok(RunConfig {
            model,
            task,
            train,
            out: self.out.clone(),
        })
    }
}
