use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use uyoco::analysis::layer_profile;
use uyoco::checkpoint::{load_checkpoint, save_checkpoint};
use uyoco::cost::{reports_to_csv, reproduce_paper_kv_table, ArchDescriptor, CostReport, MIB};
use uyoco::model::weight_shapes;
use uyoco::runtime::{greedy_generate, prefill};
use uyoco::train::{loop_scaling_experiment, train, TaskSampler};
use uyoco::{build_model, param_count, Error, Family, ModelConfig, ModelParams, Result};

use crate::args::{CheckArgs, Command, RunConfig};
use crate::checks;

/// Outcome of a subcommand that ran to completion.
pub enum Status {
    Ok,
    /// A check or comparison did not hold.
    Failed,
}

fn write_out(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, contents)?;
    Ok(path)
}

fn model_or_checkpoint(rc: &RunConfig, checkpoint: Option<&Path>) -> Result<(ModelConfig, ModelParams)> {
    match checkpoint {
        Some(dir) => load_checkpoint(dir),
        None => Ok((rc.model.clone(), build_model(&rc.model)?)),
    }
}

pub fn run(rc: &RunConfig, cmd: &Command) -> Result<Status> {
    match cmd {
        Command::BuildCheck => build_check(rc),
        Command::Train => train_cmd(rc),
        Command::LoopScale { loop_values, seeds } => loop_scale(rc, loop_values, seeds),
        Command::Decode {
            checkpoint,
            prompt,
            tokens,
            steps,
        } => decode(rc, checkpoint.as_deref(), prompt.as_deref(), tokens, *steps),
        Command::Check(which) => check(rc, *which),
        Command::Cost {
            paper_table,
            contexts,
            bytes,
        } => cost(rc, *paper_table, contexts, *bytes),
        Command::Analyze {
            checkpoint,
            sequences,
            ..
        } => analyze(rc, checkpoint.as_deref(), *sequences),
    }
}

fn build_check(rc: &RunConfig) -> Result<Status> {
    let cfg = &rc.model;
    let params = build_model(cfg)?;
    let closed = param_count(cfg);
    let counted = params.num_elements();
    let mut s = String::from("# model\n");
    s.push_str(&cfg.to_kv_text());
    s.push_str("# plan\n");
    for stage in cfg.plan() {
        let _ = writeln!(s, "{stage:?}");
    }
    s.push_str("# tensors\n");
    for (name, shape) in weight_shapes(cfg).entries() {
        let _ = writeln!(s, "{name} = {shape:?}");
    }
    let _ = writeln!(s, "# counts\nparam_count = {closed}\nenumerated = {counted}");
    let _ = writeln!(s, "layer_passes = {}", cfg.total_layer_passes());
    let path = write_out(&rc.out, "build_check.txt", &s)?;
    println!(
        "{} T={} params {closed} (enumerated {counted}); report {}",
        cfg.family,
        cfg.loops,
        path.display()
    );
    Ok(if closed == counted { Status::Ok } else { Status::Failed })
}

fn train_cmd(rc: &RunConfig) -> Result<Status> {
    let run = train(&rc.model, &rc.task, &rc.train)?;
    write_out(&rc.out, "train.txt", &run.to_text())?;
    write_out(&rc.out, "loss.csv", &run.loss_csv())?;
    save_checkpoint(&rc.out.join("checkpoint"), &rc.model, &run.params)?;
    println!(
        "{} T={} on {}: {} steps, final loss {:.4}, eval loss {:.4}, eval accuracy {:.3}",
        rc.model.family,
        rc.model.loops,
        rc.task.kind,
        run.losses.len(),
        run.final_loss(),
        run.eval_loss,
        run.eval_accuracy
    );
    println!("wrote {}", rc.out.display());
    Ok(Status::Ok)
}

fn loop_scale(rc: &RunConfig, loop_values: &[usize], seeds: &[u64]) -> Result<Status> {
    let report = loop_scaling_experiment(&rc.model, loop_values, &rc.task, &rc.train, seeds)?;
    write_out(&rc.out, "loop_scaling.csv", &report.to_csv())?;
    let summary = report.summary();
    write_out(&rc.out, "loop_scaling.txt", &summary)?;
    print!("{summary}");
    if !report.is_monotone() {
        println!("WARN: held-out loss does not decrease monotonically with T");
    }
    Ok(Status::Ok)
}

fn decode(
    rc: &RunConfig,
    checkpoint: Option<&Path>,
    prompt: Option<&str>,
    tokens: &[usize],
    steps: usize,
) -> Result<Status> {
    let (cfg, params) = model_or_checkpoint(rc, checkpoint)?;
    let prompt_ids: Vec<usize> = match prompt {
        Some(text) => text.bytes().map(usize::from).collect(),
        None if !tokens.is_empty() => tokens.to_vec(),
        None => return Err(Error::InvalidArgument("decode needs --prompt or --tokens".into())),
    };
    let generated = greedy_generate(&prompt_ids, steps, &params, &cfg)?;
    let mut all = prompt_ids.clone();
    all.extend(&generated);
    let (state, _) = prefill(&all, &params, &cfg, false)?;
    let ids: Vec<String> = generated.iter().map(usize::to_string).collect();
    let mut s = format!("prompt_len = {}\ngenerated = {}\n", prompt_ids.len(), ids.join(" "));
    if cfg.vocab <= 256 {
        let text: String = generated
            .iter()
            .map(|&t| match t as u8 {
                b if b.is_ascii_graphic() || b == b' ' => b as char,
                b'\n' => '\n',
                _ => '\u{fffd}',
            })
            .collect();
        let _ = writeln!(s, "text = {text:?}");
    }
    s.push_str("# cache after prompt + generation\n");
    s.push_str(&state.dump(2));
    write_out(&rc.out, "decode.txt", &s)?;
    print!("{s}");
    Ok(Status::Ok)
}

fn check(rc: &RunConfig, which: CheckArgs) -> Result<Status> {
    let all = !which.any();
    let mut results = Vec::new();
    if all || which.grad {
        results.push(checks::grad()?);
    }
    if all || which.decode_equivalence {
        results.push(checks::decode_equivalence(&rc.model)?);
    }
    if all || which.swa_oracle {
        results.push(checks::swa_oracle()?);
    }
    if all || which.cache_accounting {
        results.push(checks::cache_accounting(&rc.model)?);
    }
    let mut s = String::new();
    for r in &results {
        let _ = writeln!(s, "[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail.trim_end());
    }
    write_out(&rc.out, "check.txt", &s)?;
    print!("{s}");
    Ok(if results.iter().all(|r| r.passed) {
        Status::Ok
    } else {
        Status::Failed
    })
}

fn cost(rc: &RunConfig, paper_table: bool, contexts: &[u64], bytes: u64) -> Result<Status> {
    if paper_table {
        let diff = reproduce_paper_kv_table();
        let csv = diff.to_csv();
        write_out(&rc.out, "paper_kv_table.csv", &csv)?;
        print!("{csv}");
        println!("{}/{} cells match", diff.cells.len() - diff.mismatches(), diff.cells.len());
        return Ok(if diff.all_match() { Status::Ok } else { Status::Failed });
    }
    if contexts.is_empty() || contexts.contains(&0) {
        return Err(Error::InvalidArgument("contexts must be positive".into()));
    }
    let mut reports = Vec::new();
    for f in Family::ALL {
        let mut cfg = rc.model.clone().with_family(f);
        cfg.loops = if f.is_recursive() { rc.model.loops } else { 1 };
        cfg.validate()?;
        let a = ArchDescriptor::from_config(&cfg, bytes)?;
        for &n in contexts {
            reports.push(CostReport::new(f.name(), &a, n));
        }
    }
    let csv = reports_to_csv(&reports);
    write_out(&rc.out, "cost.csv", &csv)?;
    for r in reports.iter().filter(|r| r.n == *contexts.last().unwrap()) {
        println!(
            "{:<22} N={:<6} kv {:>10} B ({:.3} MiB)  prefill {:>14}  decode {:>10}",
            r.label,
            r.n,
            r.kv.total(),
            r.kv.total() as f64 / MIB as f64,
            r.prefill.total(),
            r.decode.total()
        );
    }
    println!("wrote {}", rc.out.join("cost.csv").display());
    Ok(Status::Ok)
}

fn analyze(rc: &RunConfig, checkpoint: Option<&Path>, sequences: usize) -> Result<Status> {
    if sequences == 0 {
        return Err(Error::InvalidArgument("--sequences must be positive".into()));
    }
    let (cfg, params) = model_or_checkpoint(rc, checkpoint)?;
    if rc.task.vocab > cfg.vocab {
        return Err(Error::InvalidArgument("task vocabulary exceeds the model vocabulary".into()));
    }
    let batch = TaskSampler::eval(&rc.task)?.next_batch(sequences)?;
    let rows: Vec<Vec<usize>> = batch.tokens.chunks(batch.seq_len).map(<[usize]>::to_vec).collect();
    let profile = layer_profile(&cfg, &params, &rows)?;
    write_out(&rc.out, "profile.csv", &profile.to_csv())?;
    println!("{} entries over {} sequences", profile.entries.len(), rows.len());
    let within = profile.within_block_mean();
    if let (Some(b), Some(w)) = (profile.boundary(), within) {
        println!(
            "block boundary {:.4}, within-block mean {w:.4}, ratio {:.3}",
            b.mean_distance,
            b.mean_distance / w
        );
    }
    println!("wrote {}", rc.out.join("profile.csv").display());
    Ok(Status::Ok)
}
