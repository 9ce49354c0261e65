//! Command implementations: train, eval, fidelity, explain, ablate.
//!
//! Every command validates its config fully before touching the filesystem,
//! then writes all artifacts into a fresh timestamped run directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rce_core::bank::save_bank;
use rce_core::error::{Error, Result};
use rce_core::eval::{self, write_prototype_grid};
use rce_core::model::RceModel;
use rce_core::trainer::{CheckpointPlan, TrainEvent, Trainer};
use serde::Serialize;

use crate::config::{load_task, LoadedTask, RunConfig};

pub struct RunContext {
    pub config: RunConfig,
    pub out_root: PathBuf,
    pub applied_overrides: Vec<String>,
}

/// Creates `<out_root>/<command>-<timestamp>[-<n>]` and drops the resolved
/// config snapshot into it.
fn create_run_dir(ctx: &RunContext, command: &str) -> Result<PathBuf> {
    let stamp = timestamp();
    let mut dir = ctx.out_root.join(format!("{command}-{stamp}"));
    let mut suffix = 1;
    while dir.exists() {
        suffix += 1;
        dir = ctx.out_root.join(format!("{command}-{stamp}-{suffix}"));
    }
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.resolved.toml"), ctx.config.resolved_toml())?;
    if !ctx.applied_overrides.is_empty() {
        std::fs::write(dir.join("overrides.txt"), ctx.applied_overrides.join("\n"))?;
    }
    Ok(dir)
}

fn timestamp() -> String {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // Y-m-d-HMS from epoch seconds, UTC, no external time dependency.
    let days = now / 86_400;
    let (y, m, d) = civil_from_days(days as i64);
    let rem = now % 86_400;
    format!(
        "{y:04}{m:02}{d:02}-{:02}{:02}{:02}",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

/// Days-since-epoch to (year, month, day), civil calendar.
fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::config(format!("serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps_run: u64,
    stopped_early: bool,
    best_val_accuracy: Option<f64>,
    target_test_accuracy: f64,
    fidelity_overall: f64,
    config_hash: u64,
}

pub fn train(ctx: &RunContext) -> Result<()> {
    let task = load_task(&ctx.config)?;
    let spec = ctx
        .config
        .to_model_spec(task.source.shape, task.source.num_classes)?;
    eval::validate_rule(ctx.config.eval.rule, spec.num_concepts)?;
    let train_cfg = ctx.config.to_train_config();
    let mut trainer = Trainer::new(
        train_cfg.clone(),
        spec,
        task.source.clone(),
        task.target_train.clone(),
        task.target_val.clone(),
    )?;

    let dir = create_run_dir(ctx, "train")?;
    let metrics = File::create(dir.join("metrics.jsonl"))?;
    let mut metrics = BufWriter::new(metrics);
    let evals = File::create(dir.join("evals.jsonl"))?;
    let mut evals = BufWriter::new(evals);
    let config_hash = ctx.config.fingerprint();
    let plan = CheckpointPlan {
        interval: ctx.config.train.checkpoint_interval,
        dir: dir.clone(),
        config_hash,
    };

    let outcome = trainer.run_with_checkpoints(
        &mut |ev: &TrainEvent| match ev {
            TrainEvent::Step(rec) => {
                let line = serde_json::to_string(rec).expect("step record serializes");
                let _ = writeln!(metrics, "{line}");
            }
            TrainEvent::Eval(ev) => {
                let line = serde_json::to_string(ev).expect("eval record serializes");
                let _ = writeln!(evals, "{line}");
            }
        },
        Some(&plan),
    )?;
    metrics.flush()?;
    evals.flush()?;

    outcome
        .model
        .save_checkpoint(&dir.join("best_model.ckpt"), outcome.steps_run, config_hash)?;
    let mut bank = outcome.bank.clone();
    bank.config_hash = config_hash;
    save_bank(&bank, &dir.join("codebook.rcb"))?;
    trainer.save_state(&dir.join("train_state.rcs"))?;

    let test_acc = eval::accuracy(
        &outcome.model,
        &task.target_test,
        train_cfg.omega1,
        train_cfg.omega2,
    )?;
    let fid = eval::fidelity_score(
        &outcome.model,
        &task.target_test,
        ctx.config.eval.rule,
        ctx.config.eval.fidelity_pairs_per_class,
        ctx.config.seed,
    )?;
    let summary = TrainSummary {
        steps_run: outcome.steps_run,
        stopped_early: outcome.stopped_early,
        best_val_accuracy: outcome.best_val_accuracy,
        target_test_accuracy: test_acc,
        fidelity_overall: fid.overall,
        config_hash,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    println!(
        "run {}: steps {} best-val {:?} test-acc {:.4} fidelity {:.4}",
        dir.display(),
        outcome.steps_run,
        outcome.best_val_accuracy,
        test_acc,
        fid.overall
    );
    Ok(())
}

/// Loads the configured checkpoint and checks it against the task's data
/// before any compute happens.
fn load_checkpoint_for(ctx: &RunContext, task: &LoadedTask) -> Result<RceModel> {
    let path = ctx
        .config
        .eval
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::config("eval.checkpoint is required for this command"))?;
    let (model, _meta) = RceModel::load_checkpoint(path)?;
    let spec = model.spec();
    let ds = task.select(ctx.config.eval.dataset);
    if spec.input_shape != ds.shape {
        return Err(Error::config(format!(
            "checkpoint input shape {:?} does not match dataset shape {:?}",
            spec.input_shape, ds.shape
        )));
    }
    if spec.num_classes != ds.num_classes {
        return Err(Error::config(format!(
            "checkpoint has {} classes, dataset has {}",
            spec.num_classes, ds.num_classes
        )));
    }
    Ok(model)
}

#[derive(Serialize)]
struct EvalResult {
    dataset: String,
    samples: usize,
    accuracy: f64,
    omega1: f64,
    omega2: f64,
}

pub fn eval_accuracy(ctx: &RunContext) -> Result<()> {
    let task = load_task(&ctx.config)?;
    let model = load_checkpoint_for(ctx, &task)?;
    let ds = task.select(ctx.config.eval.dataset);
    let acc = eval::accuracy(&model, ds, ctx.config.train.omega1, ctx.config.train.omega2)?;
    let dir = create_run_dir(ctx, "eval")?;
    let result = EvalResult {
        dataset: format!("{:?}", ctx.config.eval.dataset),
        samples: ds.len(),
        accuracy: acc,
        omega1: ctx.config.train.omega1,
        omega2: ctx.config.train.omega2,
    };
    write_json(&dir.join("results.json"), &result)?;
    println!("accuracy {:.4} on {} samples ({})", acc, ds.len(), result.dataset);
    Ok(())
}

pub fn fidelity(ctx: &RunContext) -> Result<()> {
    let task = load_task(&ctx.config)?;
    let model = load_checkpoint_for(ctx, &task)?;
    let ds = task.select(ctx.config.eval.dataset);
    let report = eval::fidelity_score(
        &model,
        ds,
        ctx.config.eval.rule,
        ctx.config.eval.fidelity_pairs_per_class,
        ctx.config.seed,
    )?;
    let dir = create_run_dir(ctx, "fidelity")?;
    write_json(&dir.join("results.json"), &report)?;
    println!(
        "fidelity {:.4} overall, rule {:?}, per-class {:?}",
        report.overall, report.rule, report.per_class
    );
    Ok(())
}

pub fn explain(ctx: &RunContext) -> Result<()> {
    let task = load_task(&ctx.config)?;
    let model = load_checkpoint_for(ctx, &task)?;
    let ds = task.select(ctx.config.eval.dataset);
    let explanation = eval::explain(&model, ds, ctx.config.eval.query_index, ctx.config.eval.top_k)?;
    let dir = create_run_dir(ctx, "explain")?;
    write_json(&dir.join("explanation.json"), &explanation)?;
    if ctx.config.eval.write_grid {
        let mut indices = vec![explanation.query_index];
        indices.extend_from_slice(&explanation.prototype_indices);
        write_prototype_grid(ds, &indices, &dir.join("prototypes.png"))?;
    }
    println!(
        "query {} -> concept {} with prototypes {:?}",
        explanation.query_index, explanation.top_concept, explanation.prototype_indices
    );
    Ok(())
}

pub fn ablate(ctx: &RunContext) -> Result<()> {
    let task = load_task(&ctx.config)?;
    let spec = ctx
        .config
        .to_model_spec(task.source.shape, task.source.num_classes)?;
    eval::validate_rule(ctx.config.eval.rule, spec.num_concepts)?;
    let base = ctx.config.to_train_config();
    let table = eval::ablate(
        &base,
        &spec,
        &ctx.config.ablate.modes,
        &task.source,
        &task.target_train,
        &task.target_val,
        &task.target_test,
        ctx.config.eval.rule,
        ctx.config.eval.fidelity_pairs_per_class,
        ctx.config.seed,
    )?;
    let dir = create_run_dir(ctx, "ablate")?;
    write_json(&dir.join("ablation_results.json"), &table)?;
    std::fs::write(dir.join("ablation_table.txt"), table.render())?;
    print!("{}", table.render());
    Ok(())
}
