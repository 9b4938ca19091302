//! Experiment orchestration behind the command-line front end.
//!
//! Every output path is relative to the caller's output directory:
//!
//! ```text
//! <out>/summary.json
//! <out>/seed-<s>/<held-out>/metrics.csv
//! <out>/seed-<s>/<held-out>/final.ckpt
//! <out>/seed-<s>/<held-out>/best.ckpt      (when anything was evaluated)
//! ```

mod config;
mod gradcheck;
mod result;
pub mod scenarios;

pub use config::{apply_override, load_config, parse_config, parse_override, Protocol, RunConfig, SCHEMA_VERSION};
pub use gradcheck::{cmd_gradcheck, GradcheckSuite, LossCheck, LossKind, SUITE_CONFIGS};
pub use result::{alignment_summary, median, std_dev, Aggregate, RunResult, RunRow, ALIGN_REFERENCE_ITER};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::data::{dataset_read, dataset_write, generate, split_train_val, DomainDataset};
use crate::error::{Error, Result};
use crate::model::{checkpoint_load, checkpoint_save};
use crate::trainer::{accuracy, train, write_metrics_csv, TrainConfig, TrainOutput};

/// Data for one (seed, held-out domain) run.
#[derive(Clone, Debug)]
pub struct RunData {
    pub train: Vec<DomainDataset>,
    pub val: Vec<DomainDataset>,
    pub held_out: DomainDataset,
}

/// Generates every domain of the scenario with `seed`.
pub fn generate_domains(cfg: &RunConfig, seed: u64) -> Result<Vec<DomainDataset>> {
    let mut spec = cfg.scenario.clone();
    spec.seed = seed;
    generate(&spec)
}

/// Indices of the held-out domains under the configured protocol.
pub fn held_out_indices(cfg: &RunConfig) -> Vec<usize> {
    let total = cfg.scenario.sources() + 1;
    match cfg.protocol {
        Protocol::Unseen => vec![total - 1],
        Protocol::LeaveOneDomainOut => (0..total).collect(),
    }
}

/// Holds out `held_out` and splits every other domain into train and
/// validation parts.
pub fn prepare_run(domains: &[DomainDataset], held_out: usize, val_fraction: f64, seed: u64) -> Result<RunData> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, d) in domains.iter().enumerate() {
        if i != held_out {
            let (t, v) = split_train_val(d, val_fraction, seed)?;
            train.push(t);
            val.push(v);
        }
    }
    Ok(RunData {
        train,
        val,
        held_out: domains[held_out].clone(),
    })
}

/// Trains one run and scores the selected snapshot on the held-out domain.
pub fn run_single(train_cfg: &TrainConfig, data: &RunData, seed: u64) -> Result<(RunRow, TrainOutput)> {
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let out = train(&cfg, &data.train, &data.val).map_err(|e| match e {
        Error::Numeric { context, reason } => Error::Numeric {
            context: format!("seed {seed}, held out {}, {context}", data.held_out.name),
            reason,
        },
        other => other,
    })?;
    let (model, ema, selected) = match &out.best {
        Some(b) => (&b.model, &b.ema, Some(b.outer_iter)),
        None => (&out.model, &out.ema, None),
    };
    let acc_online = accuracy(&model.extractor, &model.global_classifier, &data.held_out)?;
    let acc_target = accuracy(&ema.target_extractor, &ema.target_global, &data.held_out)?;
    let (align_reference, align_final) = alignment_summary(&out.evals);
    let row = RunRow {
        seed,
        held_out: data.held_out.name.clone(),
        acc_online,
        acc_target,
        selected_outer_iter: selected,
        align_reference,
        align_final,
    };
    Ok((row, out))
}

/// Writes the metrics CSV and checkpoints of one run into `dir`.
pub fn write_run_artifacts(out: &TrainOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = Vec::new();
    write_metrics_csv(&out.metrics, &mut csv)?;
    std::fs::write(dir.join("metrics.csv"), csv)?;
    checkpoint_save(&out.model, &out.ema, dir.join("final.ckpt"))?;
    if let Some(b) = &out.best {
        checkpoint_save(&b.model, &b.ema, dir.join("best.ckpt"))?;
    }
    Ok(())
}

/// Runs `f` over `0..n` on up to `jobs` threads and returns results in index
/// order. Each call owns its inputs, so the outcome does not depend on
/// scheduling.
fn run_parallel<T: Send>(n: usize, jobs: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("unpoisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("unpoisoned").expect("every slot filled"))
        .collect()
}

/// Trains `train_cfg` for every seed and held-out domain of `cfg`, writing
/// artifacts under `out` and `summary.json` at its root.
pub fn run_experiment(cfg: &RunConfig, train_cfg: &TrainConfig, method: &str, out: &Path) -> Result<RunResult> {
    cfg.validate()?;
    train_cfg.validate()?;
    let held = held_out_indices(cfg);
    let jobs: Vec<(u64, usize)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| held.iter().map(move |&h| (s, h)))
        .collect();
    let rows = run_parallel(jobs.len(), cfg.jobs, |i| {
        let (seed, h) = jobs[i];
        let domains = generate_domains(cfg, seed)?;
        let data = prepare_run(&domains, h, cfg.val_fraction, seed)?;
        let (row, output) = run_single(train_cfg, &data, seed)?;
        write_run_artifacts(&output, &out.join(RunConfig::run_dir(seed, &row.held_out)))?;
        Ok(row)
    })?;
    let result = RunResult::new(&cfg.name, method, rows);
    std::fs::create_dir_all(out)?;
    result.save(out.join("summary.json"))?;
    Ok(result)
}

/// `train`: the configured method for every seed.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<RunResult> {
    run_experiment(cfg, &cfg.train, "cmcl", out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub examples: usize,
    pub acc_online: f64,
    pub acc_target: f64,
}

/// `eval`: top-1 accuracy of a checkpoint's target and online models on a
/// dataset file.
pub fn cmd_eval(checkpoint: &Path, dataset: &Path) -> Result<EvalReport> {
    let (model, ema) = checkpoint_load(checkpoint)?;
    let ds = dataset_read(dataset)?;
    if ds.input_dim() != model.input_dim() {
        return Err(Error::invalid(
            "dataset",
            format!("input_dim {} but the checkpoint expects {}", ds.input_dim(), model.input_dim()),
        ));
    }
    if ds.classes != model.classes() {
        return Err(Error::invalid(
            "dataset",
            format!("{} classes but the checkpoint has {}", ds.classes, model.classes()),
        ));
    }
    Ok(EvalReport {
        dataset: ds.name.clone(),
        examples: ds.len(),
        acc_online: accuracy(&model.extractor, &model.global_classifier, &ds)?,
        acc_target: accuracy(&ema.target_extractor, &ema.target_global, &ds)?,
    })
}

/// `gen-data`: writes every domain of the scenario for `seed` as
/// `<out>/<domain>.cmds`.
pub fn cmd_gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    generate_domains(cfg, seed)?
        .iter()
        .map(|d| {
            let p = out.join(format!("{}.cmds", d.name));
            dataset_write(d, &p)?;
            Ok(p)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub cmcl: RunResult,
    pub erm: RunResult,
}

impl BenchmarkReport {
    /// Rows of (method, seed, held-out domain, online accuracy, target
    /// accuracy).
    pub fn table_rows(&self) -> Vec<(&str, &RunRow)> {
        [&self.cmcl, &self.erm]
            .into_iter()
            .flat_map(|r| r.rows.iter().map(move |row| (r.method.as_str(), row)))
            .collect()
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>6} {:<10} {:>10} {:>10}", "method", "seed", "held_out", "acc_online", "acc_target");
        for (method, r) in self.table_rows() {
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:<10} {:>10.4} {:>10.4}",
                method, r.seed, r.held_out, r.acc_online, r.acc_target
            );
        }
        for r in [&self.cmcl, &self.erm] {
            let a = &r.aggregate;
            let _ = writeln!(
                s,
                "{:<6} {:>6} {:<10} {:>10.4} {:>10.4}",
                r.method, "mean", "", a.mean_acc_online, a.mean_acc_target
            );
        }
        if let Some(ratio) = self.cmcl.aggregate.median_align_ratio {
            let _ = writeln!(s, "cmcl median alignment ratio (final / iter {ALIGN_REFERENCE_ITER}): {ratio:.4}");
        }
        s
    }
}

/// `benchmark`: the configured method against its ERM reduction on
/// identical data, under `<out>/cmcl` and `<out>/erm`.
pub fn cmd_benchmark(cfg: &RunConfig, out: &Path) -> Result<BenchmarkReport> {
    let cmcl = run_experiment(cfg, &cfg.train, "cmcl", &out.join("cmcl"))?;
    let erm = run_experiment(cfg, &cfg.train.erm_baseline(), "erm", &out.join("erm"))?;
    let report = BenchmarkReport { cmcl, erm };
    let text = serde_json::to_string_pretty(&report).expect("plain data serializes");
    std::fs::write(out.join("benchmark.json"), text + "\n")?;
    Ok(report)
}

#[cfg(test)]
mod tests;
