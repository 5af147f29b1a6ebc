//! End-to-end analysis: train on all data, score every example, subsample
//! with each policy, retrain from scratch and compare test accuracy.
//!
//! Every stage writes its artifacts under the output directory as soon as it
//! finishes, and `manifest.txt` records per-stage wall time and whether the
//! run completed.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

pub use config::{DatasetSource, DiagnosticsConfig, ExperimentConfig, ModelSpec};

use crate::data::{load_csv, load_mnist_dir, split, synth, synth_holdout, Dataset, MnistFiles, SplitSpec};
use crate::diagnostics::{
    export_topk_examples, heatmap_matrix, label_entropy_topk, overlap_curve, random_overlap_baseline,
    write_bounds_csv, write_entropy_csv, write_examples_csv, write_heatmap_csv, write_overlap_csv,
};
use crate::error::{Error, Result};
use crate::importance::{batch_bound_pairs, score_dataset, NormConfig, ScoreTable};
use crate::nn::{Architecture, Model};
use crate::sampling::{select, PolicyKind, SelectionPolicy, Subsample};
use crate::training::{evaluate, train, TrainConfig, TrainLog};

/// Train / validation / test partitions of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Load the configured source and carve the validation set out of its training part.
pub fn load_splits(source: &DatasetSource, val_fraction: f64, seed: u64) -> Result<Splits> {
    let (full, test) = match source {
        DatasetSource::Idx {
            dir,
            train_limit,
            test_limit,
        } => {
            if !MnistFiles::in_dir(dir).exist() {
                return Err(Error::Config(format!(
                    "MNIST IDX files not found in {} (see scripts/fetch_mnist.sh)",
                    dir.display()
                )));
            }
            let (train, test) = load_mnist_dir(dir)?;
            let train = train_limit.map_or(train.clone(), |n| train.truncate(n));
            let test = test_limit.map_or(test.clone(), |n| test.truncate(n));
            (train, test)
        }
        DatasetSource::Csv { train, test } => {
            let train = load_csv(train, None)?;
            let test = load_csv(test, Some(train.class_count()))?;
            (train, test)
        }
        DatasetSource::Synth { spec, test_n } => (synth(spec)?, synth_holdout(spec, *test_n)?),
    };
    if test.is_empty() {
        return Err(Error::domain("test set is empty"));
    }
    let (train, val) = split(&full, SplitSpec { val_fraction, seed })?;
    Ok(Splits { train, val, test })
}

/// `k = round(fraction·N)`, at least 1; `fraction·N < 1` is rejected.
pub fn subsample_size(n: usize, fraction: f64) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::domain(format!("fraction {fraction} outside (0, 1]")));
    }
    let x = fraction * n as f64;
    if x < 1.0 {
        return Err(Error::domain(format!(
            "fraction {fraction} of {n} examples selects fewer than one"
        )));
    }
    Ok((x.round() as usize).clamp(1, n))
}

/// Train a freshly initialised model on the whole training split.
pub fn train_full(
    arch: &Architecture,
    splits: &Splits,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(Model, TrainLog)> {
    let model = Model::new(arch.clone(), splits.train.class_count(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    train(model, &splits.train, &splits.val, &cfg)
}

/// Score every training example at `model` and tag the table with the seed
/// that produced the model.
pub fn score_model(model: &Model, train_set: &Dataset, norm: NormConfig, seed: u64) -> Result<ScoreTable> {
    let table = score_dataset(model, train_set, norm)?;
    let id = format!("{}@{seed}", table.model_id);
    Ok(table.with_model_id(id).with_seed(seed))
}

#[derive(Debug, Clone)]
pub struct SubsampleRun {
    pub subsample: Subsample,
    pub test_acc: f64,
    pub model: Model,
    pub log: TrainLog,
}

/// Select `round(fraction·N)` training examples with `policy` and retrain on
/// them alone from a fresh initialisation seeded by `policy.seed`.
pub fn run_subsample_analysis(
    scores: &ScoreTable,
    splits: &Splits,
    arch: &Architecture,
    policy: &SelectionPolicy,
    fraction: f64,
    train_cfg: &TrainConfig,
) -> Result<SubsampleRun> {
    if scores.len() != splits.train.len() || scores.labels() != splits.train.labels() {
        return Err(Error::dim("score table is not aligned with the training split"));
    }
    let k = subsample_size(scores.len(), fraction)?;
    let subsample = select(policy, scores, k)?;
    let subset = splits.train.subset(&subsample.indices)?;
    let model = Model::new(arch.clone(), splits.train.class_count(), policy.seed)?;
    let cfg = TrainConfig {
        seed: policy.seed,
        ..train_cfg.clone()
    };
    let (model, log) = train(model, &subset, &splits.val, &cfg)?;
    let test_acc = evaluate(&model, &splits.test)?;
    Ok(SubsampleRun {
        subsample,
        test_acc,
        model,
        log,
    })
}

/// About twenty log-spaced values in `[1, n]`, plus `extra`, sorted and deduplicated.
pub fn diagnostic_ks(n: usize, extra: &[usize]) -> Vec<usize> {
    let mut ks: Vec<usize> = (0..=20)
        .map(|i| (n as f64).powf(i as f64 / 20.0).round() as usize)
        .chain(extra.iter().copied())
        .filter(|&k| k >= 1 && k <= n)
        .collect();
    ks.sort_unstable();
    ks.dedup();
    ks
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub policy: PolicyKind,
    pub fraction: f64,
    pub seed: u64,
    pub k: usize,
    pub test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub full_test_acc: f64,
    pub runs: Vec<RunResult>,
    pub output_dir: PathBuf,
    pub model_path: PathBuf,
    pub scores_path: PathBuf,
    pub train_log_path: PathBuf,
    pub report_path: PathBuf,
    pub summary_path: PathBuf,
    pub subsample_paths: Vec<PathBuf>,
    pub diagnostic_paths: Vec<PathBuf>,
}

/// `policy,fraction,seed,test_acc`, one row per run.
pub fn write_report_csv(runs: &[RunResult], path: &Path) -> Result<()> {
    let mut out = String::from("policy,fraction,seed,test_acc\n");
    for r in runs {
        out.push_str(&format!("{},{},{},{}\n", r.policy, r.fraction, r.seed, r.test_acc));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Human-readable table of mean accuracy per policy and fraction.
pub fn summary_text(full_test_acc: f64, splits: &Splits, runs: &[RunResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dataset: {}", splits.train.source_id());
    let _ = writeln!(
        s,
        "examples: {} train, {} validation, {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let _ = writeln!(s, "full-data test accuracy: {:.2}%", 100.0 * full_test_acc);
    if runs.is_empty() {
        return s;
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<14} {:>9} {:>7} {:>9}  per seed", "policy", "fraction", "k", "mean");
    let mut groups: Vec<(PolicyKind, f64)> = runs.iter().map(|r| (r.policy, r.fraction)).collect();
    groups.dedup();
    for (policy, fraction) in groups {
        let rows: Vec<&RunResult> = runs
            .iter()
            .filter(|r| r.policy == policy && r.fraction == fraction)
            .collect();
        let mean = rows.iter().map(|r| r.test_acc).sum::<f64>() / rows.len() as f64;
        let per: Vec<String> = rows
            .iter()
            .map(|r| format!("{}:{:.2}", r.seed, 100.0 * r.test_acc))
            .collect();
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>7} {:>8.2}%  {}",
            policy.name(),
            fraction,
            rows[0].k,
            100.0 * mean,
            per.join(" ")
        );
    }
    s
}

/// Stage timings, rewritten after every stage so that a failed run leaves
/// an accurate record behind.
struct Manifest {
    path: PathBuf,
    lines: Vec<String>,
}

impl Manifest {
    fn new(path: PathBuf) -> Self {
        Manifest {
            path,
            lines: Vec::new(),
        }
    }

    fn flush(&self, complete: bool) -> Result<()> {
        let mut text = self.lines.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&format!("complete={complete}\n"));
        fs::write(&self.path, text)?;
        Ok(())
    }

    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        info!("stage {name}");
        let start = Instant::now();
        let out = f();
        let secs = start.elapsed().as_secs_f64();
        let status = if out.is_ok() { "ok" } else { "failed" };
        self.lines.push(format!("stage.{name}.seconds={secs:.3}"));
        self.lines.push(format!("stage.{name}.status={status}"));
        // A manifest write failure must not mask the stage's own error.
        let _ = self.flush(false);
        out.map_err(|e| e.at_stage(name))
    }
}

fn run_name(policy: PolicyKind, fraction: f64, seed: u64) -> String {
    format!("{policy}_f{fraction}_s{seed}")
}

/// Run the full analysis described by `cfg`.
pub fn run_analysis(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate().map_err(|e| e.at_stage("config"))?;
    let out = cfg.output_dir.clone();
    for sub in ["", "subsamples", "retrain", "diagnostics"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::from(e).at_stage("setup"))?;
    }
    fs::write(out.join("config.txt"), cfg.to_text()).map_err(|e| Error::from(e).at_stage("setup"))?;
    let mut manifest = Manifest::new(out.join("manifest.txt"));
    manifest.flush(false).map_err(|e| e.at_stage("setup"))?;

    let splits = manifest.stage("load", || load_splits(&cfg.dataset, cfg.val_fraction, cfg.seed))?;
    let arch = manifest.stage("model", || cfg.model.resolve(splits.train.feature_shape()))?;
    info!(
        "{} train / {} val / {} test examples, architecture {arch}",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );

    let model_path = out.join("model.json");
    let train_log_path = out.join("train_log.csv");
    let (model, log) = manifest.stage("train", || {
        let (model, log) = train_full(&arch, &splits, &cfg.train, cfg.seed)?;
        model.save(&model_path)?;
        log.write_epochs_csv(&train_log_path)?;
        log.write_probe_csv(&out.join("probes.csv"))?;
        Ok((model, log))
    })?;

    let full_test_acc = manifest.stage("evaluate", || evaluate(&model, &splits.test))?;
    info!("full-data test accuracy {:.4}", full_test_acc);

    let scores_path = out.join("scores.csv");
    let scores = manifest.stage("score", || {
        let scores = score_model(&model, &splits.train, cfg.norm, cfg.seed)?;
        scores.write(&scores_path)?;
        Ok(scores)
    })?;

    let mut runs = Vec::new();
    let mut subsample_paths = Vec::new();
    manifest.stage("subsample", || {
        for &kind in &cfg.policies {
            for &fraction in &cfg.fractions {
                for &seed in &cfg.repeat_seeds {
                    let policy = SelectionPolicy {
                        kind,
                        discard_fraction: cfg.discard_fraction,
                        seed,
                    };
                    let run = run_subsample_analysis(&scores, &splits, &arch, &policy, fraction, &cfg.train)?;
                    let name = run_name(kind, fraction, seed);
                    let path = out.join("subsamples").join(format!("{name}.idx"));
                    run.subsample.write(&path)?;
                    run.log.write_epochs_csv(&out.join("retrain").join(format!("{name}.csv")))?;
                    info!("{name}: k = {} test accuracy {:.4}", run.subsample.k, run.test_acc);
                    subsample_paths.push(path);
                    runs.push(RunResult {
                        policy: kind,
                        fraction,
                        seed,
                        k: run.subsample.k,
                        test_acc: run.test_acc,
                    });
                }
            }
        }
        Ok(())
    })?;

    let diag = out.join("diagnostics");
    let diagnostic_paths = manifest.stage("diagnose", || {
        let d = &cfg.diagnostics;
        let n = scores.len();
        let extra: Vec<usize> = cfg
            .fractions
            .iter()
            .filter_map(|&f| subsample_size(n, f).ok())
            .collect();
        let ks = diagnostic_ks(n, &extra);
        let mut paths = Vec::new();

        let p = diag.join("entropy.csv");
        write_entropy_csv(&label_entropy_topk(&scores, &ks)?, &p)?;
        paths.push(p);

        let mut curves = vec![random_overlap_baseline(n, &ks, cfg.seed, d.overlap_trials)?];
        if let Some(other) = d.overlap_seed {
            let (second, _) = train_full(&arch, &splits, &cfg.train, other)?;
            let other_scores = score_model(&second, &splits.train, cfg.norm, other)?;
            curves.insert(0, overlap_curve(&scores, &other_scores, &ks)?);
        }
        let p = diag.join("overlap.csv");
        write_overlap_csv(&curves, &p)?;
        paths.push(p);

        if !log.probe_indices.is_empty() {
            let p = diag.join("heatmap.csv");
            write_heatmap_csv(&heatmap_matrix(&log)?, &p)?;
            paths.push(p);
        }

        let pairs = batch_bound_pairs(
            &model,
            &splits.train,
            d.bound_batch_size.min(n),
            d.bound_batches,
            cfg.seed,
        )?;
        let p = diag.join("bounds.csv");
        write_bounds_csv(&pairs, &p)?;
        paths.push(p);

        let groups = export_topk_examples(&scores, &splits.train, &d.export_percentiles, d.export_count.min(n))?;
        let p = diag.join("examples.csv");
        write_examples_csv(&groups, &scores, &splits.train, &p)?;
        paths.push(p);
        Ok(paths)
    })?;

    let report_path = out.join("report.csv");
    let summary_path = out.join("summary.txt");
    manifest.stage("report", || {
        write_report_csv(&runs, &report_path)?;
        fs::write(&summary_path, summary_text(full_test_acc, &splits, &runs))?;
        Ok(())
    })?;
    manifest.flush(true).map_err(|e| e.at_stage("report"))?;

    Ok(ExperimentReport {
        full_test_acc,
        runs,
        output_dir: out,
        model_path,
        scores_path,
        train_log_path,
        report_path,
        summary_path,
        subsample_paths,
        diagnostic_paths,
    })
}
