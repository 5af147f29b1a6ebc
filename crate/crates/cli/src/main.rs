use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gradsift::data::{write_csv, MnistFiles, SynthKind, SynthSpec};
use gradsift::diagnostics::{
    export_topk_examples, heatmap_matrix, label_entropy_topk, overlap_curve, random_overlap_baseline,
    write_bounds_csv, write_entropy_csv, write_examples_csv, write_heatmap_csv, write_overlap_csv,
};
use gradsift::harness::{
    diagnostic_ks, load_splits, run_analysis, run_subsample_analysis, score_model, subsample_size,
    summary_text, train_full, DatasetSource, ExperimentConfig, Splits,
};
use gradsift::importance::{batch_bound_pairs, ScoreTable};
use gradsift::sampling::{select, PolicyKind, SelectionPolicy};
use gradsift::training::{evaluate, TrainLog};
use gradsift::{Architecture, Model};

/// Gradient-magnitude importance scoring and subsampling of training data.
#[derive(Parser)]
#[command(name = "gradsift", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key=value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.lr=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Experiment seed (split and full-data run); the policy seed for `subsample` and `retrain`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root holding the MNIST IDX files (directly or under `mnist/`).
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the full training split and report test accuracy.
    Train,
    /// Score every training example with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
    },
    /// Select a subsample from a score table.
    Subsample {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        discard_fraction: Option<f64>,
    },
    /// Select a subsample, retrain on it from scratch and report test accuracy.
    Retrain {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long)]
        fraction: f64,
        #[arg(long)]
        discard_fraction: Option<f64>,
    },
    /// Write entropy, overlap, heatmap and bound CSVs.
    Diagnose {
        #[arg(long)]
        scores: PathBuf,
        /// Second score table for the top-k overlap curve.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// `probes.csv` from a training run, for the heatmap.
        #[arg(long)]
        probes: Option<PathBuf>,
        /// Trained model, for the bound scatter and example export.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Comma-separated top-k sizes; a log-spaced grid by default.
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Run the whole pipeline: train, score, subsample, retrain, diagnose.
    Analyze,
    /// Write a synthetic dataset as `train.csv` and `test.csv`.
    Synth {
        #[arg(long, default_value = "redundant")]
        kind: String,
        #[arg(long, default_value_t = 10)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        dim: usize,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 1000)]
        test_n: usize,
        #[arg(long)]
        spread: Option<f64>,
        #[arg(long)]
        modes: Option<usize>,
    },
}

/// `seed_is_policy`: `--seed` seeds the selection policy and leaves the
/// experiment seed (and with it the validation split) alone.
fn experiment_config(common: &Common, seed_is_policy: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(root) = &common.data_dir {
        let dir = if MnistFiles::in_dir(root).exist() {
            root.clone()
        } else {
            root.join("mnist")
        };
        match &mut cfg.dataset {
            DatasetSource::Idx { dir: d, .. } => *d = dir,
            _ => bail!("--data-dir applies only to IDX datasets"),
        }
    }
    if let (Some(seed), false) = (common.seed, seed_is_policy) {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare(cfg: &ExperimentConfig) -> Result<(Splits, Architecture)> {
    let splits = load_splits(&cfg.dataset, cfg.val_fraction, cfg.seed).context("load")?;
    let arch = cfg.model.resolve(splits.train.feature_shape())?;
    Ok((splits, arch))
}

fn policy_for(cfg: &ExperimentConfig, kind: PolicyKind, discard: Option<f64>, seed: Option<u64>) -> SelectionPolicy {
    SelectionPolicy {
        kind,
        discard_fraction: discard.unwrap_or(cfg.discard_fraction),
        seed: seed.unwrap_or(cfg.seed),
    }
}

fn read_scores(path: &Path) -> Result<ScoreTable> {
    ScoreTable::read(path).with_context(|| format!("reading scores {}", path.display()))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    if let Command::Synth {
        kind,
        classes,
        dim,
        n,
        test_n,
        spread,
        modes,
    } = &cli.command
    {
        let seed = cli.common.seed.unwrap_or(0);
        let mut spec = match kind.as_str() {
            "redundant" => SynthSpec::redundant(*classes, *dim, *n, seed),
            "diverse" => SynthSpec::diverse(*classes, *dim, *n, seed),
            other => bail!("unknown synthetic kind `{other}` (redundant, diverse)"),
        };
        if let Some(s) = spread {
            spec.within_class_spread = *s;
        }
        if let Some(m) = modes {
            spec.modes_per_class = *m;
        }
        let out = cli.common.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&out)?;
        write_csv(&gradsift::data::synth(&spec)?, &out.join("train.csv"))?;
        write_csv(&gradsift::data::synth_holdout(&spec, *test_n)?, &out.join("test.csv"))?;
        let label = if spec.kind == SynthKind::Redundant { "redundant" } else { "diverse" };
        println!("wrote {label} train.csv ({n}) and test.csv ({test_n}) to {}", out.display());
        return Ok(());
    }

    let seed_is_policy = matches!(cli.command, Command::Subsample { .. } | Command::Retrain { .. });
    let cfg = experiment_config(&cli.common, seed_is_policy)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    match cli.command {
        Command::Train => {
            let (splits, arch) = prepare(&cfg)?;
            let (model, log) = train_full(&arch, &splits, &cfg.train, cfg.seed).context("train")?;
            model.save(&out.join("model.json"))?;
            log.write_epochs_csv(&out.join("train_log.csv"))?;
            log.write_probe_csv(&out.join("probes.csv"))?;
            let acc = evaluate(&model, &splits.test).context("evaluate")?;
            println!("{}", summary_text(acc, &splits, &[]).trim_end());
            println!("best epoch {} of {}", log.best_epoch, log.completed_epochs());
        }
        Command::Score { model } => {
            let (splits, _) = prepare(&cfg)?;
            let model = Model::load(&model).with_context(|| format!("loading {}", model.display()))?;
            let scores = score_model(&model, &splits.train, cfg.norm, cfg.seed).context("score")?;
            let path = out.join("scores.csv");
            scores.write(&path)?;
            println!("scored {} examples -> {}", scores.len(), path.display());
        }
        Command::Subsample {
            scores,
            policy,
            fraction,
            discard_fraction,
        } => {
            let scores = read_scores(&scores)?;
            let policy = policy_for(&cfg, policy, discard_fraction, cli.common.seed);
            let k = subsample_size(scores.len(), fraction).context("subsample")?;
            let sub = select(&policy, &scores, k).context("subsample")?;
            let path = out.join(format!("{}_f{fraction}_s{}.idx", policy.kind, policy.seed));
            sub.write(&path)?;
            println!("selected {k} of {} examples -> {}", scores.len(), path.display());
        }
        Command::Retrain {
            scores,
            policy,
            fraction,
            discard_fraction,
        } => {
            let (splits, arch) = prepare(&cfg)?;
            let scores = read_scores(&scores)?;
            let policy = policy_for(&cfg, policy, discard_fraction, cli.common.seed);
            let run = run_subsample_analysis(&scores, &splits, &arch, &policy, fraction, &cfg.train)
                .context("retrain")?;
            let name = format!("{}_f{fraction}_s{}", policy.kind, policy.seed);
            run.subsample.write(&out.join(format!("{name}.idx")))?;
            run.log.write_epochs_csv(&out.join(format!("{name}.csv")))?;
            run.model.save(&out.join(format!("{name}.model.json")))?;
            println!("policy,fraction,seed,test_acc");
            println!("{},{fraction},{},{}", policy.kind, policy.seed, run.test_acc);
        }
        Command::Diagnose {
            scores,
            compare,
            probes,
            model,
            ks,
        } => {
            let scores = read_scores(&scores)?;
            let ks = if ks.is_empty() {
                diagnostic_ks(scores.len(), &[])
            } else {
                ks
            };
            write_entropy_csv(&label_entropy_topk(&scores, &ks)?, &out.join("entropy.csv"))?;
            let mut curves = vec![random_overlap_baseline(
                scores.len(),
                &ks,
                cfg.seed,
                cfg.diagnostics.overlap_trials,
            )?];
            if let Some(other) = compare {
                curves.insert(0, overlap_curve(&scores, &read_scores(&other)?, &ks)?);
            }
            write_overlap_csv(&curves, &out.join("overlap.csv"))?;
            if let Some(p) = probes {
                let log = TrainLog::read_probe_csv(&p).with_context(|| format!("reading {}", p.display()))?;
                write_heatmap_csv(&heatmap_matrix(&log)?, &out.join("heatmap.csv"))?;
            }
            if let Some(p) = model {
                let (splits, _) = prepare(&cfg)?;
                let model = Model::load(&p).with_context(|| format!("loading {}", p.display()))?;
                let d = &cfg.diagnostics;
                let n = splits.train.len();
                let pairs = batch_bound_pairs(&model, &splits.train, d.bound_batch_size.min(n), d.bound_batches, cfg.seed)?;
                write_bounds_csv(&pairs, &out.join("bounds.csv"))?;
                let groups =
                    export_topk_examples(&scores, &splits.train, &d.export_percentiles, d.export_count.min(n))?;
                write_examples_csv(&groups, &scores, &splits.train, &out.join("examples.csv"))?;
            }
            println!("diagnostics written to {}", out.display());
        }
        Command::Analyze => {
            let report = run_analysis(&cfg)?;
            print!("{}", fs::read_to_string(&report.summary_path)?);
            println!("artifacts in {}", report.output_dir.display());
        }
        Command::Synth { .. } => unreachable!("handled above"),
    }
    Ok(())
}
