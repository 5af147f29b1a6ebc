//! Experiment configuration and its flat `section.key=value` text form.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{SynthKind, SynthSpec, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::importance::NormConfig;
use crate::nn::{Architecture, CnnShape};
use crate::sampling::PolicyKind;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSource {
    /// Directory with the four MNIST IDX files; optional prefixes of each split.
    Idx {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Csv { train: PathBuf, test: PathBuf },
    Synth { spec: SynthSpec, test_n: usize },
}

impl DatasetSource {
    /// MNIST under `$DATA_DIR/mnist`, or `data/mnist` when the variable is unset.
    pub fn default_idx() -> Self {
        let root = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
        DatasetSource::Idx {
            dir: root.join("mnist"),
            train_limit: None,
            test_limit: None,
        }
    }
}

/// Architecture family; input sizes come from the dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Linear,
    Mlp {
        hidden: Vec<usize>,
    },
    SmallCnn {
        kernel: usize,
        conv1_filters: usize,
        conv2_filters: usize,
        hidden: usize,
    },
}

impl ModelSpec {
    pub fn mnist_cnn() -> Self {
        let s = CnnShape::mnist();
        ModelSpec::SmallCnn {
            kernel: s.kernel,
            conv1_filters: s.conv1_filters,
            conv2_filters: s.conv2_filters,
            hidden: s.hidden,
        }
    }

    /// Concrete architecture for examples of shape `feature_shape`.
    pub fn resolve(&self, feature_shape: &[usize]) -> Result<Architecture> {
        let input_dim: usize = feature_shape.iter().product();
        let arch = match self {
            ModelSpec::Linear => Architecture::Linear { input_dim },
            ModelSpec::Mlp { hidden } => Architecture::Mlp {
                input_dim,
                hidden: hidden.clone(),
            },
            &ModelSpec::SmallCnn {
                kernel,
                conv1_filters,
                conv2_filters,
                hidden,
            } => {
                let (height, width, channels) = match *feature_shape {
                    [h, w] => (h, w, 1),
                    [h, w, c] => (h, w, c),
                    _ => {
                        return Err(Error::Config(format!(
                            "a CNN needs image-shaped examples, got shape {feature_shape:?}"
                        )))
                    }
                };
                Architecture::SmallCnn(CnnShape {
                    height,
                    width,
                    channels,
                    kernel,
                    conv1_filters,
                    conv2_filters,
                    hidden,
                })
            }
        };
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsConfig {
    pub bound_batches: usize,
    pub bound_batch_size: usize,
    pub export_percentiles: Vec<f64>,
    pub export_count: usize,
    /// Train a second full-data model with this seed and report top-k overlap against it.
    pub overlap_seed: Option<u64>,
    pub overlap_trials: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            bound_batches: 100,
            bound_batch_size: 64,
            export_percentiles: vec![99.0, 95.0, 50.0, 5.0],
            export_count: 16,
            overlap_seed: None,
            overlap_trials: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub model: ModelSpec,
    /// Shared by the full run and every retrain; the retrain seed is replaced per repeat.
    pub train: TrainConfig,
    pub norm: NormConfig,
    pub policies: Vec<PolicyKind>,
    pub discard_fraction: f64,
    /// Ascending, each in (0, 1].
    pub fractions: Vec<f64>,
    pub repeat_seeds: Vec<u64>,
    /// Seeds the validation split and the full-data run.
    pub seed: u64,
    pub val_fraction: f64,
    pub output_dir: PathBuf,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default_idx(),
            model: ModelSpec::mnist_cnn(),
            train: TrainConfig::default(),
            norm: NormConfig::default(),
            policies: PolicyKind::ALL.to_vec(),
            discard_fraction: 0.05,
            fractions: vec![0.002, 0.006, 0.03, 0.1],
            repeat_seeds: vec![1, 2, 3],
            seed: 0,
            val_fraction: 0.1,
            output_dir: PathBuf::from("out"),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: `{v}`")))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_opt<T: FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v.trim() {
        "" | "none" => Ok(None),
        s => parse(key, s).map(Some),
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl ExperimentConfig {
    /// Parse `section.key=value` lines on top of the defaults. Blank lines
    /// and lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Apply every `key=value` line of `text` as an override.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Set one key. Switching `dataset.kind` or `model.kind` resets that
    /// section to its defaults.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "split.val_fraction" => self.val_fraction = parse(key, v)?,

            "dataset.kind" => {
                self.dataset = match v {
                    "idx" | "mnist" => DatasetSource::default_idx(),
                    "csv" => DatasetSource::Csv {
                        train: PathBuf::from("train.csv"),
                        test: PathBuf::from("test.csv"),
                    },
                    "synth" => DatasetSource::Synth {
                        spec: SynthSpec::redundant(10, 20, 2000, 0),
                        test_n: 1000,
                    },
                    _ => return Err(Error::Config(format!("unknown dataset.kind `{v}` (idx, csv, synth)"))),
                }
            }
            "dataset.dir" | "dataset.train_limit" | "dataset.test_limit" => {
                let DatasetSource::Idx {
                    dir,
                    train_limit,
                    test_limit,
                } = &mut self.dataset
                else {
                    return Err(Error::Config(format!("{key} requires dataset.kind=idx")));
                };
                match key {
                    "dataset.dir" => *dir = PathBuf::from(v),
                    "dataset.train_limit" => *train_limit = parse_opt(key, v)?,
                    _ => *test_limit = parse_opt(key, v)?,
                }
            }
            "dataset.train" | "dataset.test" => {
                let DatasetSource::Csv { train, test } = &mut self.dataset else {
                    return Err(Error::Config(format!("{key} requires dataset.kind=csv")));
                };
                *(if key == "dataset.train" { train } else { test }) = PathBuf::from(v);
            }
            k if k.starts_with("synth.") => {
                let DatasetSource::Synth { spec, test_n } = &mut self.dataset else {
                    return Err(Error::Config(format!("{key} requires dataset.kind=synth")));
                };
                match &k["synth.".len()..] {
                    "kind" => {
                        let fresh = match v {
                            "redundant" => SynthSpec::redundant(spec.class_count, spec.dim, spec.n, spec.seed),
                            "diverse" => SynthSpec::diverse(spec.class_count, spec.dim, spec.n, spec.seed),
                            _ => return Err(Error::Config(format!("unknown synth.kind `{v}`"))),
                        };
                        *spec = fresh;
                    }
                    "classes" => spec.class_count = parse(key, v)?,
                    "dim" => spec.dim = parse(key, v)?,
                    "n" => spec.n = parse(key, v)?,
                    "seed" => spec.seed = parse(key, v)?,
                    "spread" => spec.within_class_spread = parse(key, v)?,
                    "modes" => spec.modes_per_class = parse(key, v)?,
                    "test_n" => *test_n = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key `{key}`"))),
                }
            }

            "model.kind" => {
                self.model = match v {
                    "linear" => ModelSpec::Linear,
                    "mlp" => ModelSpec::Mlp { hidden: vec![64] },
                    "cnn" => ModelSpec::mnist_cnn(),
                    _ => return Err(Error::Config(format!("unknown model.kind `{v}` (linear, mlp, cnn)"))),
                }
            }
            "model.hidden" => match &mut self.model {
                ModelSpec::Mlp { hidden } => *hidden = parse_list(key, v)?,
                ModelSpec::SmallCnn { hidden, .. } => *hidden = parse(key, v)?,
                ModelSpec::Linear => return Err(Error::Config("a linear model has no hidden layer".into())),
            },
            "model.kernel" | "model.conv1" | "model.conv2" => {
                let ModelSpec::SmallCnn {
                    kernel,
                    conv1_filters,
                    conv2_filters,
                    ..
                } = &mut self.model
                else {
                    return Err(Error::Config(format!("{key} requires model.kind=cnn")));
                };
                let slot = match key {
                    "model.kernel" => kernel,
                    "model.conv1" => conv1_filters,
                    _ => conv2_filters,
                };
                *slot = parse(key, v)?;
            }

            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.base_lr = parse(key, v)?,
            "train.lr_decay" => self.train.lr_decay_factor = parse(key, v)?,
            "train.decay_epochs" => self.train.lr_decay_epochs = parse_list(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.patience" => self.train.early_stop_patience = parse(key, v)?,
            "train.probes" => self.train.probe_set_size = parse(key, v)?,

            "score.norm" => {
                self.norm.norm = parse(key, v)?;
                self.train.probe_norm = self.norm;
            }
            "score.subset" => {
                self.norm.subset = parse(key, v)?;
                self.train.probe_norm = self.norm;
            }

            "select.policies" => self.policies = parse_list(key, v)?,
            "select.discard_fraction" => self.discard_fraction = parse(key, v)?,
            "select.fractions" => self.fractions = parse_list(key, v)?,
            "select.seeds" => self.repeat_seeds = parse_list(key, v)?,

            "diag.bound_batches" => self.diagnostics.bound_batches = parse(key, v)?,
            "diag.bound_batch_size" => self.diagnostics.bound_batch_size = parse(key, v)?,
            "diag.percentiles" => self.diagnostics.export_percentiles = parse_list(key, v)?,
            "diag.export_count" => self.diagnostics.export_count = parse(key, v)?,
            "diag.overlap_seed" => self.diagnostics.overlap_seed = parse_opt(key, v)?,
            "diag.overlap_trials" => self.diagnostics.overlap_trials = parse(key, v)?,

            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.policies.is_empty() || self.repeat_seeds.is_empty() {
            return Err(Error::Config("policies and repeat seeds must be non-empty".into()));
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config("fractions must lie in (0, 1]".into()));
        }
        if self.fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("fractions must be strictly ascending".into()));
        }
        if !(0.0..1.0).contains(&self.discard_fraction) {
            return Err(Error::Config("discard_fraction must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 1)".into()));
        }
        let d = &self.diagnostics;
        if d.bound_batches == 0 || d.bound_batch_size == 0 || d.export_count == 0 || d.overlap_trials == 0 {
            return Err(Error::Config("diagnostic counts must be positive".into()));
        }
        Ok(())
    }

    /// Every setting as `key=value` lines; [`ExperimentConfig::parse`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k}={v}");
        };
        kv("seed", self.seed.to_string());
        kv("output.dir", self.output_dir.display().to_string());
        kv("split.val_fraction", self.val_fraction.to_string());
        match &self.dataset {
            DatasetSource::Idx {
                dir,
                train_limit,
                test_limit,
            } => {
                kv("dataset.kind", "idx".into());
                kv("dataset.dir", dir.display().to_string());
                kv("dataset.train_limit", opt(train_limit));
                kv("dataset.test_limit", opt(test_limit));
            }
            DatasetSource::Csv { train, test } => {
                kv("dataset.kind", "csv".into());
                kv("dataset.train", train.display().to_string());
                kv("dataset.test", test.display().to_string());
            }
            DatasetSource::Synth { spec, test_n } => {
                kv("dataset.kind", "synth".into());
                let kind = match spec.kind {
                    SynthKind::Redundant => "redundant",
                    SynthKind::Diverse => "diverse",
                };
                kv("synth.kind", kind.into());
                kv("synth.classes", spec.class_count.to_string());
                kv("synth.dim", spec.dim.to_string());
                kv("synth.n", spec.n.to_string());
                kv("synth.seed", spec.seed.to_string());
                kv("synth.spread", spec.within_class_spread.to_string());
                kv("synth.modes", spec.modes_per_class.to_string());
                kv("synth.test_n", test_n.to_string());
            }
        }
        match &self.model {
            ModelSpec::Linear => kv("model.kind", "linear".into()),
            ModelSpec::Mlp { hidden } => {
                kv("model.kind", "mlp".into());
                kv("model.hidden", join(hidden));
            }
            ModelSpec::SmallCnn {
                kernel,
                conv1_filters,
                conv2_filters,
                hidden,
            } => {
                kv("model.kind", "cnn".into());
                kv("model.kernel", kernel.to_string());
                kv("model.conv1", conv1_filters.to_string());
                kv("model.conv2", conv2_filters.to_string());
                kv("model.hidden", hidden.to_string());
            }
        }
        let t = &self.train;
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv("train.lr", t.base_lr.to_string());
        kv("train.lr_decay", t.lr_decay_factor.to_string());
        kv("train.decay_epochs", join(&t.lr_decay_epochs));
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.patience", t.early_stop_patience.to_string());
        kv("train.probes", t.probe_set_size.to_string());
        kv("score.norm", self.norm.norm.to_string());
        kv("score.subset", self.norm.subset.to_string());
        kv("select.policies", join(&self.policies));
        kv("select.discard_fraction", self.discard_fraction.to_string());
        kv("select.fractions", join(&self.fractions));
        kv("select.seeds", join(&self.repeat_seeds));
        let d = &self.diagnostics;
        kv("diag.bound_batches", d.bound_batches.to_string());
        kv("diag.bound_batch_size", d.bound_batch_size.to_string());
        kv("diag.percentiles", join(&d.export_percentiles));
        kv("diag.export_count", d.export_count.to_string());
        kv("diag.overlap_seed", opt(&d.overlap_seed));
        kv("diag.overlap_trials", d.overlap_trials.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::{Norm, ParamSubset};

    #[test]
    fn parses_sections_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# small run\n\
             dataset.kind=synth\n\
             synth.kind=diverse\n\
             synth.n=500\n\
             model.kind=mlp\n\
             model.hidden=32,16\n\
             train.lr=0.1\n\
             train.decay_epochs=5, 8\n\
             score.norm=l1\n\
             score.subset=biases\n\
             select.policies=random,max_gradient\n\
             select.fractions=0.05,0.5\n\
             \n\
             seed=7\n",
        )
        .unwrap();
        let DatasetSource::Synth { spec, test_n } = &cfg.dataset else {
            panic!("expected synth")
        };
        assert_eq!(spec.kind, SynthKind::Diverse);
        assert_eq!(spec.n, 500);
        assert_eq!(*test_n, 1000);
        assert_eq!(cfg.model, ModelSpec::Mlp { hidden: vec![32, 16] });
        assert_eq!(cfg.train.base_lr, 0.1);
        assert_eq!(cfg.train.lr_decay_epochs, vec![5, 8]);
        assert_eq!(cfg.norm.norm, Norm::L1);
        assert_eq!(cfg.norm.subset, ParamSubset::BiasesOnly);
        assert_eq!(cfg.train.probe_norm, cfg.norm);
        assert_eq!(cfg.policies, vec![PolicyKind::Random, PolicyKind::MaxGradient]);
        assert_eq!(cfg.seed, 7);
        cfg.validate().unwrap();
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply("dataset.train_limit=10000\ndiag.overlap_seed=4\nselect.seeds=5,6").unwrap();
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        for extra in ["dataset.kind=synth\nsynth.kind=diverse", "dataset.kind=csv\nmodel.kind=linear"] {
            let mut c = ExperimentConfig::default();
            c.apply(extra).unwrap();
            assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn rejects_bad_input() {
        for bad in [
            "nonsense",
            "train.lr=abc",
            "unknown.key=1",
            "synth.n=5",
            "model.kernel=3\nmodel.kind=linear\nmodel.kernel=3",
            "select.policies=best",
        ] {
            assert!(matches!(ExperimentConfig::parse(bad), Err(Error::Config(_))), "{bad}");
        }
        for bad in ["select.fractions=0.5,0.1", "select.fractions=0", "select.seeds=", "train.batch_size=0"] {
            assert!(ExperimentConfig::parse(bad).unwrap().validate().is_err(), "{bad}");
        }
    }

    #[test]
    fn cnn_resolves_from_image_shape() {
        let arch = ModelSpec::mnist_cnn().resolve(&[28, 28, 1]).unwrap();
        assert_eq!(arch, Architecture::SmallCnn(CnnShape::mnist()));
        assert!(ModelSpec::mnist_cnn().resolve(&[20]).is_err());
        assert_eq!(
            ModelSpec::Linear.resolve(&[4, 4]).unwrap(),
            Architecture::Linear { input_dim: 16 }
        );
    }
}
