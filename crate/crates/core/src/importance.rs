//! Per-example gradient-norm importance scores and the batch bound check.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{GradientVector, Model, Role};
use crate::rng::{rng_for, Stream};

/// Examples per forward/backward pass while scoring.
const SCORE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Norm {
    L1,
    L2,
    Linf,
}

/// Which parameters enter the norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamSubset {
    All,
    BiasesOnly,
    WeightsOnly,
    /// Weight segment(s) of the highest layer index; biases excluded.
    LastLayerWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NormConfig {
    pub norm: Norm,
    pub subset: ParamSubset,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig {
            norm: Norm::L2,
            subset: ParamSubset::LastLayerWeights,
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L1 => "l1",
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

impl FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(Norm::L1),
            "l2" => Ok(Norm::L2),
            "linf" | "inf" | "max" => Ok(Norm::Linf),
            _ => Err(Error::Config(format!("unknown norm `{s}` (l1, l2, linf)"))),
        }
    }
}

impl fmt::Display for ParamSubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamSubset::All => "all",
            ParamSubset::BiasesOnly => "biases",
            ParamSubset::WeightsOnly => "weights",
            ParamSubset::LastLayerWeights => "last_layer_weights",
        })
    }
}

impl FromStr for ParamSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "all" => Ok(ParamSubset::All),
            "biases" | "a" => Ok(ParamSubset::BiasesOnly),
            "weights" | "b" => Ok(ParamSubset::WeightsOnly),
            "last_layer_weights" | "last" | "c" => Ok(ParamSubset::LastLayerWeights),
            _ => Err(Error::Config(format!(
                "unknown parameter subset `{s}` (all, biases, weights, last_layer_weights)"
            ))),
        }
    }
}

/// Norm of the coordinates of `grad` selected by `cfg.subset`.
pub fn gradient_norm(grad: &GradientVector, cfg: NormConfig) -> Result<f64> {
    let last_layer = grad
        .segments()
        .filter(|(t, _)| t.role == Role::Weight)
        .map(|(t, _)| t.layer_index)
        .max();
    let selected = grad.segments().filter(|(tag, _)| match cfg.subset {
        ParamSubset::All => true,
        ParamSubset::BiasesOnly => tag.role == Role::Bias,
        ParamSubset::WeightsOnly => tag.role == Role::Weight,
        ParamSubset::LastLayerWeights => tag.role == Role::Weight && Some(tag.layer_index) == last_layer,
    });
    let mut count = 0usize;
    let mut acc = 0.0f64;
    for (_, values) in selected {
        count += values.len();
        match cfg.norm {
            Norm::L1 => acc += values.iter().map(|v| v.abs()).sum::<f64>(),
            Norm::L2 => acc += values.iter().map(|v| v * v).sum::<f64>(),
            Norm::Linf => acc = values.iter().fold(acc, |m, v| m.max(v.abs())),
        }
    }
    if count == 0 {
        return Err(Error::domain(format!("parameter subset `{}` selects no coordinates", cfg.subset)));
    }
    Ok(match cfg.norm {
        Norm::L2 => acc.sqrt(),
        _ => acc,
    })
}

/// Importance score `g_i` for every training example, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    scores: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
    pub norm_config: NormConfig,
    pub model_id: String,
    pub seed: u64,
}

impl ScoreTable {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>, class_count: usize, norm_config: NormConfig) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!("{} scores for {} labels", scores.len(), labels.len())));
        }
        if let Some(bad) = scores.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::Numeric(format!("score {bad} is not a finite non-negative value")));
        }
        if class_count < 2 || labels.iter().any(|&y| y >= class_count) {
            return Err(Error::domain("labels outside the class range"));
        }
        Ok(ScoreTable {
            scores,
            labels,
            class_count,
            norm_config,
            model_id: String::new(),
            seed: 0,
        })
    }

    pub fn with_model_id(mut self, id: impl Into<String>) -> Self {
        self.model_id = id.into();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Indices sorted by descending score, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }

    pub fn meta_path(csv_path: &Path) -> PathBuf {
        let mut s = csv_path.as_os_str().to_owned();
        s.push(".meta");
        PathBuf::from(s)
    }

    /// `index,label,score` CSV plus a `key=value` sidecar at `<path>.meta`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::from("index,label,score\n");
        for (i, (s, y)) in self.scores.iter().zip(&self.labels).enumerate() {
            out.push_str(&format!("{i},{y},{s}\n"));
        }
        fs::write(path, out)?;
        let meta = format!(
            "norm={}\nsubset={}\nmodel_id={}\nseed={}\nclass_count={}\n",
            self.norm_config.norm, self.norm_config.subset, self.model_id, self.seed, self.class_count
        );
        fs::write(Self::meta_path(path), meta)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let meta_text = fs::read_to_string(Self::meta_path(path))?;
        let mut norm_config = NormConfig::default();
        let mut model_id = String::new();
        let mut seed = 0;
        let mut class_count = None;
        for line in meta_text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad metadata line `{line}`")))?;
            let num = |v: &str| v.parse::<u64>().map_err(|_| Error::Parse(format!("bad {k} `{v}`")));
            match k {
                "norm" => norm_config.norm = v.parse()?,
                "subset" => norm_config.subset = v.parse()?,
                "model_id" => model_id = v.to_string(),
                "seed" => seed = num(v)?,
                "class_count" => class_count = Some(num(v)? as usize),
                _ => return Err(Error::Parse(format!("unknown metadata key `{k}`"))),
            }
        }
        let mut reader = csv::Reader::from_path(path)?;
        if reader.headers()?.iter().collect::<Vec<_>>() != ["index", "label", "score"] {
            return Err(Error::Parse(format!("{}: expected header index,label,score", path.display())));
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for (row, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = || Error::Parse(format!("{}: bad row {}", path.display(), row + 1));
            if rec[0].parse::<usize>().map_err(|_| bad())? != row {
                return Err(Error::Parse(format!("{}: rows out of order at {}", path.display(), row + 1)));
            }
            labels.push(rec[1].parse().map_err(|_| bad())?);
            scores.push(rec[2].parse().map_err(|_| bad())?);
        }
        let class_count = class_count
            .unwrap_or_else(|| labels.iter().max().map_or(2, |&m: &usize| (m + 1).max(2)));
        Ok(ScoreTable::new(scores, labels, class_count, norm_config)?
            .with_model_id(model_id)
            .with_seed(seed))
    }
}

/// Score every example of `dataset` by the norm of its own loss gradient.
/// Chunks are processed in parallel; output order is dataset order.
pub fn score_dataset(model: &Model, dataset: &Dataset, cfg: NormConfig) -> Result<ScoreTable> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let chunks: Vec<Vec<f64>> = indices
        .par_chunks(SCORE_CHUNK)
        .map(|chunk| {
            let (x, y) = dataset.batch(chunk)?;
            model
                .per_example_gradients(&x, &y)?
                .iter()
                .map(|g| gradient_norm(g, cfg))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    Ok(ScoreTable::new(
        chunks.into_iter().flatten().collect(),
        dataset.labels().to_vec(),
        dataset.class_count(),
        cfg,
    )?
    .with_model_id(model.architecture().to_string()))
}

/// Norm of a batch's summed gradient next to the sum of per-example norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundPair {
    pub lhs: f64,
    pub rhs: f64,
    pub batch_size: usize,
}

/// `‖Σ ∇L_i‖₂` vs `Σ ‖∇L_i‖₂` over all parameters for `n_batches` seeded
/// random batches (without replacement inside a batch).
pub fn batch_bound_pairs(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    n_batches: usize,
    seed: u64,
) -> Result<Vec<BoundPair>> {
    if n_batches == 0 {
        return Err(Error::domain("need at least one batch"));
    }
    if batch_size == 0 || batch_size > dataset.len() {
        return Err(Error::domain(format!(
            "batch size {batch_size} outside [1, {}]",
            dataset.len()
        )));
    }
    let l2 = NormConfig {
        norm: Norm::L2,
        subset: ParamSubset::All,
    };
    (0..n_batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng_for(seed, Stream::Bounds, b as u64);
            let idx = index::sample(&mut rng, dataset.len(), batch_size).into_vec();
            let (x, y) = dataset.batch(&idx)?;
            let grads = model.per_example_gradients(&x, &y)?;
            let mut rhs = 0.0;
            let mut total = grads[0].clone();
            rhs += gradient_norm(&grads[0], l2)?;
            for g in &grads[1..] {
                rhs += gradient_norm(g, l2)?;
                total.add_assign(g)?;
            }
            Ok(BoundPair {
                lhs: gradient_norm(&total, l2)?,
                rhs,
                batch_size,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, SegmentTag};
    use proptest::prelude::*;

    fn tag(layer_index: usize, role: Role) -> SegmentTag {
        SegmentTag { layer_index, role }
    }

    fn flat(values: Vec<f64>) -> GradientVector {
        GradientVector::from_segments(vec![(tag(0, Role::Weight), values)]).unwrap()
    }

    fn cfg(norm: Norm, subset: ParamSubset) -> NormConfig {
        NormConfig { norm, subset }
    }

    #[test]
    fn three_four_five() {
        let g = flat(vec![3.0, 4.0]);
        assert_eq!(gradient_norm(&g, cfg(Norm::L2, ParamSubset::All)).unwrap(), 5.0);
        assert_eq!(gradient_norm(&g, cfg(Norm::L1, ParamSubset::All)).unwrap(), 7.0);
        assert_eq!(gradient_norm(&g, cfg(Norm::Linf, ParamSubset::All)).unwrap(), 4.0);
        assert!(matches!(
            gradient_norm(&g, cfg(Norm::L2, ParamSubset::BiasesOnly)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn subsets_select_the_right_segments() {
        let g = GradientVector::from_segments(vec![
            (tag(0, Role::Weight), vec![1.0, -2.0]),
            (tag(0, Role::Bias), vec![10.0]),
            (tag(1, Role::Weight), vec![-3.0, 4.0]),
            (tag(1, Role::Bias), vec![100.0]),
        ])
        .unwrap();
        let n = |s| gradient_norm(&g, cfg(Norm::L1, s)).unwrap();
        assert_eq!(n(ParamSubset::All), 120.0);
        assert_eq!(n(ParamSubset::BiasesOnly), 110.0);
        assert_eq!(n(ParamSubset::WeightsOnly), 10.0);
        assert_eq!(n(ParamSubset::LastLayerWeights), 7.0);
    }

    #[test]
    fn last_layer_norm_matches_recomputation() {
        let model = Model::new(
            Architecture::Mlp {
                input_dim: 5,
                hidden: vec![6, 4],
            },
            3,
            2,
        )
        .unwrap();
        let g = model.per_example_gradient(&[0.3, -1.0, 0.5, 2.0, 0.1], 1).unwrap();
        let last: &[f64] = g.segment(4);
        assert_eq!(model.segments()[4].name, "dense2.weight");
        let direct = last.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(gradient_norm(&g, NormConfig::default()).unwrap(), direct);
    }

    proptest! {
        #[test]
        fn l2_is_absolutely_homogeneous(values in prop::collection::vec(-1e3f64..1e3, 1..40), c in -50f64..50.0) {
            let g = flat(values.clone());
            let scaled = flat(values.iter().map(|v| v * c).collect());
            let l2 = cfg(Norm::L2, ParamSubset::All);
            let a = gradient_norm(&scaled, l2).unwrap();
            let b = c.abs() * gradient_norm(&g, l2).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300) + 1e-300);
        }
    }

    fn toy_dataset() -> Dataset {
        Dataset::new(
            vec![0.5, 1.0, -0.5, 2.0, 0.5, 1.0, 0.0, -1.0, 3.0, 0.2],
            vec![2],
            vec![1, 0, 1, 1, 0],
            2,
            "toy",
        )
        .unwrap()
    }

    #[test]
    fn identical_examples_score_identically() {
        let model = Model::new(
            Architecture::Mlp {
                input_dim: 2,
                hidden: vec![3],
            },
            2,
            1,
        )
        .unwrap();
        let d = toy_dataset();
        let t = score_dataset(&model, &d, NormConfig::default()).unwrap();
        assert_eq!(t.len(), 5);
        assert_eq!(t.scores()[0], t.scores()[2]);
        assert_eq!(t, score_dataset(&model, &d, NormConfig::default()).unwrap());
    }

    #[test]
    fn saturated_example_scores_near_zero() {
        let mut model = Model::zeros(Architecture::Linear { input_dim: 1 }, 2).unwrap();
        model.segment_mut("dense0.bias").unwrap().values.data_mut().copy_from_slice(&[40.0, -40.0]);
        let d = Dataset::new(vec![1.0], vec![1], vec![0], 2, "s").unwrap();
        let t = score_dataset(&model, &d, cfg(Norm::L2, ParamSubset::All)).unwrap();
        assert!(t.scores()[0] <= 1e-8);
    }

    #[test]
    fn bound_pairs_edge_cases() {
        let model = Model::new(Architecture::Linear { input_dim: 2 }, 2, 4).unwrap();
        let d = toy_dataset();
        for p in batch_bound_pairs(&model, &d, 1, 20, 0).unwrap() {
            assert_eq!(p.lhs, p.rhs);
        }
        for p in batch_bound_pairs(&model, &d, 3, 20, 0).unwrap() {
            assert!(p.lhs <= p.rhs * (1.0 + 1e-12));
        }
        assert!(batch_bound_pairs(&model, &d, 2, 0, 0).is_err());
        assert!(batch_bound_pairs(&model, &d, 6, 1, 0).is_err());

        // Two copies of one example: colinear gradients.
        let twin = d.subset(&[0, 0]).unwrap();
        let p = batch_bound_pairs(&model, &twin, 2, 1, 0).unwrap()[0];
        let g = model.per_example_gradient(d.example(0), d.label(0)).unwrap();
        let single = gradient_norm(&g, cfg(Norm::L2, ParamSubset::All)).unwrap();
        assert!((p.lhs - 2.0 * single).abs() <= 1e-12 * single);
        assert!((p.rhs - 2.0 * single).abs() <= 1e-12 * single);
    }

    #[test]
    fn opposite_gradients_cancel() {
        // Zero linear model at p = [0.5, 0.5]: labels 0 and 1 give ±outer([.5,-.5], x).
        let model = Model::zeros(Architecture::Linear { input_dim: 3 }, 2).unwrap();
        let d = Dataset::new(vec![0.2, -1.0, 0.7, 0.2, -1.0, 0.7], vec![3], vec![0, 1], 2, "pm").unwrap();
        let p = batch_bound_pairs(&model, &d, 2, 1, 0).unwrap()[0];
        assert!(p.lhs <= 1e-8);
        let expected = 2.0 * (0.5f64.powi(2) * 2.0 * (1.0 + 0.04 + 1.0 + 0.49)).sqrt();
        assert!((p.rhs - expected).abs() < 1e-12);
    }

    #[test]
    fn csv_roundtrip_with_sidecar() {
        let t = ScoreTable::new(vec![0.1, 0.0, 1.0 / 3.0, 7e-300], vec![0, 1, 2, 1], 3, cfg(Norm::L1, ParamSubset::WeightsOnly))
            .unwrap()
            .with_model_id("m1")
            .with_seed(42);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scores.csv");
        t.write(&p).unwrap();
        assert!(fs::read_to_string(&p).unwrap().starts_with("index,label,score\n0,0,0.1\n"));
        assert_eq!(ScoreTable::read(&p).unwrap(), t);
    }

    #[test]
    fn rejects_negative_scores() {
        assert!(ScoreTable::new(vec![-1.0], vec![0], 2, NormConfig::default()).is_err());
    }
}
