//! Labeled datasets: IDX and CSV ingestion, seeded splits, synthetic mixtures.

mod csv_format;
mod idx;
mod split;
mod synth;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use csv_format::{load_csv, write_csv};
pub use idx::{load_idx, load_mnist_dir, write_idx, MnistFiles};
pub use split::{split, SplitSpec};
pub use synth::{synth, synth_holdout, SynthKind, SynthSpec};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "DATA_DIR";

/// Immutable store of labeled examples.
///
/// `origin[i]` is the index of example `i` in the dataset it was carved
/// from, so scores computed on a split can be mapped back to the parent.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    feature_shape: Vec<usize>,
    labels: Vec<usize>,
    class_count: usize,
    source_id: String,
    origin: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
        class_count: usize,
        source_id: impl Into<String>,
    ) -> Result<Self> {
        let row: usize = feature_shape.iter().product();
        if row == 0 {
            return Err(Error::dim("examples need at least one feature"));
        }
        if features.len() != row * labels.len() {
            return Err(Error::dim(format!(
                "{} feature values for {} examples of size {row}",
                features.len(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(Error::domain("datasets need at least two classes"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::domain(format!("label {bad} outside [0, {class_count})")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite feature value".into()));
        }
        let origin = (0..labels.len()).collect();
        Ok(Dataset {
            features,
            feature_shape,
            labels,
            class_count,
            source_id: source_id.into(),
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.feature_shape
    }

    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let n = self.feature_len();
        &self.features[i * n..(i + 1) * n]
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// Examples at `indices`, in that order. Origins compose through.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::domain(format!(
                "index {bad} out of range for {} examples",
                self.len()
            )));
        }
        let mut features = Vec::with_capacity(indices.len() * self.feature_len());
        for &i in indices {
            features.extend_from_slice(self.example(i));
        }
        Ok(Dataset {
            features,
            feature_shape: self.feature_shape.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            source_id: self.source_id.clone(),
            origin: indices.iter().map(|&i| self.origin[i]).collect(),
        })
    }

    /// The first `n` examples (all of them if `n >= len`).
    pub fn truncate(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx).expect("prefix indices are in range")
    }

    /// Batch tensor `[indices.len(), ..feature_shape]` and its labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::domain("empty batch"));
        }
        let rows: Vec<&[f64]> = indices.iter().map(|&i| self.example(i)).collect();
        let x = Tensor::stack(&self.feature_shape, &rows)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Per-class example counts.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_construction() {
        assert!(Dataset::new(vec![0.0; 6], vec![3], vec![0, 1], 2, "t").is_ok());
        assert!(Dataset::new(vec![0.0; 5], vec![3], vec![0, 1], 2, "t").is_err());
        assert!(matches!(
            Dataset::new(vec![0.0; 6], vec![3], vec![0, 2], 2, "t"),
            Err(Error::Domain(_))
        ));
        assert!(Dataset::new(vec![], vec![3], vec![], 2, "t").unwrap().is_empty());
    }

    #[test]
    fn subset_composes_origins() {
        let d = Dataset::new((0..10).map(f64::from).collect(), vec![2], vec![0, 1, 0, 1, 0], 2, "t").unwrap();
        let s = d.subset(&[4, 1, 3]).unwrap();
        assert_eq!(s.origin(), &[4, 1, 3]);
        let ss = s.subset(&[2, 0]).unwrap();
        assert_eq!(ss.origin(), &[3, 4]);
        assert_eq!(ss.example(0), &[6.0, 7.0]);
        assert_eq!(ss.labels(), &[1, 0]);
        assert!(d.subset(&[5]).is_err());
    }
}
