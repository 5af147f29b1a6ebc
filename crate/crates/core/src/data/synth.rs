//! Gaussian-mixture datasets with controllable redundancy.
//!
//! `Redundant` mixtures put a few tight modes next to each class centroid,
//! so a handful of examples per class describes the class. `Diverse`
//! mixtures scatter many wide modes per class across the whole input box,
//! so every mode needs its own examples.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{rng_for, Stream};

/// Half-width of the box holding redundant class centroids.
const REDUNDANT_BOX: f64 = 1.0;
/// Half-width of the box holding diverse mode centers.
const DIVERSE_BOX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Redundant,
    Diverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub class_count: usize,
    pub dim: usize,
    pub n: usize,
    pub seed: u64,
    pub within_class_spread: f64,
    pub modes_per_class: usize,
}

impl SynthSpec {
    /// Two tight modes (spread 0.05) per class.
    pub fn redundant(class_count: usize, dim: usize, n: usize, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::Redundant,
            class_count,
            dim,
            n,
            seed,
            within_class_spread: 0.05,
            modes_per_class: 2,
        }
    }

    /// Sixteen wide modes (spread 0.5) per class.
    pub fn diverse(class_count: usize, dim: usize, n: usize, seed: u64) -> Self {
        SynthSpec {
            kind: SynthKind::Diverse,
            class_count,
            dim,
            n,
            seed,
            within_class_spread: 0.5,
            modes_per_class: 16,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::domain("synthetic data needs at least two classes"));
        }
        if self.n < self.class_count {
            return Err(Error::domain(format!(
                "n = {} is smaller than the class count {}",
                self.n, self.class_count
            )));
        }
        if self.dim == 0 || self.modes_per_class == 0 {
            return Err(Error::domain("dim and modes_per_class must be positive"));
        }
        if !(self.within_class_spread > 0.0 && self.within_class_spread.is_finite()) {
            return Err(Error::domain("within-class spread must be positive"));
        }
        Ok(())
    }

    fn source_id(&self) -> String {
        let kind = match self.kind {
            SynthKind::Redundant => "redundant",
            SynthKind::Diverse => "diverse",
        };
        format!(
            "synth:{kind}:c{}:d{}:m{}:s{}:seed{}",
            self.class_count, self.dim, self.modes_per_class, self.within_class_spread, self.seed
        )
    }
}

fn gaussian(rng: &mut ChaCha8Rng, center: &[f64], scale: f64) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn uniform_box(rng: &mut ChaCha8Rng, dim: usize, half_width: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-half_width..half_width)).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mode centers, indexed `[class][mode]`. Depends only on the layout seed.
fn layout(spec: &SynthSpec) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut rng = rng_for(spec.seed, Stream::SynthLayout, 0);
    let spread = spec.within_class_spread;
    match spec.kind {
        SynthKind::Redundant => {
            let min_sep = 10.0 * spread;
            let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(spec.class_count);
            let mut attempts = 0;
            while centroids.len() < spec.class_count {
                attempts += 1;
                if attempts > 100_000 {
                    return Err(Error::domain(format!(
                        "cannot place {} centroids {min_sep} apart in dimension {}",
                        spec.class_count, spec.dim
                    )));
                }
                let c = uniform_box(&mut rng, spec.dim, REDUNDANT_BOX);
                if centroids.iter().all(|o| distance(o, &c) >= min_sep) {
                    centroids.push(c);
                }
            }
            Ok(centroids
                .iter()
                .map(|c| (0..spec.modes_per_class).map(|_| gaussian(&mut rng, c, spread)).collect())
                .collect())
        }
        SynthKind::Diverse => Ok((0..spec.class_count)
            .map(|_| {
                (0..spec.modes_per_class)
                    .map(|_| uniform_box(&mut rng, spec.dim, DIVERSE_BOX))
                    .collect()
            })
            .collect()),
    }
}

fn sample(spec: &SynthSpec, n: usize, stream: Stream) -> Result<Dataset> {
    spec.validate()?;
    let modes = layout(spec)?;
    let mut rng = rng_for(spec.seed, stream, 0);
    let c = spec.class_count;
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::with_capacity(n);
    for (class, class_modes) in modes.iter().enumerate() {
        let count = n / c + usize::from(class < n % c);
        for j in 0..count {
            let mode = &class_modes[j % class_modes.len()];
            rows.push((gaussian(&mut rng, mode, spec.within_class_spread), class));
        }
    }
    rows.shuffle(&mut rng);
    let labels = rows.iter().map(|r| r.1).collect();
    let features = rows.into_iter().flat_map(|r| r.0).collect();
    Dataset::new(features, vec![spec.dim], labels, c, spec.source_id())
}

/// Draw `spec.n` balanced examples from the mixture.
pub fn synth(spec: &SynthSpec) -> Result<Dataset> {
    sample(spec, spec.n, Stream::SynthSample)
}

/// Fresh examples from the same mixture, independent of [`synth`]'s draw.
pub fn synth_holdout(spec: &SynthSpec, n: usize) -> Result<Dataset> {
    if n < spec.class_count {
        return Err(Error::domain("holdout smaller than the class count"));
    }
    sample(spec, n, Stream::SynthHoldout)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_classes() {
        for spec in [SynthSpec::redundant(10, 4, 100, 1), SynthSpec::diverse(10, 4, 100, 1)] {
            let d = synth(&spec).unwrap();
            assert_eq!(d.len(), 100);
            assert_eq!(d.class_histogram(), vec![10; 10]);
        }
        let d = synth(&SynthSpec::redundant(3, 2, 10, 0)).unwrap();
        assert_eq!(d.class_histogram(), vec![4, 3, 3]);
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::diverse(3, 5, 60, 9);
        assert_eq!(synth(&spec).unwrap(), synth(&spec).unwrap());
        let other = SynthSpec { seed: 10, ..spec.clone() };
        assert_ne!(synth(&spec).unwrap().features(), synth(&other).unwrap().features());
        assert_ne!(synth(&spec).unwrap().features(), synth_holdout(&spec, 60).unwrap().features());
    }

    #[test]
    fn redundant_centroids_are_separated() {
        let spec = SynthSpec::redundant(10, 8, 10, 4);
        let modes = layout(&spec).unwrap();
        // Modes sit within a few spreads of their centroid; centroids are ≥ 10 spreads apart.
        for a in 0..10 {
            for b in a + 1..10 {
                assert!(distance(&modes[a][0], &modes[b][0]) > 5.0 * spec.within_class_spread);
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(synth(&SynthSpec::redundant(10, 4, 5, 0)).is_err());
        assert!(synth(&SynthSpec { within_class_spread: 0.0, ..SynthSpec::redundant(2, 2, 4, 0) }).is_err());
        assert!(synth(&SynthSpec::redundant(1, 2, 4, 0)).is_err());
    }
}
