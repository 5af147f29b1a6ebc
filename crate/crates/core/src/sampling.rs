//! Subsample selection policies over a score table.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::importance::ScoreTable;
use crate::rng::{rng_for, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Random,
    MaxGradient,
    NonExtremeMaxGradient,
    GradientCdf,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Random,
        PolicyKind::MaxGradient,
        PolicyKind::NonExtremeMaxGradient,
        PolicyKind::GradientCdf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::MaxGradient => "max_gradient",
            PolicyKind::NonExtremeMaxGradient => "nonextreme",
            PolicyKind::GradientCdf => "gradient_cdf",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "random" => Ok(PolicyKind::Random),
            "max_gradient" | "maxgradient" | "max" => Ok(PolicyKind::MaxGradient),
            "nonextreme" | "non_extreme" | "nonextreme_max_gradient" => Ok(PolicyKind::NonExtremeMaxGradient),
            "gradient_cdf" | "cdf" => Ok(PolicyKind::GradientCdf),
            _ => Err(Error::Config(format!(
                "unknown policy `{s}` (random, max_gradient, nonextreme, gradient_cdf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionPolicy {
    pub kind: PolicyKind,
    /// Fraction of top-ranked examples skipped by the non-extreme policy.
    pub discard_fraction: f64,
    /// Randomness for `Random` and `GradientCdf`.
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn new(kind: PolicyKind, seed: u64) -> Self {
        SelectionPolicy {
            kind,
            discard_fraction: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.discard_fraction) {
            return Err(Error::domain(format!(
                "discard fraction {} outside [0, 1)",
                self.discard_fraction
            )));
        }
        Ok(())
    }
}

/// Sorted, distinct training-set indices chosen by a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Subsample {
    pub indices: Vec<usize>,
    pub k: usize,
    pub policy: SelectionPolicy,
}

impl Subsample {
    fn from_unsorted(mut indices: Vec<usize>, policy: SelectionPolicy) -> Self {
        indices.sort_unstable();
        Subsample {
            k: indices.len(),
            indices,
            policy,
        }
    }

    /// One `# key=value ...` header line, then one index per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = format!(
            "# policy={} k={} seed={} discard_fraction={}\n",
            self.policy.kind, self.k, self.policy.seed, self.policy.discard_fraction
        );
        for i in &self.indices {
            out.push_str(&format!("{i}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| Error::Parse(format!("{}: missing metadata header", path.display())))?;
        let mut policy = SelectionPolicy::new(PolicyKind::Random, 0);
        let mut k = None;
        for field in header.split_whitespace() {
            let (key, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("bad header field `{field}`")))?;
            let bad = || Error::Parse(format!("bad value for {key}: `{v}`"));
            match key {
                "policy" => policy.kind = v.parse()?,
                "k" => k = Some(v.parse::<usize>().map_err(|_| bad())?),
                "seed" => policy.seed = v.parse().map_err(|_| bad())?,
                "discard_fraction" => policy.discard_fraction = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::Parse(format!("unknown header key `{key}`"))),
            }
        }
        let indices = lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| l.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad index `{l}`"))))
            .collect::<Result<Vec<_>>>()?;
        if k != Some(indices.len()) || indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parse(format!(
                "{}: indices must be strictly increasing and match k",
                path.display()
            )));
        }
        Ok(Subsample {
            k: indices.len(),
            indices,
            policy,
        })
    }
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::domain(format!("cannot select {k} of {n} examples")));
    }
    Ok(())
}

/// `ceil(fraction·n)`, with products within 1e-9 of an integer taken as exact.
pub fn discard_count(n: usize, fraction: f64) -> usize {
    let x = fraction * n as f64;
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        x.ceil() as usize
    }
}

/// Uniform sample of `k` of `n` indices without replacement.
pub fn select_random(n: usize, k: usize, seed: u64) -> Result<Subsample> {
    check_k(k, n)?;
    let mut rng = rng_for(seed, Stream::Select, 0);
    let picked = index::sample(&mut rng, n, k).into_vec();
    Ok(Subsample::from_unsorted(
        picked,
        SelectionPolicy::new(PolicyKind::Random, seed),
    ))
}

/// The `k` largest scores; ties go to the lower index.
pub fn select_max_gradient(scores: &ScoreTable, k: usize) -> Result<Subsample> {
    check_k(k, scores.len())?;
    let mut ranking = scores.ranking();
    ranking.truncate(k);
    Ok(Subsample::from_unsorted(
        ranking,
        SelectionPolicy {
            discard_fraction: 0.0,
            ..SelectionPolicy::new(PolicyKind::MaxGradient, 0)
        },
    ))
}

/// Skip the top `ceil(discard_fraction·N)` ranks, then take the next `k`.
/// When fewer than `k` examples would remain, only `N - k` ranks are skipped.
pub fn select_nonextreme(scores: &ScoreTable, k: usize, discard_fraction: f64) -> Result<Subsample> {
    let policy = SelectionPolicy {
        discard_fraction,
        ..SelectionPolicy::new(PolicyKind::NonExtremeMaxGradient, 0)
    };
    policy.validate()?;
    let n = scores.len();
    check_k(k, n)?;
    let skip = discard_count(n, discard_fraction).min(n - k);
    let ranking = scores.ranking();
    Ok(Subsample::from_unsorted(ranking[skip..skip + k].to_vec(), policy))
}

/// Sequential draws with probability proportional to score, renormalized
/// over the remaining items after every draw. Once the remaining mass is
/// zero the rest of the draws are uniform over what is left.
pub fn select_gradient_cdf(scores: &ScoreTable, k: usize, seed: u64) -> Result<Subsample> {
    let n = scores.len();
    check_k(k, n)?;
    let policy = SelectionPolicy::new(PolicyKind::GradientCdf, seed);
    if k == n {
        return Ok(Subsample::from_unsorted((0..n).collect(), policy));
    }
    let mut rng = rng_for(seed, Stream::Select, 0);
    let mut weight = scores.scores().to_vec();
    let mut alive = vec![true; n];
    let mut remaining = n;
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weight.iter().sum();
        let u: f64 = rng.random();
        let choice = if total > 0.0 {
            let target = u * total;
            let mut cum = 0.0;
            let mut last_positive = None;
            let mut hit = None;
            for (i, &w) in weight.iter().enumerate() {
                if w > 0.0 {
                    cum += w;
                    last_positive = Some(i);
                    if cum > target {
                        hit = Some(i);
                        break;
                    }
                }
            }
            hit.or(last_positive).expect("positive mass has a positive item")
        } else {
            let r = ((u * remaining as f64) as usize).min(remaining - 1);
            alive
                .iter()
                .enumerate()
                .filter(|(_, &a)| a)
                .nth(r)
                .map(|(i, _)| i)
                .expect("r < remaining")
        };
        alive[choice] = false;
        weight[choice] = 0.0;
        remaining -= 1;
        picked.push(choice);
    }
    Ok(Subsample::from_unsorted(picked, policy))
}

/// Apply `policy` to pick `k` examples.
pub fn select(policy: &SelectionPolicy, scores: &ScoreTable, k: usize) -> Result<Subsample> {
    policy.validate()?;
    let mut sub = match policy.kind {
        PolicyKind::Random => select_random(scores.len(), k, policy.seed)?,
        PolicyKind::MaxGradient => select_max_gradient(scores, k)?,
        PolicyKind::NonExtremeMaxGradient => select_nonextreme(scores, k, policy.discard_fraction)?,
        PolicyKind::GradientCdf => select_gradient_cdf(scores, k, policy.seed)?,
    };
    sub.policy = *policy;
    Ok(sub)
}
