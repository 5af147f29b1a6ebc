//! Analysis artifacts derived from score tables and training logs.
//!
//! Every function here is pure: given the same serialized inputs it
//! produces the same output.

use std::fs;
use std::path::Path;

use rand::seq::index;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::importance::{BoundPair, ScoreTable};
use crate::rng::{rng_for, Stream};
use crate::training::TrainLog;

/// Floor applied before taking logs of gradient magnitudes.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyCurve {
    pub ks: Vec<usize>,
    pub entropy_bits: Vec<f64>,
    pub baseline_bits: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapCurve {
    pub ks: Vec<usize>,
    pub overlap: Vec<f64>,
    pub pair: (String, String),
}

/// Rows follow the probe order of the log; columns are epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapMatrix {
    pub probe_indices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl HeatmapMatrix {
    pub fn epochs(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }
}

/// Indices exported around one percentile of the score distribution, in rank order.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexGroup {
    pub percentile: f64,
    pub indices: Vec<usize>,
}

fn check_ks(ks: &[usize], n: usize) -> Result<()> {
    match ks.iter().find(|&&k| k == 0 || k > n) {
        Some(k) => Err(Error::domain(format!("k = {k} outside (0, {n}]"))),
        None => Ok(()),
    }
}

/// Shannon entropy in bits of a label histogram; `0·log 0 = 0`.
pub fn entropy_bits(histogram: &[usize]) -> f64 {
    let total: usize = histogram.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    histogram
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0)
}

/// Label entropy of the top-`k` examples by score, for each `k`.
pub fn label_entropy_topk(scores: &ScoreTable, ks: &[usize]) -> Result<EntropyCurve> {
    check_ks(ks, scores.len())?;
    let ranking = scores.ranking();
    let labels = scores.labels();
    let entropy = ks
        .iter()
        .map(|&k| {
            let mut hist = vec![0usize; scores.class_count()];
            for &i in &ranking[..k] {
                hist[labels[i]] += 1;
            }
            entropy_bits(&hist)
        })
        .collect();
    Ok(EntropyCurve {
        ks: ks.to_vec(),
        entropy_bits: entropy,
        baseline_bits: (scores.class_count() as f64).log2(),
    })
}

fn overlap_of_rankings(a: &[usize], b: &[usize], ks: &[usize]) -> Vec<f64> {
    let n = a.len();
    ks.iter()
        .map(|&k| {
            let mut in_a = vec![false; n];
            for &i in &a[..k] {
                in_a[i] = true;
            }
            let shared = b[..k].iter().filter(|&&i| in_a[i]).count();
            if shared == k {
                1.0
            } else {
                shared as f64 / k as f64
            }
        })
        .collect()
}

/// `|top_k(a) ∩ top_k(b)| / k` for each `k`.
pub fn overlap_curve(a: &ScoreTable, b: &ScoreTable, ks: &[usize]) -> Result<OverlapCurve> {
    if a.len() != b.len() {
        return Err(Error::domain(format!(
            "score tables cover {} and {} examples",
            a.len(),
            b.len()
        )));
    }
    check_ks(ks, a.len())?;
    Ok(OverlapCurve {
        ks: ks.to_vec(),
        overlap: overlap_of_rankings(&a.ranking(), &b.ranking(), ks),
        pair: (a.model_id.clone(), b.model_id.clone()),
    })
}

/// Mean overlap of two independent uniform `k`-subsets of `0..n`, averaged
/// over `trials` seeded draws.
pub fn random_overlap_baseline(n: usize, ks: &[usize], seed: u64, trials: usize) -> Result<OverlapCurve> {
    check_ks(ks, n)?;
    if trials == 0 {
        return Err(Error::domain("at least one trial is required"));
    }
    let mut sums = vec![0.0; ks.len()];
    for t in 0..trials as u64 {
        let mut rng = rng_for(seed, Stream::Overlap, t);
        let a = index::sample(&mut rng, n, n).into_vec();
        let b = index::sample(&mut rng, n, n).into_vec();
        // Prefixes of two random permutations are independent uniform k-subsets.
        for (s, v) in sums.iter_mut().zip(overlap_of_rankings(&a, &b, ks)) {
            *s += v;
        }
    }
    Ok(OverlapCurve {
        ks: ks.to_vec(),
        overlap: sums.into_iter().map(|s| s / trials as f64).collect(),
        pair: ("rand1".into(), "rand2".into()),
    })
}

/// `-ln(max(g, 1e-12))` for every probe and epoch (never `-0`).
pub fn heatmap_matrix(log: &TrainLog) -> Result<HeatmapMatrix> {
    if log.probe_gradients.is_empty() || log.probe_gradients.iter().any(Vec::is_empty) {
        return Err(Error::domain("training log has no probe gradients"));
    }
    let width = log.probe_gradients[0].len();
    if log.probe_gradients.iter().any(|r| r.len() != width) {
        return Err(Error::dim("probe rows have different epoch counts"));
    }
    Ok(HeatmapMatrix {
        probe_indices: log.probe_indices.clone(),
        values: log
            .probe_gradients
            .iter()
            .map(|row| row.iter().map(|&g| 0.0 - g.max(LOG_FLOOR).ln()).collect())
            .collect(),
    })
}

/// For each percentile `p`, the `count` consecutive ranks centred on the
/// 1-indexed descending rank `round((1 - p/100)·N)`, clamped into range.
pub fn export_topk_examples(
    scores: &ScoreTable,
    dataset: &Dataset,
    percentiles: &[f64],
    count: usize,
) -> Result<Vec<IndexGroup>> {
    let n = scores.len();
    if dataset.len() != n {
        return Err(Error::dim(format!("{n} scores for {} examples", dataset.len())));
    }
    if count == 0 || count > n {
        return Err(Error::domain(format!("cannot export {count} of {n} examples")));
    }
    if let Some(p) = percentiles.iter().find(|p| !(0.0..=100.0).contains(*p)) {
        return Err(Error::domain(format!("percentile {p} outside [0, 100]")));
    }
    let ranking = scores.ranking();
    Ok(percentiles
        .iter()
        .map(|&p| {
            let centre = ((1.0 - p / 100.0) * n as f64).round().clamp(1.0, n as f64) as usize;
            let start = centre.saturating_sub((count - 1) / 2).clamp(1, n - count + 1);
            IndexGroup {
                percentile: p,
                indices: ranking[start - 1..start - 1 + count].to_vec(),
            }
        })
        .collect())
}

/// Pearson correlation coefficient; `None` when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

pub fn write_entropy_csv(curve: &EntropyCurve, path: &Path) -> Result<()> {
    let mut out = String::from("k,entropy_bits,baseline_bits\n");
    for (k, h) in curve.ks.iter().zip(&curve.entropy_bits) {
        out.push_str(&format!("{k},{h},{}\n", curve.baseline_bits));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Several curves may share one file; the `pair` column tells them apart.
pub fn write_overlap_csv(curves: &[OverlapCurve], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["k", "overlap", "pair"])?;
    for c in curves {
        let pair = format!("{}|{}", c.pair.0, c.pair.1);
        for (k, v) in c.ks.iter().zip(&c.overlap) {
            w.write_record([k.to_string(), v.to_string(), pair.clone()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `probe_index` is the probe's training-set index.
pub fn write_heatmap_csv(heatmap: &HeatmapMatrix, path: &Path) -> Result<()> {
    let mut out = String::from("probe_index,epoch,neg_log_mag\n");
    for (idx, row) in heatmap.probe_indices.iter().zip(&heatmap.values) {
        for (e, v) in row.iter().enumerate() {
            out.push_str(&format!("{idx},{e},{v}\n"));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_bounds_csv(pairs: &[BoundPair], path: &Path) -> Result<()> {
    let mut out = String::from("batch_id,lhs,rhs\n");
    for (i, p) in pairs.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", p.lhs, p.rhs));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `percentile,rank,index,label,score,f0,...` for plotting exported examples.
pub fn write_examples_csv(groups: &[IndexGroup], scores: &ScoreTable, dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::from("percentile,rank,index,label,score");
    for j in 0..dataset.feature_len() {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for g in groups {
        for (rank, &i) in g.indices.iter().enumerate() {
            out.push_str(&format!("{},{rank},{i},{},{}", g.percentile, dataset.label(i), scores.scores()[i]));
            for v in dataset.example(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    Ok(())
}
