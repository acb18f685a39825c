//! Downstream evaluation: exact kNN classification, accuracy, adjusted Rand
//! index, the train/test split protocol and reconstruction error.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{apply_mask, sample_region_mask, MaskedPatch};
use crate::matrix::Matrix;
use crate::rng;
use crate::types::PatchSample;

pub const DEFAULT_KNN_K: usize = 10;
pub const DEFAULT_TRAIN_FRAC: f64 = 0.2;
pub const DEFAULT_SPLITS: usize = 10;
/// Minimum class size for stratified splitting.
pub const STRATIFY_MIN_CLASS: usize = 5;

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let d = x[i] - y[i];
            acc[i] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Exact Euclidean kNN with majority vote.
///
/// Neighbors are ordered by distance, then training index. A vote tie goes to
/// whichever tied label occurs first in that order.
pub fn knn_classify(train_x: &Matrix, train_y: &[usize], test_x: &Matrix, k: usize) -> Result<Vec<usize>> {
    if train_x.rows != train_y.len() {
        return Err(Error::invalid("training features and labels differ in length"));
    }
    if k == 0 || train_x.rows < k {
        return Err(Error::invalid(format!("need at least k = {k} training points, have {}", train_x.rows)));
    }
    if train_x.cols != test_x.cols {
        return Err(Error::invalid("train and test feature dimensions differ"));
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    Ok((0..test_x.rows)
        .into_par_iter()
        .map(|q| {
            let query = test_x.row(q);
            let mut d: Vec<(f64, usize)> = (0..train_x.rows).map(|i| (sq_dist(query, train_x.row(i)), i)).collect();
            if k < d.len() {
                d.select_nth_unstable_by(k - 1, cmp);
                d.truncate(k);
            }
            d.sort_unstable_by(cmp);
            let mut votes: Vec<(usize, usize)> = Vec::with_capacity(k);
            for &(_, i) in &d {
                let label = train_y[i];
                match votes.iter_mut().find(|v| v.0 == label) {
                    Some(v) => v.1 += 1,
                    None => votes.push((label, 1)),
                }
            }
            // votes are kept in nearest-first order of first appearance
            let best = votes.iter().map(|v| v.1).max().unwrap();
            votes.iter().find(|v| v.1 == best).unwrap().0
        })
        .collect())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::invalid("accuracy needs equal, non-zero lengths"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

fn pairs(n: u64) -> i128 {
    (n as i128) * (n as i128 - 1) / 2
}

/// Adjusted Rand index, computed exactly in integer arithmetic.
///
/// Returns 1.0 when the expected-index correction leaves a zero denominator,
/// which happens exactly when both partitions are all singletons or both are a
/// single cluster.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid("ARI needs label vectors of equal length"));
    }
    if a.len() < 2 {
        return Err(Error::invalid("ARI needs at least two items"));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let index: i128 = table.values().map(|&c| pairs(c)).sum();
    let sa: i128 = rows.values().map(|&c| pairs(c)).sum();
    let sb: i128 = cols.values().map(|&c| pairs(c)).sum();
    let total = pairs(a.len() as u64);
    // ARI = (index - sa*sb/T) / ((sa+sb)/2 - sa*sb/T), scaled by 2T
    let num = 2 * (index * total - sa * sb);
    let den = (sa + sb) * total - 2 * sa * sb;
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// One train/test partition of `0..n`; both index lists are ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn train_size(n: usize, train_frac: f64) -> Result<usize> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::invalid(format!("train fraction must lie in (0, 1), got {train_frac}")));
    }
    let t = (train_frac * n as f64).round_ties_even() as usize;
    if t == 0 || t >= n {
        return Err(Error::invalid(format!("train fraction {train_frac} of {n} leaves an empty side")));
    }
    Ok(t)
}

fn finish(mut train: Vec<usize>, n: usize) -> Split {
    train.sort_unstable();
    let mut is_train = vec![false; n];
    for &i in &train {
        is_train[i] = true;
    }
    let test = (0..n).filter(|&i| !is_train[i]).collect();
    Split { train, test }
}

/// Unstratified random splits with `round(train_frac * n)` training indices.
pub fn make_splits(n: usize, train_frac: f64, n_splits: usize, seed: u64) -> Result<Vec<Split>> {
    let t = train_size(n, train_frac)?;
    if n_splits == 0 {
        return Err(Error::invalid("n_splits must be at least 1"));
    }
    Ok((0..n_splits)
        .map(|s| {
            let mut r = rng::derive(seed, "", "split", s as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut r);
            idx.truncate(t);
            finish(idx, n)
        })
        .collect())
}

/// Per-class splits whose total training size is still `round(train_frac * n)`;
/// class quotas use largest-remainder rounding.
pub fn make_stratified_splits(labels: &[usize], train_frac: f64, n_splits: usize, seed: u64) -> Result<Vec<Split>> {
    let n = labels.len();
    let t = train_size(n, train_frac)?;
    if n_splits == 0 {
        return Err(Error::invalid("n_splits must be at least 1"));
    }
    let mut classes: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        classes.entry(l).or_default().push(i);
    }
    let exact: Vec<f64> = classes.values().map(|m| train_frac * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut missing = t.saturating_sub(quota.iter().sum());
    for &c in order.iter().cycle() {
        if missing == 0 {
            break;
        }
        if quota[c] < classes.values().nth(c).unwrap().len() {
            quota[c] += 1;
            missing -= 1;
        }
    }
    Ok((0..n_splits)
        .map(|s| {
            let mut r = rng::derive(seed, "", "stratified-split", s as u64);
            let mut train = Vec::with_capacity(t);
            for (members, &q) in classes.values().zip(&quota) {
                let mut m = members.clone();
                m.shuffle(&mut r);
                train.extend_from_slice(&m[..q]);
            }
            finish(train, n)
        })
        .collect())
}

/// Mean squared and mean absolute error over the entries of a masked region.
pub fn reconstruction_score(truth: &[f64], pred: &[f64]) -> Result<(f64, f64)> {
    if truth.len() != pred.len() {
        return Err(Error::invalid("truth and prediction differ in shape"));
    }
    if truth.is_empty() {
        return Err(Error::invalid("empty region"));
    }
    let (mut se, mut ae) = (0f64, 0f64);
    for (t, p) in truth.iter().zip(pred) {
        let d = t - p;
        se += d * d;
        ae += d.abs();
    }
    let n = truth.len() as f64;
    Ok((se / n, ae / n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainProtocol {
    pub k: usize,
    pub train_frac: f64,
    pub n_splits: usize,
    pub seed: u64,
}

impl Default for DomainProtocol {
    fn default() -> Self {
        DomainProtocol {
            k: DEFAULT_KNN_K,
            train_frac: DEFAULT_TRAIN_FRAC,
            n_splits: DEFAULT_SPLITS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub split: usize,
    pub accuracy: f64,
    pub ari: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainReport {
    pub protocol: DomainProtocol,
    pub stratified: bool,
    pub splits: Vec<SplitScore>,
    pub mean_accuracy: f64,
    pub mean_ari: f64,
}

impl DomainReport {
    /// One CSV row per split followed by a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,accuracy,ari\n");
        for s in &self.splits {
            out.push_str(&format!("{},{:.6},{:.6}\n", s.split, s.accuracy, s.ari));
        }
        out.push_str(&format!("mean,{:.6},{:.6}\n", self.mean_accuracy, self.mean_ari));
        out
    }
}

fn gather(x: &Matrix, idx: &[usize]) -> Matrix {
    let mut data = Vec::with_capacity(idx.len() * x.cols);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Matrix {
        rows: idx.len(),
        cols: x.cols,
        data,
    }
}

/// kNN spatial-domain detection over repeated train/test splits.
///
/// Splits are stratified when every class has at least
/// [`STRATIFY_MIN_CLASS`] members. ARI compares predicted with true test labels.
pub fn domain_detection_report(embeddings: &Matrix, labels: &[usize], protocol: DomainProtocol) -> Result<DomainReport> {
    if embeddings.rows != labels.len() {
        return Err(Error::invalid("embeddings and labels differ in length"));
    }
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::data("domain detection needs at least two classes"));
    }
    let stratified = counts.values().all(|&c| c >= STRATIFY_MIN_CLASS);
    let splits = if stratified {
        make_stratified_splits(labels, protocol.train_frac, protocol.n_splits, protocol.seed)?
    } else {
        log::warn!("a class has fewer than {STRATIFY_MIN_CLASS} members; using unstratified splits");
        make_splits(labels.len(), protocol.train_frac, protocol.n_splits, protocol.seed)?
    };
    let scores = splits
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let train_y: Vec<usize> = s.train.iter().map(|&j| labels[j]).collect();
            let truth: Vec<usize> = s.test.iter().map(|&j| labels[j]).collect();
            let pred = knn_classify(&gather(embeddings, &s.train), &train_y, &gather(embeddings, &s.test), protocol.k)?;
            Ok(SplitScore {
                split: i,
                accuracy: accuracy(&pred, &truth)?,
                ari: adjusted_rand_index(&pred, &truth)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = scores.len() as f64;
    Ok(DomainReport {
        protocol,
        stratified,
        mean_accuracy: scores.iter().map(|s| s.accuracy).sum::<f64>() / n,
        mean_ari: scores.iter().map(|s| s.ari).sum::<f64>() / n,
        splits: scores,
    })
}

/// Averaged error of a region-masked reconstruction experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub side: usize,
    pub replicates: usize,
    pub records: usize,
    /// Per-replicate `(mse, mae)` pooled over every record's masked entries.
    pub per_replicate: Vec<(f64, f64)>,
    pub mse: f64,
    pub mae: f64,
}

/// Masks a random `side x side` region of every record `replicates` times,
/// asks `predict` for a full `[u][v][k]` reconstruction of the masked input,
/// and scores it on the masked entries. Entries at unoccupied sites are
/// skipped unless `loss_on_holes` is set. Records are streamed once.
pub fn region_reconstruction_eval<I, P>(
    samples: I,
    side: usize,
    replicates: usize,
    seed: u64,
    loss_on_holes: bool,
    mut predict: P,
) -> Result<RegionReport>
where
    I: IntoIterator<Item = Result<PatchSample>>,
    P: FnMut(&PatchSample, &MaskedPatch) -> Vec<f32>,
{
    if replicates == 0 {
        return Err(Error::invalid("replicates must be at least 1"));
    }
    let mut se = vec![0f64; replicates];
    let mut ae = vec![0f64; replicates];
    let mut count = vec![0u64; replicates];
    let mut records = 0usize;
    for (j, sample) in samples.into_iter().enumerate() {
        let sample = sample?;
        records += 1;
        for r in 0..replicates {
            let mut stream = rng::derive(seed, &j.to_string(), "region", r as u64);
            let spec = sample_region_mask(sample.h, sample.w, sample.m(), side, &mut stream)?;
            let masked = apply_mask(&sample, &spec, 0.0)?;
            let pred = predict(&sample, &masked);
            if pred.len() != sample.values.len() {
                return Err(Error::invalid("prediction does not cover the patch"));
            }
            for &(u, v, k) in spec.entries() {
                let (u, v, k) = (u as usize, v as usize, k as usize);
                if !loss_on_holes && !sample.is_occupied(u, v) {
                    continue;
                }
                let i = sample.offset(u, v, k);
                let d = sample.values[i] as f64 - pred[i] as f64;
                se[r] += d * d;
                ae[r] += d.abs();
                count[r] += 1;
            }
        }
    }
    if records == 0 {
        return Err(Error::data("no records to evaluate"));
    }
    let mut per_replicate = Vec::with_capacity(replicates);
    for r in 0..replicates {
        if count[r] == 0 {
            return Err(Error::data("every masked region fell on unoccupied sites"));
        }
        per_replicate.push((se[r] / count[r] as f64, ae[r] / count[r] as f64));
    }
    let n = replicates as f64;
    Ok(RegionReport {
        side,
        replicates,
        records,
        mse: per_replicate.iter().map(|p| p.0).sum::<f64>() / n,
        mae: per_replicate.iter().map(|p| p.1).sum::<f64>() / n,
        per_replicate,
    })
}

/// Baseline reconstruction: every masked entry is predicted as the mean of its
/// channel over unmasked occupied sites (0 when there are none).
pub fn channel_mean_predictor(sample: &PatchSample, masked: &MaskedPatch) -> Vec<f32> {
    let m = sample.m();
    let mut sum = vec![0f64; m];
    let mut n = vec![0u32; m];
    for site in 0..sample.h * sample.w {
        if !sample.occupied[site] {
            continue;
        }
        for k in 0..m {
            let i = site * m + k;
            if !masked.mask[i] {
                sum[k] += masked.values[i] as f64;
                n[k] += 1;
            }
        }
    }
    let means: Vec<f32> = sum.iter().zip(&n).map(|(&s, &c)| if c > 0 { (s / c as f64) as f32 } else { 0.0 }).collect();
    masked
        .values
        .iter()
        .zip(&masked.mask)
        .enumerate()
        .map(|(i, (&v, &is_masked))| if is_masked { means[i % m] } else { v })
        .collect()
}
