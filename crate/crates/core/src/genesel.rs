//! Channel selection: per-window gene variance and the three ways of choosing
//! `m` genes from it (variance-weighted, top-variance, uniform).

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SelectionMode {
    /// Sampling without replacement with weight `variance + epsilon`.
    Weighted { epsilon: f64 },
    /// The `m` highest-variance genes.
    HvgTopk,
    /// A uniformly random subset.
    Random,
}

impl Default for SelectionMode {
    fn default() -> Self {
        SelectionMode::Weighted {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SelectionMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SelectionMode::Weighted { epsilon } if !(epsilon > 0.0 && epsilon.is_finite()) => {
                Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")))
            }
            _ => Ok(()),
        }
    }
}

/// Population variance of each of the `l` channels of an `[site][gene]` buffer.
///
/// With `occupied_only`, sites whose mask entry is false are ignored; otherwise
/// every site contributes.
pub fn per_gene_variance(values: &[f32], occupied: &[bool], l: usize, occupied_only: bool) -> Result<Vec<f64>> {
    if l == 0 || values.len() != occupied.len() * l {
        return Err(Error::invalid("variance buffer does not match site count x channels"));
    }
    let mut mean = vec![0f64; l];
    let mut m2 = vec![0f64; l];
    let mut n = 0f64;
    for (site, &occ) in occupied.iter().enumerate() {
        if occupied_only && !occ {
            continue;
        }
        n += 1.0;
        let row = &values[site * l..(site + 1) * l];
        for ((&x, mu), acc) in row.iter().zip(mean.iter_mut()).zip(m2.iter_mut()) {
            let x = x as f64;
            let d = x - *mu;
            *mu += d / n;
            *acc += d * (x - *mu);
        }
    }
    if n == 0.0 {
        return Err(Error::data("no occupied sites to compute variance over"));
    }
    Ok(m2.into_iter().map(|s| (s / n).max(0.0)).collect())
}

fn check_m(m: usize, l: usize) -> Result<()> {
    if m > l {
        return Err(Error::invalid(format!("cannot select {m} genes from {l}")));
    }
    Ok(())
}

/// Weighted sampling of `m` distinct indices without replacement, weight
/// `variances[g] + epsilon`, via exponential keys `u^(1/w)` (compared in log
/// space). Indices are returned in draw order.
pub fn weighted_gene_sample<R: Rng + ?Sized>(
    variances: &[f64],
    m: usize,
    epsilon: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_m(m, variances.len())?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut keyed: Vec<(f64, usize)> = variances
        .iter()
        .enumerate()
        .map(|(g, &var)| {
            // u in (0, 1] keeps ln finite
            let u: f64 = 1.0 - rng.gen::<f64>();
            (u.ln() / (var.max(0.0) + epsilon), g)
        })
        .collect();
    let by_key = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if m < keyed.len() && m > 0 {
        keyed.select_nth_unstable_by(m - 1, by_key);
        keyed.truncate(m);
    }
    keyed.sort_unstable_by(by_key);
    keyed.truncate(m);
    Ok(keyed.into_iter().map(|(_, g)| g).collect())
}

/// Indices of the `m` largest variances, ties broken toward the lower index.
pub fn hvg_topk(variances: &[f64], m: usize) -> Result<Vec<usize>> {
    check_m(m, variances.len())?;
    let mut order: Vec<usize> = (0..variances.len()).collect();
    let cmp = |&a: &usize, &b: &usize| -> Ordering {
        variances[b].total_cmp(&variances[a]).then(a.cmp(&b))
    };
    if m > 0 && m < order.len() {
        order.select_nth_unstable_by(m - 1, cmp);
    }
    order.truncate(m);
    order.sort_unstable_by(cmp);
    Ok(order)
}

/// A uniformly random size-`m` subset of `0..l`.
pub fn random_gene_sample<R: Rng + ?Sized>(l: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    check_m(m, l)?;
    Ok(index::sample(rng, l, m).into_vec())
}

/// Applies `mode` and returns the chosen indices sorted ascending.
pub fn select_genes<R: Rng + ?Sized>(
    mode: SelectionMode,
    variances: &[f64],
    m: usize,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let mut picked = match mode {
        SelectionMode::Weighted { epsilon } => weighted_gene_sample(variances, m, epsilon, rng)?,
        SelectionMode::HvgTopk => hvg_topk(variances, m)?,
        SelectionMode::Random => random_gene_sample(variances.len(), m, rng)?,
    };
    picked.sort_unstable();
    Ok(picked.into_iter().map(|g| g as u32).collect())
}
