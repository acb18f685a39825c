//! Mask generation (uniform ratio and contiguous S x S region) and application.

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::types::{MaskMode, MaskSpec, PatchSample};

pub const DEFAULT_MASK_RATIO: f64 = 0.3;

/// Number of entries a uniform mask of ratio `ratio` hides in an `h x w x m`
/// patch. Halves round to even, so a 1x1x1 patch at ratio 0.5 masks nothing.
pub fn uniform_mask_count(h: usize, w: usize, m: usize, ratio: f64) -> usize {
    (ratio * (h * w * m) as f64).round_ties_even() as usize
}

/// Samples `round(ratio * h * w * m)` distinct entries uniformly without replacement.
pub fn sample_uniform_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    m: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskSpec> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let total = h * w * m;
    let count = uniform_mask_count(h, w, m, ratio);
    if count == 0 {
        return Err(Error::invalid("empty mask"));
    }
    let entries = index::sample(rng, total, count)
        .into_iter()
        .map(|i| {
            let k = i % m;
            let site = i / m;
            ((site / w) as u32, (site % w) as u32, k as u32)
        })
        .collect();
    MaskSpec::new(h, w, m, MaskMode::UniformRatio { ratio }, entries)
}

/// Masks a uniformly placed `side x side` spatial block across all `m` channels.
pub fn sample_region_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    m: usize,
    side: usize,
    rng: &mut R,
) -> Result<MaskSpec> {
    if side == 0 || side > h.min(w) {
        return Err(Error::invalid(format!(
            "region side {side} must lie in 1..={}",
            h.min(w)
        )));
    }
    if m == 0 {
        return Err(Error::invalid("empty mask"));
    }
    let u0 = rng.gen_range(0..=h - side);
    let v0 = rng.gen_range(0..=w - side);
    let mut entries = Vec::with_capacity(side * side * m);
    for u in u0..u0 + side {
        for v in v0..v0 + side {
            for k in 0..m {
                entries.push((u as u32, v as u32, k as u32));
            }
        }
    }
    MaskSpec::new(h, w, m, MaskMode::ContiguousRegion { side }, entries)
}

/// Masked copy of a patch plus the boolean mask tensor, both `[u][v][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedPatch {
    pub values: Vec<f32>,
    pub mask: Vec<bool>,
}

/// Replaces every masked entry with `fill`. The input sample is left untouched.
pub fn apply_mask(sample: &PatchSample, spec: &MaskSpec, fill: f32) -> Result<MaskedPatch> {
    let m = sample.m();
    if spec.h != sample.h || spec.w != sample.w || spec.m != m {
        return Err(Error::invalid(format!(
            "mask shape {}x{}x{} does not match patch {}x{}x{m}",
            spec.h, spec.w, spec.m, sample.h, sample.w
        )));
    }
    let mut values = sample.values.clone();
    let mut mask = vec![false; values.len()];
    for &(u, v, k) in spec.entries() {
        let (u, v, k) = (u as usize, v as usize, k as usize);
        if u >= sample.h || v >= sample.w || k >= m {
            return Err(Error::invalid(format!("mask entry ({u}, {v}, {k}) out of bounds")));
        }
        let i = sample.offset(u, v, k);
        values[i] = fill;
        mask[i] = true;
    }
    Ok(MaskedPatch { values, mask })
}
