//! Rank compaction of raw coordinates and rasterization onto the compact lattice.

use crate::error::{Error, Result};
use crate::types::{CompactGrid, RawSlice};

/// Per-axis sorted unique levels plus each spot's 0-based lattice position.
#[derive(Debug, Clone, PartialEq)]
pub struct Compaction {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `(c_x, c_y)` for every spot, in slice order.
    pub positions: Vec<(usize, usize)>,
}

impl Compaction {
    pub fn width(&self) -> usize {
        self.xs.len()
    }

    pub fn height(&self) -> usize {
        self.ys.len()
    }

    /// Lattice position of a raw coordinate, if both levels occur in the slice.
    pub fn rank_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        Some((rank(&self.xs, x)?, rank(&self.ys, y)?))
    }
}

fn rank(levels: &[f64], v: f64) -> Option<usize> {
    levels.binary_search_by(|l| l.total_cmp(&v)).ok()
}

fn sorted_unique(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_unstable_by(f64::total_cmp);
    v.dedup();
    v
}

/// Maps every spot to `(rank_X(x), rank_Y(y))` among the sorted unique levels.
pub fn compact_coordinates(slice: &RawSlice) -> Result<Compaction> {
    if slice.is_empty() {
        return Err(Error::invalid("cannot compact an empty slice"));
    }
    if let Some(s) = slice.spots().iter().find(|s| !s.x.is_finite() || !s.y.is_finite()) {
        return Err(Error::invalid(format!("non-finite coordinate ({}, {})", s.x, s.y)));
    }
    let xs = sorted_unique(slice.spots().iter().map(|s| s.x).collect());
    let ys = sorted_unique(slice.spots().iter().map(|s| s.y).collect());
    let positions = slice
        .spots()
        .iter()
        .map(|s| (rank(&xs, s.x).unwrap(), rank(&ys, s.y).unwrap()))
        .collect();
    Ok(Compaction { xs, ys, positions })
}

/// Affine min-max scaling of each axis onto `[lo, hi]`. A constant axis maps to
/// the midpoint.
pub fn normalize_coords_minmax(slice: &RawSlice, lo: f64, hi: f64) -> Result<Vec<(f64, f64)>> {
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::invalid(format!("need finite hi > lo, got [{lo}, {hi}]")));
    }
    let xs: Vec<f64> = slice.spots().iter().map(|s| s.x).collect();
    let ys: Vec<f64> = slice.spots().iter().map(|s| s.y).collect();
    let nx = minmax_axis(&xs, lo, hi)?;
    let ny = minmax_axis(&ys, lo, hi)?;
    Ok(nx.into_iter().zip(ny).collect())
}

fn minmax_axis(v: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite coordinate"));
    }
    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(vec![(lo + hi) / 2.0; v.len()]);
    }
    let scale = (hi - lo) / (max - min);
    Ok(v.iter()
        .map(|&x| if x == max { hi } else { lo + (x - min) * scale })
        .collect())
}

/// Rasterizes a slice onto its compact lattice with `k` gene channels.
pub fn rasterize(slice: &RawSlice, k: usize) -> Result<CompactGrid> {
    let c = compact_coordinates(slice)?;
    let (height, width) = (c.height(), c.width());
    let mut expr = vec![0f32; height * width * k];
    let mut occupied = vec![false; height * width];
    for (spot, &(cx, cy)) in slice.spots().iter().zip(&c.positions) {
        let cell = cy * width + cx;
        if occupied[cell] {
            return Err(Error::data(format!(
                "slice {:?}: two spots map to lattice cell ({cx}, {cy})",
                slice.id
            )));
        }
        occupied[cell] = true;
        let base = cell * k;
        for &(g, v) in spot.entries() {
            let g = g as usize;
            if g >= k {
                return Err(Error::data(format!("gene index {g} outside vocabulary of size {k}")));
            }
            expr[base + g] = v;
        }
    }
    Ok(CompactGrid {
        height,
        width,
        k,
        expr,
        occupied,
        xs: c.xs,
        ys: c.ys,
    })
}
