//! Single-channel grayscale rendering as binary PGM (P5).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{CompactGrid, PatchSample};

/// Encodes `values` (row-major `height x width`) as an 8-bit P5 image, min-max
/// scaled over occupied cells. Unoccupied cells are black; a constant channel
/// renders its occupied cells mid-gray (128).
pub fn encode_pgm(values: &[f32], occupied: &[bool], height: usize, width: usize) -> Result<Vec<u8>> {
    if values.len() != height * width || occupied.len() != height * width {
        return Err(Error::invalid("image buffer does not match height x width"));
    }
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for (&v, &o) in values.iter().zip(occupied) {
        if o {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().zip(occupied).map(|(&v, &o)| {
        if !o {
            0
        } else if hi == lo {
            128
        } else {
            ((v - lo) as f64 / (hi - lo) as f64 * 255.0).round() as u8
        }
    }));
    Ok(out)
}

pub fn render_grid_channel(grid: &CompactGrid, gene: usize) -> Result<Vec<u8>> {
    if gene >= grid.k {
        return Err(Error::invalid(format!("gene {gene} outside vocabulary of size {}", grid.k)));
    }
    let values: Vec<f32> = (0..grid.height * grid.width).map(|c| grid.expr[c * grid.k + gene]).collect();
    encode_pgm(&values, &grid.occupied, grid.height, grid.width)
}

/// Renders the channel carrying vocabulary gene `gene`.
pub fn render_sample_channel(sample: &PatchSample, gene: u32) -> Result<Vec<u8>> {
    let k = sample
        .genes
        .iter()
        .position(|&g| g == gene)
        .ok_or_else(|| Error::invalid(format!("gene {gene} is not among the patch's selected genes")))?;
    let m = sample.m();
    let values: Vec<f32> = (0..sample.h * sample.w).map(|site| sample.values[site * m + k]).collect();
    encode_pgm(&values, &sample.occupied, sample.h, sample.w)
}

pub fn write_pgm(bytes: &[u8], path: &Path) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
