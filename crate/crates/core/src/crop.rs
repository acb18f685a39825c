//! Uniform random window placement and window extraction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::types::CompactGrid;

/// Draws a window corner `(o_x, o_y)` uniformly from every position where an
/// `h x w` window fits inside the grid.
pub fn sample_window_origin<R: Rng + ?Sized>(
    grid: &CompactGrid,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("window dimensions must be positive"));
    }
    if h > grid.height || w > grid.width {
        return Err(Error::data(format!(
            "slice smaller than window: grid {}x{}, window {h}x{w}",
            grid.height, grid.width
        )));
    }
    let ox = rng.gen_range(0..=grid.width - w);
    let oy = rng.gen_range(0..=grid.height - h);
    Ok((ox, oy))
}

/// Dense copy of an `h x w` window over all `K` genes.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    /// `[u][v][g]` layout.
    pub values: Vec<f32>,
    pub occupied: Vec<bool>,
}

/// Copies the window whose top-left corner is at column `origin.0`, row `origin.1`.
pub fn extract_patch(grid: &CompactGrid, origin: (usize, usize), h: usize, w: usize) -> Result<Window> {
    let (ox, oy) = origin;
    if h == 0 || w == 0 || ox + w > grid.width || oy + h > grid.height {
        return Err(Error::invalid(format!(
            "window {h}x{w} at ({ox}, {oy}) outside grid {}x{}",
            grid.height, grid.width
        )));
    }
    let k = grid.k;
    let mut values = Vec::with_capacity(h * w * k);
    let mut occupied = Vec::with_capacity(h * w);
    for u in 0..h {
        let row = oy + u;
        let start = (row * grid.width + ox) * k;
        values.extend_from_slice(&grid.expr[start..start + w * k]);
        occupied.extend_from_slice(&grid.occupied[row * grid.width + ox..row * grid.width + ox + w]);
    }
    Ok(Window {
        h,
        w,
        k,
        values,
        occupied,
    })
}
