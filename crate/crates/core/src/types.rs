//! Domain types shared by every stage of the pipeline.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered, duplicate-free list of gene identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl GeneVocabulary {
    /// Builds a vocabulary, keeping the first occurrence of each name.
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut out = Vec::new();
        let mut index = HashMap::new();
        for name in names {
            let name = name.into();
            if !index.contains_key(&name) {
                index.insert(name.clone(), out.len());
                out.push(name);
            }
        }
        if out.is_empty() {
            return Err(Error::invalid("empty vocabulary"));
        }
        Ok(GeneVocabulary { names: out, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, idx: usize) -> Option<&str> {
        self.names.get(idx).map(String::as_str)
    }

    /// SHA-256 over the newline-terminated gene names, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.names {
            h.update(n.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// One observed spot: a raw coordinate and a sparse expression vector.
///
/// Entries are kept sorted by gene index with explicit zeros removed, so that
/// densify followed by sparsify is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Spot {
    pub x: f64,
    pub y: f64,
    entries: Vec<(u32, f32)>,
}

impl Spot {
    pub fn new(x: f64, y: f64, mut entries: Vec<(u32, f32)>) -> Result<Self> {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::invalid(format!("non-finite coordinate ({x}, {y})")));
        }
        for &(g, v) in &entries {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "expression value {v} for gene {g} is negative or non-finite"
                )));
            }
        }
        entries.retain(|&(_, v)| v != 0.0);
        entries.sort_unstable_by_key(|&(g, _)| g);
        if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::invalid(format!("duplicate entry for gene {}", w[0].0)));
        }
        // -0.0 and 0.0 are the same coordinate level
        Ok(Spot {
            x: x + 0.0,
            y: y + 0.0,
            entries,
        })
    }

    pub fn from_dense(x: f64, y: f64, values: &[f32]) -> Result<Self> {
        let entries = values
            .iter()
            .enumerate()
            .map(|(g, &v)| (g as u32, v))
            .collect();
        Spot::new(x, y, entries)
    }

    pub fn entries(&self) -> &[(u32, f32)] {
        &self.entries
    }

    pub fn densify(&self, k: usize) -> Vec<f32> {
        let mut out = vec![0.0; k];
        for &(g, v) in &self.entries {
            out[g as usize] = v;
        }
        out
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v as f64).sum()
    }

    pub(crate) fn remap_genes(&mut self, map: &[u32]) {
        for e in &mut self.entries {
            e.0 = map[e.0 as usize];
        }
        self.entries.sort_unstable_by_key(|&(g, _)| g);
    }
}

/// An unprocessed tissue slice.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSlice {
    pub id: String,
    spots: Vec<Spot>,
}

impl RawSlice {
    /// Validates that the slice is non-empty, coordinates are pairwise distinct
    /// and every gene index is below `k`.
    pub fn new(id: impl Into<String>, spots: Vec<Spot>, k: usize) -> Result<Self> {
        let id = id.into();
        if spots.is_empty() {
            return Err(Error::data(format!("slice {id:?}: no spots")));
        }
        let mut seen = HashMap::with_capacity(spots.len());
        for (i, s) in spots.iter().enumerate() {
            if let Some(&(g, _)) = s.entries.last() {
                if g as usize >= k {
                    return Err(Error::data(format!(
                        "slice {id:?}: spot {i} references gene {g} outside vocabulary of size {k}"
                    )));
                }
            }
            if let Some(j) = seen.insert((s.x.to_bits(), s.y.to_bits()), i) {
                return Err(Error::data(format!(
                    "slice {id:?}: spots {j} and {i} share coordinate ({}, {})",
                    s.x, s.y
                )));
            }
        }
        Ok(RawSlice { id, spots })
    }

    pub fn spots(&self) -> &[Spot] {
        &self.spots
    }

    pub fn len(&self) -> usize {
        self.spots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spots.is_empty()
    }

    pub fn into_spots(self) -> Vec<Spot> {
        self.spots
    }

    pub(crate) fn spots_mut(&mut self) -> &mut [Spot] {
        &mut self.spots
    }
}

/// Dense rasterized slice on the rank-compacted lattice.
///
/// `expr` is laid out as `[row][col][gene]`, i.e. `(c_y * width + c_x) * k + g`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactGrid {
    pub height: usize,
    pub width: usize,
    pub k: usize,
    pub expr: Vec<f32>,
    pub occupied: Vec<bool>,
    /// Sorted unique raw x levels; `xs[c_x]` is the raw coordinate of column `c_x`.
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl CompactGrid {
    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.k;
        &self.expr[start..start + self.k]
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.occupied[row * self.width + col]
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }
}

/// One pretraining unit: an `h x w x m` window with its selected genes.
///
/// `values` is laid out as `[u][v][k]` with `u` the row (< h), `v` the column
/// (< w) and `k` the channel (< m). Channel `k` carries gene `genes[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSample {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub genes: Vec<u32>,
    /// Window corner `(o_x, o_y)` as 0-based column/row on the compact grid.
    pub origin: (u32, u32),
    pub slice_id: String,
    pub occupied: Vec<bool>,
}

impl PatchSample {
    pub fn m(&self) -> usize {
        self.genes.len()
    }

    #[inline]
    pub fn offset(&self, u: usize, v: usize, k: usize) -> usize {
        (u * self.w + v) * self.genes.len() + k
    }

    pub fn value(&self, u: usize, v: usize, k: usize) -> f32 {
        self.values[self.offset(u, v, k)]
    }

    pub fn is_occupied(&self, u: usize, v: usize) -> bool {
        self.occupied[u * self.w + v]
    }

    /// Checks the shape and content invariants against a vocabulary of size `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let m = self.genes.len();
        if self.h == 0 || self.w == 0 || m == 0 {
            return Err(Error::invalid("patch with empty dimension"));
        }
        if self.values.len() != self.h * self.w * m || self.occupied.len() != self.h * self.w {
            return Err(Error::invalid("patch buffer sizes disagree with h, w, m"));
        }
        if self.genes.iter().any(|&g| g as usize >= k) {
            return Err(Error::invalid("patch gene index outside vocabulary"));
        }
        if self.genes.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::invalid("patch genes must be strictly ascending"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("patch contains non-finite values"));
        }
        for (site, &occ) in self.occupied.iter().enumerate() {
            if !occ && self.values[site * m..(site + 1) * m].iter().any(|&v| v != 0.0) {
                return Err(Error::invalid("unoccupied patch site holds non-zero values"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskMode {
    UniformRatio { ratio: f64 },
    ContiguousRegion { side: usize },
}

/// Set of masked `(u, v, k)` entries for an `h x w x m` patch.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub mode: MaskMode,
    entries: Vec<(u32, u32, u32)>,
}

impl MaskSpec {
    /// Entries are deduplicated and sorted; any out-of-bounds triple is rejected.
    pub fn new(
        h: usize,
        w: usize,
        m: usize,
        mode: MaskMode,
        mut entries: Vec<(u32, u32, u32)>,
    ) -> Result<Self> {
        entries.sort_unstable();
        entries.dedup();
        if let Some(&(u, v, k)) = entries
            .iter()
            .find(|&&(u, v, k)| u as usize >= h || v as usize >= w || k as usize >= m)
        {
            return Err(Error::invalid(format!(
                "mask entry ({u}, {v}, {k}) outside {h}x{w}x{m}"
            )));
        }
        Ok(MaskSpec {
            h,
            w,
            m,
            mode,
            entries,
        })
    }

    pub fn entries(&self) -> &[(u32, u32, u32)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
