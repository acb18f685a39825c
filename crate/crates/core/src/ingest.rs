//! Slice readers (MatrixMarket triplets, dense CSV) and the synthetic slice generator.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::types::{GeneVocabulary, RawSlice, Spot};

/// A slice together with the vocabulary its gene indices refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSlice {
    pub vocab: GeneVocabulary,
    pub slice: RawSlice,
}

impl LoadedSlice {
    /// Re-indexes the slice's genes into `target`, which must contain every
    /// gene of this slice's vocabulary.
    pub fn remap_into(mut self, target: &GeneVocabulary) -> Result<RawSlice> {
        if self.vocab == *target {
            return Ok(self.slice);
        }
        let map = self
            .vocab
            .names()
            .iter()
            .map(|n| {
                target.index_of(n).map(|i| i as u32).ok_or_else(|| {
                    Error::data(format!("gene {n:?} missing from the target vocabulary"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for s in self.slice.spots_mut() {
            s.remap_genes(&map);
        }
        Ok(self.slice)
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Numbered, `\r`-trimmed lines of a UTF-8 text file.
fn lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>> + '_> {
    let reader = open(path)?;
    Ok(reader.lines().enumerate().map(move |(i, l)| {
        l.map(|mut s| {
            if s.ends_with('\r') {
                s.pop();
            }
            (i + 1, s)
        })
        .map_err(|e| Error::io(path, e))
    }))
}

/// Reads a one-name-per-line gene list. Blank lines are ignored; duplicates are errors
/// because matrix columns are addressed by line.
pub fn read_gene_list(path: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let mut seen = HashSet::new();
    for item in lines(path)? {
        let (ln, line) = item?;
        let name = line.trim();
        if name.is_empty() {
            continue;
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::parse(path, ln, format!("duplicate gene name {name:?}")));
        }
        names.push(name.to_string());
    }
    if names.is_empty() {
        return Err(Error::parse(path, 0, "empty vocabulary"));
    }
    Ok(names)
}

/// Gene names from a dense CSV header, without reading the body.
pub fn read_csv_gene_header(path: &Path) -> Result<Vec<String>> {
    let (_, header) = lines(path)?
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))??;
    parse_csv_header(path, &header)
}

fn parse_csv_header(path: &Path, header: &str) -> Result<Vec<String>> {
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "x" || cols[1] != "y" {
        return Err(Error::parse(path, 1, "header must be \"x,y,<gene1>,...\""));
    }
    let genes: Vec<String> = cols[2..].iter().map(|s| s.to_string()).collect();
    let mut seen = HashSet::new();
    for g in &genes {
        if g.is_empty() || !seen.insert(g) {
            return Err(Error::parse(path, 1, format!("empty or duplicate gene column {g:?}")));
        }
    }
    Ok(genes)
}

fn apply_log1p(entries: &mut [(u32, f32)]) {
    for e in entries {
        e.1 = e.1.ln_1p();
    }
}

/// Reads a slice from a gene list, a tab-separated spot table `(spot_id, x, y)`
/// and a MatrixMarket coordinate matrix with rows = spots and cols = genes (1-based).
pub fn read_triplet_slice(
    id: &str,
    genes_path: &Path,
    spots_path: &Path,
    matrix_path: &Path,
    log1p: bool,
) -> Result<LoadedSlice> {
    let vocab = GeneVocabulary::new(read_gene_list(genes_path)?)?;

    let mut coords = Vec::new();
    for item in lines(spots_path)? {
        let (ln, line) = item?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                spots_path,
                ln,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(spots_path, ln, format!("bad {what} coordinate {s:?}")))
        };
        coords.push((parse(fields[1], "x")?, parse(fields[2], "y")?, ln));
    }
    if coords.is_empty() {
        return Err(Error::parse(spots_path, 0, "no spots"));
    }
    let n_spots = coords.len();
    let n_genes = vocab.len();

    let mut entries: Vec<Vec<(u32, f32)>> = vec![Vec::new(); n_spots];
    let mut declared: Option<(usize, usize)> = None;
    let mut count = 0usize;
    let mut banner_seen = false;
    for item in lines(matrix_path)? {
        let (ln, line) = item?;
        let t = line.trim();
        if t.starts_with("%%MatrixMarket") {
            let lower = t.to_ascii_lowercase();
            if !lower.contains("coordinate") || lower.contains("complex") || lower.contains("pattern") {
                return Err(Error::parse(
                    matrix_path,
                    ln,
                    "only real/integer coordinate MatrixMarket files are supported",
                ));
            }
            banner_seen = true;
            continue;
        }
        if t.is_empty() || t.starts_with('%') {
            continue;
        }
        let f: Vec<&str> = t.split_whitespace().collect();
        if declared.is_none() {
            if !banner_seen {
                return Err(Error::parse(matrix_path, ln, "missing %%MatrixMarket banner"));
            }
            let dims: Vec<usize> = f
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(matrix_path, ln, "bad size line"))?;
            if dims.len() != 3 {
                return Err(Error::parse(matrix_path, ln, "size line must be \"rows cols nnz\""));
            }
            if dims[0] != n_spots || dims[1] != n_genes {
                return Err(Error::parse(
                    matrix_path,
                    ln,
                    format!(
                        "matrix is {}x{} but there are {n_spots} spots and {n_genes} genes",
                        dims[0], dims[1]
                    ),
                ));
            }
            declared = Some((ln, dims[2]));
            continue;
        }
        if f.len() != 3 {
            return Err(Error::parse(matrix_path, ln, "entry must be \"row col value\""));
        }
        let r: usize = f[0]
            .parse()
            .map_err(|_| Error::parse(matrix_path, ln, format!("bad row index {:?}", f[0])))?;
        let c: usize = f[1]
            .parse()
            .map_err(|_| Error::parse(matrix_path, ln, format!("bad column index {:?}", f[1])))?;
        let v: f32 = f[2]
            .parse()
            .map_err(|_| Error::parse(matrix_path, ln, format!("bad value {:?}", f[2])))?;
        if r == 0 || r > n_spots || c == 0 || c > n_genes {
            return Err(Error::parse(
                matrix_path,
                ln,
                format!("index ({r}, {c}) out of range for {n_spots}x{n_genes}"),
            ));
        }
        if !v.is_finite() || v < 0.0 {
            return Err(Error::parse(matrix_path, ln, format!("negative or non-finite value {v}")));
        }
        entries[r - 1].push(((c - 1) as u32, v));
        count += 1;
    }
    let (size_line, nnz) = declared.ok_or_else(|| Error::parse(matrix_path, 0, "missing size line"))?;
    if count != nnz {
        return Err(Error::parse(
            matrix_path,
            size_line,
            format!("header declares {nnz} entries but {count} were found"),
        ));
    }

    let mut spots = Vec::with_capacity(n_spots);
    for (row, ((x, y, ln), mut e)) in coords.into_iter().zip(entries).enumerate() {
        e.sort_unstable_by_key(|&(g, _)| g);
        if let Some(w) = e.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::parse(
                matrix_path,
                0,
                format!("duplicate entry ({}, {})", row + 1, w[0].0 + 1),
            ));
        }
        if log1p {
            apply_log1p(&mut e);
        }
        spots.push(Spot::new(x, y, e).map_err(|err| Error::parse(spots_path, ln, err.to_string()))?);
    }
    let slice = RawSlice::new(id, spots, n_genes).map_err(|e| Error::parse(spots_path, 0, e.to_string()))?;
    Ok(LoadedSlice { vocab, slice })
}

/// Reads a dense CSV slice: header `x,y,<gene1>,...`, one row per spot.
pub fn read_dense_csv_slice(id: &str, path: &Path, log1p: bool) -> Result<LoadedSlice> {
    let mut it = lines(path)?;
    let (_, header) = it.next().ok_or_else(|| Error::parse(path, 1, "missing header"))??;
    let genes = parse_csv_header(path, &header)?;
    let n_genes = genes.len();
    let vocab = GeneVocabulary::new(genes)?;

    let mut spots = Vec::new();
    let mut row = Vec::with_capacity(n_genes);
    for item in it {
        let (ln, line) = item?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_genes + 2 {
            return Err(Error::parse(
                path,
                ln,
                format!("expected {} columns, found {}", n_genes + 2, cells.len()),
            ));
        }
        let x: f64 = cells[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, ln, format!("non-numeric x {:?}", cells[0])))?;
        let y: f64 = cells[1]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, ln, format!("non-numeric y {:?}", cells[1])))?;
        row.clear();
        for c in &cells[2..] {
            let v: f32 = c
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, ln, format!("non-numeric cell {c:?}")))?;
            row.push(v);
        }
        let mut spot = Spot::from_dense(x, y, &row).map_err(|e| Error::parse(path, ln, e.to_string()))?;
        if log1p {
            let mut e = spot.entries().to_vec();
            apply_log1p(&mut e);
            spot = Spot::new(x, y, e)?;
        }
        spots.push(spot);
    }
    if spots.is_empty() {
        return Err(Error::parse(path, 2, "no spots"));
    }
    let slice = RawSlice::new(id, spots, n_genes).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Ok(LoadedSlice { vocab, slice })
}

/// Writes a slice as dense CSV in a form that [`read_dense_csv_slice`] reads back exactly.
pub fn write_dense_csv(slice: &RawSlice, vocab: &GeneVocabulary, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(out, "x,y").map_err(io)?;
    for g in vocab.names() {
        write!(out, ",{g}").map_err(io)?;
    }
    writeln!(out).map_err(io)?;
    for s in slice.spots() {
        write!(out, "{},{}", s.x, s.y).map_err(io)?;
        for v in s.densify(vocab.len()) {
            write!(out, ",{v}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Writes the gene / spot / MatrixMarket triplet for a slice.
pub fn write_triplet(
    slice: &RawSlice,
    vocab: &GeneVocabulary,
    genes_path: &Path,
    spots_path: &Path,
    matrix_path: &Path,
) -> Result<()> {
    let write_file = |path: &Path, f: &mut dyn FnMut(&mut BufWriter<File>) -> std::io::Result<()>| {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        f(&mut out).and_then(|_| out.flush()).map_err(|e| Error::io(path, e))
    };
    write_file(genes_path, &mut |o| {
        vocab.names().iter().try_for_each(|g| writeln!(o, "{g}"))
    })?;
    write_file(spots_path, &mut |o| {
        slice
            .spots()
            .iter()
            .enumerate()
            .try_for_each(|(i, s)| writeln!(o, "spot{i}\t{}\t{}", s.x, s.y))
    })?;
    let nnz: usize = slice.spots().iter().map(|s| s.entries().len()).sum();
    write_file(matrix_path, &mut |o| {
        writeln!(o, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(o, "{} {} {nnz}", slice.len(), vocab.len())?;
        for (i, s) in slice.spots().iter().enumerate() {
            for &(g, v) in s.entries() {
                writeln!(o, "{} {} {v}", i + 1, g + 1)?;
            }
        }
        Ok(())
    })
}

/// Parameters of a synthetic slice with planted rectangular domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub genes: usize,
    pub n_domains: usize,
    /// Mean offset added to each domain's signature genes inside the domain.
    #[serde(default = "default_signal")]
    pub signal: f64,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    /// Fraction of lattice cells left unobserved.
    #[serde(default)]
    pub hole_rate: f64,
    pub seed: u64,
    /// Mean expression of every gene outside its signature domain.
    #[serde(default = "default_baseline")]
    pub baseline: f64,
    /// Signature genes per domain; defaults to `max(1, genes / (2 * n_domains))`.
    #[serde(default)]
    pub signature_genes: Option<usize>,
    /// Offset odd rows by half a pitch, as on hexagonal Visium arrays.
    #[serde(default)]
    pub stagger: bool,
}

fn default_baseline() -> f64 {
    5.0
}

fn default_signal() -> f64 {
    5.0
}

fn default_noise() -> f64 {
    1.0
}

impl SyntheticConfig {
    pub fn new(height: usize, width: usize, genes: usize, n_domains: usize, seed: u64) -> Self {
        SyntheticConfig {
            height,
            width,
            genes,
            n_domains,
            signal: default_signal(),
            noise_sd: default_noise(),
            hole_rate: 0.0,
            seed,
            baseline: default_baseline(),
            signature_genes: None,
            stagger: false,
        }
    }

    pub fn signature_size(&self) -> usize {
        self.signature_genes
            .unwrap_or_else(|| (self.genes / (2 * self.n_domains.max(1))).max(1))
    }

    /// Gene indices carrying domain `d`'s signal.
    pub fn signature_of(&self, d: usize) -> std::ops::Range<usize> {
        let s = self.signature_size();
        d * s..(d + 1) * s
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.genes == 0 {
            return Err(Error::invalid("synthetic grid and gene count must be positive"));
        }
        if self.n_domains == 0 {
            return Err(Error::invalid("n_domains must be at least 1"));
        }
        if self.n_domains > self.height * self.width {
            return Err(Error::invalid(format!(
                "n_domains {} exceeds the {} grid cells",
                self.n_domains,
                self.height * self.width
            )));
        }
        if self.n_domains * self.signature_size() > self.genes {
            return Err(Error::invalid("not enough genes for disjoint domain signatures"));
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return Err(Error::invalid("signal must be positive"));
        }
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(Error::invalid("noise_sd must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.hole_rate) {
            return Err(Error::invalid("hole_rate must lie in [0, 1)"));
        }
        if !(self.baseline >= 0.0 && self.baseline.is_finite()) {
            return Err(Error::invalid("baseline must be non-negative"));
        }
        Ok(())
    }

    /// Domain of lattice cell `(row, col)`.
    ///
    /// Domains are the blocks of an `r x c` tiling with `r * c = n_domains` and
    /// `r` the largest factor not above `sqrt(n_domains)` that fits the grid.
    /// When no factorization fits, cells are split row-major into near-equal runs.
    pub fn domain_of(&self, row: usize, col: usize) -> usize {
        let n = self.n_domains;
        let tiling = (1..=n)
            .rev()
            .filter(|r| n.is_multiple_of(*r) && r * r <= n)
            .chain((1..=n).filter(|r| n.is_multiple_of(*r) && r * r > n))
            .find(|&r| r <= self.height && n / r <= self.width);
        match tiling {
            Some(r) => {
                let c = n / r;
                (row * r / self.height) * c + col * c / self.width
            }
            None => (row * self.width + col) * n / (self.height * self.width),
        }
    }
}

/// A generated slice with its gene vocabulary and per-spot domain labels.
#[derive(Debug, Clone)]
pub struct SyntheticSlice {
    pub vocab: GeneVocabulary,
    pub slice: RawSlice,
    pub labels: Vec<usize>,
}

pub fn synthetic_gene_names(k: usize) -> Vec<String> {
    (0..k).map(|g| format!("G{g}")).collect()
}

/// Generates a slice on an `height x width` lattice. Exactly
/// `round(hole_rate * height * width)` cells are left empty.
pub fn generate_synthetic_slice(id: &str, cfg: &SyntheticConfig) -> Result<SyntheticSlice> {
    cfg.validate()?;
    let mut rng = rng::from_seed(cfg.seed);
    let cells = cfg.height * cfg.width;
    let n_holes = ((cfg.hole_rate * cells as f64).round() as usize).min(cells - 1);
    let mut hole = vec![false; cells];
    for i in index::sample(&mut rng, cells, n_holes) {
        hole[i] = true;
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;

    let pitch_x = 100.0;
    let pitch_y = 86.5;
    let mut spots = Vec::with_capacity(cells - n_holes);
    let mut labels = Vec::with_capacity(cells - n_holes);
    let mut dense = vec![0f32; cfg.genes];
    for row in 0..cfg.height {
        for col in 0..cfg.width {
            if hole[row * cfg.width + col] {
                continue;
            }
            let d = cfg.domain_of(row, col);
            let sig = cfg.signature_of(d);
            for (g, slot) in dense.iter_mut().enumerate() {
                let mean = cfg.baseline + if sig.contains(&g) { cfg.signal } else { 0.0 };
                let v = if cfg.noise_sd > 0.0 { mean + noise.sample(&mut rng) } else { mean };
                *slot = v.max(0.0) as f32;
            }
            let stagger = if cfg.stagger && row % 2 == 1 { pitch_x / 2.0 } else { 0.0 };
            let x = 12.5 + pitch_x * col as f64 + stagger;
            let y = 40.25 + pitch_y * row as f64;
            spots.push(Spot::from_dense(x, y, &dense)?);
            labels.push(d);
        }
    }
    let vocab = GeneVocabulary::new(synthetic_gene_names(cfg.genes))?;
    let slice = RawSlice::new(id, spots, cfg.genes)?;
    Ok(SyntheticSlice {
        vocab,
        slice,
        labels,
    })
}
