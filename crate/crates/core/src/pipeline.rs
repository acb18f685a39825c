//! End-to-end dataset construction: load each slice, rasterize it onto the
//! compact lattice, draw `n_s` windows, select `m` channels per window and
//! stream the resulting patches into shards.
//!
//! Slices are processed one at a time so peak memory is bounded by the largest
//! slice. Patches within a slice are generated in parallel; each draws from its
//! own RNG stream keyed by `(seed, slice_id, patch_index)`, so output bytes do
//! not depend on the worker count.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compact::rasterize;
use crate::crop::{extract_patch, sample_window_origin};
use crate::error::{Error, Result};
use crate::genesel::{per_gene_variance, select_genes, SelectionMode, DEFAULT_EPSILON};
use crate::ingest::{self, LoadedSlice, SyntheticConfig};
use crate::mask::DEFAULT_MASK_RATIO;
use crate::rng;
use crate::shard::{Manifest, ShardShape, ShardWriter, VocabularyInfo, DEFAULT_RECORDS_PER_SHARD, MANIFEST_FILE};
use crate::types::{CompactGrid, GeneVocabulary, PatchSample, RawSlice};

pub const GENES_FILE: &str = "genes.txt";

/// Where one input slice comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SliceSource {
    Triplet {
        id: String,
        genes: PathBuf,
        spots: PathBuf,
        matrix: PathBuf,
    },
    Csv {
        id: String,
        path: PathBuf,
    },
    /// `count` slices named `{id}-{i}` with seeds `config.seed + i`; a single
    /// slice named `id` when `count` is absent.
    Synthetic {
        id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        count: Option<usize>,
        config: SyntheticConfig,
    },
}

impl SliceSource {
    /// One source per concrete slice.
    pub fn expand(&self) -> Vec<SliceSource> {
        match self {
            SliceSource::Synthetic {
                id,
                count: Some(n),
                config,
            } => (0..*n)
                .map(|i| SliceSource::Synthetic {
                    id: format!("{id}-{i}"),
                    count: None,
                    config: SyntheticConfig {
                        seed: config.seed.wrapping_add(i as u64),
                        ..config.clone()
                    },
                })
                .collect(),
            other => vec![other.clone()],
        }
    }

    pub fn id(&self) -> &str {
        match self {
            SliceSource::Triplet { id, .. } | SliceSource::Csv { id, .. } | SliceSource::Synthetic { id, .. } => id,
        }
    }

    fn gene_names(&self) -> Result<Vec<String>> {
        match self {
            SliceSource::Triplet { genes, .. } => ingest::read_gene_list(genes),
            SliceSource::Csv { path, .. } => ingest::read_csv_gene_header(path),
            SliceSource::Synthetic { config, .. } => Ok(ingest::synthetic_gene_names(config.genes)),
        }
    }

    pub fn load(&self, log1p: bool) -> Result<LoadedSlice> {
        match self {
            SliceSource::Triplet { id, genes, spots, matrix } => ingest::read_triplet_slice(id, genes, spots, matrix, log1p),
            SliceSource::Csv { id, path } => ingest::read_dense_csv_slice(id, path, log1p),
            SliceSource::Synthetic { id, config, .. } => {
                let syn = ingest::generate_synthetic_slice(id, config)?;
                let slice = if log1p {
                    let spots = syn
                        .slice
                        .into_spots()
                        .into_iter()
                        .map(|s| {
                            let e = s.entries().iter().map(|&(g, v)| (g, v.ln_1p())).collect();
                            crate::types::Spot::new(s.x, s.y, e)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    RawSlice::new(id.clone(), spots, config.genes)?
                } else {
                    syn.slice
                };
                Ok(LoadedSlice { vocab: syn.vocab, slice })
            }
        }
    }

    /// Rewrites relative paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            SliceSource::Triplet { genes, spots, matrix, .. } => {
                fix(genes);
                fix(spots);
                fix(matrix);
            }
            SliceSource::Csv { path, .. } => fix(path),
            SliceSource::Synthetic { .. } => {}
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectKind {
    #[default]
    Weighted,
    Hvg,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    #[default]
    Patch,
    Spot,
}

fn d_hw() -> usize {
    16
}
fn d_m() -> usize {
    512
}
fn d_ns() -> usize {
    64
}
fn d_eps() -> f64 {
    DEFAULT_EPSILON
}
fn d_ratio() -> f64 {
    DEFAULT_MASK_RATIO
}
fn d_rps() -> usize {
    DEFAULT_RECORDS_PER_SHARD
}
fn d_true() -> bool {
    true
}

/// Every parameter that influences the output bytes. Echoed verbatim into the
/// manifest; the mask fields are not applied at build time but are recorded so
/// a trainer can reproduce the masking policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildParams {
    #[serde(default = "d_hw")]
    pub h: usize,
    #[serde(default = "d_hw")]
    pub w: usize,
    #[serde(default = "d_m")]
    pub m: usize,
    #[serde(default = "d_ns")]
    pub n_s: usize,
    #[serde(default)]
    pub select: SelectKind,
    #[serde(default = "d_eps")]
    pub epsilon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_ratio")]
    pub mask_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_s: Option<usize>,
    #[serde(default)]
    pub loss_on_holes: bool,
    /// Variance over occupied sites only (true) or every window site.
    #[serde(default = "d_true")]
    pub variance_occupied_only: bool,
    #[serde(default)]
    pub log1p: bool,
    #[serde(default = "d_rps")]
    pub records_per_shard: usize,
}

impl Default for BuildParams {
    fn default() -> Self {
        BuildParams {
            h: d_hw(),
            w: d_hw(),
            m: d_m(),
            n_s: d_ns(),
            select: SelectKind::default(),
            epsilon: d_eps(),
            seed: 0,
            mask_ratio: d_ratio(),
            region_s: None,
            loss_on_holes: false,
            variance_occupied_only: true,
            log1p: false,
            records_per_shard: d_rps(),
        }
    }
}

impl BuildParams {
    pub fn selection(&self) -> SelectionMode {
        match self.select {
            SelectKind::Weighted => SelectionMode::Weighted { epsilon: self.epsilon },
            SelectKind::Hvg => SelectionMode::HvgTopk,
            SelectKind::Random => SelectionMode::Random,
        }
    }

    pub fn validate(&self, kind: DatasetKind) -> Result<()> {
        if kind == DatasetKind::Patch && (self.h == 0 || self.w == 0 || self.n_s == 0) {
            return Err(Error::invalid("h, w and n_s must be positive"));
        }
        if self.m == 0 {
            return Err(Error::invalid("m must be positive"));
        }
        if self.records_per_shard == 0 {
            return Err(Error::invalid("records_per_shard must be positive"));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid("mask_ratio must lie in (0, 1)"));
        }
        if let Some(s) = self.region_s {
            if s == 0 || s > self.h.min(self.w) {
                return Err(Error::invalid("region_s must lie in 1..=min(h, w)"));
            }
        }
        self.selection().validate()
    }
}

/// Input of [`build_dataset`] / [`build_spot_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub output: PathBuf,
    pub slices: Vec<SliceSource>,
    #[serde(default)]
    pub params: BuildParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SliceReport {
    pub id: String,
    pub spots: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub records: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skipped: Option<String>,
}

/// Build provenance stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildProvenance {
    pub kind: DatasetKind,
    pub params: BuildParams,
    pub selection: SelectionMode,
    pub inputs: Vec<SliceSource>,
    pub slices: Vec<SliceReport>,
    pub skipped_slices: usize,
}

impl BuildConfig {
    /// Reconstructs the configuration that produced a manifest.
    pub fn from_manifest(manifest: &Manifest, output: PathBuf) -> Result<(Self, DatasetKind)> {
        let b = manifest
            .build
            .as_ref()
            .ok_or_else(|| Error::data("manifest carries no build provenance"))?;
        Ok((
            BuildConfig {
                output,
                slices: b.inputs.clone(),
                params: b.params.clone(),
            },
            b.kind,
        ))
    }
}

fn expand_sources(cfg: &BuildConfig) -> Result<Vec<SliceSource>> {
    let sources: Vec<SliceSource> = cfg.slices.iter().flat_map(SliceSource::expand).collect();
    if sources.is_empty() {
        return Err(Error::invalid("no input slices configured"));
    }
    let mut ids = HashSet::new();
    for s in &sources {
        if !ids.insert(s.id()) {
            return Err(Error::invalid(format!("duplicate slice id {:?}", s.id())));
        }
    }
    Ok(sources)
}

/// Union of all slices' gene names in first-occurrence order.
fn union_vocabulary(sources: &[SliceSource]) -> Result<GeneVocabulary> {
    let mut names = Vec::new();
    for s in sources {
        names.extend(s.gene_names()?);
    }
    GeneVocabulary::new(names)
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

/// Builds one patch: window origin, channel selection and gathering, all from
/// the patch's own RNG stream.
pub fn make_patch(grid: &CompactGrid, slice_id: &str, index: u64, params: &BuildParams) -> Result<PatchSample> {
    let mut r = rng::patch_stream(params.seed, slice_id, index);
    let (ox, oy) = sample_window_origin(grid, params.h, params.w, &mut r)?;
    let win = extract_patch(grid, (ox, oy), params.h, params.w)?;
    let variances = match per_gene_variance(&win.values, &win.occupied, win.k, params.variance_occupied_only) {
        Ok(v) => v,
        // window entirely over holes: every gene has zero variance
        Err(Error::Data(_)) => vec![0.0; win.k],
        Err(e) => return Err(e),
    };
    let genes = select_genes(params.selection(), &variances, params.m, &mut r)?;
    Ok(PatchSample {
        h: params.h,
        w: params.w,
        values: gather_channels(&win.values, win.k, &genes),
        genes,
        origin: (ox as u32, oy as u32),
        slice_id: slice_id.to_string(),
        occupied: win.occupied,
    })
}

fn gather_channels(values: &[f32], k: usize, genes: &[u32]) -> Vec<f32> {
    let sites = values.len() / k;
    let mut out = Vec::with_capacity(sites * genes.len());
    for site in 0..sites {
        let row = &values[site * k..(site + 1) * k];
        out.extend(genes.iter().map(|&g| row[g as usize]));
    }
    out
}

/// Patches for one rasterized slice, in patch-index order.
pub fn slice_patches(grid: &CompactGrid, slice_id: &str, params: &BuildParams) -> Result<Vec<PatchSample>> {
    (0..params.n_s as u64)
        .into_par_iter()
        .map(|r| make_patch(grid, slice_id, r, params))
        .collect()
}

/// One `1 x 1 x m` record per occupied cell, row-major. Channel weights come
/// from per-gene variance over the whole slice.
pub fn slice_spot_records(grid: &CompactGrid, slice_id: &str, params: &BuildParams) -> Result<Vec<PatchSample>> {
    let variances = per_gene_variance(&grid.expr, &grid.occupied, grid.k, true)?;
    let cells: Vec<usize> = (0..grid.occupied.len()).filter(|&c| grid.occupied[c]).collect();
    let mode = params.selection();
    let shared = match mode {
        SelectionMode::HvgTopk => Some(select_genes(mode, &variances, params.m, &mut rng::from_seed(0))?),
        _ => None,
    };
    cells
        .par_iter()
        .enumerate()
        .map(|(j, &cell)| {
            let genes = match &shared {
                Some(g) => g.clone(),
                None => {
                    let mut r = rng::derive(params.seed, slice_id, "spot", j as u64);
                    select_genes(mode, &variances, params.m, &mut r)?
                }
            };
            let row = &grid.expr[cell * grid.k..(cell + 1) * grid.k];
            Ok(PatchSample {
                h: 1,
                w: 1,
                values: genes.iter().map(|&g| row[g as usize]).collect(),
                genes,
                origin: ((cell % grid.width) as u32, (cell / grid.width) as u32),
                slice_id: slice_id.to_string(),
                occupied: vec![true],
            })
        })
        .collect()
}

fn run(cfg: &BuildConfig, kind: DatasetKind, workers: usize) -> Result<Manifest> {
    let params = &cfg.params;
    params.validate(kind)?;
    let sources = expand_sources(cfg)?;
    let vocab = union_vocabulary(&sources)?;
    if params.m > vocab.len() {
        return Err(Error::invalid(format!(
            "m = {} exceeds the vocabulary size {}",
            params.m,
            vocab.len()
        )));
    }
    let (h, w) = match kind {
        DatasetKind::Patch => (params.h, params.w),
        DatasetKind::Spot => (1, 1),
    };
    let shape = ShardShape { h, w, m: params.m, k: vocab.len() };
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let genes_path = out.join(GENES_FILE);
    fs::write(&genes_path, vocab.names().iter().map(|n| format!("{n}\n")).collect::<String>())
        .map_err(|e| Error::io(&genes_path, e))?;

    let pool = thread_pool(workers)?;
    let mut writer = ShardWriter::new(out, shape, params.records_per_shard)?;
    let mut reports = Vec::with_capacity(sources.len());
    for src in &sources {
        let slice = src.load(params.log1p)?.remap_into(&vocab)?;
        let grid = rasterize(&slice, vocab.len())?;
        let spots = slice.len();
        drop(slice);
        let mut report = SliceReport {
            id: src.id().to_string(),
            spots,
            grid_height: grid.height,
            grid_width: grid.width,
            records: 0,
            skipped: None,
        };
        if kind == DatasetKind::Patch && (grid.height < h || grid.width < w) {
            log::warn!(
                "skipping slice {:?}: compact grid {}x{} is smaller than the {h}x{w} window",
                report.id,
                grid.height,
                grid.width
            );
            report.skipped = Some(format!("grid {}x{} smaller than window {h}x{w}", grid.height, grid.width));
            reports.push(report);
            continue;
        }
        let records = pool.install(|| match kind {
            DatasetKind::Patch => slice_patches(&grid, &report.id, params),
            DatasetKind::Spot => slice_spot_records(&grid, &report.id, params),
        })?;
        for r in &records {
            writer.push(r)?;
        }
        report.records = records.len();
        log::info!("slice {:?}: {} records", report.id, report.records);
        reports.push(report);
    }
    let skipped = reports.iter().filter(|r| r.skipped.is_some()).count();
    if skipped == reports.len() {
        return Err(Error::data("no usable slices: every slice is smaller than the window"));
    }
    let shards = writer.finish()?;
    let manifest = Manifest {
        toolkit_version: crate::VERSION.to_string(),
        shape,
        record_count: shards.iter().map(|s| s.records).sum(),
        records_per_shard: params.records_per_shard,
        vocabulary: VocabularyInfo {
            size: vocab.len(),
            digest: vocab.digest(),
            file: Some(GENES_FILE.to_string()),
        },
        shards,
        build: Some(BuildProvenance {
            kind,
            params: params.clone(),
            selection: params.selection(),
            inputs: cfg.slices.clone(),
            slices: reports,
            skipped_slices: skipped,
        }),
    };
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Patch dataset construction with a pool of `workers` threads.
pub fn build_dataset(cfg: &BuildConfig, workers: usize) -> Result<Manifest> {
    run(cfg, DatasetKind::Patch, workers)
}

/// Spot-level baseline dataset: one `1 x 1 x m` record per occupied spot.
pub fn build_spot_dataset(cfg: &BuildConfig, workers: usize) -> Result<Manifest> {
    run(cfg, DatasetKind::Spot, workers)
}

/// Rebuilds the dataset described by a manifest into `output`.
pub fn rebuild_from_manifest(manifest: &Manifest, output: PathBuf, workers: usize) -> Result<Manifest> {
    let (cfg, kind) = BuildConfig::from_manifest(manifest, output)?;
    run(&cfg, kind, workers)
}
