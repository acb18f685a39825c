use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use stpatch::compact::rasterize;
use stpatch::eval::{self, DomainProtocol};
use stpatch::losses::{self, Fusion, IsolatedSpot, MacroPartition, MaskedTargets};
use stpatch::mask::{sample_region_mask, sample_uniform_mask};
use stpatch::matrix::Matrix;
use stpatch::pipeline::{self, BuildConfig, SelectKind, SliceSource, GENES_FILE};
use stpatch::render;
use stpatch::shard::{read_shards, Manifest};
use stpatch::{rng, GeneVocabulary, PatchSample};

/// Marks errors caused by how the tool was invoked.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

macro_rules! out {
    ($($t:tt)*) => { emit(&format!("{}\n", format_args!($($t)*))) };
}

/// Writes to stdout, treating a closed pipe as success.
fn emit(text: &str) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing output: {e}");
        }
    }
}

pub const WORKERS_ENV: &str = "STPATCH_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "stpatch", version, about = "Patch datasets from spatial transcriptomics slices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a patch dataset (h x w windows, m selected genes).
    Build(BuildArgs),
    /// Build the spot-level baseline dataset (one 1 x 1 x m record per spot).
    BuildSpot(BuildArgs),
    /// Summarize a dataset.
    Stats {
        manifest: PathBuf,
    },
    /// Render one gene channel of a record or of a whole slice as PGM.
    Render(RenderArgs),
    /// kNN spatial-domain detection over repeated train/test splits.
    EvalDomain(EvalDomainArgs),
    /// Reconstruction error (MSE / MAE) on masked regions.
    EvalRecon(EvalReconArgs),
    /// Evaluate a pretraining objective on supplied embeddings.
    LossOracle {
        #[command(subcommand)]
        loss: LossCommand,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SelectArg {
    Weighted,
    Hvg,
    Random,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// TOML build configuration.
    #[arg(long, required_unless_present = "from_manifest")]
    pub config: Option<PathBuf>,
    /// Rebuild the dataset described by an existing manifest.
    #[arg(long, conflicts_with = "config")]
    pub from_manifest: Option<PathBuf>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long = "n-s")]
    pub n_s: Option<usize>,
    #[arg(long, value_enum)]
    pub select: Option<SelectArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long = "mask-ratio")]
    pub mask_ratio: Option<f64>,
    #[arg(long = "region-s")]
    pub region_s: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "loss-on-holes")]
    pub loss_on_holes: bool,
    #[arg(long = "records-per-shard")]
    pub records_per_shard: Option<usize>,
    #[arg(long)]
    pub log1p: bool,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Render a record of this dataset...
    #[arg(long, conflicts_with = "config")]
    pub manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub record: usize,
    /// ...or the compact grid of a slice from this build configuration.
    #[arg(long, requires = "slice")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub slice: Option<String>,
    /// Gene name or 0-based vocabulary index.
    #[arg(long)]
    pub gene: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalDomainArgs {
    /// Embedding matrix (binary "rows cols" header + f32 LE, or .csv).
    #[arg(long)]
    pub embeddings: PathBuf,
    /// One integer label per line.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = eval::DEFAULT_KNN_K)]
    pub k: usize,
    #[arg(long = "train-frac", default_value_t = eval::DEFAULT_TRAIN_FRAC)]
    pub train_frac: f64,
    #[arg(long, default_value_t = eval::DEFAULT_SPLITS)]
    pub splits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct EvalReconArgs {
    /// Ground-truth region values (matrix file).
    #[arg(long, requires = "pred", conflicts_with = "manifest")]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Region-masking harness over a dataset with the channel-mean baseline predictor.
    #[arg(long, requires = "region_s")]
    pub manifest: Option<PathBuf>,
    #[arg(long = "region-s")]
    pub region_s: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "loss-on-holes")]
    pub loss_on_holes: bool,
}

#[derive(Debug, Args)]
pub struct SpotTargets {
    /// Dense N x K expression matrix.
    #[arg(long)]
    pub expr: PathBuf,
    /// One line per spot with whitespace-separated 0-based masked gene indices.
    #[arg(long)]
    pub masks: PathBuf,
    /// K x d gene embeddings.
    #[arg(long = "gene-emb")]
    pub gene_emb: PathBuf,
    /// N x d spot embeddings.
    #[arg(long = "spot-emb")]
    pub spot_emb: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Mean,
    SpotOnly,
    DomainOnly,
    Sum,
}

#[derive(Debug, Subcommand)]
pub enum LossCommand {
    /// Spot loss from explicit N x M targets and predictions.
    Spot {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        preds: PathBuf,
    },
    /// Multi-spot loss over a kNN neighbor graph built from coordinates.
    Mspot {
        #[command(flatten)]
        t: SpotTargets,
        /// N x 2 spot coordinates.
        #[arg(long)]
        coords: PathBuf,
        #[arg(long = "neighbors", default_value_t = losses::DEFAULT_GRAPH_K)]
        neighbors: usize,
    },
    /// Slice loss with macro-domain context.
    Slice {
        #[command(flatten)]
        t: SpotTargets,
        #[arg(long, required_unless_present = "partition")]
        coords: Option<PathBuf>,
        /// Number of grid-tiled macro-domains (with --coords).
        #[arg(long, default_value_t = 1)]
        domains: usize,
        /// External macro-domain labels, one per line.
        #[arg(long, conflicts_with = "coords")]
        partition: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mean")]
        fusion: FusionArg,
    },
    /// Patch loss for one dataset record.
    Patch {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        record: usize,
        /// K x d gene embeddings indexed by vocabulary id.
        #[arg(long = "gene-emb")]
        gene_emb: PathBuf,
        /// (h*w) x d site features in row-major site order.
        #[arg(long = "site-features")]
        site_features: PathBuf,
        #[arg(long = "mask-ratio", default_value_t = stpatch::mask::DEFAULT_MASK_RATIO)]
        mask_ratio: f64,
        #[arg(long = "region-s")]
        region_s: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "loss-on-holes")]
        loss_on_holes: bool,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Build(a) => build(a, false),
        Command::BuildSpot(a) => build(a, true),
        Command::Stats { manifest } => {
            let s = stpatch::stats::dataset_stats(&manifest)?;
            out!("{}", serde_json::to_string_pretty(&s)?);
            Ok(())
        }
        Command::Render(a) => render_cmd(a),
        Command::EvalDomain(a) => eval_domain(a),
        Command::EvalRecon(a) => eval_recon(a),
        Command::LossOracle { loss } => {
            let v = loss_oracle(loss)?;
            out!("{v}");
            Ok(())
        }
    }
}

pub fn workers() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Parses a TOML build configuration; relative paths resolve against the file's directory.
pub fn load_config(path: &Path) -> Result<BuildConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: BuildConfig =
        toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for s in &mut cfg.slices {
        s.resolve_paths(base);
    }
    if cfg.output.is_relative() {
        cfg.output = base.join(&cfg.output);
    }
    Ok(cfg)
}

fn build(a: BuildArgs, spot: bool) -> Result<()> {
    let mut cfg = match (&a.config, &a.from_manifest) {
        (Some(c), _) => load_config(c)?,
        (None, Some(m)) => {
            let manifest = Manifest::load(m)?;
            let output = a.output.clone().ok_or_else(|| usage("--from-manifest requires --output"))?;
            let (cfg, kind) = BuildConfig::from_manifest(&manifest, output)?;
            if (kind == pipeline::DatasetKind::Spot) != spot {
                return Err(usage("manifest dataset kind does not match the subcommand"));
            }
            cfg
        }
        (None, None) => return Err(usage("either --config or --from-manifest is required")),
    };
    let p = &mut cfg.params;
    if let Some(v) = a.output {
        cfg.output = v;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { p.$field = v; })* };
    }
    set!(h, w, m, n_s, epsilon, mask_ratio, seed, records_per_shard);
    if let Some(s) = a.region_s {
        p.region_s = Some(s);
    }
    if let Some(s) = a.select {
        p.select = match s {
            SelectArg::Weighted => SelectKind::Weighted,
            SelectArg::Hvg => SelectKind::Hvg,
            SelectArg::Random => SelectKind::Random,
        };
    }
    p.loss_on_holes |= a.loss_on_holes;
    p.log1p |= a.log1p;

    let n = workers()?;
    let manifest = if spot {
        pipeline::build_spot_dataset(&cfg, n)?
    } else {
        pipeline::build_dataset(&cfg, n)?
    };
    let skipped = manifest.build.as_ref().map_or(0, |b| b.skipped_slices);
    if skipped > 0 {
        log::warn!("warning: {skipped} slice(s) skipped (smaller than the window)");
    }
    out!(
        "wrote {} records in {} shard(s) to {}",
        manifest.record_count,
        manifest.shards.len(),
        cfg.output.display()
    );
    Ok(())
}

fn manifest_vocabulary(manifest_path: &Path) -> Result<GeneVocabulary> {
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let names = stpatch::ingest::read_gene_list(&dir.join(GENES_FILE))?;
    Ok(GeneVocabulary::new(names)?)
}

fn resolve_gene(vocab: &GeneVocabulary, gene: &str) -> Result<usize> {
    if let Some(i) = vocab.index_of(gene) {
        return Ok(i);
    }
    match gene.parse::<usize>() {
        Ok(i) if i < vocab.len() => Ok(i),
        _ => Err(usage(format!("unknown gene {gene:?}"))),
    }
}

fn nth_record(manifest: &Path, record: usize) -> Result<PatchSample> {
    read_shards(manifest)?
        .nth(record)
        .ok_or_else(|| usage(format!("dataset has no record {record}")))?
        .map_err(Into::into)
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let bytes = match (&a.manifest, &a.config) {
        (Some(m), _) => {
            let vocab = manifest_vocabulary(m)?;
            let gene = resolve_gene(&vocab, &a.gene)?;
            render::render_sample_channel(&nth_record(m, a.record)?, gene as u32)?
        }
        (None, Some(c)) => {
            let cfg = load_config(c)?;
            let id = a.slice.as_deref().unwrap_or_default();
            let src: SliceSource = cfg
                .slices
                .iter()
                .flat_map(SliceSource::expand)
                .find(|s| s.id() == id)
                .ok_or_else(|| usage(format!("no slice {id:?} in {}", c.display())))?;
            let loaded = src.load(cfg.params.log1p)?;
            let gene = resolve_gene(&loaded.vocab, &a.gene)?;
            let grid = rasterize(&loaded.slice, loaded.vocab.len())?;
            render::render_grid_channel(&grid, gene)?
        }
        (None, None) => return Err(usage("render needs --manifest or --config")),
    };
    render::write_pgm(&bytes, &a.out)?;
    Ok(())
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<usize>()
                .map_err(|_| stpatch::Error::Parse { path: path.into(), line: i + 1, msg: format!("bad label {l:?}") }.into())
        })
        .collect()
}

fn eval_domain(a: EvalDomainArgs) -> Result<()> {
    let x = Matrix::read(&a.embeddings)?;
    let labels = read_labels(&a.labels)?;
    let report = eval::domain_detection_report(
        &x,
        &labels,
        DomainProtocol { k: a.k, train_frac: a.train_frac, n_splits: a.splits, seed: a.seed },
    )?;
    if a.json {
        out!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        emit(&report.to_csv());
    }
    Ok(())
}

fn eval_recon(a: EvalReconArgs) -> Result<()> {
    if let (Some(t), Some(p)) = (&a.truth, &a.pred) {
        let (t, p) = (Matrix::read(t)?, Matrix::read(p)?);
        if (t.rows, t.cols) != (p.rows, p.cols) {
            return Err(stpatch::Error::InvalidArgument("truth and prediction shapes differ".into()).into());
        }
        let (mse, mae) = eval::reconstruction_score(&t.data, &p.data)?;
        out!("mse,mae\n{mse},{mae}");
        return Ok(());
    }
    let (Some(m), Some(s)) = (&a.manifest, a.region_s) else {
        return Err(usage("eval-recon needs --truth/--pred or --manifest/--region-s"));
    };
    let report = eval::region_reconstruction_eval(
        read_shards(m)?,
        s,
        a.replicates,
        a.seed,
        a.loss_on_holes,
        eval::channel_mean_predictor,
    )?;
    out!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn read_masks(path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| stpatch::Error::Parse { path: path.into(), line: i + 1, msg: "bad gene index".into() }.into())
        })
        .collect()
}

fn load_targets(t: &SpotTargets) -> Result<(MaskedTargets, Matrix, Matrix)> {
    let expr = Matrix::read(&t.expr)?;
    let targets = MaskedTargets::from_expression(&expr, read_masks(&t.masks)?)?;
    Ok((targets, Matrix::read(&t.gene_emb)?, Matrix::read(&t.spot_emb)?))
}

fn read_coords(path: &Path) -> Result<Vec<(f64, f64)>> {
    let c = Matrix::read(path)?;
    if c.cols != 2 {
        return Err(stpatch::Error::InvalidArgument(format!("{} must have 2 columns", path.display())).into());
    }
    Ok((0..c.rows).map(|i| (c.row(i)[0], c.row(i)[1])).collect())
}

pub fn loss_oracle(cmd: LossCommand) -> Result<f64> {
    Ok(match cmd {
        LossCommand::Spot { targets, preds } => {
            losses::loss_spot(&Matrix::read(&targets)?.to_rows(), &Matrix::read(&preds)?.to_rows())?
        }
        LossCommand::Mspot { t, coords, neighbors } => {
            let (targets, ge, se) = load_targets(&t)?;
            let graph = losses::build_knn_graph(&read_coords(&coords)?, neighbors)?;
            losses::loss_mspot(&targets, &ge, &se, &graph, IsolatedSpot::Error)?
        }
        LossCommand::Slice { t, coords, domains, partition, fusion } => {
            let (targets, ge, se) = load_targets(&t)?;
            let part = match (partition, coords) {
                (Some(p), _) => MacroPartition::from_labels(&read_labels(&p)?)?,
                (None, Some(c)) => losses::grid_macro_partition(&read_coords(&c)?, domains)?,
                (None, None) => return Err(usage("slice loss needs --coords or --partition")),
            };
            let fusion = match fusion {
                FusionArg::Mean => Fusion::Mean,
                FusionArg::SpotOnly => Fusion::SpotOnly,
                FusionArg::DomainOnly => Fusion::DomainOnly,
                FusionArg::Sum => Fusion::Sum,
            };
            losses::loss_slice(&targets, &ge, &se, &part, fusion)?
        }
        LossCommand::Patch { manifest, record, gene_emb, site_features, mask_ratio, region_s, seed, loss_on_holes } => {
            let sample = nth_record(&manifest, record)?;
            let mut r = rng::derive(seed, &sample.slice_id, "mask", record as u64);
            let spec = match region_s {
                Some(s) => sample_region_mask(sample.h, sample.w, sample.m(), s, &mut r)?,
                None => sample_uniform_mask(sample.h, sample.w, sample.m(), mask_ratio, &mut r)?,
            };
            losses::loss_patch(&sample, &spec, &Matrix::read(&gene_emb)?, &Matrix::read(&site_features)?, loss_on_holes)?
        }
    })
}
