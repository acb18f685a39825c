//! Reference implementations of the masked-reconstruction objectives at spot,
//! multi-spot, slice and patch granularity.
//!
//! Predictions are always inner products `e_g . z` between a gene embedding and a
//! context vector `z` supplied by the caller (or aggregated here from caller
//! embeddings). Every loss is normalized by the total number of masked entries.
//! Accumulation is in `f64`.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::{MaskSpec, PatchSample};

/// Per-spot masked gene indices with the true values at those genes.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTargets {
    pub genes: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl MaskedTargets {
    pub fn new(genes: Vec<Vec<usize>>, values: Vec<Vec<f64>>) -> Result<Self> {
        if genes.len() != values.len() || genes.iter().zip(&values).any(|(g, v)| g.len() != v.len()) {
            return Err(Error::invalid("masked gene lists and target values differ in shape"));
        }
        Ok(MaskedTargets { genes, values })
    }

    /// Gathers targets from a dense `N x K` expression matrix.
    pub fn from_expression(expr: &Matrix, genes: Vec<Vec<usize>>) -> Result<Self> {
        if genes.len() != expr.rows {
            return Err(Error::invalid(format!(
                "{} mask lists for {} spots",
                genes.len(),
                expr.rows
            )));
        }
        let values = genes
            .iter()
            .enumerate()
            .map(|(i, gs)| {
                gs.iter()
                    .map(|&g| {
                        expr.row(i).get(g).copied().ok_or_else(|| {
                            Error::invalid(format!("masked gene {g} outside {} columns", expr.cols))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(MaskedTargets { genes, values })
    }

    pub fn spots(&self) -> usize {
        self.genes.len()
    }

    pub fn total_masked(&self) -> usize {
        self.genes.iter().map(Vec::len).sum()
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_err_mean(pairs: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let mut sum = 0f64;
    let mut n = 0usize;
    for (t, p) in pairs {
        let d = t - p;
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no masked entries"));
    }
    Ok(sum / n as f64)
}

/// Spot-level loss from explicit predictions; `targets[i]` and `predictions[i]`
/// hold spot `i`'s masked entries.
pub fn loss_spot(targets: &[Vec<f64>], predictions: &[Vec<f64>]) -> Result<f64> {
    if targets.len() != predictions.len() || targets.iter().zip(predictions).any(|(t, p)| t.len() != p.len()) {
        return Err(Error::invalid("targets and predictions differ in shape"));
    }
    sq_err_mean(
        targets
            .iter()
            .zip(predictions)
            .flat_map(|(t, p)| t.iter().copied().zip(p.iter().copied())),
    )
}

fn check_embeddings(targets: &MaskedTargets, gene_emb: &Matrix, spot_emb: &Matrix) -> Result<()> {
    if spot_emb.rows != targets.spots() {
        return Err(Error::invalid(format!(
            "{} spot embeddings for {} spots",
            spot_emb.rows,
            targets.spots()
        )));
    }
    if gene_emb.cols != spot_emb.cols {
        return Err(Error::invalid(format!(
            "gene embedding dim {} != spot embedding dim {}",
            gene_emb.cols, spot_emb.cols
        )));
    }
    if let Some(&g) = targets.genes.iter().flatten().find(|&&g| g >= gene_emb.rows) {
        return Err(Error::invalid(format!("masked gene {g} has no embedding")));
    }
    Ok(())
}

/// Predictions `e_g . z_i` for every masked entry.
pub fn predict(targets: &MaskedTargets, gene_emb: &Matrix, context: &Matrix) -> Result<Vec<Vec<f64>>> {
    check_embeddings(targets, gene_emb, context)?;
    Ok(targets
        .genes
        .iter()
        .enumerate()
        .map(|(i, gs)| gs.iter().map(|&g| dot(gene_emb.row(g), context.row(i))).collect())
        .collect())
}

/// Spot-level loss with predictions `e_g . spot_emb[i]`.
pub fn loss_spot_embedded(targets: &MaskedTargets, gene_emb: &Matrix, spot_emb: &Matrix) -> Result<f64> {
    loss_spot(&targets.values, &predict(targets, gene_emb, spot_emb)?)
}

/// Weighted spatial neighborhoods.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl NeighborGraph {
    /// Validates that weights are non-negative, sum to one for every non-empty
    /// neighborhood, and that no spot neighbors itself unless `allow_self` is set.
    pub fn new(neighbors: Vec<Vec<(usize, f64)>>, allow_self: bool) -> Result<Self> {
        let n = neighbors.len();
        for (i, list) in neighbors.iter().enumerate() {
            for &(j, a) in list {
                if j >= n {
                    return Err(Error::invalid(format!("spot {i}: neighbor {j} out of range")));
                }
                if j == i && !allow_self {
                    return Err(Error::invalid(format!("spot {i}: self-loop")));
                }
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::invalid(format!("spot {i}: bad weight {a}")));
                }
            }
            if !list.is_empty() {
                let total: f64 = list.iter().map(|&(_, a)| a).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::invalid(format!("spot {i}: weights sum to {total}")));
                }
            }
        }
        Ok(NeighborGraph { neighbors })
    }

    /// Every spot is its own sole neighbor with weight 1.
    pub fn self_only(n: usize) -> Self {
        NeighborGraph {
            neighbors: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }
}

pub const DEFAULT_GRAPH_K: usize = 16;

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    dx * dx + dy * dy
}

/// Exact k-nearest-neighbor graph (self excluded), ties toward the lower index,
/// uniform weights `1 / k`.
pub fn build_knn_graph(coords: &[(f64, f64)], k: usize) -> Result<NeighborGraph> {
    let n = coords.len();
    if k == 0 || n <= k {
        return Err(Error::invalid(format!("need more than k = {k} points, have {n}")));
    }
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let neighbors = (0..n)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(coords[i], coords[j]), j))
                .collect();
            d.select_nth_unstable_by(k - 1, cmp);
            d.truncate(k);
            d.sort_unstable_by(cmp);
            d.into_iter().map(|(_, j)| (j, 1.0 / k as f64)).collect()
        })
        .collect();
    Ok(NeighborGraph { neighbors })
}

/// How [`loss_mspot`] treats a spot with an empty neighborhood.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IsolatedSpot {
    #[default]
    Error,
    OwnEmbedding,
}

/// Neighbor-aggregated embeddings `sum_j a_ij e_j`.
pub fn aggregate_neighbors(spot_emb: &Matrix, graph: &NeighborGraph, isolated: IsolatedSpot) -> Result<Matrix> {
    if graph.len() != spot_emb.rows {
        return Err(Error::invalid("graph size differs from spot count"));
    }
    let d = spot_emb.cols;
    let mut out = Matrix::zeros(spot_emb.rows, d);
    for i in 0..spot_emb.rows {
        let dst = &mut out.data[i * d..(i + 1) * d];
        let list = graph.neighbors(i);
        if list.is_empty() {
            match isolated {
                IsolatedSpot::Error => return Err(Error::data(format!("spot {i} has no neighbors"))),
                IsolatedSpot::OwnEmbedding => dst.copy_from_slice(spot_emb.row(i)),
            }
            continue;
        }
        for &(j, a) in list {
            for (o, &e) in dst.iter_mut().zip(spot_emb.row(j)) {
                *o += a * e;
            }
        }
    }
    Ok(out)
}

/// Multi-spot loss: predictions use neighbor-aggregated embeddings.
pub fn loss_mspot(
    targets: &MaskedTargets,
    gene_emb: &Matrix,
    spot_emb: &Matrix,
    graph: &NeighborGraph,
    isolated: IsolatedSpot,
) -> Result<f64> {
    check_embeddings(targets, gene_emb, spot_emb)?;
    let context = aggregate_neighbors(spot_emb, graph, isolated)?;
    loss_spot_embedded(targets, gene_emb, &context)
}

/// Assignment of spots to `k` non-empty macro-domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MacroPartition {
    labels: Vec<usize>,
    k: usize,
}

impl MacroPartition {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            *sizes
                .get_mut(l)
                .ok_or_else(|| Error::invalid(format!("domain {l} outside 0..{k}")))? += 1;
        }
        if let Some(d) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::data(format!("macro-domain {d} is empty")));
        }
        Ok(MacroPartition { labels, k })
    }

    /// Partition from arbitrary external labels, renumbered by first appearance.
    pub fn from_labels(raw: &[usize]) -> Result<Self> {
        let mut map = std::collections::HashMap::new();
        let labels = raw
            .iter()
            .map(|l| {
                let next = map.len();
                *map.entry(*l).or_insert(next)
            })
            .collect();
        MacroPartition::new(labels, map.len())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }
}

/// Splits spots into `k` bands of near-equal size along the longer coordinate
/// axis (x on ties). Band sizes differ by at most one.
pub fn grid_macro_partition(coords: &[(f64, f64)], k: usize) -> Result<MacroPartition> {
    let n = coords.len();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot split {n} spots into {k} domains")));
    }
    let extent = |f: fn(&(f64, f64)) -> f64| {
        let lo = coords.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        hi - lo
    };
    let along_y = extent(|c| c.1) > extent(|c| c.0);
    let key = |i: usize| {
        let (x, y) = coords[i];
        if along_y {
            (y, x)
        } else {
            (x, y)
        }
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(a), key(b));
        ka.0.total_cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then(a.cmp(&b))
    });
    let mut labels = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for d in 0..k {
        let size = base + usize::from(d < extra);
        for &i in &order[pos..pos + size] {
            labels[i] = d;
        }
        pos += size;
    }
    MacroPartition::new(labels, k)
}

/// Rule combining a spot embedding with its macro-domain embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Elementwise mean of spot and domain embedding.
    #[default]
    Mean,
    /// Ignore the domain context.
    SpotOnly,
    DomainOnly,
    Sum,
}

impl Fusion {
    pub fn apply(self, spot: &[f64], domain: &[f64]) -> Vec<f64> {
        match self {
            Fusion::Mean => spot.iter().zip(domain).map(|(a, b)| (a + b) / 2.0).collect(),
            Fusion::SpotOnly => spot.to_vec(),
            Fusion::DomainOnly => domain.to_vec(),
            Fusion::Sum => spot.iter().zip(domain).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Mean embedding of each macro-domain.
pub fn domain_embeddings(spot_emb: &Matrix, partition: &MacroPartition) -> Result<Matrix> {
    if partition.labels().len() != spot_emb.rows {
        return Err(Error::invalid("partition size differs from spot count"));
    }
    let d = spot_emb.cols;
    let mut out = Matrix::zeros(partition.k(), d);
    for (i, &l) in partition.labels().iter().enumerate() {
        for (o, &e) in out.data[l * d..(l + 1) * d].iter_mut().zip(spot_emb.row(i)) {
            *o += e;
        }
    }
    for (l, &size) in partition.sizes().iter().enumerate() {
        if size == 0 {
            return Err(Error::data(format!("macro-domain {l} is empty")));
        }
        for o in &mut out.data[l * d..(l + 1) * d] {
            *o /= size as f64;
        }
    }
    Ok(out)
}

/// Slice-level loss with a caller-defined fusion of spot and domain embeddings.
pub fn loss_slice_with<F>(
    targets: &MaskedTargets,
    gene_emb: &Matrix,
    spot_emb: &Matrix,
    partition: &MacroPartition,
    fuse: F,
) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Vec<f64>,
{
    check_embeddings(targets, gene_emb, spot_emb)?;
    let domains = domain_embeddings(spot_emb, partition)?;
    let d = spot_emb.cols;
    let mut fused = Vec::with_capacity(spot_emb.rows * d);
    for (i, &l) in partition.labels().iter().enumerate() {
        let f = fuse(spot_emb.row(i), domains.row(l));
        if f.len() != d {
            return Err(Error::invalid(format!("fusion returned dim {}, expected {d}", f.len())));
        }
        fused.extend(f);
    }
    loss_spot_embedded(targets, gene_emb, &Matrix::new(spot_emb.rows, d, fused)?)
}

pub fn loss_slice(
    targets: &MaskedTargets,
    gene_emb: &Matrix,
    spot_emb: &Matrix,
    partition: &MacroPartition,
    fusion: Fusion,
) -> Result<f64> {
    loss_slice_with(targets, gene_emb, spot_emb, partition, |s, c| fusion.apply(s, c))
}

/// Patch-level masked reconstruction loss.
///
/// `site_features` has one row per site in `[u][v]` order (`h * w` rows). Gene
/// embeddings are indexed by vocabulary id, so channel `k` uses row
/// `sample.genes[k]`. Masked entries at unoccupied sites are skipped unless
/// `loss_on_holes` is set.
pub fn loss_patch(
    sample: &PatchSample,
    spec: &MaskSpec,
    gene_emb: &Matrix,
    site_features: &Matrix,
    loss_on_holes: bool,
) -> Result<f64> {
    let (h, w, m) = (sample.h, sample.w, sample.m());
    if spec.h != h || spec.w != w || spec.m != m {
        return Err(Error::invalid("mask shape does not match patch"));
    }
    if site_features.rows != h * w {
        return Err(Error::invalid(format!(
            "{} site feature rows for a {h}x{w} patch",
            site_features.rows
        )));
    }
    if gene_emb.cols != site_features.cols {
        return Err(Error::invalid("gene embedding and site feature dims differ"));
    }
    if let Some(&g) = sample.genes.iter().find(|&&g| g as usize >= gene_emb.rows) {
        return Err(Error::invalid(format!("gene {g} has no embedding")));
    }
    let pairs = spec
        .entries()
        .iter()
        .map(|&(u, v, k)| (u as usize, v as usize, k as usize))
        .filter(|&(u, v, _)| loss_on_holes || sample.is_occupied(u, v))
        .map(|(u, v, k)| {
            let target = sample.value(u, v, k) as f64;
            let pred = dot(gene_emb.row(sample.genes[k] as usize), site_features.row(u * w + v));
            (target, pred)
        });
    sq_err_mean(pairs).map_err(|_| Error::data("mask is empty after excluding unoccupied sites"))
}
