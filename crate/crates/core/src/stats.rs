//! Dataset summary statistics computed in one streaming pass over the shards.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::shard::read_shards;

pub const OCCUPANCY_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardSize {
    pub file: String,
    pub records: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChannelSummary {
    /// Per channel position, over occupied sites of every record.
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub record_count: u64,
    pub shards: Vec<ShardSize>,
    pub records_per_slice: Vec<(String, u64)>,
    /// Mean fraction of occupied sites per record (0 for an empty dataset).
    pub mean_occupancy: f64,
    /// Counts of per-record occupancy rates in ten equal bins over [0, 1].
    pub occupancy_histogram: [u64; OCCUPANCY_BINS],
    pub channels: ChannelSummary,
}

/// Verifies the manifest's digests and summarizes every record.
pub fn dataset_stats(manifest_path: &Path) -> Result<DatasetStats> {
    let reader = read_shards(manifest_path)?;
    let manifest = reader.manifest().clone();
    let m = manifest.shape.m;
    let mut hist = [0u64; OCCUPANCY_BINS];
    let mut occ_sum = 0f64;
    let mut count = 0u64;
    let mut per_slice: Vec<(String, u64)> = Vec::new();
    let mut n = vec![0f64; m];
    let mut mean = vec![0f64; m];
    let mut m2 = vec![0f64; m];
    for sample in reader {
        let s = sample?;
        count += 1;
        let occupied = s.occupied.iter().filter(|&&o| o).count();
        let rate = occupied as f64 / s.occupied.len() as f64;
        occ_sum += rate;
        hist[((rate * OCCUPANCY_BINS as f64) as usize).min(OCCUPANCY_BINS - 1)] += 1;
        match per_slice.last_mut() {
            Some((id, c)) if *id == s.slice_id => *c += 1,
            _ => per_slice.push((s.slice_id.clone(), 1)),
        }
        for (site, &o) in s.occupied.iter().enumerate() {
            if !o {
                continue;
            }
            for k in 0..m {
                let x = s.values[site * m + k] as f64;
                n[k] += 1.0;
                let d = x - mean[k];
                mean[k] += d / n[k];
                m2[k] += d * (x - mean[k]);
            }
        }
    }
    Ok(DatasetStats {
        record_count: count,
        shards: manifest
            .shards
            .iter()
            .map(|e| ShardSize { file: e.file.clone(), records: e.records, bytes: e.bytes })
            .collect(),
        records_per_slice: per_slice,
        mean_occupancy: if count == 0 { 0.0 } else { occ_sum / count as f64 },
        occupancy_histogram: hist,
        channels: ChannelSummary {
            variance: m2.iter().zip(&n).map(|(s, &c)| if c > 0.0 { s / c } else { 0.0 }).collect(),
            mean,
        },
    })
}
