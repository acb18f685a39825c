//! Binary shard files of patch records plus the JSON manifest that lists them.
//!
//! Shard layout (all integers little-endian `u32`):
//!
//! ```text
//! header   "STPZ" version h w m K record_count value_type      (32 bytes)
//! record   id_len id_bytes o_x o_y genes[m] occupancy[ceil(h*w/8)] values[h*w*m]
//! ```
//!
//! The occupancy bitmask is row-major, least significant bit first. Values are
//! `f32` in `[u][v][k]` order. Value type code 0 is the only one defined.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::PatchSample;

pub const MAGIC: &[u8; 4] = b"STPZ";
pub const FORMAT_VERSION: u32 = 1;
pub const VALUE_TYPE_F32_LE: u32 = 0;
pub const HEADER_LEN: u64 = 32;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_RECORDS_PER_SHARD: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardShape {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    /// Vocabulary size.
    pub k: usize,
}

impl ShardShape {
    pub fn bitmask_len(&self) -> usize {
        (self.h * self.w).div_ceil(8)
    }

    /// Encoded size of one record whose slice id is `id_len` bytes long.
    pub fn record_len(&self, id_len: usize) -> usize {
        4 + id_len + 8 + 4 * self.m + self.bitmask_len() + 4 * self.h * self.w * self.m
    }

    fn check(&self, s: &PatchSample) -> Result<()> {
        if s.h != self.h || s.w != self.w || s.m() != self.m {
            return Err(Error::invalid(format!(
                "sample {}x{}x{} from slice {:?} does not match shard shape {}x{}x{}",
                s.h,
                s.w,
                s.m(),
                s.slice_id,
                self.h,
                self.w,
                self.m
            )));
        }
        s.validate(self.k)
    }
}

/// Fixed-size shard header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub shape: ShardShape,
    pub record_count: u32,
    pub value_type: u32,
}

impl ShardHeader {
    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut b = [0u8; HEADER_LEN as usize];
        b[..4].copy_from_slice(MAGIC);
        let fields = [
            self.version,
            self.shape.h as u32,
            self.shape.w as u32,
            self.shape.m as u32,
            self.shape.k as u32,
            self.record_count,
            self.value_type,
        ];
        for (i, f) in fields.iter().enumerate() {
            b[4 + 4 * i..8 + 4 * i].copy_from_slice(&f.to_le_bytes());
        }
        b
    }

    fn decode(path: &Path, b: &[u8; HEADER_LEN as usize]) -> Result<Self> {
        let corrupt = |offset, msg: &str| Error::Corrupt {
            path: path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        };
        if &b[..4] != MAGIC {
            return Err(corrupt(0, "bad magic"));
        }
        let f = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = f(0);
        if version != FORMAT_VERSION {
            return Err(corrupt(4, &format!("unsupported version {version}")));
        }
        let value_type = f(6);
        if value_type != VALUE_TYPE_F32_LE {
            return Err(corrupt(28, &format!("unknown value type {value_type}")));
        }
        Ok(ShardHeader {
            version,
            shape: ShardShape {
                h: f(1) as usize,
                w: f(2) as usize,
                m: f(3) as usize,
                k: f(4) as usize,
            },
            record_count: f(5),
            value_type,
        })
    }
}

/// Appends the encoded record to `buf`.
pub fn encode_record(s: &PatchSample, buf: &mut Vec<u8>) {
    let id = s.slice_id.as_bytes();
    buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
    buf.extend_from_slice(id);
    buf.extend_from_slice(&s.origin.0.to_le_bytes());
    buf.extend_from_slice(&s.origin.1.to_le_bytes());
    for g in &s.genes {
        buf.extend_from_slice(&g.to_le_bytes());
    }
    let mut bits = vec![0u8; (s.h * s.w).div_ceil(8)];
    for (i, &o) in s.occupied.iter().enumerate() {
        if o {
            bits[i / 8] |= 1 << (i % 8);
        }
    }
    buf.extend_from_slice(&bits);
    buf.reserve(s.values.len() * 4);
    for v in &s.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardEntry {
    /// File name relative to the manifest's directory.
    pub file: String,
    pub records: u64,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyInfo {
    pub size: usize,
    pub digest: String,
    /// Gene list written next to the manifest, one name per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

/// Dataset manifest. `build` carries the full build provenance when the shards
/// were produced by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub toolkit_version: String,
    pub shape: ShardShape,
    pub record_count: u64,
    pub records_per_shard: usize,
    pub vocabulary: VocabularyInfo,
    pub shards: Vec<ShardEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub build: Option<crate::pipeline::BuildProvenance>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

struct OpenShard {
    path: PathBuf,
    name: String,
    out: BufWriter<File>,
    records: u32,
    bytes: u64,
}

/// Streams samples into numbered shard files of at most `records_per_shard` records.
pub struct ShardWriter {
    dir: PathBuf,
    shape: ShardShape,
    records_per_shard: usize,
    current: Option<OpenShard>,
    done: Vec<ShardEntry>,
    buf: Vec<u8>,
}

impl ShardWriter {
    pub fn new(dir: &Path, shape: ShardShape, records_per_shard: usize) -> Result<Self> {
        if records_per_shard == 0 || records_per_shard > u32::MAX as usize {
            return Err(Error::invalid("records_per_shard must be in 1..=u32::MAX"));
        }
        if shape.h == 0 || shape.w == 0 || shape.m == 0 || shape.k == 0 {
            return Err(Error::invalid("shard shape dimensions must be positive"));
        }
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(ShardWriter {
            dir: dir.to_path_buf(),
            shape,
            records_per_shard,
            current: None,
            done: Vec::new(),
            buf: Vec::new(),
        })
    }

    pub fn shape(&self) -> ShardShape {
        self.shape
    }

    fn open_next(&mut self) -> Result<()> {
        let name = format!("shard-{:05}.stpz", self.done.len());
        let path = self.dir.join(&name);
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        let header = ShardHeader {
            version: FORMAT_VERSION,
            shape: self.shape,
            record_count: 0,
            value_type: VALUE_TYPE_F32_LE,
        };
        out.write_all(&header.encode()).map_err(|e| Error::io(&path, e))?;
        self.current = Some(OpenShard {
            path,
            name,
            out,
            records: 0,
            bytes: HEADER_LEN,
        });
        Ok(())
    }

    fn close_current(&mut self) -> Result<()> {
        let Some(shard) = self.current.take() else {
            return Ok(());
        };
        let OpenShard {
            path,
            name,
            out,
            records,
            bytes,
        } = shard;
        let io = |e| Error::io(&path, e);
        let mut file = out.into_inner().map_err(|e| Error::io(&path, e.into_error()))?;
        let header = ShardHeader {
            version: FORMAT_VERSION,
            shape: self.shape,
            record_count: records,
            value_type: VALUE_TYPE_F32_LE,
        };
        file.seek(SeekFrom::Start(0)).map_err(io)?;
        file.write_all(&header.encode()).map_err(io)?;
        file.sync_data().map_err(io)?;
        drop(file);
        let sha256 = file_sha256(&path)?;
        self.done.push(ShardEntry {
            file: name,
            records: records as u64,
            bytes,
            sha256,
        });
        Ok(())
    }

    fn discard_current(&mut self) {
        if let Some(shard) = self.current.take() {
            let path = shard.path.clone();
            drop(shard);
            let _ = fs::remove_file(path);
        }
    }

    /// Appends one sample. On a shape mismatch the partially written shard is
    /// deleted and the writer must not be used further.
    pub fn push(&mut self, sample: &PatchSample) -> Result<()> {
        if let Err(e) = self.shape.check(sample) {
            self.discard_current();
            return Err(e);
        }
        if self
            .current
            .as_ref()
            .is_some_and(|c| c.records as usize >= self.records_per_shard)
        {
            self.close_current()?;
        }
        if self.current.is_none() {
            self.open_next()?;
        }
        self.buf.clear();
        encode_record(sample, &mut self.buf);
        let shard = self.current.as_mut().unwrap();
        if let Err(e) = shard.out.write_all(&self.buf) {
            let err = Error::io(&shard.path, e);
            self.discard_current();
            return Err(err);
        }
        shard.records += 1;
        shard.bytes += self.buf.len() as u64;
        Ok(())
    }

    /// Closes the last shard (writing an empty one if nothing was pushed).
    pub fn finish(mut self) -> Result<Vec<ShardEntry>> {
        if self.current.is_none() && self.done.is_empty() {
            self.open_next()?;
        }
        self.close_current()?;
        Ok(std::mem::take(&mut self.done))
    }
}

impl Drop for ShardWriter {
    fn drop(&mut self) {
        // an unfinished writer leaves no partial shard behind
        self.discard_current();
    }
}

/// Writes all samples and a manifest (without build provenance) into `dir`.
pub fn write_shards<I>(
    samples: I,
    dir: &Path,
    shape: ShardShape,
    vocabulary: VocabularyInfo,
    records_per_shard: usize,
) -> Result<Manifest>
where
    I: IntoIterator<Item = PatchSample>,
{
    let mut writer = ShardWriter::new(dir, shape, records_per_shard)?;
    for s in samples {
        writer.push(&s)?;
    }
    let shards = writer.finish()?;
    let manifest = Manifest {
        toolkit_version: crate::VERSION.to_string(),
        shape,
        record_count: shards.iter().map(|s| s.records).sum(),
        records_per_shard,
        vocabulary,
        shards,
        build: None,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Checks every shard's size and SHA-256 against the manifest.
pub fn verify_shards(manifest: &Manifest, dir: &Path) -> Result<()> {
    for entry in &manifest.shards {
        let path = dir.join(&entry.file);
        let len = fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        if len != entry.bytes {
            return Err(Error::Corrupt {
                path,
                offset: len.min(entry.bytes),
                msg: format!("size {len} differs from manifest size {}", entry.bytes),
            });
        }
        let digest = file_sha256(&path)?;
        if digest != entry.sha256 {
            return Err(Error::Corrupt {
                path,
                offset: 0,
                msg: format!("digest mismatch: file {digest}, manifest {}", entry.sha256),
            });
        }
    }
    Ok(())
}

/// Streaming reader over every record listed in a manifest, in written order.
///
/// Digests are verified up front; memory use is one record at a time.
pub struct ShardReader {
    dir: PathBuf,
    manifest: Manifest,
    next_shard: usize,
    current: Option<(PathBuf, BufReader<File>, u32, u64)>,
    failed: bool,
}

pub fn read_shards(manifest_path: &Path) -> Result<ShardReader> {
    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    verify_shards(&manifest, &dir)?;
    Ok(ShardReader {
        dir,
        manifest,
        next_shard: 0,
        current: None,
        failed: false,
    })
}

impl ShardReader {
    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn open(&mut self, idx: usize) -> Result<()> {
        let entry = &self.manifest.shards[idx];
        let path = self.dir.join(&entry.file);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = BufReader::with_capacity(1 << 20, file);
        let mut hb = [0u8; HEADER_LEN as usize];
        r.read_exact(&mut hb).map_err(|_| Error::Corrupt {
            path: path.clone(),
            offset: 0,
            msg: "truncated header".into(),
        })?;
        let header = ShardHeader::decode(&path, &hb)?;
        if header.shape != self.manifest.shape {
            return Err(Error::Corrupt {
                path,
                offset: 4,
                msg: "header shape differs from manifest".into(),
            });
        }
        if header.record_count as u64 != entry.records {
            return Err(Error::Corrupt {
                path,
                offset: 24,
                msg: format!(
                    "header records {} differ from manifest {}",
                    header.record_count, entry.records
                ),
            });
        }
        self.current = Some((path, r, header.record_count, HEADER_LEN));
        Ok(())
    }

    fn read_record(&mut self) -> Result<PatchSample> {
        let shape = self.manifest.shape;
        let (path, r, remaining, offset) = self.current.as_mut().unwrap();
        let start = *offset;
        let mut pos = *offset;
        let mut take = |n: usize, what: &str| -> Result<Vec<u8>> {
            let mut b = vec![0u8; n];
            r.read_exact(&mut b).map_err(|_| Error::Corrupt {
                path: path.clone(),
                offset: pos,
                msg: format!("truncated record starting at byte {start} while reading {what}"),
            })?;
            pos += n as u64;
            Ok(b)
        };
        let u32s = |b: &[u8]| -> Vec<u32> {
            b.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
        };
        let id_len = u32s(&take(4, "slice id length")?)[0] as usize;
        if id_len > 1 << 20 {
            return Err(Error::Corrupt {
                path: path.clone(),
                offset: start,
                msg: format!("implausible slice id length {id_len}"),
            });
        }
        let id_bytes = take(id_len, "slice id")?;
        let slice_id = String::from_utf8(id_bytes).map_err(|_| Error::Corrupt {
            path: path.clone(),
            offset: start + 4,
            msg: "slice id is not UTF-8".into(),
        })?;
        let origin = u32s(&take(8, "origin")?);
        let genes = u32s(&take(4 * shape.m, "genes")?);
        let bits = take(shape.bitmask_len(), "occupancy")?;
        let raw = take(4 * shape.h * shape.w * shape.m, "values")?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let occupied = (0..shape.h * shape.w).map(|i| bits[i / 8] >> (i % 8) & 1 == 1).collect();
        *offset = pos;
        *remaining -= 1;
        let sample = PatchSample {
            h: shape.h,
            w: shape.w,
            values,
            genes,
            origin: (origin[0], origin[1]),
            slice_id,
            occupied,
        };
        sample.validate(shape.k).map_err(|e| Error::Corrupt {
            path: path.clone(),
            offset: start,
            msg: e.to_string(),
        })?;
        Ok(sample)
    }

    fn next_inner(&mut self) -> Option<Result<PatchSample>> {
        loop {
            match &mut self.current {
                Some((_, _, remaining, _)) if *remaining > 0 => return Some(self.read_record()),
                Some((path, r, _, offset)) => {
                    let mut probe = [0u8; 1];
                    if matches!(r.read(&mut probe), Ok(n) if n > 0) {
                        return Some(Err(Error::Corrupt {
                            path: path.clone(),
                            offset: *offset,
                            msg: "trailing bytes after last record".into(),
                        }));
                    }
                    self.current = None;
                }
                None => {
                    if self.next_shard >= self.manifest.shards.len() {
                        return None;
                    }
                    let idx = self.next_shard;
                    self.next_shard += 1;
                    if let Err(e) = self.open(idx) {
                        return Some(Err(e));
                    }
                }
            }
        }
    }
}

impl Iterator for ShardReader {
    type Item = Result<PatchSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let item = self.next_inner();
        if matches!(item, Some(Err(_))) {
            self.failed = true;
        }
        item
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    const SHAPE: ShardShape = ShardShape { h: 3, w: 5, m: 2, k: 10 };

    fn vocab() -> VocabularyInfo {
        VocabularyInfo {
            size: 10,
            digest: "x".into(),
            file: None,
        }
    }

    fn random_sample(r: &mut impl Rng, shape: ShardShape) -> PatchSample {
        let sites = shape.h * shape.w;
        let occupied: Vec<bool> = (0..sites).map(|_| r.gen_bool(0.8)).collect();
        let values = occupied
            .iter()
            .flat_map(|&o| (0..shape.m).map(move |_| o))
            .map(|o| if o { r.gen_range(0.0f32..100.0) } else { 0.0 })
            .collect();
        let mut genes = rand::seq::index::sample(r, shape.k, shape.m).into_vec();
        genes.sort_unstable();
        PatchSample {
            h: shape.h,
            w: shape.w,
            values,
            genes: genes.into_iter().map(|g| g as u32).collect(),
            origin: (r.gen_range(0..100), r.gen_range(0..100)),
            slice_id: format!("slice-{}", r.gen_range(0..5)),
            occupied,
        }
    }

    #[test]
    fn empty_dataset_has_one_empty_shard() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_shards(Vec::new(), dir.path(), SHAPE, vocab(), 4).unwrap();
        assert_eq!(m.shards.len(), 1);
        assert_eq!(m.shards[0].records, 0);
        assert_eq!(m.shards[0].bytes, HEADER_LEN);
        let read: Vec<_> = read_shards(&dir.path().join(MANIFEST_FILE)).unwrap().collect();
        assert!(read.is_empty());
    }

    #[test]
    fn round_trip_and_rewrite_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::from_seed(1);
        let samples: Vec<_> = (0..100).map(|_| random_sample(&mut r, SHAPE)).collect();
        let m = write_shards(samples.clone(), &dir.path().join("a"), SHAPE, vocab(), 30).unwrap();
        assert_eq!(m.shards.len(), 4);
        assert_eq!(m.record_count, 100);
        let back: Vec<_> = read_shards(&dir.path().join("a").join(MANIFEST_FILE))
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(back, samples);
        let m2 = write_shards(back, &dir.path().join("b"), SHAPE, vocab(), 30).unwrap();
        assert_eq!(m.shards, m2.shards);
    }

    #[test]
    fn record_layout_arithmetic() {
        let shape = ShardShape { h: 16, w: 16, m: 512, k: 1000 };
        assert_eq!(shape.record_len(7), 4 + 7 + 8 + 2048 + 32 + 524_288);
        let mut r = rng::from_seed(0);
        let mut s = random_sample(&mut r, shape);
        s.slice_id = "slice-7".into();
        let mut buf = Vec::new();
        encode_record(&s, &mut buf);
        assert_eq!(buf.len(), shape.record_len(7));
    }

    #[test]
    fn corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::from_seed(2);
        let samples: Vec<_> = (0..5).map(|_| random_sample(&mut r, SHAPE)).collect();
        write_shards(samples, dir.path(), SHAPE, vocab(), 10).unwrap();
        let shard = dir.path().join("shard-00000.stpz");
        let mut bytes = fs::read(&shard).unwrap();
        bytes[100] ^= 0x40;
        fs::write(&shard, &bytes).unwrap();
        let err = read_shards(&dir.path().join(MANIFEST_FILE)).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains("digest mismatch") && msg.contains("shard-00000.stpz"), "{msg}");
    }

    #[test]
    fn truncation_and_bad_magic_are_reported_with_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::from_seed(3);
        let samples: Vec<_> = (0..3).map(|_| random_sample(&mut r, SHAPE)).collect();
        let mut m = write_shards(samples, dir.path(), SHAPE, vocab(), 10).unwrap();
        let shard = dir.path().join("shard-00000.stpz");
        let bytes = fs::read(&shard).unwrap();

        // truncated file whose manifest entry was updated to match
        fs::write(&shard, &bytes[..bytes.len() - 10]).unwrap();
        m.shards[0].bytes -= 10;
        m.shards[0].sha256 = file_sha256(&shard).unwrap();
        m.save(&dir.path().join(MANIFEST_FILE)).unwrap();
        let res: Result<Vec<_>> = read_shards(&dir.path().join(MANIFEST_FILE)).unwrap().collect();
        match res.unwrap_err() {
            Error::Corrupt { offset, msg, .. } => {
                assert!(msg.contains("truncated"));
                assert!(offset > HEADER_LEN);
            }
            e => panic!("{e}"),
        }

        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&shard, &bad).unwrap();
        m.shards[0].bytes = bad.len() as u64;
        m.shards[0].sha256 = file_sha256(&shard).unwrap();
        m.save(&dir.path().join(MANIFEST_FILE)).unwrap();
        let err = read_shards(&dir.path().join(MANIFEST_FILE)).unwrap().next().unwrap().unwrap_err();
        assert!(matches!(err, Error::Corrupt { offset: 0, .. }), "{err}");
    }

    #[test]
    fn shape_mismatch_removes_partial_shard() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = rng::from_seed(4);
        let mut samples: Vec<_> = (0..3).map(|_| random_sample(&mut r, SHAPE)).collect();
        samples.push(random_sample(&mut r, ShardShape { m: 3, ..SHAPE }));
        let err = write_shards(samples, dir.path(), SHAPE, vocab(), 10).unwrap_err();
        assert!(err.is_usage());
        assert!(!dir.path().join("shard-00000.stpz").exists());
    }
}
