//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   "DLRS" (4 bytes)
//! u32     format version (currently 1)
//! u32     metadata length, then that many bytes of JSON: the resolved run
//!         config plus epoch/step counters, rng state, normalization stats
//!         and the tail of the metrics log
//! u32     array count
//! per array:
//!   u16   name length, then the UTF-8 name
//!   u8    dtype (1 = f32, 2 = f64)
//!   u8    rank
//!   u32*  dims
//!   bytes payload, row-major little-endian
//! ```
//!
//! Writes go to a temp file in the target directory followed by a rename,
//! so a crash never leaves a truncated checkpoint behind.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::NormStats;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::objective::LossBreakdown;
use crate::tensor::Array;

const MAGIC: &[u8; 4] = b"DLRS";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 2;

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub invariance: f64,
    pub redundancy: f64,
    pub total: f64,
}

impl MetricsRecord {
    pub fn new(step: usize, epoch: usize, lr: f64, loss: &LossBreakdown) -> Self {
        MetricsRecord {
            step,
            epoch,
            lr,
            invariance: loss.invariance,
            redundancy: loss.redundancy,
            total: loss.total,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    config: RunConfig,
    epoch: usize,
    step: usize,
    rng_seed: String,
    rng_word_pos: String,
    norm_stats: Option<NormStats>,
    metrics_tail: Vec<MetricsRecord>,
}

/// In-memory checkpoint: named f64 arrays plus training-state metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub step: usize,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub norm_stats: Option<NormStats>,
    pub metrics_tail: Vec<MetricsRecord>,
    arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        config: RunConfig,
        epoch: usize,
        step: usize,
        rng_seed: [u8; 32],
        rng_word_pos: u128,
        norm_stats: Option<NormStats>,
        metrics_tail: Vec<MetricsRecord>,
    ) -> Self {
        Checkpoint {
            config,
            epoch,
            step,
            rng_seed,
            rng_word_pos,
            norm_stats,
            metrics_tail,
            arrays: Vec::new(),
        }
    }

    pub fn push_array(&mut self, name: impl Into<String>, value: Array) {
        self.arrays.push((name.into(), value));
    }

    pub fn arrays(&self) -> &[(String, Array)] {
        &self.arrays
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Required array with shape validation.
    pub fn take(&self, name: &str, shape: &[usize]) -> Result<Array> {
        let arr = self.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("missing array {name:?} in checkpoint"))
        })?;
        if arr.shape() != shape {
            return Err(Error::ShapeMismatch {
                context: "checkpoint",
                expected: format!("{name} with shape {shape:?}"),
                actual: format!("{:?}", arr.shape()),
            });
        }
        Ok(arr.clone())
    }

    /// Names with a common prefix, in stored order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.arrays
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(move |n| n.starts_with(prefix))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let meta = Meta {
        config: ckpt.config.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng_seed: hex_encode(&ckpt.rng_seed),
        rng_word_pos: ckpt.rng_word_pos.to_string(),
        norm_stats: ckpt.norm_stats,
        metrics_tail: ckpt.metrics_tail.clone(),
    };
    let meta_json = serde_json::to_vec(&meta).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&(ckpt.arrays.len() as u32).to_le_bytes());
    for (name, arr) in &ckpt.arrays {
        let name_bytes = name.as_bytes();
        bytes.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name_bytes);
        bytes.push(DTYPE_F64);
        bytes.push(arr.shape().len() as u8);
        for &d in arr.shape() {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in arr.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor::new(&bytes, path);

    let magic = cur.bytes_exact(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint file",
            path.display()
        )));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta_bytes = cur.bytes_exact(meta_len)?;
    let meta: Meta = serde_json::from_slice(meta_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
    let rng_seed = hex_decode(&meta.rng_seed)
        .ok_or_else(|| Error::Checkpoint(format!("{}: bad rng seed", path.display())))?;
    let rng_word_pos: u128 = meta
        .rng_word_pos
        .parse()
        .map_err(|_| Error::Checkpoint(format!("{}: bad rng position", path.display())))?;

    let n_arrays = cur.u32()? as usize;
    let mut arrays = Vec::with_capacity(n_arrays);
    for _ in 0..n_arrays {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.bytes_exact(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: bad array name", path.display())))?;
        let dtype = cur.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Checkpoint(format!(
                "{}: array {name} has unsupported dtype {dtype}",
                path.display()
            )));
        }
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = cur.bytes_exact(numel * 8)?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, Array::from_vec(&dims, data)?));
    }
    if cur.remaining() != 0 {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes after the last array",
            path.display(),
            cur.remaining()
        )));
    }

    Ok(Checkpoint {
        config: meta.config,
        epoch: meta.epoch,
        step: meta.step,
        rng_seed,
        rng_word_pos,
        norm_stats: meta.norm_stats,
        metrics_tail: meta.metrics_tail,
        arrays,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Cursor { bytes, pos: 0, path }
    }

    fn bytes_exact(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated (wanted {n} bytes at offset {})",
                self.path.display(),
                self.pos
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes_exact(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes_exact(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes_exact(4)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, chunk) in s.as_bytes().chunks_exact(2).enumerate() {
        let hi = (chunk[0] as char).to_digit(16)?;
        let lo = (chunk[1] as char).to_digit(16)?;
        out[i] = (hi * 16 + lo) as u8;
    }
    Some(out)
}
