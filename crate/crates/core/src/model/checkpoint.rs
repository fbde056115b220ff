//! Binary checkpoints and model cards.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic "CVTRCKPT" | version u32
//! init scheme (u32 len + utf8) | seed u64 | config json (u32 len + utf8)
//! record count u32
//! per record: name (u32 len + utf8) | ndim u32 | dims u32 × ndim | values f32 × numel
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CVTRCKPT";
const VERSION: u32 = 1;
pub const INIT_SCHEME: &str = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); layer-norm gamma=1 beta=0";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub seed: u64,
    pub init_scheme: String,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ModelParams, seed: u64) -> Self {
        Self {
            config,
            params,
            seed,
            init_scheme: INIT_SCHEME.to_string(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.init_scheme);
        out.extend_from_slice(&self.seed.to_le_bytes());
        let json = serde_json::to_string(&self.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
        put_str(&mut out, &json);
        let entries = self.params.entries();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let init_scheme = r.string()?;
        let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
        let config: ModelConfig =
            serde_json::from_str(&r.string()?).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        config.validate()?;
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let params = ModelParams::from_entries(&config, entries).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Self {
            config,
            params,
            seed,
            init_scheme,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Plain-text companion of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCard {
    pub config: ModelConfig,
    pub seed: u64,
    pub manifest_sha256: String,
    /// Inclusive trajectory-length range served, if any.
    pub length_bin: Option<(usize, usize)>,
    pub param_digest: String,
    pub notes: Vec<(String, String)>,
}

impl ModelCard {
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task: {}", self.config.task());
        let _ = writeln!(s, "training_seed: {}", self.seed);
        let _ = writeln!(s, "dataset_manifest_sha256: {}", self.manifest_sha256);
        match self.length_bin {
            Some((lo, hi)) => {
                let _ = writeln!(s, "length_bin: {lo}-{hi}");
            }
            None => {
                let _ = writeln!(s, "length_bin: all");
            }
        }
        let _ = writeln!(s, "parameters: {}", self.config.param_count());
        let _ = writeln!(s, "param_sha256: {}", self.param_digest);
        let _ = writeln!(s, "init_scheme: {INIT_SCHEME}");
        for (k, v) in &self.notes {
            let _ = writeln!(s, "{k}: {v}");
        }
        let _ = writeln!(
            s,
            "config: {}",
            serde_json::to_string(&self.config).unwrap_or_default()
        );
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
