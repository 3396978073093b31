//! MSEB1 checkpoint files.
//!
//! Layout: the five magic bytes `MSEB1`, the header length as a little-endian
//! `u64`, a JSON header, then every tensor as raw little-endian `f32` values
//! back to back. Header offsets are relative to the start of the data block.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::seeds::sha256_hex;
use crate::tensorcore::Tensor;

pub const MAGIC: &[u8; 5] = b"MSEB1";
pub const FORMAT_VERSION: u32 = 1;

const CONV_CONVENTION: &str = "cross-correlation, kernel [W][Cin][Cout], same padding, stride 1";
const SLOT_LAYOUT: &str = "output channel block [k*E, (k+1)*E) is slot k";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// Position of a ChaCha8 stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: String,
    pub config: Value,
    pub config_hash: String,
    pub conv_convention: String,
    pub slot_layout: String,
    pub epoch: usize,
    pub rng_state: Option<RngState>,
    pub metrics: Vec<Value>,
    pub tensors: Vec<TensorEntry>,
}

/// Named parameter tensors plus the training state that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// `"teacher"` or `"student"`.
    pub kind: String,
    /// Effective configuration snapshot; `config["encoder"]` describes the network.
    pub config: Value,
    pub epoch: usize,
    pub rng_state: Option<RngState>,
    pub metrics: Vec<Value>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

/// SHA-256 of the compact JSON form of a config.
pub fn config_hash(config: &Value) -> String {
    sha256_hex(config.to_string().as_bytes())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            });
            offset += 4 * t.numel() as u64;
        }
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            config_hash: config_hash(&self.config),
            conv_convention: CONV_CONVENTION.into(),
            slot_layout: SLOT_LAYOUT.into(),
            epoch: self.epoch,
            rng_state: self.rng_state.clone(),
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(13 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint and returns it with its header. Nothing partial is
    /// ever returned: any inconsistency is a format error.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Checkpoint, CheckpointHeader)> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 13 || &bytes[..5] != MAGIC {
            return Err(fmt("bad magic; not an MSEB1 checkpoint"));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let data_start = 13usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| fmt("truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[13..data_start]).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "format version {} (this build reads {FORMAT_VERSION})",
                header.format_version
            )));
        }
        let data = &bytes[data_start..];
        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(Error::Format(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected {
                return Err(Error::Format(format!("tensor {}: offset {} != {expected}", e.name, e.offset)));
            }
            let n: usize = e.shape.iter().product();
            let end = e.offset as usize + 4 * n;
            if end > data.len() {
                return Err(Error::Format(format!("tensor {}: truncated data", e.name)));
            }
            let vals = data[e.offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), vals)?));
            expected = end as u64;
        }
        if expected as usize != data.len() {
            return Err(fmt("trailing bytes after tensor data"));
        }
        if config_hash(&header.config) != header.config_hash {
            return Err(fmt("config hash does not match stored config"));
        }
        let ckpt = Checkpoint {
            kind: header.kind.clone(),
            config: header.config.clone(),
            epoch: header.epoch,
            rng_state: header.rng_state.clone(),
            metrics: header.metrics.clone(),
            tensors,
        };
        Ok((ckpt, header))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(Self::from_bytes(&fs::read(path)?)?.0)
    }

    /// Loads and compares the stored config hash with `expected`; a mismatch
    /// is reported as a warning rather than an error.
    pub fn load_checked(path: &Path, expected: &Value) -> Result<(Checkpoint, Vec<String>)> {
        let ckpt = Self::load(path)?;
        let mut warnings = Vec::new();
        let (have, want) = (config_hash(&ckpt.config), config_hash(expected));
        if have != want {
            let msg = format!("{}: config hash {have} differs from expected {want}", path.display());
            log::warn!("{msg}");
            warnings.push(msg);
        }
        Ok((ckpt, warnings))
    }

    pub fn sha256(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let v = self
            .config
            .get("encoder")
            .ok_or_else(|| Error::Format("checkpoint config has no encoder section".into()))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Format(format!("encoder config: {e}")))
    }

    /// Rebuilds the encoder from the tensors that are not prefixed `head.`.
    pub fn encoder(&self) -> Result<Encoder> {
        let params = self
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("head."))
            .cloned()
            .collect();
        Encoder::from_params(self.encoder_config()?, params)
    }
}
