//! Single-file checkpoints: parameters, optimizer moments, progress counters
//! and the training RNG.
//!
//! Layout: 8-byte magic, `u32` version, `u64` index length, `u64` FNV-1a
//! checksum of the index, a JSON index, then every array as little-endian
//! `f64`. The index records each array's offset and length in values and an
//! FNV-1a checksum of the data block.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelState};
use crate::params::{Param, ParamStore};
use crate::sam::{Adam, AdamState};

pub const MAGIC: &[u8; 8] = b"VGCKPT\0\0";
pub const VERSION: u32 = 2;
const HEADER_LEN: usize = 8 + 4 + 8 + 8;

/// Where training stands when the checkpoint is written. `epoch` and
/// `batch` name the next batch to run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: u64,
    pub batch: u64,
    pub step: u64,
    pub dev_eer: Option<f64>,
    pub best_dev_eer: Option<f64>,
    /// Resolved training configuration in key=value form.
    pub train_config: String,
}

/// Exact position of a ChaCha generator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: ModelState,
    pub optimizer: Adam,
    pub meta: CheckpointMeta,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    group: Group,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
    trainable: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Serialize, Deserialize)]
struct OptimizerIndex {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct RngIndex {
    seed: String,
    stream: u64,
    /// Decimal, since JSON numbers cannot carry 128 bits.
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Index {
    model: ModelConfig,
    arrays: Vec<ArrayEntry>,
    optimizer: OptimizerIndex,
    meta: CheckpointMeta,
    rng: Option<RngIndex>,
    data_len: u64,
    checksum: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut data: Vec<u8> = Vec::new();
    let mut arrays = Vec::new();
    let mut push = |name: &str, group: Group, shape: &[usize], values: &[f64], trainable: bool| {
        arrays.push(ArrayEntry {
            name: name.to_string(),
            group,
            shape: shape.to_vec(),
            offset: (data.len() / 8) as u64,
            len: values.len() as u64,
            trainable,
        });
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, p) in ckpt.state.params.iter() {
        push(name, Group::Param, &p.shape, &p.data, p.trainable);
    }
    let st = &ckpt.optimizer.state;
    for (group, moments) in [(Group::AdamM, &st.m), (Group::AdamV, &st.v)] {
        for (name, values) in moments {
            push(name, group, &[values.len()], values, true);
        }
    }
    let o = &ckpt.optimizer;
    let index = Index {
        model: ckpt.state.config.clone(),
        arrays,
        optimizer: OptimizerIndex {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            step: st.step,
        },
        meta: ckpt.meta.clone(),
        rng: ckpt.rng.as_ref().map(|r| RngIndex {
            seed: hex(&r.seed),
            stream: r.stream,
            word_pos: r.word_pos.to_string(),
        }),
        data_len: data.len() as u64,
        checksum: fnv1a(&data),
    };
    let json = serde_json::to_vec(&index).expect("index serializes");
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&fnv1a(&json).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

/// Parses a checkpoint image. Any inconsistency is an error; nothing is
/// returned unless the whole file checks out.
pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<Checkpoint, String> {
    if bytes.len() < HEADER_LEN {
        return Err(format!("file is {} bytes, shorter than the header", bytes.len()));
    }
    if &bytes[..8] != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(format!("unsupported version {version}, expected {VERSION}"));
    }
    let index_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let rest = &bytes[HEADER_LEN..];
    if index_len > rest.len() as u64 {
        return Err(format!("index of {index_len} bytes runs past the end of the file"));
    }
    let (json, data) = rest.split_at(index_len as usize);
    if fnv1a(json) != u64::from_le_bytes(bytes[20..28].try_into().expect("8 bytes")) {
        return Err("index checksum mismatch".into());
    }
    let index: Index = serde_json::from_slice(json).map_err(|e| format!("corrupted index: {e}"))?;
    if index.data_len != data.len() as u64 {
        return Err(format!(
            "data block is {} bytes, index says {} (truncated?)",
            data.len(),
            index.data_len
        ));
    }
    if data.len() % 8 != 0 {
        return Err("data block is not a whole number of f64 values".into());
    }
    if fnv1a(data) != index.checksum {
        return Err("checksum mismatch".into());
    }
    let total = (data.len() / 8) as u64;
    let read = |e: &ArrayEntry| -> std::result::Result<Vec<f64>, String> {
        let n = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| format!("`{}` has an overflowing shape", e.name))?;
        if n != e.len {
            return Err(format!("`{}` has shape {:?} but {} values", e.name, e.shape, e.len));
        }
        let end = e.offset.checked_add(e.len).filter(|&end| end <= total);
        let end = end.ok_or_else(|| format!("`{}` lies outside the data block", e.name))?;
        let bytes = &data[e.offset as usize * 8..end as usize * 8];
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };

    let mut params = ParamStore::new();
    let mut adam = AdamState {
        step: index.optimizer.step,
        ..AdamState::default()
    };
    for e in &index.arrays {
        let values = read(e)?;
        let duplicate = match e.group {
            Group::Param => {
                let dup = params.get(&e.name).is_some();
                params.insert(
                    e.name.clone(),
                    Param {
                        shape: e.shape.clone(),
                        data: values,
                        trainable: e.trainable,
                    },
                );
                dup
            }
            Group::AdamM => adam.m.insert(e.name.clone(), values).is_some(),
            Group::AdamV => adam.v.insert(e.name.clone(), values).is_some(),
        };
        if duplicate {
            return Err(format!("array `{}` appears twice", e.name));
        }
    }
    let state = ModelState {
        config: index.model,
        params,
    };
    state.check_layout().map_err(|e| e.to_string())?;
    for (name, moment) in adam.m.iter().chain(adam.v.iter()) {
        match state.params.get(name) {
            Some(p) if p.data.len() == moment.len() && p.trainable => {}
            _ => {
                return Err(format!(
                    "optimizer moment `{name}` does not match a trainable parameter"
                ))
            }
        }
    }
    if adam.m.keys().ne(adam.v.keys()) {
        return Err("optimizer first and second moments cover different parameters".into());
    }
    let o = index.optimizer;
    let rng = match index.rng {
        None => None,
        Some(r) => Some(RngState {
            seed: unhex(&r.seed).ok_or("rng seed is not 64 hex digits")?,
            stream: r.stream,
            word_pos: r.word_pos.parse().map_err(|_| "rng word position is not an integer")?,
        }),
    };
    Ok(Checkpoint {
        state,
        optimizer: Adam {
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            state: adam,
        },
        meta: index.meta,
        rng,
    })
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|msg| Error::Checkpoint {
        path: path.to_path_buf(),
        msg,
    })
}
