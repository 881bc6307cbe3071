//! Checkpoint archive: magic, a little-endian `u64` manifest length, a JSON
//! manifest, then every tensor as little-endian `f32` in manifest order.
//!
//! The manifest records the format version, the model config and its hash,
//! step counters, the optimizer step, the trainer rng state and a table of
//! `(group, name, shape, offset)` entries. Offsets are byte offsets into the
//! data section. Groups are `params`, `ema`, `adam.m` and `adam.v`.

use std::io::Write;
use std::path::{Path, PathBuf};

use lego_core::optim::{AdamState, TrainConfig};
use lego_core::stack::{StackConfig, StackState};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{SamplerSpec, ScheduleSpec};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 10] = b"LEGO-CKPT\n";
pub const FORMAT_VERSION: u32 = 1;

const GROUPS: [&str; 4] = ["params", "ema", "adam.m", "adam.v"];

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    /// Hex-encoded 32-byte key.
    pub seed: String,
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, String> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| format!("rng seed: {e}"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| "rng seed must be 32 bytes".to_string())?;
        let pos: u128 = self.word_pos.parse().map_err(|e| format!("rng word_pos: {e}"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    /// Hex FNV-1a hash of the model config.
    pub config_hash: String,
    pub step: u64,
    pub images_seen: u64,
    pub adam_step: u64,
    pub frozen: Vec<bool>,
    pub rng: RngState,
    pub model: StackConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerSpec,
    /// Hex SHA-256 of the data section.
    pub data_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or to sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: StackConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    pub sampler: SamplerSpec,
    pub step: u64,
    pub images_seen: u64,
    pub params: StackState<f32>,
    pub ema: StackState<f32>,
    pub adam: AdamState<f32>,
    pub rng: RngState,
}

fn hash_hex(config: &StackConfig) -> String {
    format!("{:016x}", config.hash64())
}

impl Checkpoint {
    fn groups(&self) -> [&StackState<f32>; 4] {
        [&self.params, &self.ema, &self.adam.m, &self.adam.v]
    }

    /// Serialized archive bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (group, state) in GROUPS.iter().zip(self.groups()) {
            for (name, t) in state.named_tensors() {
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name,
                    shape: t.shape.clone(),
                    offset: data.len() as u64,
                });
                for v in &t.data {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            config_hash: hash_hex(&self.model),
            step: self.step,
            images_seen: self.images_seen,
            adam_step: self.adam.step,
            frozen: self.params.frozen.clone(),
            rng: self.rng.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            schedule: self.schedule,
            sampler: self.sampler,
            data_sha256: hex::encode(Sha256::digest(&data)),
            tensors,
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    /// Writes atomically: a temporary file in the same directory is synced
    /// and then renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)
    }

    /// Parses an archive. `expected`, when given, must hash to the stored
    /// config hash unless `force` is set.
    pub fn from_bytes(bytes: &[u8], path: &Path, expected: Option<&StackConfig>, force: bool) -> Result<Self> {
        let (manifest, data) = split(bytes, path)?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::checkpoint(path, format!("unsupported version {}", manifest.version)));
        }
        if hex::encode(Sha256::digest(data)) != manifest.data_sha256 {
            return Err(Error::checkpoint(path, "tensor data does not match its checksum"));
        }
        let stored = hash_hex(&manifest.model);
        if stored != manifest.config_hash && !force {
            return Err(Error::checkpoint(
                path,
                format!("config hash {} does not match the embedded config ({stored})", manifest.config_hash),
            ));
        }
        if let Some(cfg) = expected {
            let want = hash_hex(cfg);
            if want != manifest.config_hash && !force {
                return Err(Error::checkpoint(
                    path,
                    format!("config hash {} differs from the requested config {want}", manifest.config_hash),
                ));
            }
        }
        let model = match expected {
            Some(cfg) if force => cfg.clone(),
            _ => manifest.model.clone(),
        };
        model.validate()?;
        let mut entries = manifest.tensors.iter();
        let mut states = Vec::with_capacity(GROUPS.len());
        for group in GROUPS {
            let mut state = StackState::<f32>::zeros(&model);
            state.frozen = manifest.frozen.clone();
            let mut err = None;
            state.visit_mut(&mut |name, t| {
                if err.is_some() {
                    return;
                }
                let Some(e) = entries.next() else {
                    err = Some(format!("missing tensor {group}/{name}"));
                    return;
                };
                if e.group != group || e.name != name || e.shape != t.shape {
                    err = Some(format!(
                        "expected {group}/{name} {:?}, found {}/{} {:?}",
                        t.shape, e.group, e.name, e.shape
                    ));
                    return;
                }
                let start = e.offset as usize;
                let end = start + 4 * t.data.len();
                let Some(raw) = data.get(start..end) else {
                    err = Some(format!("tensor {group}/{name} runs past the data section"));
                    return;
                };
                for (v, b) in t.data.iter_mut().zip(raw.chunks_exact(4)) {
                    *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                }
            });
            if let Some(e) = err {
                return Err(Error::checkpoint(path, e));
            }
            if state.frozen.len() != model.bricks.len() {
                return Err(Error::checkpoint(path, "frozen flags do not match the brick count"));
            }
            states.push(state);
        }
        if entries.next().is_some() {
            return Err(Error::checkpoint(path, "manifest lists tensors the model does not have"));
        }
        let [params, ema, m, v]: [StackState<f32>; 4] = states.try_into().expect("four groups");
        Ok(Checkpoint {
            model,
            train: manifest.train,
            schedule: manifest.schedule,
            sampler: manifest.sampler,
            step: manifest.step,
            images_seen: manifest.images_seen,
            params,
            ema,
            adam: AdamState {
                m,
                v,
                step: manifest.adam_step,
            },
            rng: manifest.rng,
        })
    }

    pub fn load(path: &Path, expected: Option<&StackConfig>, force: bool) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path, expected, force)
    }
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    let head = MAGIC.len() + 8;
    if bytes.len() < head || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::checkpoint(path, "not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[MAGIC.len()..head].try_into().expect("eight bytes")) as usize;
    let json = bytes
        .get(head..head.saturating_add(len))
        .ok_or_else(|| Error::checkpoint(path, "truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| Error::checkpoint(path, e.to_string()))?;
    Ok((manifest, &bytes[head + len..]))
}

/// Reads only the manifest.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split(&bytes, path)?.0)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp: PathBuf = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
