//! Binary checkpoint: magic `CMLMCKPT`, `u32` version, `u64` manifest
//! length and UTF-8 JSON manifest, `u32` record count, then per tensor
//! `u32` name length, name, `u8` dtype tag, `u32` rank, `u64` extents and
//! the little-endian payload.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::plan::TrainPlan;
use super::StepMetrics;
use crate::binio::{put_u32, put_u64, read_bytes, write_atomic, ByteReader};
use crate::encoder::{check_params, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, OptimizerConfig, OptimizerState, ParamSet, Real, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CMLMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM_PREFIX: &str = "param/";
const FIRST_MOMENT_PREFIX: &str = "adam_m/";
const SECOND_MOMENT_PREFIX: &str = "adam_v/";

/// Position of a ChaCha stream, enough to continue it exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it is a `u128`).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Data("malformed rng state in checkpoint".into());
        if self.seed.len() != 64 || !self.seed.is_ascii() {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub encoder: EncoderConfig,
    pub vocab: Vec<String>,
    pub plan: TrainPlan,
    /// Updates applied over the whole run.
    pub global_step: u64,
    /// Index of the stage in progress (equal to the stage count once done).
    pub stage: usize,
    pub optimizer: OptimizerConfig,
    /// Updates applied within the current stage.
    pub stage_step: u64,
    pub rng: RngState,
    /// Metrics of updates since the last log line, so a resumed run
    /// averages the same interval as an uninterrupted one.
    #[serde(default)]
    pub pending_metrics: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamSet<f32>,
    pub first_moment: ParamSet<f32>,
    pub second_moment: ParamSet<f32>,
}

impl Checkpoint {
    pub fn optimizer_state(&self) -> OptimizerState<f32> {
        OptimizerState {
            config: self.manifest.optimizer.clone(),
            step: self.manifest.stage_step,
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
        }
    }

    /// Fails unless the checkpoint was written for `config`.
    pub fn expect_config(&self, config: &EncoderConfig) -> Result<()> {
        if &self.manifest.encoder != config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint encoder {:?} differs from requested {:?}",
                self.manifest.encoder, config
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u64(&mut out, manifest.len() as u64);
        out.extend_from_slice(&manifest);
        let groups = [
            (PARAM_PREFIX, &self.params),
            (FIRST_MOMENT_PREFIX, &self.first_moment),
            (SECOND_MOMENT_PREFIX, &self.second_moment),
        ];
        let count: usize = groups.iter().map(|(_, g)| g.len()).sum();
        put_u32(&mut out, count as u32);
        for (prefix, group) in groups {
            for (name, t) in group.iter() {
                write_record(&mut out, &format!("{prefix}{name}"), t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return r.fail(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u64("manifest length")? as usize;
        let at = r.offset();
        let raw = r.take(len, "manifest")?;
        let manifest: Manifest = serde_json::from_slice(raw).map_err(|e| Error::Integrity {
            offset: at,
            reason: format!("manifest JSON: {e}"),
        })?;
        let count = r.u32("record count")?;
        let mut params = ParamSet::new();
        let mut first_moment = ParamSet::new();
        let mut second_moment = ParamSet::new();
        for _ in 0..count {
            let at = r.offset();
            let (name, t) = read_record(&mut r)?;
            let (group, rest) = if let Some(n) = name.strip_prefix(PARAM_PREFIX) {
                (&mut params, n)
            } else if let Some(n) = name.strip_prefix(FIRST_MOMENT_PREFIX) {
                (&mut first_moment, n)
            } else if let Some(n) = name.strip_prefix(SECOND_MOMENT_PREFIX) {
                (&mut second_moment, n)
            } else {
                return Err(Error::Integrity {
                    offset: at,
                    reason: format!("unknown record {name:?}"),
                });
            };
            if group.contains(rest) {
                return Err(Error::Integrity {
                    offset: at,
                    reason: format!("duplicate record {name:?}"),
                });
            }
            group.insert(rest, t);
        }
        r.finish()?;
        check_params(&manifest.encoder, &params)?;
        check_params(&manifest.encoder, &first_moment)?;
        check_params(&manifest.encoder, &second_moment)?;
        Ok(Self {
            manifest,
            params,
            first_moment,
            second_moment,
        })
    }
}

fn write_record<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE.tag());
    put_u32(out, t.rank() as u32);
    for &e in t.shape() {
        put_u64(out, e as u64);
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn read_record(r: &mut ByteReader<'_>) -> Result<(String, Tensor<f32>)> {
    let len = r.u32("record name length")? as usize;
    let name = r.string(len, "record name")?;
    let tag = r.u8("dtype")?;
    match DType::from_tag(tag) {
        Some(DType::F32) => {}
        Some(other) => return r.fail(format!("record {name:?} has dtype {other:?}, expected f32")),
        None => return r.fail(format!("record {name:?} has unknown dtype tag {tag}")),
    }
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > 8 {
        return r.fail(format!("record {name:?} has rank {rank}"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let e = r.u64("extent")?;
        if e == 0 || e > u32::MAX as u64 {
            return r.fail(format!("record {name:?} has extent {e}"));
        }
        shape.push(e as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|n| n.checked_mul(4).is_some());
    let Some(n) = n else {
        return r.fail(format!("record {name:?} is too large"));
    };
    let payload = r.take(n * 4, "tensor payload")?;
    let data: Vec<f32> = payload.chunks_exact(4).map(f32::read_le).collect();
    Ok((name, Tensor::new(&shape, data)?))
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_bytes(path)?)
}
