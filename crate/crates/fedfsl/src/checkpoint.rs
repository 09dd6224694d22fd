//! Binary model snapshots.
//!
//! Layout, all integers and floats little-endian:
//!
//! | field            | type            |
//! |------------------|-----------------|
//! | magic            | `b"FEDFSLCK"`   |
//! | version          | u32 (= 1)       |
//! | input_dim        | u32             |
//! | feature_dim      | u32             |
//! | n_way            | u32             |
//! | passthrough      | u8              |
//! | hidden count     | u32             |
//! | hidden widths    | u32 each        |
//! | task loss kind   | u8 (0 = cross-entropy, 1 = quadratic) |
//! | task loss weight | f64 (l2 or curvature) |
//! | round            | u64             |
//! | algorithm        | u8 (local, naive, prox, mi, mi_adv = 0..4) |
//! | value count      | u64             |
//! | values           | f64 each, `[generator | classifier]` |
//!
//! The second classifier of adversarial training is never stored.

use std::io::{Read, Write};
use std::path::Path;

use fedfsl_core::diffcore::{ModelSpec, ParamVector, TaskLoss};
use fedfsl_core::federation::Algorithm;

const MAGIC: &[u8; 8] = b"FEDFSLCK";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub round: u64,
    pub algorithm: Algorithm,
    pub params: ParamVector,
}

fn u32_of(n: usize) -> Result<[u8; 4], CheckpointError> {
    u32::try_from(n)
        .map(u32::to_le_bytes)
        .map_err(|_| CheckpointError::Corrupt(format!("dimension {n} exceeds u32")))
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        let s = &self.spec;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&u32_of(s.input_dim)?)?;
        w.write_all(&u32_of(s.feature_dim)?)?;
        w.write_all(&u32_of(s.n_way)?)?;
        w.write_all(&[u8::from(s.passthrough_generator)])?;
        w.write_all(&u32_of(s.hidden_layers.len())?)?;
        for &h in &s.hidden_layers {
            w.write_all(&u32_of(h)?)?;
        }
        let (kind, weight) = match s.task_loss {
            TaskLoss::CrossEntropy { l2 } => (0u8, l2),
            TaskLoss::Quadratic { curvature } => (1u8, curvature),
        };
        w.write_all(&[kind])?;
        w.write_all(&weight.to_le_bytes())?;
        w.write_all(&self.round.to_le_bytes())?;
        let alg = Algorithm::ALL.iter().position(|a| *a == self.algorithm).unwrap() as u8;
        w.write_all(&[alg])?;
        let values = self.params.model();
        w.write_all(&(values.len() as u64).to_le_bytes())?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let input_dim = read_u32(&mut r)? as usize;
        let feature_dim = read_u32(&mut r)? as usize;
        let n_way = read_u32(&mut r)? as usize;
        let passthrough = read_u8(&mut r)? != 0;
        let n_hidden = read_u32(&mut r)? as usize;
        if n_hidden > 1024 {
            return Err(CheckpointError::Corrupt(format!("{n_hidden} hidden layers")));
        }
        let hidden = (0..n_hidden).map(|_| read_u32(&mut r).map(|h| h as usize)).collect::<Result<Vec<_>, _>>()?;
        let kind = read_u8(&mut r)?;
        let weight = f64::from_le_bytes(read_array(&mut r)?);
        let task_loss = match kind {
            0 => TaskLoss::CrossEntropy { l2: weight },
            1 => TaskLoss::Quadratic { curvature: weight },
            k => return Err(CheckpointError::Corrupt(format!("task loss kind {k}"))),
        };
        let round = u64::from_le_bytes(read_array(&mut r)?);
        let alg = read_u8(&mut r)? as usize;
        let algorithm = *Algorithm::ALL
            .get(alg)
            .ok_or_else(|| CheckpointError::Corrupt(format!("algorithm id {alg}")))?;
        let mut spec = if passthrough {
            ModelSpec::logistic(input_dim, n_way)
        } else {
            ModelSpec::new(input_dim, &hidden, feature_dim, n_way)
        };
        spec = spec.with_task_loss(task_loss);
        spec.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let count = u64::from_le_bytes(read_array(&mut r)?) as usize;
        if count != spec.param_count() {
            return Err(CheckpointError::Corrupt(format!("{count} values for a {}-parameter model", spec.param_count())));
        }
        let values = (0..count)
            .map(|_| read_array(&mut r).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>, _>>()?;
        let params = ParamVector::from_values(&spec, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        Ok(Self {
            spec,
            round,
            algorithm,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    read_array(r).map(u32::from_le_bytes)
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    read_array::<1>(r).map(|b| b[0])
}
