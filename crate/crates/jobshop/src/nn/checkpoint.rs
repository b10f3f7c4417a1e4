//! Bit-exact binary checkpoints.
//!
//! Layout (all integers little-endian): magic `JSCP`, format version, the
//! model config, training metadata (steps trained, master seed, RNG stream
//! word positions), then every parameter as name + shape + value/Adam-m/
//! Adam-v blobs of raw f64 bits. Loading rebuilds the exact model, so
//! save -> load -> save reproduces the file byte for byte.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::model::{Arch, ModelConfig, PolicyModel};
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"JSCP";
const VERSION: u32 = 1;

/// Training metadata stored alongside the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainMeta {
    pub steps_trained: u64,
    pub master_seed: u64,
    /// Word positions of the `actions`, `dropout` and `shuffle` RNG streams.
    pub rng_word_pos: [u128; 3],
}

impl TrainMeta {
    pub fn fresh(master_seed: u64) -> Self {
        Self {
            steps_trained: 0,
            master_seed,
            rng_word_pos: [0; 3],
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

pub fn save(
    path: &Path,
    model: &PolicyModel,
    meta: &TrainMeta,
) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;

    let cfg = &model.config;
    w.write_all(&[arch_tag(cfg.arch)])?;
    for v in [cfg.layers, cfg.hidden, cfg.heads, cfg.embed] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&cfg.dropout.to_le_bytes())?;

    w.write_all(&meta.steps_trained.to_le_bytes())?;
    w.write_all(&meta.master_seed.to_le_bytes())?;
    for pos in meta.rng_word_pos {
        w.write_all(&pos.to_le_bytes())?;
    }
    w.write_all(&model.adam_step_count().to_le_bytes())?;

    let names: Vec<String> = model.param_names().map(str::to_string).collect();
    w.write_all(&(names.len() as u32).to_le_bytes())?;
    for name in &names {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let value = model.param(name);
        let (m, v) = model.adam_state(name);
        w.write_all(&(value.rows() as u32).to_le_bytes())?;
        w.write_all(&(value.cols() as u32).to_le_bytes())?;
        for t in [value, m, v] {
            for x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(PolicyModel, TrainMeta), CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }

    let arch = arch_from_tag(read_u8(&mut r)?)?;
    let layers = read_u32(&mut r)? as usize;
    let hidden = read_u32(&mut r)? as usize;
    let heads = read_u32(&mut r)? as usize;
    let embed = read_u32(&mut r)? as usize;
    let dropout = read_f64(&mut r)?;
    let config = ModelConfig {
        arch,
        layers,
        hidden,
        heads,
        embed,
        dropout,
    };

    let meta = TrainMeta {
        steps_trained: read_u64(&mut r)?,
        master_seed: read_u64(&mut r)?,
        rng_word_pos: [read_u128(&mut r)?, read_u128(&mut r)?, read_u128(&mut r)?],
    };
    let adam_t = read_u64(&mut r)?;

    // The structure comes from the config; stored blobs overwrite the
    // (arbitrary) fresh initialization.
    let mut throwaway = ChaCha8Rng::seed_from_u64(0);
    let mut model = PolicyModel::new(config, &mut throwaway);
    model.set_adam_step_count(adam_t);

    let count = read_u32(&mut r)? as usize;
    let expected: Vec<String> = model.param_names().map(str::to_string).collect();
    if count != expected.len() {
        return Err(CheckpointError::Corrupt(format!(
            "expected {} parameters, file has {count}",
            expected.len()
        )));
    }
    for expected_name in &expected {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Corrupt("non-utf8 parameter name".into()))?;
        if &name != expected_name {
            return Err(CheckpointError::Corrupt(format!(
                "parameter order mismatch: expected {expected_name}, found {name}"
            )));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        if (rows, cols) != model.param(&name).shape() {
            return Err(CheckpointError::Corrupt(format!(
                "shape mismatch for {name}"
            )));
        }
        let mut read_tensor = || -> Result<Tensor, CheckpointError> {
            let mut data = vec![0.0f64; rows * cols];
            for x in &mut data {
                *x = read_f64(&mut r)?;
            }
            Ok(Tensor::from_vec(rows, cols, data))
        };
        let value = read_tensor()?;
        let m = read_tensor()?;
        let v = read_tensor()?;
        model.set_param(&name, value);
        model.set_adam_state(&name, m, v);
    }
    Ok((model, meta))
}

/// Reconstructs the three named RNG streams at their stored positions.
pub fn restore_streams(meta: &TrainMeta) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
    let streams = crate::rng::SeedStreams::new(meta.master_seed);
    let mut actions = streams.stream("actions");
    let mut dropout = streams.stream("dropout");
    let mut shuffle = streams.stream("shuffle");
    actions.set_word_pos(meta.rng_word_pos[0]);
    dropout.set_word_pos(meta.rng_word_pos[1]);
    shuffle.set_word_pos(meta.rng_word_pos[2]);
    (actions, dropout, shuffle)
}

fn arch_tag(arch: Arch) -> u8 {
    match arch {
        Arch::Hgt => 0,
        Arch::HomoHgt => 1,
        Arch::Gin => 2,
    }
}

fn arch_from_tag(tag: u8) -> Result<Arch, CheckpointError> {
    match tag {
        0 => Ok(Arch::Hgt),
        1 => Ok(Arch::HomoHgt),
        2 => Ok(Arch::Gin),
        other => Err(CheckpointError::Corrupt(format!("unknown arch tag {other}"))),
    }
}

fn read_u8(r: &mut impl Read) -> Result<u8, CheckpointError> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u16(r: &mut impl Read) -> Result<u16, CheckpointError> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u128(r: &mut impl Read) -> Result<u128, CheckpointError> {
    let mut b = [0u8; 16];
    r.read_exact(&mut b)?;
    Ok(u128::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
