//! Model checkpoints: a single-file weight dictionary with a config header
//! and format version.
//!
//! ```text
//! magic    7 bytes "NVCKPT1"
//! version  u32
//! cfg_hash u64   FNV-1a of the config JSON
//! cfg_len  u32   followed by the config JSON bytes
//! n_params u32
//! each:    name_len u16, name bytes, ndim u8, dims u32*, data f64 LE
//! ```

use super::{Model, ModelConfig};
use crate::error::{NvError, Result};
use crate::scalar::Real;
use crate::seed::fnv1a64;
use ndarray::{ArrayD, IxDyn};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 7] = b"NVCKPT1";
const VERSION: u32 = 1;

fn config_json(cfg: &ModelConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let json = config_json(&model.config);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&fnv1a64(json.as_bytes()).to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(json.as_bytes())?;
    w.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for p in &model.params {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.data.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.data.iter() {
            w.write_all(&v.to_f64_c().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_field(r: &mut impl Read, buf: &mut [u8], field: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| NvError::parse(field, e.to_string()))
}

/// Loads a checkpoint, rebuilding the model from the embedded config.
pub fn load_checkpoint<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 7];
    read_exact_field(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(NvError::parse("magic", format!("expected {MAGIC:?}")));
    }
    let mut b4 = [0u8; 4];
    read_exact_field(&mut r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(NvError::parse(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let mut b8 = [0u8; 8];
    read_exact_field(&mut r, &mut b8, "cfg_hash")?;
    let stored_hash = u64::from_le_bytes(b8);
    read_exact_field(&mut r, &mut b4, "cfg_len")?;
    let mut json = vec![0u8; u32::from_le_bytes(b4) as usize];
    read_exact_field(&mut r, &mut json, "config")?;
    if fnv1a64(&json) != stored_hash {
        return Err(NvError::parse(
            "cfg_hash",
            "config hash mismatch (corrupted checkpoint)",
        ));
    }
    let config: ModelConfig = serde_json::from_slice(&json)
        .map_err(|e| NvError::parse("config", e.to_string()))?;
    config.validate()?;
    read_exact_field(&mut r, &mut b4, "n_params")?;
    let n = u32::from_le_bytes(b4) as usize;

    // Fresh skeleton for name/shape validation; weights are then overwritten.
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    use rand_chacha::rand_core::SeedableRng;
    let mut model: Model<T> = Model::init(config, &mut rng)?;
    let mut filled = vec![false; model.params.len()];
    for _ in 0..n {
        let mut b2 = [0u8; 2];
        read_exact_field(&mut r, &mut b2, "name_len")?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact_field(&mut r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|e| NvError::parse("name", e.to_string()))?;
        let mut b1 = [0u8; 1];
        read_exact_field(&mut r, &mut b1, "ndim")?;
        let mut shape = Vec::with_capacity(b1[0] as usize);
        for _ in 0..b1[0] {
            read_exact_field(&mut r, &mut b4, "dims")?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = vec![0u8; len * 8];
        read_exact_field(&mut r, &mut data, "tensor")?;
        let values: Vec<T> = data
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let idx = model
            .param_index(&name)
            .ok_or_else(|| NvError::parse("name", format!("unknown parameter {name}")))?;
        if model.params[idx].data.shape() != shape.as_slice() {
            return Err(NvError::parse(
                "dims",
                format!(
                    "parameter {name}: stored shape {:?} != expected {:?}",
                    shape,
                    model.params[idx].data.shape()
                ),
            ));
        }
        model.params[idx].data = ArrayD::from_shape_vec(IxDyn(&shape), values).unwrap();
        filled[idx] = true;
    }
    if let Some(i) = filled.iter().position(|&f| !f) {
        return Err(NvError::parse(
            "n_params",
            format!("parameter {} missing from checkpoint", model.params[i].name),
        ));
    }
    Ok(model)
}

/// Loads a checkpoint and rejects it unless its config hash matches
/// `expected`'s.
pub fn load_checkpoint_expecting<T: Real>(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<Model<T>> {
    let model = load_checkpoint::<T>(path)?;
    let got = fnv1a64(config_json(&model.config).as_bytes());
    let want = fnv1a64(config_json(expected).as_bytes());
    if got != want {
        return Err(NvError::Contract(format!(
            "checkpoint config hash {got:#018x} does not match expected {want:#018x}"
        )));
    }
    Ok(model)
}
