//! Model checkpoints.
//!
//! Layout: a UTF-8 header of newline-terminated lines, then raw
//! little-endian parameter data in header order.
//!
//! ```text
//! EBTCKPT 1
//! precision 32|64
//! step <training step>
//! config <model config as one line of JSON>
//! params <count>
//! <name> <dim>x<dim>... (one line per parameter; "scalar" for rank 0)
//! data
//! <bytes: f32 or f64 per value>
//! ```

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use crate::error::{EbtError, Result};
use crate::params::ParamStore;

const MAGIC: &str = "EBTCKPT 1";

fn shape_text(shape: &[usize]) -> String {
    if shape.is_empty() {
        "scalar".into()
    } else {
        shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

/// Serializes `params` with `config`. With 32 bits, values are stored as
/// f32; with 64 they round-trip exactly.
pub fn encode<C: Serialize>(params: &ParamStore, config: &C, step: usize, bits: u32) -> Result<Vec<u8>> {
    if bits != 32 && bits != 64 {
        return Err(EbtError::Checkpoint(format!("precision must be 32 or 64, got {bits}")));
    }
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str(&format!("precision {bits}\nstep {step}\n"));
    out.push_str(&format!("config {}\n", serde_json::to_string(config)?));
    out.push_str(&format!("params {}\n", params.len()));
    for p in params.iter() {
        out.push_str(&format!("{} {}\n", p.name, shape_text(p.value.shape())));
    }
    out.push_str("data\n");
    let mut bytes = out.into_bytes();
    for p in params.iter() {
        for &v in p.value.data() {
            if bits == 32 {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            } else {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(bytes)
}

pub struct Decoded<C> {
    pub config: C,
    pub step: usize,
    pub bits: u32,
    /// `(name, shape, values)` in file order.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn decode<C: DeserializeOwned>(bytes: &[u8]) -> Result<Decoded<C>> {
    let bad = |m: String| EbtError::Checkpoint(m);
    let mut pos = 0;
    let mut next_line = || -> Result<String> {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header".into()))?;
        let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad("header is not UTF-8".into()))?;
        pos += end + 1;
        Ok(line.to_string())
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let field = |line: String, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected `{key}` line, got `{line}`")))
    };
    let bits: u32 = field(next_line()?, "precision")?.parse().map_err(|_| bad("bad precision".into()))?;
    if bits != 32 && bits != 64 {
        return Err(bad(format!("unsupported precision {bits}")));
    }
    let step: usize = field(next_line()?, "step")?.parse().map_err(|_| bad("bad step".into()))?;
    let config: C = serde_json::from_str(&field(next_line()?, "config")?)?;
    let count: usize = field(next_line()?, "params")?.parse().map_err(|_| bad("bad param count".into()))?;
    let mut specs = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let (name, shape) = line.rsplit_once(' ').ok_or_else(|| bad(format!("bad param line `{line}`")))?;
        let shape: Vec<usize> = if shape == "scalar" {
            vec![]
        } else {
            shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{shape}`"))))
                .collect::<Result<_>>()?
        };
        specs.push((name.to_string(), shape));
    }
    if next_line()? != "data" {
        return Err(bad("missing data marker".into()));
    }
    let width = (bits / 8) as usize;
    let mut tensors = Vec::with_capacity(count);
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let end = pos + n * width;
        if end > bytes.len() {
            return Err(bad(format!("truncated data for {name}")));
        }
        let values = bytes[pos..end]
            .chunks_exact(width)
            .map(|c| {
                if bits == 32 {
                    f32::from_le_bytes(c.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(c.try_into().unwrap())
                }
            })
            .collect();
        pos = end;
        tensors.push((name, shape, values));
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(Decoded { config, step, bits, tensors })
}

/// Overwrites every parameter in `params` from `tensors`, matching by name.
pub fn restore(params: &mut ParamStore, tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
    if tensors.len() != params.len() {
        return Err(EbtError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            tensors.len(),
            params.len()
        )));
    }
    for (name, shape, values) in tensors {
        let i = params
            .index_of(name)
            .ok_or_else(|| EbtError::Checkpoint(format!("unknown parameter {name}")))?;
        let want = params.iter().nth(i).unwrap().value.shape().to_vec();
        if &want != shape {
            return Err(EbtError::Checkpoint(format!("{name}: shape {shape:?} in file, {want:?} in model")));
        }
        params.set(i, values.clone());
    }
    Ok(())
}

pub fn save<C: Serialize>(path: &Path, params: &ParamStore, config: &C, step: usize, bits: u32) -> Result<()> {
    std::fs::write(path, encode(params, config, step, bits)?)?;
    Ok(())
}

pub fn load<C: DeserializeOwned>(path: &Path) -> Result<Decoded<C>> {
    decode(&std::fs::read(path)?)
}
