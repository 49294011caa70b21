//! Checkpoint file format.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   b"PFRG"
//! version u32 (currently 1; readers reject anything else)
//! meta    u32 length + JSON-encoded ModelConfig
//! count   u32 number of named tensors
//! tensor  u32 name length + UTF-8 name
//!         u32 rows, u32 cols
//!         rows·cols f32 values, row-major
//! ```
//! Model weights are stored under their parameter names; trainer state rides
//! along as `opt.*` / `trainer.*` tensors and is ignored by inference loads.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::mat::Mat;
use super::{ModelConfig, Parameters};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PFRG";
pub const VERSION: u32 = 1;

pub fn write_checkpoint(
    path: &Path,
    params: &Parameters,
    extra: &[(String, Mat)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let meta = serde_json::to_vec(params.config())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(&meta)?;
    let count = params.len() + extra.len();
    w.write_all(&(count as u32).to_le_bytes())?;
    for (name, tensor) in params.iter().chain(extra.iter().map(|(n, t)| (n.as_str(), t))) {
        write_tensor(&mut w, name, tensor)?;
    }
    w.flush()?;
    Ok(())
}

fn write_tensor(w: &mut impl Write, name: &str, tensor: &Mat) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&(tensor.rows as u32).to_le_bytes())?;
    w.write_all(&(tensor.cols as u32).to_le_bytes())?;
    for &v in &tensor.data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

/// Everything found in a checkpoint file.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: HashMap<String, Mat>,
}

impl Checkpoint {
    /// Splits into model parameters and the remaining (trainer) tensors.
    pub fn into_parameters(self) -> Result<(Parameters, HashMap<String, Mat>)> {
        let mut model = HashMap::new();
        let mut rest = HashMap::new();
        for (name, tensor) in self.tensors {
            if name.starts_with("opt.") || name.starts_with("trainer.") {
                rest.insert(name, tensor);
            } else {
                model.insert(name, tensor);
            }
        }
        let params = Parameters::from_named_tensors(&self.config, model)?;
        Ok((params, rest))
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadCheckpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::BadCheckpoint(format!(
            "unknown format version {version}, this reader supports {VERSION}"
        )));
    }
    let meta_len = read_u32(&mut r)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta)?;
    let config: ModelConfig = serde_json::from_slice(&meta)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        let mut buf = [0u8; 4];
        for _ in 0..rows * cols {
            r.read_exact(&mut buf)?;
            data.push(f32::from_le_bytes(buf) as f64);
        }
        tensors.insert(name, Mat::from_vec(rows, cols, data));
    }
    Ok(Checkpoint { config, tensors })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
