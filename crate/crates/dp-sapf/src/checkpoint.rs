//! Flat binary checkpoints.
//!
//! Model file layout (all integers and reals little-endian):
//!
//! ```text
//! magic "DSPF" | u32 version | u32 L | u32 m | u32 e | u32 K_cls | u32 T
//! matrix values, f64, canonical MatrixId order
//! [version 2 only] u32 adapter count, then per adapter:
//!     u32 canonical pool index of the target | u32 rank | A values | B values
//! ```
//!
//! Version 1 is a bare model; version 2 appends trained adapter
//! sections to the same layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::denoiser::{DenoiserParams, ModelDims};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, TrainableSet};
use crate::tensor::Tensor2D;

const MAGIC: &[u8; 4] = b"DSPF";

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_header<W: Write>(w: &mut W, params: &DenoiserParams, version: u32) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, version)?;
    write_u32(w, params.dims.blocks as u32)?;
    write_u32(w, params.dims.token_dim as u32)?;
    write_u32(w, params.dims.embed_dim as u32)?;
    write_u32(w, params.dims.n_classes as u32)?;
    write_u32(w, params.t_steps as u32)?;
    Ok(())
}

fn write_body<W: Write>(w: &mut W, params: &DenoiserParams) -> Result<()> {
    // BTreeMap iteration is the canonical order.
    for tensor in params.matrices.values() {
        write_f64s(w, &tensor.values)?;
    }
    Ok(())
}

/// Write a bare model checkpoint (version 1).
pub fn write_model(path: &Path, params: &DenoiserParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, params, 1)?;
    write_body(&mut w, params)?;
    w.flush()?;
    Ok(())
}

/// Write a model checkpoint with appended adapter sections (version 2).
pub fn write_model_with_adapters(
    path: &Path,
    params: &DenoiserParams,
    adapters: &TrainableSet,
) -> Result<()> {
    let pool = params.dims.full_pool();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, params, 2)?;
    write_body(&mut w, params)?;
    write_u32(&mut w, adapters.adapters.len() as u32)?;
    for (id, adapter) in &adapters.adapters {
        let index = pool
            .iter()
            .position(|p| p == id)
            .ok_or_else(|| Error::BadCheckpoint(format!("adapter target {id} not in pool")))?;
        write_u32(&mut w, index as u32)?;
        write_u32(&mut w, adapter.rank as u32)?;
        write_f64s(&mut w, &adapter.a.values)?;
        write_f64s(&mut w, &adapter.b.values)?;
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint; returns the parameters and, for version 2 files,
/// the adapter set.
pub fn read_checkpoint(path: &Path) -> Result<(DenoiserParams, Option<TrainableSet>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::BadCheckpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if !(1..=2).contains(&version) {
        return Err(Error::BadCheckpoint(format!("unknown version {version}")));
    }
    let dims = ModelDims {
        blocks: read_u32(&mut r)? as usize,
        token_dim: read_u32(&mut r)? as usize,
        embed_dim: read_u32(&mut r)? as usize,
        n_classes: read_u32(&mut r)? as usize,
    };
    let t_steps = read_u32(&mut r)? as usize;
    if dims.blocks == 0 || dims.token_dim == 0 || dims.embed_dim == 0 || dims.n_classes == 0 {
        return Err(Error::BadCheckpoint("zero dimension in header".into()));
    }

    let mut params = DenoiserParams::zeros(dims, t_steps);
    let pool = dims.full_pool();
    for id in &pool {
        let (rows, cols) = dims.shape(id);
        let values = read_f64s(&mut r, rows * cols)?;
        params
            .matrices
            .insert(*id, Tensor2D::from_values(rows, cols, values)?);
    }

    let adapters = if version == 2 {
        let count = read_u32(&mut r)? as usize;
        let mut set = TrainableSet {
            adapters: Default::default(),
        };
        for _ in 0..count {
            let index = read_u32(&mut r)? as usize;
            let rank = read_u32(&mut r)? as usize;
            let id = *pool.get(index).ok_or_else(|| {
                Error::BadCheckpoint(format!("adapter target index {index} out of range"))
            })?;
            let (rows, cols) = dims.shape(&id);
            let a = Tensor2D::from_values(rows, rank, read_f64s(&mut r, rows * rank)?)?;
            let b = Tensor2D::from_values(rank, cols, read_f64s(&mut r, rank * cols)?)?;
            set.adapters.insert(
                id,
                LoraAdapter {
                    target: id,
                    a,
                    b,
                    rank,
                },
            );
        }
        Some(set)
    } else {
        None
    };

    // No trailing garbage.
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::BadCheckpoint(format!(
            "{} trailing bytes",
            rest.len()
        )));
    }
    Ok((params, adapters))
}
