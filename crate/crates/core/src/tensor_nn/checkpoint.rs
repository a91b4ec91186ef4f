//! UNP1 parameter files.
//!
//! ```text
//! "UNP1"
//! u32 depth, u32 in_channels, u32 out_channels, u32 base_channels
//! u8  flags (bit 0: normalize_input, bit 1: normalize_output)
//! u32 tensor count
//! per tensor: u16 name_len, name, u8 rank, rank x u32 dims, f32 values
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{NnError, Result, Tensor, UNetConfig, UNetParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"UNP1";

fn bad(msg: impl Into<String>) -> NnError {
    NnError::Checkpoint(msg.into())
}

pub fn write_checkpoint(params: &UNetParams<f32>, out: &mut impl Write) -> Result<()> {
    let cfg = &params.config;
    out.write_all(&CHECKPOINT_MAGIC)?;
    for v in [cfg.depth, cfg.in_channels, cfg.out_channels, cfg.base_channels] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&[cfg.normalize_input as u8 | (cfg.normalize_output as u8) << 1])?;
    let tensors = params.named_tensors();
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, tensor) in tensors {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[tensor.shape().len() as u8])?;
        for &d in tensor.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut bytes = Vec::with_capacity(tensor.len() * 4);
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

/// Reads a checkpoint and checks names and shapes against its config.
pub fn read_checkpoint(r: &mut impl Read) -> Result<UNetParams<f32>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = read_u32(r)? as usize;
    }
    let flags = read_u8(r)?;
    if flags > 3 {
        return Err(bad(format!("unknown flags {flags:#04x}")));
    }
    let config = UNetConfig {
        depth: dims[0],
        in_channels: dims[1],
        out_channels: dims[2],
        base_channels: dims[3],
        normalize_input: flags & 1 == 1,
        normalize_output: flags & 2 == 2,
    };
    let mut params = UNetParams::<f32>::zeros(config)?;
    let count = read_u32(r)? as usize;
    let mut slots = params.named_tensors_mut();
    if count != slots.len() {
        return Err(bad(format!("{count} tensors, config implies {}", slots.len())));
    }
    for (expected_name, slot) in slots.iter_mut() {
        let mut len = [0u8; 2];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        if &name != expected_name {
            return Err(bad(format!("expected tensor {expected_name}, found {name}")));
        }
        let rank = read_u8(r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(bad(format!(
                "{name}: shape {shape:?}, config implies {:?}",
                slot.shape()
            )));
        }
        let mut bytes = vec![0u8; slot.len() * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        **slot = Tensor::new(&shape, values)?;
    }
    drop(slots);
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(params)
}

pub fn save_checkpoint(params: &UNetParams<f32>, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_checkpoint(params, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UNetParams<f32>> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
