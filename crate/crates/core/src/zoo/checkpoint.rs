//! Binary checkpoints.
//!
//! ```text
//! magic "PRSMCKPT" | version u32 | arch name | arch layers (JSON) | classes u32
//! seed u64 | train_accuracy f32 | heldout_accuracy f32
//! tensor count u32, then per tensor: name | ndims u32 | dims u32.. | f32 data
//! bn count u32, then per layer: index u32 | channels u32 | mean | var
//! crc32 u32 over everything above
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8 bytes.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{write_atomic, ByteReader, ByteWriter};
use crate::tensor::Tensor;

use super::{ArchSpec, BnStat, TeacherModel};

pub const CKPT_MAGIC: &[u8; 8] = b"PRSMCKPT";
pub const CKPT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &TeacherModel) -> Result<Vec<u8>> {
    let mut w = ByteWriter::default();
    w.bytes(CKPT_MAGIC);
    w.u32(CKPT_VERSION);
    w.str(&model.arch.name);
    w.str(&serde_json::to_string(&model.arch)?);
    w.u32(model.arch.num_classes as u32);
    w.u64(model.seed);
    w.f32(model.train_accuracy);
    w.f32(model.heldout_accuracy);
    w.u32(model.params.len() as u32);
    for (name, t) in &model.params {
        w.str(name);
        w.u32(t.ndim() as u32);
        t.shape().iter().for_each(|&d| w.u32(d as u32));
        w.f32s(t.data());
    }
    w.u32(model.bn_stats.len() as u32);
    for s in &model.bn_stats {
        w.u32(s.layer as u32);
        w.u32(s.mean.len() as u32);
        w.f32s(&s.mean);
        w.f32s(&s.var);
    }
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    Ok(w.buf)
}

pub fn save_checkpoint(model: &TeacherModel, path: &Path) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<TeacherModel> {
    parse_checkpoint(&std::fs::read(path)?, path)
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<TeacherModel> {
    let mut r = ByteReader::new(bytes, path);
    r.magic(CKPT_MAGIC)?;
    r.version(CKPT_VERSION)?;
    if bytes.len() < 16 {
        return Err(r.format_err("truncated: no checksum footer"));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = ByteReader::new(body, path);
    r.take(12)?;
    let name = r.str()?;
    let arch: ArchSpec = serde_json::from_str(&r.str()?)?;
    if arch.name != name {
        return Err(r.format_err(format!("arch name {name:?} disagrees with layer block {:?}", arch.name)));
    }
    let classes = r.u32()? as usize;
    if classes != arch.num_classes {
        return Err(r.format_err("class count disagrees with architecture"));
    }
    let seed = r.u64()?;
    let train_accuracy = r.f32()?;
    let heldout_accuracy = r.f32()?;
    let mut params = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.str()?;
        let nd = r.u32()? as usize;
        let dims = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel = dims.iter().product();
        params.insert(name, Tensor::new(dims, r.f32s(numel)?)?);
    }
    let mut bn_stats = Vec::new();
    for _ in 0..r.u32()? {
        let layer = r.u32()? as usize;
        let c = r.u32()? as usize;
        let mean = r.f32s(c)?;
        let var = r.f32s(c)?;
        bn_stats.push(BnStat { layer, mean, var });
    }
    if r.remaining() != 0 {
        return Err(r.format_err(format!("{} trailing bytes", r.remaining())));
    }
    let model = TeacherModel {
        arch,
        params,
        bn_stats,
        train_accuracy,
        heldout_accuracy,
        seed,
    };
    model.validate()?;
    Ok(model)
}
