//! Little-endian binary helpers and the `PRSMDATA` image container shared by
//! real and synthetic datasets.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "PRSMDATA" | version u32 | n, channels, height, width, classes: u32
//! norm_mean [channels x f32] | norm_std [channels x f32]
//! images [n*c*h*w x f32] | labels [n x u16] | split [n x u8] | ids [n x u64]
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATA_MAGIC: &[u8; 8] = b"PRSMDATA";
pub const DATA_VERSION: u32 = 1;

#[derive(Default)]
pub struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        for x in v {
            self.f32(*x);
        }
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Self { buf, pos: 0, path }
    }

    pub fn format_err(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: detail.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.format_err(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.format_err("length overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.format_err("invalid utf-8 string"))
    }

    pub fn magic(&mut self, expected: &[u8]) -> Result<()> {
        let got = self.take(expected.len())?;
        if got != expected {
            return Err(self.format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    pub fn version(&mut self, supported: u32) -> Result<u32> {
        let v = self.u32()?;
        if v == 0 || v > supported {
            return Err(Error::Version {
                found: v,
                supported,
            });
        }
        Ok(v)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Writes `bytes` to `path` via a temporary file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Raw contents of a `PRSMDATA` file.
#[derive(Clone, Debug, PartialEq)]
pub struct DataContainer {
    pub images: Tensor<f32>,
    pub labels: Vec<u16>,
    pub split: Vec<u8>,
    pub ids: Vec<u64>,
    pub num_classes: u32,
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl DataContainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let [n, c, h, w] = *self.images.shape() else {
            return Err(Error::shape("PRSMDATA", format!("{:?}", self.images.shape())));
        };
        if self.labels.len() != n || self.split.len() != n || self.ids.len() != n {
            return Err(Error::shape("PRSMDATA", "per-image block lengths differ from n"));
        }
        if self.norm_mean.len() != c || self.norm_std.len() != c {
            return Err(Error::shape("PRSMDATA", "normalization constants per channel"));
        }
        let mut wr = ByteWriter::default();
        wr.bytes(DATA_MAGIC);
        wr.u32(DATA_VERSION);
        for d in [n, c, h, w] {
            wr.u32(d as u32);
        }
        wr.u32(self.num_classes);
        wr.f32s(&self.norm_mean);
        wr.f32s(&self.norm_std);
        wr.f32s(self.images.data());
        self.labels.iter().for_each(|&l| wr.u16(l));
        self.split.iter().for_each(|&s| wr.u8(s));
        self.ids.iter().for_each(|&i| wr.u64(i));
        Ok(wr.buf)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        r.magic(DATA_MAGIC)?;
        r.version(DATA_VERSION)?;
        let dims: Vec<usize> = (0..4).map(|_| r.u32().map(|v| v as usize)).collect::<Result<_>>()?;
        let num_classes = r.u32()?;
        let (n, c) = (dims[0], dims[1]);
        let norm_mean = r.f32s(c)?;
        let norm_std = r.f32s(c)?;
        let numel = dims.iter().try_fold(1usize, |a, &b| a.checked_mul(b));
        let numel = numel.ok_or_else(|| r.format_err("dimension overflow"))?;
        let images = Tensor::new(dims, r.f32s(numel)?)?;
        let labels = (0..n).map(|_| r.u16()).collect::<Result<Vec<_>>>()?;
        let split = r.take(n)?.to_vec();
        let ids = (0..n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        if r.remaining() != 0 {
            return Err(r.format_err(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            images,
            labels,
            split,
            ids,
            num_classes,
            norm_mean,
            norm_std,
        })
    }
}
