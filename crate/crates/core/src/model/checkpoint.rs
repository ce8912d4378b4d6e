//! `GGT1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"GGT1"
//! u32                      entry count
//! per entry:
//!   u32 + utf-8 bytes      parameter name
//!   u32 + u64 * ndim       shape
//!   u64                    byte offset into the blob section
//! f32 * total              blob section, one contiguous run per entry
//! ```

use std::path::Path;

use super::{Param, UNetConfig, UNetModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"GGT1";

pub fn write_checkpoint(model: &UNetModel<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for p in &model.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * p.value.len() as u64;
    }
    for p in &model.params {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint. The encoder depth and widths are recovered from the
/// parameter shapes; `input_size` and `seed` come from the caller.
pub fn read_checkpoint(bytes: &[u8], input_size: usize, seed: u64) -> Result<UNetModel<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected GGT1".into()));
    }
    let count = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_owned();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let blobs = &bytes[r.pos..];
    let mut params = Vec::with_capacity(manifest.len());
    let mut expected_offset = 0usize;
    for (name, shape, offset) in manifest {
        if offset != expected_offset {
            return Err(Error::Checkpoint(format!("`{name}`: offset {offset}, expected {expected_offset}")));
        }
        let n: usize = shape.iter().product();
        let raw = blobs
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: blob out of range")))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        expected_offset += 4 * n;
        params.push(Param { name, value: Tensor::new(shape, data)? });
    }
    if expected_offset != blobs.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", blobs.len() - expected_offset)));
    }
    let mut encoder_channels = Vec::new();
    while let Some(p) = params.iter().find(|p| p.name == format!("enc{}.weight", encoder_channels.len())) {
        encoder_channels.push(p.value.shape()[0]);
    }
    let config = UNetConfig { input_size, encoder_channels, seed, ..UNetConfig::default() };
    // restore canonical order so the model layout matches `build`
    let order: Vec<String> = config.param_shapes().into_iter().map(|(n, _)| n).collect();
    let mut sorted = Vec::with_capacity(params.len());
    for name in &order {
        let i = params
            .iter()
            .position(|p| &p.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        sorted.push(params.swap_remove(i));
    }
    if !params.is_empty() {
        return Err(Error::Checkpoint(format!("unexpected parameter `{}`", params[0].name)));
    }
    UNetModel::from_params(config, sorted)
}

pub fn save_checkpoint(model: &UNetModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, input_size: usize) -> Result<UNetModel<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes, input_size, 0)
}
