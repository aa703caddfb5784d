//! `SSCK` checkpoint files.
//!
//! Layout (integers little-endian):
//! `SSCK` | version u16 | flags u16 | name length u16 | preset name (UTF-8) |
//! parameter count u64 | f32 values in parameter order | packed mask bitset when flag bit 0 is set.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::nn::{Network, ParamVector};

const MAGIC: &[u8; 4] = b"SSCK";
const VERSION: u16 = 1;
const FLAG_MASK: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub values: Vec<f32>,
    /// Keep bits, when the checkpoint carries a mask section.
    pub mask: Option<Vec<bool>>,
}

impl Checkpoint {
    pub fn new(model: &str, params: &ParamVector<f32>, mask: Option<&PruneMask>) -> Self {
        Checkpoint {
            model: model.to_string(),
            values: params.values().to_vec(),
            mask: mask.map(|m| m.keep().to_vec()),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let name = self.model.as_bytes();
        let mut out = Vec::with_capacity(20 + name.len() + 4 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let flags = if self.mask.is_some() { FLAG_MASK } else { 0 };
        out.extend_from_slice(&flags.to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        if let Some(keep) = &self.mask {
            let m = PruneMask::new(keep.clone(), crate::mask::Provenance::Oneshot, None, 0.0);
            out.extend_from_slice(&m.packed_bits());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let flags = r.u16()?;
        if flags & !FLAG_MASK != 0 {
            return Err(Error::Format(format!("unknown checkpoint flags {flags:#06x}")));
        }
        let name_len = r.u16()? as usize;
        let model = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Format("model name is not UTF-8".into()))?;
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(4).ok_or_else(|| Error::Format("count overflow".into()))?)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mask = if flags & FLAG_MASK != 0 {
            Some(PruneMask::unpack_bits(r.take(count.div_ceil(8))?, count)?)
        } else {
            None
        };
        r.finish()?;
        Ok(Checkpoint { model, values, mask })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Parameters for `net`, checking the preset name and parameter count.
    pub fn params_for(&self, net: &Network) -> Result<ParamVector<f32>> {
        if self.model != net.config().name {
            return Err(Error::Layout(format!(
                "checkpoint is for model `{}`, not `{}`",
                self.model,
                net.config().name
            )));
        }
        ParamVector::new(net.layout().clone(), self.values.clone())
    }

    pub fn prune_mask(&self) -> Option<PruneMask> {
        self.mask
            .as_ref()
            .map(|k| PruneMask::new(k.clone(), crate::mask::Provenance::Oneshot, None, 0.0))
    }
}

/// Bounds-checked little-endian cursor shared by the binary formats.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("file truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}
