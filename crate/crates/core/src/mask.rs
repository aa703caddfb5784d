//! Binary keep/prune masks aligned to the flat parameter vector.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamLayout, TensorRole};
use crate::scalar::Scalar;

const MASK_MAGIC: &[u8; 4] = b"SSMK";
const MASK_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oneshot,
    Gradual,
    RandomStructure,
}

impl Provenance {
    fn tag(self) -> u8 {
        match self {
            Provenance::Oneshot => 0,
            Provenance::Gradual => 1,
            Provenance::RandomStructure => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Provenance::Oneshot),
            1 => Ok(Provenance::Gradual),
            2 => Ok(Provenance::RandomStructure),
            t => Err(Error::Format(format!("unknown mask provenance tag {t}"))),
        }
    }
}

/// `true` marks a kept parameter, `false` a pruned one.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    keep: Vec<bool>,
    pub provenance: Provenance,
    pub seed: Option<u64>,
    /// Fraction or threshold that produced the mask.
    pub parameter: f64,
}

impl PruneMask {
    pub fn new(keep: Vec<bool>, provenance: Provenance, seed: Option<u64>, parameter: f64) -> Self {
        PruneMask { keep, provenance, seed, parameter }
    }

    pub fn ones(len: usize) -> Self {
        PruneMask::new(vec![true; len], Provenance::Oneshot, None, 0.0)
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn is_kept(&self, i: usize) -> bool {
        self.keep[i]
    }

    pub fn pruned_count(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Fraction of all parameters that are pruned.
    pub fn compression_rate(&self) -> f64 {
        if self.keep.is_empty() {
            return 0.0;
        }
        self.pruned_count() as f64 / self.keep.len() as f64
    }

    /// Fraction of prunable weights (biases excluded) that are pruned.
    pub fn weight_compression(&self, layout: &ParamLayout) -> f64 {
        let mut total = 0usize;
        let mut pruned = 0usize;
        for s in layout.slots().iter().filter(|s| s.prunable()) {
            total += s.len();
            pruned += self.keep[s.range()].iter().filter(|&&k| !k).count();
        }
        if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        }
    }

    /// Pruned count per tensor slot, in layout order.
    pub fn pruned_per_slot(&self, layout: &ParamLayout) -> Vec<usize> {
        layout
            .slots()
            .iter()
            .map(|s| self.keep[s.range()].iter().filter(|&&k| !k).count())
            .collect()
    }

    /// Pruned count per layer's weight tensor.
    pub fn pruned_per_layer(&self, layout: &ParamLayout) -> Vec<(usize, usize)> {
        layout
            .slots()
            .iter()
            .filter(|s| s.role == TensorRole::Weight)
            .map(|s| (s.layer, self.keep[s.range()].iter().filter(|&&k| !k).count()))
            .collect()
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if self.keep.len() != len {
            return Err(Error::Layout(format!("mask covers {} parameters, expected {len}", self.keep.len())));
        }
        Ok(())
    }

    /// Zeroes pruned coordinates in place.
    pub fn apply<F: Scalar>(&self, values: &mut [F]) {
        debug_assert_eq!(values.len(), self.keep.len());
        for (v, &k) in values.iter_mut().zip(&self.keep) {
            if !k {
                *v = F::zero();
            }
        }
    }

    /// True when every coordinate kept here is also kept in `previous`.
    pub fn is_subset_of(&self, previous: &PruneMask) -> bool {
        self.keep.len() == previous.keep.len()
            && self.keep.iter().zip(&previous.keep).all(|(&now, &before)| !now || before)
    }

    /// Packed little-endian bitset: bit `i % 8` of byte `i / 8` is coordinate `i`.
    pub fn packed_bits(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.keep.len().div_ceil(8)];
        for (i, &k) in self.keep.iter().enumerate() {
            if k {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack_bits(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Format(format!(
                "bitset of {} bytes cannot hold exactly {len} bits",
                bytes.len()
            )));
        }
        Ok((0..len).map(|i| bytes[i / 8] & (1 << (i % 8)) != 0).collect())
    }

    /// `SSMK` | version u16 | length u64 | bitset | provenance u8 | has_seed u8 | seed u64 | parameter f64.
    /// All integers little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(&MASK_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.keep.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.packed_bits());
        out.push(self.provenance.tag());
        out.push(self.seed.is_some() as u8);
        out.extend_from_slice(&self.seed.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&self.parameter.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::nn::checkpoint::Reader::new(bytes);
        if r.take(4)? != MASK_MAGIC {
            return Err(Error::Format("not a mask file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != MASK_VERSION {
            return Err(Error::Format(format!("unsupported mask version {version}")));
        }
        let len = r.u64()? as usize;
        let keep = Self::unpack_bits(r.take(len.div_ceil(8))?, len)?;
        let provenance = Provenance::from_tag(r.u8()?)?;
        let has_seed = r.u8()? != 0;
        let seed = r.u64()?;
        let parameter = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        r.finish()?;
        Ok(PruneMask { keep, provenance, seed: has_seed.then_some(seed), parameter })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Fraction of parameters pruned by `mask`.
pub fn compression_rate(mask: &PruneMask) -> f64 {
    mask.compression_rate()
}
