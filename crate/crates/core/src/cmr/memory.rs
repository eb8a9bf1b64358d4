use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::read_u32;


const MAGIC: &[u8; 4] = b"CMRM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: MemoryShape,
        actual: MemoryShape,
    },
    #[error("demonstration has no tokens")]
    EmptyDemonstration,
    #[error("demonstration width {actual} does not match d_model {expected}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("layer {0} out of range")]
    LayerOutOfRange(usize),
    #[error("bad memory snapshot: {0}")]
    BadSnapshot(String),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
}

/// One head's cache: `m` is `d_k × d_v` row-major, `n` has `d_k` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct MemorySlot {
    pub m: Vec<f64>,
    pub n: Vec<f64>,
}

impl MemorySlot {
    fn zeros(d_k: usize, d_v: usize) -> Self {
        Self {
            m: vec![0.0; d_k * d_v],
            n: vec![0.0; d_k],
        }
    }

    fn add(&mut self, other: &MemorySlot) {
        for (a, b) in self.m.iter_mut().zip(&other.m) {
            *a += b;
        }
        for (a, b) in self.n.iter_mut().zip(&other.n) {
            *a += b;
        }
    }

    fn scale(&mut self, c: f64) {
        self.m.iter_mut().chain(self.n.iter_mut()).for_each(|v| *v *= c);
    }
}

/// How the deltas of one batch of stored instances are folded into the
/// running memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Combine {
    /// `base + (1/|B|) Σ deltas`
    #[default]
    Mean,
    /// `base + Σ deltas`
    Sum,
}

/// Per-layer, per-head `(M, n)` pairs caching stored demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressiveMemory {
    shape: MemoryShape,
    slots: Vec<MemorySlot>,
    stored_count: usize,
}

impl CompressiveMemory {
    pub fn empty(shape: MemoryShape) -> Self {
        let slots = (0..shape.num_layers * shape.num_heads)
            .map(|_| MemorySlot::zeros(shape.d_k, shape.d_v))
            .collect();
        Self {
            shape,
            slots,
            stored_count: 0,
        }
    }

    pub fn shape(&self) -> MemoryShape {
        self.shape
    }

    pub fn stored_count(&self) -> usize {
        self.stored_count
    }

    pub fn is_empty(&self) -> bool {
        self.stored_count == 0
    }

    pub fn slot(&self, layer: usize, head: usize) -> &MemorySlot {
        &self.slots[layer * self.shape.num_heads + head]
    }

    pub fn slot_mut(&mut self, layer: usize, head: usize) -> &mut MemorySlot {
        &mut self.slots[layer * self.shape.num_heads + head]
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    /// Erases everything stored.
    pub fn reset(&mut self) {
        for s in &mut self.slots {
            s.m.iter_mut().for_each(|v| *v = 0.0);
            s.n.iter_mut().for_each(|v| *v = 0.0);
        }
        self.stored_count = 0;
    }

    /// Records that one more demonstration is represented. Called once per
    /// stored instance after every layer has been accumulated.
    pub fn mark_stored(&mut self) {
        self.stored_count += 1;
    }

    /// Adds `σ(K)ᵀV` and `Σ_j σ(K_j)` for one head.
    pub fn accumulate(&mut self, layer: usize, head: usize, m_delta: &[f64], n_delta: &[f64]) {
        let slot = self.slot_mut(layer, head);
        for (a, b) in slot.m.iter_mut().zip(m_delta) {
            *a += b;
        }
        for (a, b) in slot.n.iter_mut().zip(n_delta) {
            *a += b;
        }
    }

    /// Adds every slot of `other` and its stored count.
    pub fn add_assign(&mut self, other: &CompressiveMemory) -> Result<(), MemoryError> {
        self.check_shape(other)?;
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add(b);
        }
        self.stored_count += other.stored_count;
        Ok(())
    }

    /// Folds per-instance deltas into `base` with the given rule. The sum
    /// runs in index order so that the result does not depend on how the
    /// deltas were produced.
    pub fn combine(
        base: &CompressiveMemory,
        deltas: &[CompressiveMemory],
        rule: Combine,
    ) -> Result<CompressiveMemory, MemoryError> {
        let mut total = CompressiveMemory::empty(base.shape);
        for d in deltas {
            total.add_assign(d)?;
        }
        Self::fold_batch(base, &total, deltas.len(), rule)
    }

    /// `base + total` or `base + total / batch_len`, where `total` already
    /// holds the summed deltas of a batch of `batch_len` instances.
    pub fn fold_batch(
        base: &CompressiveMemory,
        total: &CompressiveMemory,
        batch_len: usize,
        rule: Combine,
    ) -> Result<CompressiveMemory, MemoryError> {
        base.check_shape(total)?;
        if batch_len == 0 {
            return Ok(base.clone());
        }
        let mut total = total.clone();
        if rule == Combine::Mean {
            let c = 1.0 / batch_len as f64;
            total.slots.iter_mut().for_each(|s| s.scale(c));
        }
        total.stored_count = batch_len;
        let mut out = base.clone();
        out.add_assign(&total)?;
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &CompressiveMemory) -> f64 {
        self.slots
            .iter()
            .zip(&other.slots)
            .flat_map(|(a, b)| a.m.iter().zip(&b.m).chain(a.n.iter().zip(&b.n)))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    fn check_shape(&self, other: &CompressiveMemory) -> Result<(), MemoryError> {
        if self.shape != other.shape {
            return Err(MemoryError::ShapeMismatch {
                expected: self.shape,
                actual: other.shape,
            });
        }
        Ok(())
    }

    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> Result<(), MemoryError> {
        w.write_all(MAGIC)?;
        let s = self.shape;
        for v in [
            FORMAT_VERSION,
            s.num_layers as u32,
            s.num_heads as u32,
            s.d_k as u32,
            s.d_v as u32,
            self.stored_count as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for slot in &self.slots {
            for v in slot.m.iter().chain(&slot.n) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_snapshot<R: Read>(r: &mut R) -> Result<CompressiveMemory, MemoryError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(MemoryError::BadSnapshot("wrong magic".into()));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(MemoryError::BadSnapshot(format!("unsupported version {version}")));
        }
        let shape = MemoryShape {
            num_layers: read_u32(r)? as usize,
            num_heads: read_u32(r)? as usize,
            d_k: read_u32(r)? as usize,
            d_v: read_u32(r)? as usize,
        };
        let stored_count = read_u32(r)? as usize;
        let mut mem = CompressiveMemory::empty(shape);
        mem.stored_count = stored_count;
        let mut buf = [0u8; 8];
        for slot in &mut mem.slots {
            for v in slot.m.iter_mut().chain(slot.n.iter_mut()) {
                r.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(mem)
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_snapshot(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CompressiveMemory, MemoryError> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_snapshot(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> MemoryShape {
        MemoryShape {
            num_layers: 2,
            num_heads: 2,
            d_k: 3,
            d_v: 3,
        }
    }

    fn filled(seed: f64) -> CompressiveMemory {
        let mut mem = CompressiveMemory::empty(shape());
        for (i, s) in mem.slots.iter_mut().enumerate() {
            for (j, v) in s.m.iter_mut().chain(s.n.iter_mut()).enumerate() {
                *v = seed * (i as f64 + 1.0) + j as f64 * 0.125;
            }
        }
        mem.stored_count = 1;
        mem
    }

    #[test]
    fn reset_empties_memory() {
        let mut mem = filled(1.5);
        mem.reset();
        assert_eq!(mem, CompressiveMemory::empty(shape()));
    }

    #[test]
    fn combine_rules() {
        let base = filled(0.5);
        let d = [filled(1.0), filled(3.0)];
        let mean = CompressiveMemory::combine(&base, &d, Combine::Mean).unwrap();
        let sum = CompressiveMemory::combine(&base, &d, Combine::Sum).unwrap();
        assert_eq!(mean.stored_count(), 3);
        let s0 = &mean.slot(0, 0).m;
        assert_eq!(s0[0], 0.5 + (1.0 + 3.0) / 2.0);
        assert_eq!(sum.slot(0, 0).m[0], 0.5 + 4.0);
        assert_eq!(CompressiveMemory::combine(&base, &[], Combine::Mean).unwrap(), base);
    }

    #[test]
    fn snapshot_round_trip_is_bitwise() {
        let mut mem = filled(0.1);
        mem.slot_mut(1, 1).m[2] = -0.0;
        mem.slot_mut(0, 1).n[0] = 1e-310;
        let mut buf = Vec::new();
        mem.write_snapshot(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CMRM");
        assert_eq!(buf.len(), 4 + 6 * 4 + 4 * (9 + 3) * 8);
        let back = CompressiveMemory::read_snapshot(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_snapshot(&mut again).unwrap();
        assert_eq!(buf, again);
        assert_eq!(back.stored_count(), 1);
    }

    #[test]
    fn snapshot_rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00".to_vec();
        assert!(matches!(
            CompressiveMemory::read_snapshot(&mut buf.as_slice()),
            Err(MemoryError::BadSnapshot(_))
        ));
    }
}
