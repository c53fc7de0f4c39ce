//! Versioned binary checkpoint format.
//!
//! Layout (little endian):
//!
//! ```text
//! magic "DIMNERF\0" | version u32 | iteration u64 | metadata (u64 len + utf8)
//! | block count u32 | blocks… | moment flag u8 | [first moments… | second moments…]
//! block   = name (u32 len + utf8) | rows u64 | cols u64 | trainable u8 | rows·cols f64
//! moments = one f64 array per block, same shapes as the blocks
//! ```
//!
//! Values are always stored as f64, so a 64-bit build round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::{Matrix, ParameterStore, Real};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIMNERF\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    /// Free-form text, used for the serialized model configuration.
    pub metadata: String,
    pub params: ParameterStore,
    /// Optimizer first and second moments, one matrix per block.
    pub moments: Option<(Vec<Matrix>, Vec<Matrix>)>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for b in self.params.blocks() {
            out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
            out.extend_from_slice(b.name.as_bytes());
            out.extend_from_slice(&(b.value.rows as u64).to_le_bytes());
            out.extend_from_slice(&(b.value.cols as u64).to_le_bytes());
            out.push(u8::from(b.trainable));
            write_values(&mut out, &b.value.data);
        }
        match &self.moments {
            Some((m, v)) => {
                out.push(1);
                for x in m.iter().chain(v) {
                    write_values(&mut out, &x.data);
                }
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let iteration = r.u64()?;
        let meta_len = r.u64()? as usize;
        let metadata = r.string(meta_len)?;
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let trainable = r.take(1)?[0] != 0;
            let data = r.values(rows * cols)?;
            params.insert(name, Matrix::from_vec(rows, cols, data), trainable)?;
        }
        let moments = match r.take(1)?[0] {
            0 => None,
            _ => {
                let read_set = |r: &mut Reader| -> Result<Vec<Matrix>> {
                    params
                        .blocks()
                        .iter()
                        .map(|b| Ok(Matrix::from_vec(b.value.rows, b.value.cols, r.values(b.value.len())?)))
                        .collect()
                };
                let m = read_set(&mut r)?;
                let v = read_set(&mut r)?;
                Some((m, v))
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Self { iteration, metadata, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Load { path: path.to_path_buf(), reason: e.to_string() })?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_values(out: &mut Vec<u8>, data: &[Real]) {
    for v in data {
        out.extend_from_slice(&(*v as f64).to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn values(&mut self, n: usize) -> Result<Vec<Real>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seeded_rng;

    fn sample() -> Checkpoint {
        let mut params = ParameterStore::new();
        let mut rng = seeded_rng(5);
        params.insert_uniform("a.w", 3, 4, 3, 1.0, &mut rng).unwrap();
        params.insert("frozen", Matrix::from_vec(1, 2, vec![1.0 / 3.0, -0.0]), false).unwrap();
        let m = params.blocks().iter().map(|b| b.value.map(|x| x * 0.5)).collect();
        let v = params.blocks().iter().map(|b| b.value.map(|x| x * x)).collect();
        Checkpoint { iteration: 42, metadata: "k = 4".into(), params, moments: Some((m, v)) }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.blocks().iter().zip(ck.params.blocks()) {
            let ab: Vec<u64> = a.value.data.iter().map(|x| (*x as f64).to_bits()).collect();
            let bb: Vec<u64> = b.value.data.iter().map(|x| (*x as f64).to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
