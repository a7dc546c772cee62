//! Named parameter storage, seeded initialization and the binary checkpoint format.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;

use crate::error::{DanError, Result};
use crate::tensor::Tensor;

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(DanError::Config(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(true);
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, stored at `f32` precision.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        t.round_to_f32();
        self.add(name, t)
    }

    /// Uniform in `[-sqrt(6/fan_in), sqrt(6/fan_in)]` for layers followed by ReLU.
    pub fn add_he_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let mut t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        t.round_to_f32();
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn round_to_f32(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::round_to_f32);
    }

    /// Overwrite values from another store with identical names and shapes.
    pub fn copy_values_from(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        let mut seen = vec![false; self.tensors.len()];
        for (name, t) in named {
            let Some(&i) = self.index.get(name) else {
                continue;
            };
            if self.tensors[i].shape() != t.shape() {
                return Err(DanError::Checkpoint(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i].data_mut().copy_from_slice(t.data());
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(DanError::Checkpoint(format!(
                "checkpoint is missing parameter {}",
                self.names[i]
            )));
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DANCKPT1";

/// Write named tensors as little-endian `f32` records behind the `DANCKPT1` magic.
pub fn write_tensors<W: Write>(out: &mut W, tensors: &[(&str, &Tensor)]) -> Result<()> {
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        out.write_all(&(bytes.len() as u32).to_le_bytes())?;
        out.write_all(bytes)?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.numel() * 4);
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Inverse of [`write_tensors`].
pub fn read_tensors<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|_| DanError::Checkpoint("file too short for header".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(DanError::Checkpoint("bad magic, not a DANCKPT1 file".into()));
    }
    let count = read_u32(input)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = read_u32(input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| DanError::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(input)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(input).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        input.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(&shape, data)
            .map_err(|e| DanError::Checkpoint(format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_fan_in_bound_and_f32_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", &[8, 4], 16, &mut rng).unwrap();
        for &v in store.get(id).data() {
            assert!(v.abs() <= 0.25 + 1e-7);
            assert_eq!(v, v as f32 as f64);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add_zeros("a", &[2]).unwrap();
        assert!(store.add_zeros("a", &[3]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add_uniform("enc.stem.w", &[4, 1, 3, 3], 9, &mut rng).unwrap();
        store.add_uniform("dec.out.b", &[18], 64, &mut rng).unwrap();
        let named: Vec<(&str, &Tensor)> = store.iter().collect();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &named).unwrap();
        assert_eq!(&buf[..8], b"DANCKPT1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2);
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        for ((n0, t0), (n1, t1)) in store.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(t0.shape(), t1.shape());
            let a: Vec<u64> = t0.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let buf = b"NOTACKPT\0\0\0\0".to_vec();
        assert!(matches!(
            read_tensors(&mut buf.as_slice()),
            Err(DanError::Checkpoint(_))
        ));
    }
}
