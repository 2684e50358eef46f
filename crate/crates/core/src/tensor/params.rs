use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tape, Tensor, TensorError, Var};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its index.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, i: usize) -> &Tensor<S> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<S> {
        &mut self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<S>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.param(t.clone())).collect()
    }

    /// Zero tensors with the same shapes, e.g. a gradient accumulator.
    pub fn zeros_like(&self) -> Vec<Tensor<S>> {
        self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect()
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn assign_from(&mut self, other: &ParamStore<S>) -> Result<(), TensorError> {
        if other.len() != self.len() {
            return Err(TensorError::Invalid {
                op: "assign_from",
                msg: format!("expected {} tensors, got {}", self.len(), other.len()),
            });
        }
        for (i, name) in self.names.iter().enumerate() {
            let j = other.index_of(name).ok_or_else(|| TensorError::Invalid {
                op: "assign_from",
                msg: format!("missing parameter {name}"),
            })?;
            if other.tensors[j].shape() != self.tensors[i].shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "assign_from",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: other.tensors[j].shape().to_vec(),
                });
            }
            self.tensors[i] = other.tensors[j].clone();
        }
        Ok(())
    }
}

/// Writes `name, rank, shape, f32 data` records behind a versioned header.
///
/// Layout (little-endian): `RFCK`, version `u32`, count `u32`, then per
/// tensor: name length `u32`, UTF-8 name, rank `u32`, `rank × u64` dims,
/// `f32` values row-major.
pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in t.data() {
            let v = x.to_f32().unwrap_or(f32::NAN);
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> io::Result<ParamStore<S>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(invalid("bad checkpoint magic"));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(invalid(&format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| invalid("non-UTF-8 tensor name"))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(invalid("tensor rank too large"));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(S::of_f32(f32::from_le_bytes(b)));
        }
        let t = Tensor::new(&shape, data).map_err(|e| invalid(&e.to_string()))?;
        store.push(name, t);
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn invalid(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact_for_f32() {
        let mut store = ParamStore::<f32>::new();
        store.push("a.weight", Tensor::matrix(2, 3, vec![0.1, -2.5, 3.0, 1e-7, 0.0, -0.0]).unwrap());
        store.push("a.bias", Tensor::row_vector(vec![1.0, 2.0, 3.0]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&store, &path).unwrap();
        let back: ParamStore<f32> = load_checkpoint(&path).unwrap();
        assert_eq!(back, store);
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }
}
