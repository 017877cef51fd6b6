//! Named parameter storage and the binary checkpoint container.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use avatar_tensor::{Gradients, Tape, Tensor, Var};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

/// Tensors keyed by dotted names (`geo.0.w`, `probe`, ...).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::invalid(format!("missing parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    /// Drops every tensor under `prefix.`.
    pub fn remove_prefix(&mut self, prefix: &str) {
        let dotted = format!("{prefix}.");
        self.tensors.retain(|k, _| k != prefix && !k.starts_with(&dotted));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Records every tensor on `tape`; names for which `trainable` holds
    /// become gradient-carrying leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::image::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut take = |n: usize| -> std::result::Result<Vec<u8>, String> {
            let mut buf = vec![0; n];
            r.read_exact(&mut buf).map_err(|_| "checkpoint is truncated".to_string())?;
            Ok(buf)
        };
        if take(4)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        let version = u32_of(take(4)?);
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let count = u32_of(take(4)?) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let len = u32_of(take(4)?) as usize;
            let name = String::from_utf8(take(len)?).map_err(|_| "tensor name is not UTF-8")?;
            let rank = u32_of(take(4)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let b = take(8)?;
                shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let raw = take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("parameter {name:?} is not bound")))
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every gradient-carrying binding, zero when unreached.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(k, v)| (k.clone(), grads.wrt(tape, *v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip_bit_exact() {
        let mut p = ParamSet::new();
        p.insert("a.w", Tensor::matrix(2, 2, vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap());
        p.insert("b", Tensor::scalar(std::f64::consts::PI));
        let back = ParamSet::from_bytes(&p.to_bytes()).unwrap();
        for (k, t) in p.iter() {
            let u = back.get(k).unwrap();
            assert_eq!(t.shape(), u.shape());
            for (x, y) in t.data().iter().zip(u.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::scalar(1.0));
        let b = p.to_bytes();
        assert!(ParamSet::from_bytes(&b[..b.len() - 3]).is_err());
    }

    #[test]
    fn remove_prefix_is_exact() {
        let mut p = ParamSet::new();
        p.insert("color.0.w", Tensor::scalar(1.0));
        p.insert("colorful", Tensor::scalar(1.0));
        p.remove_prefix("color");
        assert!(p.contains("colorful"));
        assert_eq!(p.len(), 1);
    }
}
