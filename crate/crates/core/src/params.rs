//! Named parameter storage and its binary serialization.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, ParamId, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// An ordered collection of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    /// Glorot-uniform initialization with the given fan-in/fan-out.
    pub fn add_glorot<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(rng, name, shape, limit)
    }

    /// He-uniform initialization for layers followed by a ReLU.
    pub fn add_he<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        fan_in: usize,
    ) -> ParamId {
        let limit = (6.0 / fan_in as f64).sqrt();
        self.add_uniform(rng, name, shape, limit)
    }

    pub fn add_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        shape: &[usize],
        limit: f64,
    ) -> ParamId {
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let t = Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)));
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.add(name, Tensor::full(shape, T::from_f64(v)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.values.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (i, n.as_str(), v))
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter()
            .filter(move |(_, n, _)| n.starts_with(prefix))
            .map(|(i, _, _)| i)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Leaf node for parameter `id` in `graph`.
    pub fn var(&self, graph: &mut Graph<T>, id: ParamId) -> Var {
        graph.param(id, &self.values[id])
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Writes names, shapes and little-endian `f64` values.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for (name, value) in self.names.iter().zip(&self.values) {
            let nb = name.as_bytes();
            w.write_all(&(nb.len() as u64).to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&(value.shape().len() as u64).to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in value.data() {
                w.write_all(&v.to_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad parameter blob header".into()));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        };
        let n = read_u64(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..n {
            let len = read_u64(&mut r)? as usize;
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb)?;
            let name = String::from_utf8(nb).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let rank = read_u64(&mut r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(T::from_f64(f64::from_le_bytes(b)));
            }
            store.add(name, Tensor::new(&shape, data));
        }
        Ok(store)
    }

    /// Copies values from `other`, requiring identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.names != self.names {
            return Err(Error::Checkpoint(
                "parameter names differ from the model layout".into(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch: {:?} vs {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"CSPARAM1";
