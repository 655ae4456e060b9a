//! Named parameter storage, seeded initialization and the weight archive.
//!
//! Archive layout (all integers little-endian):
//! `b"SSNW"`, `u32` version, `u32` entry count, then per entry
//! `u32` name length, UTF-8 name, `u8` trainable flag, `u32` rank,
//! `u64` per dimension, and the values as `f32`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"SSNW";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// How a fresh parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// He-normal with the given fan-in.
    Kaiming { fan_in: usize },
    /// Uniform in `±1/sqrt(fan_in)`.
    Uniform { fan_in: usize },
    Constant(f64),
}

#[derive(Clone)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Rc<Tensor<T>>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Its initial value depends only on `seed` and
    /// `name`, so two models sharing a name start from the same weights.
    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool, seed: u64) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Constant(v) => vec![T::lit(v); n],
            Init::Kaiming { fan_in } => {
                let mut rng = rng_for(seed, &format!("init/{name}"), &[]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            }
            Init::Uniform { fan_in } => {
                let mut rng = rng_for(seed, &format!("init/{name}"), &[]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| T::lit(rng.gen_range(-bound..=bound))).collect()
            }
        };
        self.insert(name, Tensor::from_vec(shape, data), trainable)
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.names.len();
        self.names.push(name.to_string());
        self.values.push(Rc::new(value));
        self.trainable.push(trainable);
        self.index.insert(name.to_string(), id);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.values[id.0].clone()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    /// Mutable access; copies the tensor if a tape still holds it.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.values[id.0])
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) {
        assert_eq!(value.shape(), self.values[id.0].shape(), "shape change for {}", self.names[id.0]);
        self.values[id.0] = Rc::new(value);
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.trainable[id.0])
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable_ids().map(|id| self.get(id).numel()).sum()
    }

    /// Digest over every entry (names, shapes and value bits) in order.
    pub fn checksum(&self) -> u64 {
        let mut h = crate::seed::Fnv1a::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.write(name.as_bytes());
            h.write_u64(v.checksum());
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Rc::new(v.cast())).collect(),
            trainable: self.trainable.clone(),
            index: self.index.clone(),
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(self.names.len() as u32)?;
        for ((name, v), &tr) in self.names.iter().zip(&self.values).zip(&self.trainable) {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(tr as u8)?;
            w.write_u32::<LittleEndian>(v.shape().len() as u32)?;
            for &d in v.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for x in v.data() {
                w.write_f32::<LittleEndian>(x.to_f32_lossy())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut offset = 0u64;
        let fmt = |offset: u64, message: &str| Error::Format {
            offset,
            message: message.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| fmt(0, "truncated header"))?;
        if &magic != MAGIC {
            return Err(fmt(0, "not a weight archive"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|_| fmt(4, "truncated header"))?;
        if version != VERSION {
            return Err(fmt(4, &format!("unsupported archive version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(|_| fmt(8, "truncated header"))?;
        offset += 12;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let trunc = |o| fmt(o, "truncated entry");
            let len = r.read_u32::<LittleEndian>().map_err(|_| trunc(offset))? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| trunc(offset))?;
            let name = String::from_utf8(name).map_err(|_| fmt(offset, "name is not UTF-8"))?;
            let trainable = r.read_u8().map_err(|_| trunc(offset))? != 0;
            let rank = r.read_u32::<LittleEndian>().map_err(|_| trunc(offset))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(|_| trunc(offset))? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(|_| trunc(offset))?;
            if store.index.contains_key(&name) {
                return Err(fmt(offset, &format!("duplicate entry {name}")));
            }
            let tensor = Tensor::from_vec(&shape, data.into_iter().map(T::from_f32).collect());
            store.insert(&name, tensor, trainable);
            offset += (4 + len + 1 + 4 + 8 * rank + 4 * n) as u64;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
