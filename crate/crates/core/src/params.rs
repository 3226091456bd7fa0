//! Named parameter storage shared by all networks.
//!
//! A [`ParamStore`] owns the trainable variables and the non-trainable
//! buffers (batch-norm running statistics) of one network. Networks are
//! assembled through a [`ParamBuilder`], which either looks parameters up
//! or, when given an rng, initializes the missing ones. Views built with
//! [`View::Frozen`] read the same storage through detached tensors, so
//! optimizer updates are visible to them but no gradients flow back.

use std::collections::HashMap;
use std::io::{Read, Write};

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"FMPS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Trainable,
    Frozen,
}

#[derive(Debug, Clone)]
pub enum Init {
    Normal(f64),
    /// He-normal with the given fan-in.
    Kaiming(usize),
    Const(f64),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Trainable = 0,
    Buffer = 1,
}

#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Kind, Var)>,
    index: HashMap<String, usize>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("entries", &self.entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self { dtype, device: Device::Cpu, entries: Vec::new(), index: HashMap::new() }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].2)
    }

    /// Trainable variables in registration order.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries
            .iter()
            .filter(|(_, k, _)| *k == Kind::Trainable)
            .map(|(n, _, v)| (n.as_str(), v))
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    fn insert(&mut self, name: String, kind: Kind, var: Var) -> Result<()> {
        if self.index.contains_key(&name) {
            bail!(Config, "duplicate parameter {name}");
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, kind, var));
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (name, kind, var) in &self.entries {
            out.insert(name.clone(), *kind, Var::from_tensor(&var.as_tensor().copy()?)?)?;
        }
        Ok(out)
    }

    /// Deep copy of the entries under `prefix`, with the prefix removed.
    pub fn extract_prefix(&self, prefix: &str) -> Result<Self> {
        let mut out = Self::new(self.dtype);
        for (name, kind, var) in &self.entries {
            if let Some(rest) = name.strip_prefix(prefix) {
                out.insert(rest.to_string(), *kind, Var::from_tensor(&var.as_tensor().copy()?)?)?;
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(dtype_tag(self.dtype)?);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, kind, var) in &self.entries {
            out.push(*kind as u8);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = var.dims();
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for d in dims {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F32 => {
                    for v in flat.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                other => bail!(Config, "unsupported dtype {other:?}"),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            bail!(Data, "not a parameter blob");
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            bail!(Data, "unsupported parameter blob version {version}");
        }
        let dtype = match read_u8(&mut r)? {
            0 => DType::F32,
            1 => DType::F64,
            t => bail!(Data, "unknown dtype tag {t}"),
        };
        let count = read_u32(&mut r)? as usize;
        let mut store = Self::new(dtype);
        for _ in 0..count {
            let kind = match read_u8(&mut r)? {
                0 => Kind::Trainable,
                1 => Kind::Buffer,
                k => bail!(Data, "unknown entry kind {k}"),
            };
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Data(e.to_string()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                dims.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = dims.iter().product();
            let tensor = match dtype {
                DType::F32 => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut b = [0u8; 4];
                        r.read_exact(&mut b)?;
                        v.push(f32::from_le_bytes(b));
                    }
                    Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
                }
                _ => {
                    let mut v = Vec::with_capacity(n);
                    for _ in 0..n {
                        let mut b = [0u8; 8];
                        r.read_exact(&mut b)?;
                        v.push(f64::from_le_bytes(b));
                    }
                    Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
                }
            };
            store.insert(name, kind, Var::from_tensor(&tensor)?)?;
        }
        if !r.is_empty() {
            bail!(Data, "trailing bytes in parameter blob");
        }
        Ok(store)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    /// SHA-256 of the serialized blob, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

fn dtype_tag(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => bail!(Config, "unsupported dtype {other:?}"),
    }
}

fn read_u8(r: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Hierarchical accessor used by network constructors.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut Rng>,
    view: View,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    /// Builder that initializes missing parameters from `rng`.
    pub fn init(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self { store, rng: Some(rng), view: View::Trainable, prefix: String::new() }
    }

    /// Builder over an already populated store.
    pub fn load(store: &'a mut ParamStore, view: View) -> Self {
        Self { store, rng: None, view, prefix: String::new() }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder { store: &mut *self.store, rng: self.rng.as_deref_mut(), view: self.view, prefix }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn fetch(&mut self, name: &str, dims: &[usize], init: Init, kind: Kind) -> Result<Var> {
        let full = self.full_name(name);
        if let Some(&i) = self.store.index.get(&full) {
            let (_, k, var) = &self.store.entries[i];
            if var.dims() != dims || *k != kind {
                bail!(Shape, "parameter {full}: stored {:?}, expected {:?}", var.dims(), dims);
            }
            return Ok(var.clone());
        }
        let Some(rng) = self.rng.as_deref_mut() else {
            bail!(Data, "missing parameter {full}");
        };
        let n: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(c) => vec![c; n],
            Init::Values(v) => {
                if v.len() != n {
                    bail!(Shape, "initializer for {full} has {} values, expected {n}", v.len());
                }
                v
            }
            _ if n == 0 => Vec::new(),
            Init::Normal(std) => sample_normal(rng, std, n)?,
            Init::Kaiming(fan_in) => sample_normal(rng, (2.0 / fan_in.max(1) as f64).sqrt(), n)?,
        };
        let t = Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.store.insert(full, kind, var.clone())?;
        Ok(var)
    }

    /// A trainable weight, tracked or detached according to the view.
    pub fn weight(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        let var = self.fetch(name, dims, init, Kind::Trainable)?;
        Ok(match self.view {
            View::Trainable => var.as_tensor().clone(),
            View::Frozen => var.as_detached_tensor(),
        })
    }

    /// A non-trainable buffer; callers read it detached and update it with `set`.
    pub fn buffer(&mut self, name: &str, dims: &[usize], value: f64) -> Result<Var> {
        self.fetch(name, dims, Init::Const(value), Kind::Buffer)
    }
}

fn sample_normal(rng: &mut Rng, std: f64, n: usize) -> Result<Vec<f64>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..n).map(|_| dist.sample(rng)).collect())
}
