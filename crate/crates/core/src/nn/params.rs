use std::collections::BTreeSet;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// How a freshly created tensor is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with std `sqrt(2 / fan_in)`.
    KaimingFanIn { fan_in: usize },
    /// Normal with the given std, resampled outside two standard deviations.
    TruncatedNormal { std: f64 },
    Const(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Running statistics; persisted but never optimized.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub var: Var,
}

/// Collects named tensors while a network is constructed. Values are drawn
/// from a seeded ChaCha stream in creation order, so the same architecture
/// and seed always produce the same weights.
pub struct Builder {
    params: Vec<Param>,
    names: BTreeSet<String>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Builder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            params: Vec::new(),
            names: BTreeSet::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, len: usize, init: Init) -> Vec<f64> {
        match init {
            Init::Const(v) => vec![v; len],
            Init::KaimingFanIn { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..len).map(|_| normal.sample(&mut self.rng)).collect()
            }
            Init::TruncatedNormal { std } => {
                let normal = Normal::new(0.0, std).expect("finite std");
                (0..len)
                    .map(|_| loop {
                        let v: f64 = normal.sample(&mut self.rng);
                        if v.abs() <= 2.0 * std {
                            break v;
                        }
                    })
                    .collect()
            }
        }
    }

    fn push(&mut self, name: String, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        if !self.names.insert(name.clone()) {
            return Err(Error::Consistency(format!("duplicate parameter name {name}")));
        }
        let len = shape.iter().product();
        let values = self.sample(len, init);
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(Param { name, kind, var: var.clone() });
        Ok(var)
    }

    /// Registers a trainable tensor and returns the handle layers compute with.
    pub fn trainable(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.push(name.into(), shape, init, ParamKind::Trainable)?.as_tensor().clone())
    }

    pub fn buffer(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<Var> {
        self.push(name.into(), shape, Init::Const(value), ParamKind::Buffer)
    }

    pub fn finish(self) -> ParamStore {
        ParamStore { params: self.params }
    }
}

/// Joins a dotted parameter path.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Every tensor of a built network, in creation order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.kind == ParamKind::Trainable)
    }

    /// Number of trainable scalars; running statistics are excluded.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|p| p.var.as_tensor().elem_count()).sum()
    }
}
