use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Result, TasError};

/// Named trainable parameters in registration order.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Creates parameters either from a seeded initializer or from loaded tensors.
pub(crate) struct ParamBuilder<'a> {
    rng: ChaCha8Rng,
    loaded: Option<&'a HashMap<String, Tensor>>,
    pub(crate) store: ParamStore,
    pub(crate) dtype: DType,
    pub(crate) device: Device,
}

impl<'a> ParamBuilder<'a> {
    pub fn seeded(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            loaded: None,
            store: ParamStore::default(),
            dtype,
            device,
        }
    }

    pub fn from_tensors(tensors: &'a HashMap<String, Tensor>, dtype: DType, device: Device) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(0),
            loaded: Some(tensors),
            store: ParamStore::default(),
            dtype,
            device,
        }
    }

    fn take_loaded(&self, name: &str, shape: &[usize]) -> Result<Option<Tensor>> {
        let Some(map) = self.loaded else { return Ok(None) };
        let t = map
            .get(name)
            .ok_or_else(|| TasError::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.dims() != shape {
            return Err(TasError::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.dims()
            )));
        }
        Ok(Some(t.to_dtype(self.dtype)?.to_device(&self.device)?))
    }

    fn register(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if self.store.get(name).is_some() {
            return Err(TasError::Checkpoint(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        self.store.entries.push((name.to_string(), var.clone()));
        Ok(var)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Var> {
        let t = match self.take_loaded(name, shape)? {
            Some(t) => t,
            None => {
                let n: usize = shape.iter().product();
                let dist = Uniform::new_inclusive(-bound, bound)
                    .map_err(|e| TasError::Config(e.to_string()))?;
                let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
                Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?
            }
        };
        self.register(name, t)
    }

    /// He-style uniform initialization for a layer with `fan_in` inputs.
    pub fn kaiming(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<Var> {
        self.uniform(name, shape, (6.0 / fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = match self.take_loaded(name, shape)? {
            Some(t) => t,
            None => (Tensor::ones(shape, self.dtype, &self.device)? * value)?,
        };
        self.register(name, t)
    }

    /// A non-trainable tensor (e.g. normalization statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        match self.take_loaded(name, shape)? {
            Some(t) => Ok(t),
            None => Ok((Tensor::ones(shape, self.dtype, &self.device)? * value)?),
        }
    }
}
