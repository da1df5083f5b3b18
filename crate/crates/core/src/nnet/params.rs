//! Hierarchically named parameter registry with seeded initialization.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{GlassError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Const(f64),
    Uniform { bound: f64 },
    /// He uniform for layers feeding a ReLU: bound `sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    /// PyTorch's default for linear and conv layers: bound `1 / sqrt(fan_in)`.
    FanInUniform { fan_in: usize },
    XavierUniform { fan_in: usize, fan_out: usize },
}

impl Init {
    fn bound(self) -> Option<f64> {
        match self {
            Init::Const(_) => None,
            Init::Uniform { bound } => Some(bound),
            Init::HeUniform { fan_in } => Some((6.0 / fan_in as f64).sqrt()),
            Init::FanInUniform { fan_in } => Some(1.0 / (fan_in as f64).sqrt()),
            Init::XavierUniform { fan_in, fan_out } => Some((6.0 / (fan_in + fan_out) as f64).sqrt()),
        }
    }
}

#[derive(Debug)]
struct Entry {
    var: Var,
    trainable: bool,
}

#[derive(Debug)]
struct Inner {
    entries: BTreeMap<String, Entry>,
    rng: ChaCha8Rng,
    zero_init: bool,
    frozen: bool,
}

/// Shared, thread-safe store of every tensor a model owns.
///
/// Trainable parameters and non-trainable buffers (batch-norm running
/// statistics) live side by side under dotted names such as
/// `mfm.iter1.trans_rt.attn.q.weight`.
#[derive(Debug, Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<Inner>>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Inner {
                entries: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                zero_init: false,
                frozen: false,
            })),
            dtype,
            device,
        }
    }

    /// A store whose every tensor starts at zero; used to size models cheaply.
    pub fn zeroed(dtype: DType, device: Device) -> Self {
        let store = Self::new(0, dtype, device);
        store.inner.lock().unwrap().zero_init = true;
        store
    }

    /// A zeroed store for inference: layers receive detached views of the
    /// parameters, so forward passes record no autograd graph. Values written
    /// later through [`ParamStore::assign`] are still seen by the layers.
    pub fn inference(dtype: DType, device: Device) -> Self {
        let store = Self::zeroed(dtype, device);
        store.inner.lock().unwrap().frozen = true;
        store
    }

    pub fn is_frozen(&self) -> bool {
        self.inner.lock().unwrap().frozen
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamScope {
        ParamScope {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.inner.lock().unwrap();
        if inner.entries.contains_key(&name) {
            return Err(GlassError::Config(format!("parameter `{name}` registered twice")));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match (inner.zero_init, init.bound(), init) {
            (true, _, _) => vec![0.0; n],
            (false, None, Init::Const(c)) => vec![c; n],
            (false, Some(b), _) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            (false, None, _) => unreachable!("only constants lack a bound"),
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        inner.entries.insert(
            name,
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Trainable parameters in name order.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner
            .entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, e)| (k.clone(), e.var.clone()))
            .collect()
    }

    /// Every tensor (parameters and buffers) in name order.
    pub fn all(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().unwrap();
        inner.entries.iter().map(|(k, e)| (k.clone(), e.var.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().unwrap().entries.get(name).map(|e| e.var.clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Overwrites stored values by name. Every stored name must be present
    /// with a matching shape unless `allow_missing` is set; unknown names in
    /// `tensors` are ignored.
    pub fn assign(&self, tensors: &BTreeMap<String, Tensor>, allow_missing: bool) -> Result<usize> {
        let mut assigned = 0;
        for (name, var) in self.all() {
            match tensors.get(&name) {
                Some(t) => {
                    if t.dims() != var.dims() {
                        return Err(GlassError::Checkpoint(format!(
                            "`{name}` has shape {:?}, expected {:?}",
                            t.dims(),
                            var.dims()
                        )));
                    }
                    var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
                    assigned += 1;
                }
                None if allow_missing => {}
                None => return Err(GlassError::Checkpoint(format!("missing tensor `{name}`"))),
            }
        }
        Ok(assigned)
    }
}

/// A view of the store under a dotted name prefix.
#[derive(Debug, Clone)]
pub struct ParamScope {
    store: ParamStore,
    prefix: String,
}

impl ParamScope {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamScope {
        ParamScope {
            store: self.store.clone(),
            prefix: self.path(name.as_ref()),
        }
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn param(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let var = self.store.create(self.path(name), shape.into(), init, true)?;
        Ok(if self.store.is_frozen() {
            var.as_tensor().detach()
        } else {
            var.as_tensor().clone()
        })
    }

    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, value: f64) -> Result<Var> {
        self.store.create(self.path(name), shape.into(), Init::Const(value), false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let make = || {
            let store = ParamStore::new(5, DType::F32, Device::Cpu);
            store.root().pp("a").param("w", (3, 4), Init::HeUniform { fan_in: 4 }).unwrap();
            store.root().pp("a").param("w", (3, 4), Init::HeUniform { fan_in: 4 }).unwrap_err();
            store.get("a.w").unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        let (x, y) = (make(), make());
        assert_eq!(x, y);
        let bound = (6.0f32 / 4.0).sqrt();
        assert!(x.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn buffers_are_not_trainable() {
        let store = ParamStore::new(0, DType::F64, Device::Cpu);
        let root = store.root().pp("bn");
        root.param("weight", 4, Init::Const(1.0)).unwrap();
        root.buffer("running_mean", 4, 0.0).unwrap();
        assert_eq!(store.parameter_count(), 4);
        assert_eq!(store.all().len(), 2);
    }
}
