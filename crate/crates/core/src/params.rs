//! Parameter storage with seed-deterministic initialization, and the
//! single-file parameter archive (safetensors with a JSON metadata entry).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::{Init, NormalOrUniform};
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Metadata key under which archives store their JSON document.
const METADATA_KEY: &str = "tbn";

/// Named model variables. Initial values are drawn from a seeded generator
/// in construction order, so two stores built with the same seed and the
/// same architecture hold identical values.
#[derive(Clone)]
pub struct ParamStore {
    varmap: VarMap,
    rng: Arc<Mutex<ChaCha8Rng>>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("num_vars", &self.varmap.data().lock().unwrap().len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            varmap: VarMap::new(),
            rng: Arc::new(Mutex::new(ChaCha8Rng::seed_from_u64(seed))),
        }
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// Every variable, including batch-norm running statistics.
    pub fn vars(&self) -> BTreeMap<String, Var> {
        let data = self.varmap.data().lock().unwrap();
        data.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Variables updated by gradient descent (everything but running statistics).
    pub fn trainable_vars(&self) -> BTreeMap<String, Var> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| !is_buffer(name))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.varmap.data().lock().unwrap().get(name).cloned()
    }

    /// Copies of all current values, detached from the live variables.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
            .collect()
    }

    /// Overwrites `name` with `value`, converting dtype; the shape must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Shape(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(Error::Shape(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }

    /// Assigns every tensor of `values`; all names must exist in the store.
    pub fn assign_all(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, value) in values {
            self.assign(name, value)?;
        }
        Ok(())
    }

    fn init_values(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().unwrap();
        let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(lo..up)).collect()
        };
        let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
            (0..n)
                .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        match init {
            Init::Const(c) => vec![c; n],
            Init::Uniform { lo, up } => uniform(&mut rng, lo, up),
            Init::Randn { mean, stdev } => normal(&mut rng, mean, stdev),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
                match dist {
                    NormalOrUniform::Normal => normal(&mut rng, 0.0, std),
                    NormalOrUniform::Uniform => {
                        let bound = 3f64.sqrt() * std;
                        uniform(&mut rng, -bound, bound)
                    }
                }
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        if let Some(var) = self.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", var.shape())
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.init_values(&s, h);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.varmap
            .data()
            .lock()
            .unwrap()
            .insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match ParamStore::get(self, name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("no variable named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        ParamStore::get(self, name).is_some()
    }
}

/// Running statistics and similar non-trainable state.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Writes tensors plus an optional JSON metadata document to a safetensors file.
///
/// Output bytes depend only on the names, values and metadata string.
pub fn save_archive(
    path: &Path,
    tensors: &BTreeMap<String, Tensor>,
    metadata: Option<&str>,
) -> Result<()> {
    let info = metadata.map(|m| HashMap::from([(METADATA_KEY.to_string(), m.to_string())]));
    let bytes = safetensors::serialize(tensors.iter(), info)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// An archive read back from disk.
#[derive(Debug)]
pub struct Archive {
    pub tensors: BTreeMap<String, Tensor>,
    pub metadata: Option<String>,
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)?;
    let metadata = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY).cloned());
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?
        .into_iter()
        .collect();
    Ok(Archive { tensors, metadata })
}
