use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use tbn::model::TbnModel;

use super::{flat, rng, scalar, tiny_model_config};

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-3;
const ABS_FLOOR: f64 = 1e-7;

/// Tiny model in 64-bit precision.
pub fn model(seed: u64) -> TbnModel {
    TbnModel::new(&tiny_model_config(), seed, DType::F64, &Device::Cpu).unwrap()
}

/// Uniform pixels for `n` images at the tiny input size.
pub fn pixels(seed: u64, n: usize) -> Tensor {
    let mut r = rng(seed);
    let data: Vec<f64> = (0..n * 3 * 96 * 32).map(|_| r.random_range(0.0..1.0)).collect();
    Tensor::from_vec(data, (n, 3, 96, 32), &Device::Cpu).unwrap()
}

pub fn head_vars(model: &TbnModel) -> BTreeMap<String, Var> {
    model
        .store()
        .trainable_vars()
        .into_iter()
        .filter(|(k, _)| k.starts_with("head."))
        .collect()
}

fn set_element(var: &Var, idx: usize, value: f64) {
    let mut v = flat(var.as_tensor());
    v[idx] = value;
    var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
}

/// Compares analytic and central-difference gradients of `loss` for every
/// head parameter of `model`. Returns the number of compared entries and a
/// line per mismatch.
pub fn check_head_gradients(model: &TbnModel, loss: impl Fn() -> Tensor) -> (usize, Vec<String>) {
    let grads = loss().backward().unwrap();
    let mut compared = 0;
    let mut failures = Vec::new();
    for (name, var) in head_vars(model) {
        let analytic = grads
            .get(var.as_tensor())
            .map(flat)
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let values = flat(var.as_tensor());
        for (i, &x) in values.iter().enumerate() {
            set_element(&var, i, x + EPS);
            let up = scalar(&loss());
            set_element(&var, i, x - EPS);
            let down = scalar(&loss());
            set_element(&var, i, x);
            let numeric = (up - down) / (2.0 * EPS);
            let a = analytic[i];
            if (a - numeric).abs() > REL_TOL * a.abs().max(numeric.abs()) + ABS_FLOOR {
                failures.push(format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"));
            }
            compared += 1;
        }
    }
    (compared, failures)
}
