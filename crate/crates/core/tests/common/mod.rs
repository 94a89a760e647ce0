#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tbn::backbone::BackboneConfig;
use tbn::head::{BranchOutputs, PartitionTreeConfig};
use tbn::model::ModelConfig;

/// Tiny model: 96×32 input, T0 = (8, 6, 2), 3 identities.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig::desk_tiny(96, 32, 8),
        head: PartitionTreeConfig {
            leaf_embedding_dim: 4,
            global_embedding_dim: 8,
            num_identities: 3,
            ..Default::default()
        },
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-scale..scale)).collect())
        .collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::new(rows.to_vec(), &Device::Cpu).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(candle_core::DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Branch outputs holding the given logits; embeddings are zero.
pub fn outputs(local: &[Vec<Vec<f64>>], global: &[Vec<f64>]) -> BranchOutputs {
    let n = global.len();
    BranchOutputs {
        global_embedding: Tensor::zeros((n, 1), candle_core::DType::F64, &Device::Cpu).unwrap(),
        local_embeddings: local
            .iter()
            .map(|_| Tensor::zeros((n, 1), candle_core::DType::F64, &Device::Cpu).unwrap())
            .collect(),
        global_logits: tensor(global),
        local_logits: local.iter().map(|l| tensor(l)).collect(),
    }
}

/// Tensor values as a flat f64 vector.
pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all()
        .unwrap()
        .to_dtype(candle_core::DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
}
