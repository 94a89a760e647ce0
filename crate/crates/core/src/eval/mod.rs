//! Descriptor extraction, distances, CMC/mAP and k-reciprocal re-ranking.

mod dump;
mod metrics;
mod rerank;

pub use dump::dump_ranking;
pub use metrics::{
    distance_matrix, evaluate, evaluate_sets, pool_multi_query, EvalReport, Protocol, RankingResult,
};
pub use rerank::{k_reciprocal_rerank, RerankParams};

use std::fmt;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::{load_images, DatasetManifest};
use crate::error::{Error, Result};
use crate::head::BranchOutputs;
use crate::model::TbnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// All leaf embeddings, concatenated in leaf order.
    LocalOnly,
    /// The pooled global embedding.
    GlobalOnly,
    /// `[local_1, …, local_K, global]`.
    Joint,
}

impl FeatureMode {
    pub const ALL: [FeatureMode; 3] = [FeatureMode::LocalOnly, FeatureMode::GlobalOnly, FeatureMode::Joint];
}

impl fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureMode::LocalOnly => "local_only",
            FeatureMode::GlobalOnly => "global_only",
            FeatureMode::Joint => "joint",
        })
    }
}

impl std::str::FromStr for FeatureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local_only" | "local" => Ok(FeatureMode::LocalOnly),
            "global_only" | "global" => Ok(FeatureMode::GlobalOnly),
            "joint" => Ok(FeatureMode::Joint),
            other => Err(Error::Config(format!("unknown feature mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// L2-normalize each block, concatenate, L2-normalize the result.
    BlockwiseL2,
    /// Raw concatenation.
    None,
}

/// Row-major descriptor matrix with identity and camera labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub vectors: Vec<Vec<f64>>,
    pub identity_ids: Vec<i64>,
    pub camera_ids: Vec<u32>,
    pub feature_mode: FeatureMode,
    /// Source image per row; may be empty.
    pub paths: Vec<PathBuf>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Descriptor width (0 for an empty set).
    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vectors.len();
        if self.identity_ids.len() != n || self.camera_ids.len() != n {
            return Err(Error::Shape(format!(
                "{n} vectors but {} ids and {} cameras",
                self.identity_ids.len(),
                self.camera_ids.len()
            )));
        }
        if !self.paths.is_empty() && self.paths.len() != n {
            return Err(Error::Shape(format!("{n} vectors but {} paths", self.paths.len())));
        }
        let d = self.dim();
        if self.vectors.iter().any(|v| v.len() != d) {
            return Err(Error::Shape("ragged embedding rows".into()));
        }
        if self.vectors.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Shape("embedding contains non-finite values".into()));
        }
        Ok(())
    }

    /// Writes `<json_path>` (metadata sidecar) and the little-endian f64
    /// matrix next to it with extension `.bin`.
    pub fn save(&self, json_path: &Path) -> Result<()> {
        self.validate()?;
        let bin_path = json_path.with_extension("bin");
        let mut bytes = Vec::with_capacity(self.len() * self.dim() * 8);
        for x in self.vectors.iter().flatten() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&bin_path, bytes).map_err(|e| Error::io(&bin_path, e))?;
        let sidecar = Sidecar {
            n: self.len(),
            d: self.dim(),
            feature_mode: self.feature_mode,
            ids: self.identity_ids.clone(),
            cams: self.camera_ids.clone(),
            dtype: "f64-le".into(),
            data_file: bin_path
                .file_name()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            paths: self.paths.clone(),
        };
        let json = serde_json::to_string_pretty(&sidecar)?;
        std::fs::write(json_path, json).map_err(|e| Error::io(json_path, e))
    }

    pub fn load(json_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(json_path).map_err(|e| Error::io(json_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.dtype != "f64-le" {
            return Err(Error::Shape(format!("unsupported embedding dtype {}", sidecar.dtype)));
        }
        let bin_path = json_path.with_file_name(&sidecar.data_file);
        let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        if bytes.len() != sidecar.n * sidecar.d * 8 {
            return Err(Error::Shape(format!(
                "{} holds {} bytes, expected {}x{} f64 values",
                bin_path.display(),
                bytes.len(),
                sidecar.n,
                sidecar.d
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let vectors = if sidecar.d == 0 {
            vec![Vec::new(); sidecar.n]
        } else {
            values.chunks(sidecar.d).map(<[f64]>::to_vec).collect()
        };
        let set = EmbeddingSet {
            vectors,
            identity_ids: sidecar.ids,
            camera_ids: sidecar.cams,
            feature_mode: sidecar.feature_mode,
            paths: sidecar.paths,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "D")]
    d: usize,
    feature_mode: FeatureMode,
    ids: Vec<i64>,
    cams: Vec<u32>,
    dtype: String,
    data_file: String,
    #[serde(default)]
    paths: Vec<PathBuf>,
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Per-image branch embeddings from which every feature mode is assembled.
#[derive(Debug, Clone)]
pub struct BranchFeatures {
    /// `[image][leaf][dim]`
    pub local: Vec<Vec<Vec<f64>>>,
    /// `[image][dim]`
    pub global: Vec<Vec<f64>>,
    pub identity_ids: Vec<i64>,
    pub camera_ids: Vec<u32>,
    pub paths: Vec<PathBuf>,
}

/// Per-image leaf vectors and global vectors.
type SplitRows = (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>);

impl BranchFeatures {
    fn from_outputs(outputs: &BranchOutputs) -> Result<SplitRows> {
        let rows = |t: &Tensor| -> Result<Vec<Vec<f64>>> { Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?) };
        let global = rows(&outputs.global_embedding)?;
        let per_leaf = outputs
            .local_embeddings
            .iter()
            .map(rows)
            .collect::<Result<Vec<_>>>()?;
        let local = (0..global.len())
            .map(|i| per_leaf.iter().map(|leaf| leaf[i].clone()).collect())
            .collect();
        Ok((local, global))
    }

    /// Assembles descriptors for `mode`.
    pub fn embeddings(&self, mode: FeatureMode, normalization: Normalization) -> EmbeddingSet {
        let vectors = self
            .local
            .iter()
            .zip(&self.global)
            .map(|(local, global)| {
                let blocks: Vec<&Vec<f64>> = match mode {
                    FeatureMode::LocalOnly => local.iter().collect(),
                    FeatureMode::GlobalOnly => vec![global],
                    FeatureMode::Joint => local.iter().chain(std::iter::once(global)).collect(),
                };
                let mut out = Vec::with_capacity(blocks.iter().map(|b| b.len()).sum());
                for block in blocks {
                    let start = out.len();
                    out.extend_from_slice(block);
                    if normalization == Normalization::BlockwiseL2 {
                        l2_normalize(&mut out[start..]);
                    }
                }
                if normalization == Normalization::BlockwiseL2 {
                    l2_normalize(&mut out);
                }
                out
            })
            .collect();
        EmbeddingSet {
            vectors,
            identity_ids: self.identity_ids.clone(),
            camera_ids: self.camera_ids.clone(),
            feature_mode: mode,
            paths: self.paths.clone(),
        }
    }
}

/// Runs the model in inference mode over a manifest (resize only, no flip).
pub fn extract_features(model: &TbnModel, manifest: &DatasetManifest, batch_size: usize) -> Result<BranchFeatures> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    let cfg = model.config().backbone.clone();
    let mut local = Vec::with_capacity(manifest.len());
    let mut global = Vec::with_capacity(manifest.len());
    for chunk in manifest.entries.chunks(batch_size) {
        let paths: Vec<&Path> = chunk.iter().map(|e| e.path.as_path()).collect();
        let pixels = load_images(&paths, cfg.input_height, cfg.input_width, model.dtype(), model.device())?;
        let outputs = model.forward(&pixels, false)?;
        let (l, g) = BranchFeatures::from_outputs(&outputs)?;
        local.extend(l);
        global.extend(g);
    }
    Ok(BranchFeatures {
        local,
        global,
        identity_ids: manifest.labels(),
        camera_ids: manifest.cameras(),
        paths: manifest.paths(),
    })
}

/// Extracts descriptors for one feature mode with block-wise L2 normalization.
pub fn extract_embeddings(
    model: &TbnModel,
    manifest: &DatasetManifest,
    feature_mode: FeatureMode,
    batch_size: usize,
) -> Result<EmbeddingSet> {
    Ok(extract_features(model, manifest, batch_size)?.embeddings(feature_mode, Normalization::BlockwiseL2))
}
