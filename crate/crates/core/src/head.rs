//! Tree-branch head: one global branch over the whole T0 plus a hierarchy of
//! horizontal partitions, each piece refined by its own bottleneck block,
//! ending in K leaf branches with independent reductions and classifiers.
//!
//! With the default `level_splits = [2, 3]`, T0 `(C, 24, 8)` becomes two
//! `(C, 12, 8)` pieces and then six `(C, 4, 8)` leaves.

use candle_core::{Module, ModuleT, Tensor, D};
use candle_nn::{batch_norm, BatchNorm, Conv2d, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{BottleneckBlock, BN_EPS};

/// Variable-name prefix of head parameters inside a model store.
pub const HEAD_PREFIX: &str = "head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Max,
    Avg,
}

impl Pooling {
    /// Reduces `(batch, C, h, w)` to `(batch, C)`.
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        let flat = x.flatten_from(2)?;
        Ok(match self {
            Pooling::Max => {
                // gather routes the gradient to a single maximiser even when values tie
                let idx = flat.argmax_keepdim(D::Minus1)?;
                flat.contiguous()?.gather(&idx, D::Minus1)?.squeeze(D::Minus1)?
            }
            Pooling::Avg => flat.mean(D::Minus1)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionTreeConfig {
    /// Pieces per node at each level, top-down along the height axis.
    pub level_splits: Vec<usize>,
    pub leaf_embedding_dim: usize,
    /// Must equal the backbone channel count: the global descriptor is the
    /// pooled T0 itself.
    pub global_embedding_dim: usize,
    pub num_identities: usize,
    /// Bottleneck `mid_channels = channels / bottleneck_reduction`.
    pub bottleneck_reduction: usize,
    pub leaf_pooling: Pooling,
    pub global_pooling: Pooling,
}

impl Default for PartitionTreeConfig {
    fn default() -> Self {
        Self {
            level_splits: vec![2, 3],
            leaf_embedding_dim: 256,
            global_embedding_dim: 2048,
            num_identities: 751,
            bottleneck_reduction: 4,
            leaf_pooling: Pooling::Max,
            global_pooling: Pooling::Avg,
        }
    }
}

impl PartitionTreeConfig {
    /// Number of leaf branches.
    pub fn num_leaves(&self) -> usize {
        self.level_splits.iter().product()
    }

    pub fn local_dim(&self) -> usize {
        self.num_leaves() * self.leaf_embedding_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.local_dim() + self.global_embedding_dim
    }

    /// Checks the config against a T0 of shape `(channels, height, width)`.
    pub fn validate(&self, t0: (usize, usize, usize)) -> Result<()> {
        let (channels, height, _) = t0;
        if self.level_splits.is_empty() || self.level_splits.contains(&0) {
            return Err(Error::Config(format!(
                "level_splits must be non-empty positive counts, got {:?}",
                self.level_splits
            )));
        }
        if height % self.num_leaves() != 0 {
            return Err(Error::Config(format!(
                "T0 height {height} is not divisible by {} leaves",
                self.num_leaves()
            )));
        }
        if self.num_identities < 2 {
            return Err(Error::Config("num_identities must be at least 2".into()));
        }
        if self.leaf_embedding_dim == 0 {
            return Err(Error::Config("leaf_embedding_dim must be positive".into()));
        }
        if self.global_embedding_dim != channels {
            return Err(Error::Config(format!(
                "global_embedding_dim {} must equal backbone channels {channels}",
                self.global_embedding_dim
            )));
        }
        if self.bottleneck_reduction == 0 || channels / self.bottleneck_reduction == 0 {
            return Err(Error::Config(format!(
                "bottleneck_reduction {} leaves no mid channels for {channels} inputs",
                self.bottleneck_reduction
            )));
        }
        Ok(())
    }
}

/// Splits `(…, C, H, W)` into `pieces` equal slices along H, top to bottom.
pub fn partition(x: &Tensor, pieces: usize) -> Result<Vec<Tensor>> {
    let rank = x.rank();
    if rank < 3 {
        return Err(Error::Shape(format!(
            "partition needs a (.., C, H, W) tensor, got {:?}",
            x.dims()
        )));
    }
    let axis = rank - 2;
    let height = x.dim(axis)?;
    if pieces == 0 || height % pieces != 0 {
        return Err(Error::Partition { height, pieces });
    }
    let step = height / pieces;
    (0..pieces)
        .map(|i| Ok(x.narrow(axis, i * step, step)?))
        .collect()
}

/// Head outputs for a batch. Logits are pre-softmax.
#[derive(Debug, Clone)]
pub struct BranchOutputs {
    /// `(batch, global_embedding_dim)`
    pub global_embedding: Tensor,
    /// K tensors of `(batch, leaf_embedding_dim)`, in leaf order.
    pub local_embeddings: Vec<Tensor>,
    /// `(batch, M)`
    pub global_logits: Tensor,
    /// K tensors of `(batch, M)`, in leaf order.
    pub local_logits: Vec<Tensor>,
}

impl BranchOutputs {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.global_logits.dim(0)?)
    }

    pub fn num_leaves(&self) -> usize {
        self.local_logits.len()
    }

    /// Copies with every tensor cut from the autograd graph.
    pub fn detach(&self) -> Self {
        Self {
            global_embedding: self.global_embedding.detach(),
            local_embeddings: self.local_embeddings.iter().map(Tensor::detach).collect(),
            global_logits: self.global_logits.detach(),
            local_logits: self.local_logits.iter().map(Tensor::detach).collect(),
        }
    }
}

/// 1x1 reduction with batch norm and ReLU, then an identity classifier.
#[derive(Debug, Clone)]
struct LeafBranch {
    reduce: Conv2d,
    bn: BatchNorm,
    classifier: Linear,
}

impl LeafBranch {
    fn forward(&self, pooled: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let x = pooled.unsqueeze(2)?.unsqueeze(3)?;
        let x = self.reduce.forward(&x)?;
        let emb = self.bn.forward_t(&x, train)?.relu()?.flatten_from(1)?;
        let logits = self.classifier.forward(&emb)?;
        Ok((emb, logits))
    }
}

#[derive(Debug, Clone)]
pub struct TbnHead {
    config: PartitionTreeConfig,
    channels: usize,
    /// One bottleneck per node, level by level.
    levels: Vec<Vec<BottleneckBlock>>,
    leaves: Vec<LeafBranch>,
    global_classifier: Linear,
}

impl TbnHead {
    /// Builds the head for a T0 of shape `(channels, height, width)` under the
    /// `head.` prefix.
    pub fn new(config: &PartitionTreeConfig, t0: (usize, usize, usize), vb: VarBuilder) -> Result<Self> {
        config.validate(t0)?;
        let vb = vb.pp(HEAD_PREFIX);
        let channels = t0.0;
        let mid = channels / config.bottleneck_reduction;
        let mut levels = Vec::with_capacity(config.level_splits.len());
        let mut nodes = 1;
        for (l, split) in config.level_splits.iter().enumerate() {
            nodes *= split;
            let vb_level = vb.pp(format!("level{l}"));
            let blocks = (0..nodes)
                .map(|i| BottleneckBlock::new(channels, mid, channels, 1, vb_level.pp(i)))
                .collect::<Result<Vec<_>>>()?;
            levels.push(blocks);
        }
        let leaves = (0..config.num_leaves())
            .map(|k| -> Result<LeafBranch> {
                let vb_leaf = vb.pp(format!("leaf{k}"));
                Ok(LeafBranch {
                    reduce: crate::layers::conv_no_bias(
                        channels,
                        config.leaf_embedding_dim,
                        1,
                        1,
                        0,
                        vb_leaf.pp("reduce"),
                    )?,
                    bn: batch_norm(config.leaf_embedding_dim, BN_EPS, vb_leaf.pp("bn"))?,
                    classifier: candle_nn::linear(
                        config.leaf_embedding_dim,
                        config.num_identities,
                        vb_leaf.pp("classifier"),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global_classifier =
            candle_nn::linear(channels, config.num_identities, vb.pp("global_classifier"))?;
        Ok(Self {
            config: config.clone(),
            channels,
            levels,
            leaves,
            global_classifier,
        })
    }

    pub fn config(&self) -> &PartitionTreeConfig {
        &self.config
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// The bottleneck applied to node `index` of partition level `level`.
    pub fn bottleneck(&self, level: usize, index: usize) -> Option<&BottleneckBlock> {
        self.levels.get(level).and_then(|l| l.get(index))
    }

    fn check_input(&self, t0: &Tensor) -> Result<()> {
        let dims = t0.dims();
        if dims.len() != 4 || dims[1] != self.channels || !dims[2].is_multiple_of(self.num_leaves()) {
            return Err(Error::Shape(format!(
                "head expects (batch, {}, h, w) with h divisible by {}, got {dims:?}",
                self.channels,
                self.num_leaves()
            )));
        }
        Ok(())
    }

    /// Runs the partition/bottleneck hierarchy and returns the K leaf
    /// tensors before pooling.
    pub fn leaf_tensors(&self, t0: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        self.check_input(t0)?;
        let mut nodes = vec![t0.clone()];
        for (split, blocks) in self.config.level_splits.iter().zip(&self.levels) {
            let mut next = Vec::with_capacity(blocks.len());
            for node in &nodes {
                for piece in partition(node, *split)? {
                    let block = &blocks[next.len()];
                    next.push(block.forward(&piece, train)?);
                }
            }
            nodes = next;
        }
        Ok(nodes)
    }

    /// Pools, reduces and classifies one leaf tensor with branch `k`.
    /// Returns `(embedding, logits)`.
    pub fn leaf_forward(&self, k: usize, leaf: &Tensor, train: bool) -> Result<(Tensor, Tensor)> {
        let branch = self
            .leaves
            .get(k)
            .ok_or_else(|| Error::Shape(format!("leaf index {k} out of range")))?;
        let pooled = self.config.leaf_pooling.apply(leaf)?;
        branch.forward(&pooled, train)
    }

    pub fn forward(&self, t0: &Tensor, train: bool) -> Result<BranchOutputs> {
        let leaves = self.leaf_tensors(t0, train)?;
        let mut local_embeddings = Vec::with_capacity(leaves.len());
        let mut local_logits = Vec::with_capacity(leaves.len());
        for (k, leaf) in leaves.iter().enumerate() {
            let (emb, logits) = self.leaf_forward(k, leaf, train)?;
            local_embeddings.push(emb);
            local_logits.push(logits);
        }
        let global_embedding = self.config.global_pooling.apply(t0)?;
        let global_logits = self.global_classifier.forward(&global_embedding)?;
        Ok(BranchOutputs {
            global_embedding,
            local_embeddings,
            global_logits,
            local_logits,
        })
    }
}

/// Runs the head on a T0 batch.
pub fn head_forward(head: &TbnHead, t0_batch: &Tensor, train: bool) -> Result<BranchOutputs> {
    head.forward(t0_batch, train)
}
