//! Local/global identity cross-entropy and the mutual-learning KL term.
//!
//! All softmax-based quantities are computed in log space after subtracting
//! the row maximum. "Mean over the batch" uses the mini-batch size N.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::BranchOutputs;

/// Which distribution sits first in the KL term a model minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// Both models minimize `KL(p_first ‖ p_second)`, where the first model
    /// of the pair supplies `p`.
    AsWritten,
    /// Each model minimizes `KL(p_partner ‖ p_own)`.
    DmlSymmetric,
}

/// Domain of the softmax compared by the mutual term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDomain {
    /// One softmax over the K·M concatenated local logits.
    Concatenated,
    /// K per-leaf softmaxes, KL summed over leaves.
    PerPart,
}

/// Position of a model within a mutual-learning pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelRole {
    First,
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub num_identities: usize,
    pub num_leaves: usize,
    pub kl_direction: KlDirection,
    pub kl_domain: KlDomain,
    pub kl_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            num_identities: 751,
            num_leaves: 6,
            kl_direction: KlDirection::DmlSymmetric,
            kl_domain: KlDomain::Concatenated,
            kl_weight: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config("loss num_identities must be >= 2".into()));
        }
        if self.num_leaves < 1 {
            return Err(Error::Config("loss num_leaves must be >= 1".into()));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::Config(format!(
                "kl_weight must be a finite value >= 0, got {}",
                self.kl_weight
            )));
        }
        Ok(())
    }
}

/// Scalar loss values for logging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub local_ce: f64,
    pub global_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub kl: Option<f64>,
    pub per_part_ce: Vec<f64>,
}

impl LossReport {
    /// Name of the first non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.local_ce.is_finite() {
            if let Some(k) = self.per_part_ce.iter().position(|v| !v.is_finite()) {
                return Some(format!("local_ce[part {k}]"));
            }
            return Some("local_ce".into());
        }
        if !self.global_ce.is_finite() {
            return Some("global_ce".into());
        }
        if self.kl.is_some_and(|v| !v.is_finite()) {
            return Some("kl".into());
        }
        if !self.total.is_finite() {
            return Some("total".into());
        }
        None
    }
}

/// A differentiable scalar loss together with its report.
#[derive(Debug, Clone)]
pub struct Loss {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

fn check_labels(logits: &Tensor, labels: &[u32]) -> Result<()> {
    let dims = logits.dims();
    if dims.len() != 2 {
        return Err(Error::Shape(format!("logits must be (batch, M), got {dims:?}")));
    }
    if dims[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits have {} rows but there are {} labels",
            dims[0],
            labels.len()
        )));
    }
    if dims[0] == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= dims[1]) {
        return Err(Error::Label {
            label: bad as usize,
            num_identities: dims[1],
        });
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    check_labels(logits, labels)?;
    let idx = Tensor::new(labels, logits.device())?.unsqueeze(1)?;
    let picked = log_softmax(logits)?.gather(&idx, 1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Sum over the K parts of each part's batch-mean cross-entropy.
///
/// The per-part term is the standard cross-entropy of part k's softmax at the
/// true label; the returned vector holds the K per-part values.
pub fn local_ce_loss(local_logits: &[Tensor], labels: &[u32]) -> Result<(Tensor, Vec<Tensor>)> {
    let Some(first) = local_logits.first() else {
        return Err(Error::Shape("no local logits".into()));
    };
    let m = first.dim(D::Minus1)?;
    let per_part = local_logits
        .iter()
        .map(|l| {
            if l.dim(D::Minus1)? != m {
                return Err(Error::Shape("local logit blocks differ in width".into()));
            }
            cross_entropy(l, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    let total = Tensor::stack(&per_part, 0)?.sum_all()?;
    Ok((total, per_part))
}

pub fn global_ce_loss(global_logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    cross_entropy(global_logits, labels)
}

/// `local_ce + global_ce`.
pub fn supervised_loss(outputs: &BranchOutputs, labels: &[u32]) -> Result<Loss> {
    let (local, per_part) = local_ce_loss(&outputs.local_logits, labels)?;
    let global = global_ce_loss(&outputs.global_logits, labels)?;
    let total = (&local + &global)?;
    let report = LossReport {
        total: scalar(&total)?,
        local_ce: scalar(&local)?,
        global_ce: scalar(&global)?,
        kl: None,
        per_part_ce: per_part.iter().map(scalar).collect::<Result<_>>()?,
    };
    Ok(Loss { total, report })
}

/// Row i of the result is `[f_i^1, …, f_i^K]`.
pub fn concat_local_logits(local_logits: &[Tensor]) -> Result<Tensor> {
    let Some(first) = local_logits.first() else {
        return Err(Error::Shape("no local logits".into()));
    };
    if local_logits.iter().any(|l| l.dims() != first.dims() || l.rank() != 2) {
        return Err(Error::Shape(format!(
            "local logit blocks must share one (batch, M) shape, got {:?}",
            local_logits.iter().map(|l| l.dims().to_vec()).collect::<Vec<_>>()
        )));
    }
    Ok(Tensor::cat(local_logits, 1)?)
}

/// `(1/N) Σ_i KL(softmax(p_i) ‖ softmax(q_i))` for `(batch, C)` logits.
///
/// Terms where `p` underflows to zero contribute zero.
pub fn kl_divergence(logits_p: &Tensor, logits_q: &Tensor) -> Result<Tensor> {
    if logits_p.dims() != logits_q.dims() || logits_p.rank() != 2 {
        return Err(Error::Shape(format!(
            "KL needs two equal (batch, C) shapes, got {:?} and {:?}",
            logits_p.dims(),
            logits_q.dims()
        )));
    }
    let log_p = log_softmax(logits_p)?;
    let log_q = log_softmax(logits_q)?;
    let per_row = (log_p.exp()? * (&log_p - &log_q)?)?.sum(D::Minus1)?;
    Ok(per_row.mean_all()?)
}

/// KL between the softmaxes over two models' concatenated local logits.
pub fn mutual_kl_loss(logits_p: &Tensor, logits_q: &Tensor) -> Result<Tensor> {
    kl_divergence(logits_p, logits_q)
}

/// The mutual term a model minimizes given its own and its partner's local
/// logits. The partner side is detached.
pub fn mutual_kl_term(
    own_local: &[Tensor],
    partner_local: &[Tensor],
    config: &LossConfig,
    role: ModelRole,
) -> Result<Tensor> {
    if own_local.len() != partner_local.len() {
        return Err(Error::Shape(format!(
            "models have {} and {} leaves",
            own_local.len(),
            partner_local.len()
        )));
    }
    let own_first = match config.kl_direction {
        KlDirection::DmlSymmetric => false,
        KlDirection::AsWritten => role == ModelRole::First,
    };
    let pair = |own: &Tensor, partner: &Tensor| {
        let partner = partner.detach();
        if own_first {
            kl_divergence(own, &partner)
        } else {
            kl_divergence(&partner, own)
        }
    };
    match config.kl_domain {
        KlDomain::Concatenated => pair(
            &concat_local_logits(own_local)?,
            &concat_local_logits(partner_local)?,
        ),
        KlDomain::PerPart => {
            let parts = own_local
                .iter()
                .zip(partner_local)
                .map(|(o, p)| pair(o, p))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&parts, 0)?.sum_all()?)
        }
    }
}

/// `supervised_loss(own) + kl_weight · KL`, with the partner's logits detached.
pub fn mutual_total_loss(
    own: &BranchOutputs,
    partner: &BranchOutputs,
    labels: &[u32],
    config: &LossConfig,
    role: ModelRole,
) -> Result<Loss> {
    let supervised = supervised_loss(own, labels)?;
    let kl = mutual_kl_term(&own.local_logits, &partner.local_logits, config, role)?;
    let total = (&supervised.total + (&kl * config.kl_weight)?)?;
    let mut report = supervised.report;
    report.kl = Some(scalar(&kl)?);
    report.total = scalar(&total)?;
    Ok(Loss { total, report })
}
