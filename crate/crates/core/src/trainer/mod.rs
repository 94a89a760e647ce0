//! Single-model and mutual training loops, learning-rate schedule, and
//! checkpoints.

mod checkpoint;
mod sgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, EpochSummary};
pub use sgd::{param_groups, GroupRates, ParamGroup, Sgd};

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, BatchConfig, DatasetManifest};
use crate::error::{Error, Result};
use crate::head::BranchOutputs;
use crate::losses::{mutual_kl_term, mutual_total_loss, supervised_loss, Loss, LossConfig, LossReport, ModelRole};
use crate::model::TbnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Single,
    Mutual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutualUpdate {
    /// Update A against B's current outputs, re-run A, then update B.
    #[default]
    Alternating,
    /// Both models step from the same pair of forward passes.
    Simultaneous,
}

/// Which group receives which base rate in mutual mode when the rates are
/// not set explicitly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MutualLrAssignment {
    /// 0.02 for the backbone, 0.002 for the head.
    #[default]
    AsWritten,
    /// 0.002 for the backbone, 0.02 for the head, matching the single-model
    /// ordering.
    Swapped,
}

/// Optimization settings. Unset fields take the defaults of the selected
/// mode: 60 epochs, rates 0.01/0.1, decay at 40 for single; 300 epochs,
/// rates 0.02/0.002, decay at 150 for mutual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr_pretrained: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr_new: Option<f64>,
    pub lr_decay_factor: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decay_epoch: Option<usize>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Initialization seed of the (first) model.
    pub seed: u64,
    /// Initialization seed of the second model; `seed + 1` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub partner_seed: Option<u64>,
    /// Shuffling and flip seed; `seed` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_seed: Option<u64>,
    pub horizontal_flip: bool,
    pub mutual_update: MutualUpdate,
    pub mutual_lr_assignment: MutualLrAssignment,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Single,
            epochs: None,
            base_lr_pretrained: None,
            base_lr_new: None,
            lr_decay_factor: 0.1,
            decay_epoch: None,
            batch_size: 64,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            partner_seed: None,
            data_seed: None,
            horizontal_flip: true,
            mutual_update: MutualUpdate::Alternating,
            mutual_lr_assignment: MutualLrAssignment::AsWritten,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            TrainMode::Single => 60,
            TrainMode::Mutual => 300,
        })
    }

    pub fn decay_epoch(&self) -> usize {
        self.decay_epoch.unwrap_or(match self.mode {
            TrainMode::Single => 40,
            TrainMode::Mutual => 150,
        })
    }

    fn default_rates(&self) -> (f64, f64) {
        match (self.mode, self.mutual_lr_assignment) {
            (TrainMode::Single, _) => (0.01, 0.1),
            (TrainMode::Mutual, MutualLrAssignment::AsWritten) => (0.02, 0.002),
            (TrainMode::Mutual, MutualLrAssignment::Swapped) => (0.002, 0.02),
        }
    }

    pub fn base_lr_pretrained(&self) -> f64 {
        self.base_lr_pretrained.unwrap_or(self.default_rates().0)
    }

    pub fn base_lr_new(&self) -> f64 {
        self.base_lr_new.unwrap_or(self.default_rates().1)
    }

    pub fn partner_seed(&self) -> u64 {
        self.partner_seed.unwrap_or(self.seed.wrapping_add(1))
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    /// The same settings with every mode-dependent default filled in.
    pub fn resolved(&self) -> Self {
        Self {
            epochs: Some(self.epochs()),
            base_lr_pretrained: Some(self.base_lr_pretrained()),
            base_lr_new: Some(self.base_lr_new()),
            decay_epoch: Some(self.decay_epoch()),
            partner_seed: Some(self.partner_seed()),
            data_seed: Some(self.data_seed()),
            ..self.clone()
        }
    }

    /// A decay epoch at or past `epochs` is accepted and means the run ends
    /// before the decay.
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("base_lr_pretrained", self.base_lr_pretrained()),
            ("base_lr_new", self.base_lr_new()),
            ("lr_decay_factor", self.lr_decay_factor),
        ];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("trainer.{name} must be > 0, got {v}")));
            }
        }
        if self.decay_epoch() == 0 {
            return Err(Error::Config("trainer.decay_epoch must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "trainer.batch_size must be >= 2 for batch statistics, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("trainer.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "trainer.weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Step-decayed rates for a 0-based epoch index.
    pub fn rates(&self, epoch: usize) -> GroupRates {
        let decay = self.decay_epoch();
        GroupRates {
            pretrained: learning_rate(self.base_lr_pretrained(), self.lr_decay_factor, decay, epoch),
            new: learning_rate(self.base_lr_new(), self.lr_decay_factor, decay, epoch),
        }
    }
}

/// `base` before `decay_epoch`, `base · factor` from it on (0-based epochs).
pub fn learning_rate(base: f64, factor: f64, decay_epoch: usize, epoch: usize) -> f64 {
    if epoch >= decay_epoch {
        base * factor
    } else {
        base
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// `"a"` or `"b"` in mutual runs.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub model: Option<String>,
    pub lr: GroupRates,
    #[serde(flatten)]
    pub loss: LossReport,
}

/// Collects step records in memory and optionally appends them to a
/// JSON-lines file.
#[derive(Debug, Default)]
pub struct TrainLog {
    records: Vec<StepRecord>,
    writer: Option<BufWriter<File>>,
    progress: bool,
}

impl TrainLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Logs to `path`, appending to an existing file when `append` is set
    /// and truncating it otherwise.
    pub fn to_file(path: &Path, append: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            writer: Some(BufWriter::new(file)),
            ..Self::default()
        })
    }

    /// Print a one-line summary per epoch to stderr.
    pub fn with_progress(mut self, progress: bool) -> Self {
        self.progress = progress;
        self
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
        }
        self.records.push(record);
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush().map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    fn epoch_done(&mut self, tag: Option<&str>, summary: &EpochSummary, rates: GroupRates) -> Result<()> {
        if self.progress {
            let tag = tag.map(|t| format!(" [{t}]")).unwrap_or_default();
            let kl = summary.kl.map(|k| format!(" kl {k:.4}")).unwrap_or_default();
            eprintln!(
                "epoch {}{tag}: loss {:.4} local {:.4} global {:.4}{kl} lr {}/{}",
                summary.epoch, summary.total, summary.local_ce, summary.global_ce, rates.pretrained, rates.new
            );
        }
        self.flush()
    }
}

#[derive(Debug, Default)]
struct EpochAccumulator {
    total: f64,
    local_ce: f64,
    global_ce: f64,
    kl: Option<f64>,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, r: &LossReport) {
        self.total += r.total;
        self.local_ce += r.local_ce;
        self.global_ce += r.global_ce;
        if let Some(k) = r.kl {
            *self.kl.get_or_insert(0.0) += k;
        }
        self.steps += 1;
    }

    fn summary(&self, epoch: usize) -> EpochSummary {
        let n = self.steps.max(1) as f64;
        EpochSummary {
            epoch,
            total: self.total / n,
            local_ce: self.local_ce / n,
            global_ce: self.global_ce / n,
            kl: self.kl.map(|k| k / n),
        }
    }
}

fn check_inputs(model: &TbnModel, data: &DatasetManifest, config: &TrainConfig, loss: &LossConfig) -> Result<()> {
    config.validate()?;
    loss.validate()?;
    let head = &model.config().head;
    if head.num_identities != data.num_identities {
        return Err(Error::Config(format!(
            "head has {} identities, training data has {}",
            head.num_identities, data.num_identities
        )));
    }
    if loss.num_identities != head.num_identities || loss.num_leaves != head.num_leaves() {
        return Err(Error::Config(format!(
            "loss expects {} identities and {} leaves, head has {} and {}",
            loss.num_identities,
            loss.num_leaves,
            head.num_identities,
            head.num_leaves()
        )));
    }
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if data.len() % config.batch_size == 1 {
        return Err(Error::Config(format!(
            "{} training images with batch size {} leave a single-image batch",
            data.len(),
            config.batch_size
        )));
    }
    Ok(())
}

fn batch_config(model: &TbnModel, config: &TrainConfig) -> BatchConfig {
    let b = &model.config().backbone;
    BatchConfig {
        batch_size: config.batch_size,
        height: b.input_height,
        width: b.input_width,
        seed: config.data_seed(),
        flip: config.horizontal_flip,
    }
}

fn check_finite(report: &LossReport, epoch: usize, step: usize) -> Result<()> {
    match report.first_non_finite() {
        Some(term) => Err(Error::NonFinite { term, epoch, step }),
        None => Ok(()),
    }
}

struct Resumed {
    start_epoch: usize,
    history: Vec<EpochSummary>,
}

fn resume_into(model: &TbnModel, sgd: &mut Sgd, ckpt: Option<&Checkpoint>, epochs: usize) -> Result<Resumed> {
    let Some(ckpt) = ckpt else {
        return Ok(Resumed {
            start_epoch: 0,
            history: Vec::new(),
        });
    };
    if ckpt.epoch > epochs {
        return Err(Error::Config(format!(
            "checkpoint is at epoch {} but the run has only {epochs} epochs",
            ckpt.epoch
        )));
    }
    ckpt.restore_into(model)?;
    sgd.set_velocity(ckpt.momentum.clone())?;
    Ok(Resumed {
        start_epoch: ckpt.epoch,
        history: ckpt.loss_history.clone(),
    })
}

/// Trains one model on `data` with local plus global cross-entropy.
///
/// Batches depend only on `(data_seed, epoch)`, so resuming from a
/// checkpoint continues the same trajectory.
pub fn train_single(
    model: &TbnModel,
    data: &DatasetManifest,
    config: &TrainConfig,
    loss_config: &LossConfig,
    log: &mut TrainLog,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    check_inputs(model, data, config, loss_config)?;
    let mut sgd = Sgd::new(model, config.momentum, config.weight_decay)?;
    let epochs = config.epochs();
    let Resumed { start_epoch, mut history } = resume_into(model, &mut sgd, resume, epochs)?;
    let batches = batch_config(model, config);
    let per_epoch = data.len().div_ceil(config.batch_size);

    for epoch in start_epoch..epochs {
        let rates = config.rates(epoch);
        let mut acc = EpochAccumulator::default();
        for (i, batch) in make_batches(data, &batches, epoch, model.dtype(), model.device())?.enumerate() {
            let batch = batch?;
            let step = epoch * per_epoch + i;
            let out = model.forward(&batch.pixels, true)?;
            let loss = supervised_loss(&out, &batch.labels)?;
            check_finite(&loss.report, epoch, step)?;
            sgd.step(&loss.total.backward()?, rates)?;
            acc.add(&loss.report);
            log.push(StepRecord {
                epoch,
                step,
                model: None,
                lr: rates,
                loss: loss.report,
            })?;
        }
        let summary = acc.summary(epoch);
        log.epoch_done(None, &summary, rates)?;
        history.push(summary);
    }
    log.flush()?;
    Checkpoint::capture(model, sgd.velocity(), epochs, history)
}

fn mutual_loss(
    own: &BranchOutputs,
    partner: &BranchOutputs,
    labels: &[u32],
    config: &LossConfig,
    role: ModelRole,
) -> Result<Loss> {
    if config.kl_weight == 0.0 {
        let mut loss = supervised_loss(own, labels)?;
        let kl = mutual_kl_term(&own.local_logits, &partner.local_logits, config, role)?;
        loss.report.kl = Some(kl.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?);
        return Ok(loss);
    }
    mutual_total_loss(own, &partner.detach(), labels, config, role)
}

/// Co-trains two structurally identical models on the same batches, each
/// adding a KL term toward the other's local-branch predictions.
pub fn train_mutual(
    model_a: &TbnModel,
    model_b: &TbnModel,
    data: &DatasetManifest,
    config: &TrainConfig,
    loss_config: &LossConfig,
    log: &mut TrainLog,
    resume: Option<(&Checkpoint, &Checkpoint)>,
) -> Result<(Checkpoint, Checkpoint)> {
    if model_a.config().architecture_hash() != model_b.config().architecture_hash() {
        return Err(Error::Config("mutual training needs two models of the same architecture".into()));
    }
    check_inputs(model_a, data, config, loss_config)?;
    let mut sgd_a = Sgd::new(model_a, config.momentum, config.weight_decay)?;
    let mut sgd_b = Sgd::new(model_b, config.momentum, config.weight_decay)?;
    let epochs = config.epochs();
    let (ra, rb) = match resume {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };
    let Resumed {
        start_epoch,
        history: mut history_a,
    } = resume_into(model_a, &mut sgd_a, ra, epochs)?;
    let Resumed {
        start_epoch: start_b,
        history: mut history_b,
    } = resume_into(model_b, &mut sgd_b, rb, epochs)?;
    if start_epoch != start_b {
        return Err(Error::Checkpoint(format!(
            "mutual checkpoints are at epochs {start_epoch} and {start_b}"
        )));
    }
    let batches = batch_config(model_a, config);
    let per_epoch = data.len().div_ceil(config.batch_size);

    for epoch in start_epoch..epochs {
        let rates = config.rates(epoch);
        let mut acc_a = EpochAccumulator::default();
        let mut acc_b = EpochAccumulator::default();
        for (i, batch) in make_batches(data, &batches, epoch, model_a.dtype(), model_a.device())?.enumerate() {
            let batch = batch?;
            let step = epoch * per_epoch + i;
            let out_a = model_a.forward(&batch.pixels, true)?;
            let out_b = model_b.forward(&batch.pixels, true)?;
            let loss_a = mutual_loss(&out_a, &out_b, &batch.labels, loss_config, ModelRole::First)?;
            check_finite(&loss_a.report, epoch, step)?;
            let (loss_b, grads_a) = match config.mutual_update {
                MutualUpdate::Alternating => {
                    sgd_a.step(&loss_a.total.backward()?, rates)?;
                    let partner = if loss_config.kl_weight == 0.0 {
                        out_a.detach()
                    } else {
                        model_a.forward(&batch.pixels, true)?.detach()
                    };
                    (
                        mutual_loss(&out_b, &partner, &batch.labels, loss_config, ModelRole::Second)?,
                        None,
                    )
                }
                MutualUpdate::Simultaneous => {
                    let grads = loss_a.total.backward()?;
                    (
                        mutual_loss(&out_b, &out_a, &batch.labels, loss_config, ModelRole::Second)?,
                        Some(grads),
                    )
                }
            };
            check_finite(&loss_b.report, epoch, step)?;
            let grads_b = loss_b.total.backward()?;
            if let Some(g) = grads_a {
                sgd_a.step(&g, rates)?;
            }
            sgd_b.step(&grads_b, rates)?;
            acc_a.add(&loss_a.report);
            acc_b.add(&loss_b.report);
            for (tag, report) in [("a", loss_a.report), ("b", loss_b.report)] {
                log.push(StepRecord {
                    epoch,
                    step,
                    model: Some(tag.into()),
                    lr: rates,
                    loss: report,
                })?;
            }
        }
        let (sa, sb) = (acc_a.summary(epoch), acc_b.summary(epoch));
        log.epoch_done(Some("a"), &sa, rates)?;
        log.epoch_done(Some("b"), &sb, rates)?;
        history_a.push(sa);
        history_b.push(sb);
    }
    log.flush()?;
    Ok((
        Checkpoint::capture(model_a, sgd_a.velocity(), epochs, history_a)?,
        Checkpoint::capture(model_b, sgd_b.velocity(), epochs, history_b)?,
    ))
}
