use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::BACKBONE_PREFIX;
use crate::error::{Error, Result};
use crate::head::HEAD_PREFIX;
use crate::model::TbnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Backbone layers, which may start from pretrained weights.
    Pretrained,
    /// Head layers and classifiers, always freshly initialized.
    New,
}

impl ParamGroup {
    pub fn of(name: &str) -> Option<ParamGroup> {
        if TbnModel::is_backbone_param(name) {
            Some(ParamGroup::Pretrained)
        } else if name
            .strip_prefix(HEAD_PREFIX)
            .is_some_and(|rest| rest.starts_with('.'))
        {
            Some(ParamGroup::New)
        } else {
            None
        }
    }
}

/// Splits trainable variables into the two rate groups, failing on any
/// variable that belongs to neither.
pub fn param_groups(vars: &BTreeMap<String, Var>) -> Result<BTreeMap<ParamGroup, Vec<String>>> {
    let mut groups: BTreeMap<ParamGroup, Vec<String>> = BTreeMap::new();
    for name in vars.keys() {
        let group = ParamGroup::of(name).ok_or_else(|| {
            Error::Config(format!(
                "parameter `{name}` is outside `{BACKBONE_PREFIX}.` and `{HEAD_PREFIX}.`"
            ))
        })?;
        groups.entry(group).or_default().push(name.clone());
    }
    Ok(groups)
}

/// Learning rate per group for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRates {
    pub pretrained: f64,
    pub new: f64,
}

impl GroupRates {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Pretrained => self.pretrained,
            ParamGroup::New => self.new,
        }
    }
}

/// Stochastic gradient descent with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    vars: BTreeMap<String, (Var, ParamGroup)>,
    momentum: f64,
    weight_decay: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(model: &TbnModel, momentum: f64, weight_decay: f64) -> Result<Self> {
        let trainable = model.store().trainable_vars();
        let groups = param_groups(&trainable)?;
        let mut vars = BTreeMap::new();
        for (group, names) in groups {
            for name in names {
                vars.insert(name.clone(), (trainable[&name].clone(), group));
            }
        }
        Ok(Self {
            vars,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    /// Restores momentum buffers; every name must be a managed variable.
    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) -> Result<()> {
        for (name, v) in &velocity {
            let (var, _) = self
                .vars
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("momentum for unknown parameter `{name}`")))?;
            if var.dims() != v.dims() {
                return Err(Error::Checkpoint(format!(
                    "momentum for `{name}` has shape {:?}, parameter has {:?}",
                    v.dims(),
                    var.dims()
                )));
            }
        }
        self.velocity = velocity
            .into_iter()
            .map(|(name, v)| {
                let dtype = self.vars[&name].0.dtype();
                Ok((name, v.to_dtype(dtype)?))
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    /// Applies one update. Variables without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, rates: GroupRates) -> Result<()> {
        for (name, (var, group)) in &self.vars {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let w = var.as_tensor().detach();
            let mut g = grad.detach();
            if self.weight_decay != 0.0 {
                g = (g + (&w * self.weight_decay)?)?;
            }
            let v = match self.velocity.get(name) {
                Some(prev) if self.momentum != 0.0 => ((prev * self.momentum)? + g)?,
                _ => g,
            };
            var.set(&(w - (&v * rates.get(*group))?)?)?;
            self.velocity.insert(name.clone(), v);
        }
        Ok(())
    }
}
