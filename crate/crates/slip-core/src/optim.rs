//! Optimization utilities: Adam with per-group learning rates, the
//! warmup/decay schedule, and early stopping.

use crate::encoders::Modality;
use crate::error::{Result, SlipError};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

/// Learning-rate group of one parameter tensor.
///
/// Encoder tensors carry their stack depth (0 = closest to the input);
/// everything structural shares one group, and the temperature follows the
/// encoder base rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder { modality: Modality, depth: usize },
    Graph,
    Fusion,
    Classifier,
    Temperature,
}

/// Settings for [`assign_learning_rates`].
#[derive(Debug, Clone, PartialEq)]
pub struct LrConfig {
    /// Rate of encoder depth 0 (and the temperature).
    pub base_lr: f64,
    /// Per-depth decay factor: depth i trains at `base_lr / layer_decay^i`,
    /// so deeper (later) tensors train faster when the factor is below 1.
    pub layer_decay: f64,
    /// Rate of structural, fusion, and classifier tensors.
    pub graph_lr: f64,
    /// When false, every encoder depth uses `base_lr` unchanged.
    pub discriminative: bool,
}

impl LrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 || self.graph_lr <= 0.0 {
            return Err(SlipError::InvalidInput(
                "learning rates must be positive".into(),
            ));
        }
        if self.layer_decay <= 0.0 {
            return Err(SlipError::InvalidInput(
                "layer decay factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Map each group to its base learning rate (before scheduling).
pub fn assign_learning_rates(groups: &[ParamGroup], cfg: &LrConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    Ok(groups
        .iter()
        .map(|g| match g {
            ParamGroup::Encoder { depth, .. } => {
                if cfg.discriminative {
                    cfg.base_lr / cfg.layer_decay.powi(*depth as i32)
                } else {
                    cfg.base_lr
                }
            }
            ParamGroup::Graph | ParamGroup::Fusion | ParamGroup::Classifier => cfg.graph_lr,
            ParamGroup::Temperature => cfg.base_lr,
        })
        .collect())
}

/// Learning-rate multiplier at `step` (0-based): linear warmup from 0 to 1
/// over `warmup_steps`, then linear decay back to 0 at `total_steps`.
/// `total_steps` must exceed `warmup_steps`. With `warmup_steps = 0` the
/// multiplier starts at 1 and decays immediately.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize) -> Result<f64> {
    if total_steps == 0 || warmup_steps >= total_steps {
        return Err(SlipError::InvalidInput(format!(
            "schedule needs total steps ({}) greater than warmup steps ({})",
            total_steps, warmup_steps
        )));
    }
    let m = if step < warmup_steps {
        step as f64 / warmup_steps as f64
    } else {
        let remaining = total_steps.saturating_sub(step) as f64;
        remaining / (total_steps - warmup_steps) as f64
    };
    Ok(m.clamp(0.0, 1.0))
}

/// Decision returned by [`EarlyStopping::update`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    /// The metric improved by more than the configured minimum delta.
    pub improved: bool,
    /// Patience ran out: training should stop after this epoch.
    pub stop: bool,
}

/// Patience-based early stopping on a metric where larger is better.
///
/// An epoch counts as an improvement only if its metric exceeds the best seen
/// so far by strictly more than `min_delta`. After `patience` consecutive
/// non-improving epochs, [`StopDecision::stop`] turns on.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    stale_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Result<Self> {
        if patience == 0 {
            return Err(SlipError::InvalidInput(
                "early-stopping patience must be at least 1".into(),
            ));
        }
        if !min_delta.is_finite() || min_delta < 0.0 {
            return Err(SlipError::InvalidInput(
                "early-stopping minimum delta must be non-negative".into(),
            ));
        }
        Ok(EarlyStopping {
            patience,
            min_delta,
            best: None,
            stale_epochs: 0,
        })
    }

    /// Best metric observed so far.
    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Feed one epoch's validation metric.
    pub fn update(&mut self, metric: f64) -> Result<StopDecision> {
        if !metric.is_finite() {
            return Err(SlipError::InvalidInput(format!(
                "early stopping received a non-finite metric: {}",
                metric
            )));
        }
        let improved = match self.best {
            None => true,
            Some(best) => metric > best + self.min_delta,
        };
        if improved {
            self.best = Some(metric);
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }
        Ok(StopDecision {
            improved,
            stop: self.stale_epochs >= self.patience,
        })
    }
}

/// Adam with decoupled per-tensor moment buffers, keyed by parameter name.
///
/// One [`Adam::begin_step`] per optimizer step advances the shared timestep
/// used for bias correction; [`Adam::update`] then applies one tensor's
/// gradient at its own learning rate.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(SlipError::InvalidInput(
                "Adam betas must be in [0, 1)".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(SlipError::InvalidInput("Adam eps must be positive".into()));
        }
        Ok(Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        })
    }

    /// Advance the shared timestep. Call once before the updates of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Apply one gradient: `param -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(SlipError::Shape(format!(
                "gradient {}x{} against parameter {}x{} ({})",
                grad.rows(),
                grad.cols(),
                param.rows(),
                param.cols(),
                name
            )));
        }
        if self.step == 0 {
            return Err(SlipError::InvalidInput(
                "Adam::begin_step must run before updates".into(),
            ));
        }
        let n = param.len();
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; n]);
        if m.len() != n {
            return Err(SlipError::Shape(format!(
                "parameter {} changed size between steps",
                name
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let p = param.data_mut();
        let g = grad.data();
        for i in 0..n {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
