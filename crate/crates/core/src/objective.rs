//! Training objective: final-output error, intermediate-output error and the
//! per-subnet norm penalties, combined as `(1 − α)·L1 + α·L2 + L3`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{backward, forward_train, ModelError, ModelParams, Subnet};
use crate::tensor::{Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty recurrence list")]
    NoRecurrences,
    #[error("non-finite loss {value} ({context})")]
    NonFinite { value: f64, context: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSetting {
    AllL2,
    Mix,
    AllL1,
}

impl NormSetting {
    pub const ALL: [NormSetting; 3] = [NormSetting::AllL2, NormSetting::Mix, NormSetting::AllL1];

    pub fn norm_for(self, subnet: Subnet) -> NormKind {
        use NormKind::*;
        match (self, subnet) {
            (NormSetting::AllL2, _) => L2,
            (NormSetting::Mix, Subnet::Inet) => L1,
            (NormSetting::Mix, _) => L2,
            (NormSetting::AllL1, _) => L1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NormSetting::AllL2 => "all-l2",
            NormSetting::Mix => "mix",
            NormSetting::AllL1 => "all-l1",
        }
    }
}

impl fmt::Display for NormSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "all-l2" | "alll2" | "all_l2" => Ok(NormSetting::AllL2),
            "mix" => Ok(NormSetting::Mix),
            "all-l1" | "alll1" | "all_l1" => Ok(NormSetting::AllL1),
            other => Err(format!("unknown setting `{other}` (expected all-l2, mix or all-l1)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub alpha: f64,
    /// Penalize `Σw²` rather than `sqrt(Σw²)` under the L2 norm.
    pub squared_l2: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig {
            lambda: 0.0002,
            alpha: 0.5,
            squared_l2: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(format!("lambda must be a finite non-negative number, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1_term: f64,
    pub l2_term: f64,
    pub l3_term: f64,
    pub total: f64,
    /// Enet, Inet, Rnet.
    pub per_subnet_penalty: [f64; 3],
}

fn sample_count<T: Scalar>(t: &Tensor<T>) -> usize {
    t.shape()[0]
}

fn squared_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64, TensorError> {
    a.expect_same_shape("squared_error", b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum())
}

/// `Σᵢ ‖y⁽ⁱ⁾ − ŷ⁽ⁱ⁾‖² / 2N` over a batch of `N` images.
pub fn empirical_error<T: Scalar>(y_true: &Tensor<T>, y_learned: &Tensor<T>) -> Result<f64, TensorError> {
    let n = sample_count(y_true) as f64;
    Ok(squared_error(y_true, y_learned)? / (2.0 * n))
}

/// `Σᵢ Σᵣ ‖y⁽ⁱ⁾ − y_r⁽ⁱ⁾‖² / 2RN`.
pub fn intermediate_loss<T: Scalar>(y_true: &Tensor<T>, y_r: &[Tensor<T>]) -> Result<f64, ObjectiveError> {
    if y_r.is_empty() {
        return Err(ObjectiveError::NoRecurrences);
    }
    let n = sample_count(y_true) as f64;
    let r = y_r.len() as f64;
    let mut sum = 0.0;
    for y in y_r {
        sum += squared_error(y_true, y)?;
    }
    Ok(sum / (2.0 * r * n))
}

fn subnet_index(s: Subnet) -> usize {
    match s {
        Subnet::Enet => 0,
        Subnet::Inet => 1,
        Subnet::Rnet => 2,
    }
}

/// Per-subnet penalty under `setting`; returns `(l3_term, [E, I, R])`.
pub fn capacity_penalty<T: Scalar>(
    params: &ModelParams<T>,
    setting: NormSetting,
    cfg: &ObjectiveConfig,
) -> (f64, [f64; 3]) {
    let mut per = [0.0f64; 3];
    for subnet in Subnet::ALL {
        let weights = params.subnet_layers(subnet).flat_map(|l| l.weight.data().iter().map(|w| w.as_f64()));
        let raw = match setting.norm_for(subnet) {
            NormKind::L1 => weights.map(f64::abs).sum::<f64>(),
            NormKind::L2 => {
                let sq: f64 = weights.map(|w| w * w).sum();
                if cfg.squared_l2 { sq } else { sq.sqrt() }
            }
        };
        per[subnet_index(subnet)] = cfg.lambda * raw;
    }
    (per.iter().sum(), per)
}

/// Adds the penalty subgradient to `grads`: `λ·sign(w)` for L1 (zero at zero),
/// `2λw` for squared L2, `λw/‖θ_s‖` for the plain norm.
pub fn add_penalty_gradient<T: Scalar>(
    params: &ModelParams<T>,
    setting: NormSetting,
    cfg: &ObjectiveConfig,
    grads: &mut [Tensor<T>],
) {
    let lambda = cfg.lambda;
    for subnet in Subnet::ALL {
        let kind = setting.norm_for(subnet);
        let norm = if kind == NormKind::L2 && !cfg.squared_l2 {
            params
                .subnet_layers(subnet)
                .map(|l| l.weight.sum_sq().as_f64())
                .sum::<f64>()
                .sqrt()
        } else {
            0.0
        };
        for (layer, grad) in params.layers.iter().zip(grads.iter_mut()) {
            if layer.subnet != subnet {
                continue;
            }
            for (g, &w) in grad.data_mut().iter_mut().zip(layer.weight.data()) {
                let w64 = w.as_f64();
                let d = match kind {
                    NormKind::L1 => {
                        if w64 > 0.0 {
                            lambda
                        } else if w64 < 0.0 {
                            -lambda
                        } else {
                            0.0
                        }
                    }
                    NormKind::L2 if cfg.squared_l2 => 2.0 * lambda * w64,
                    NormKind::L2 => {
                        if norm > 0.0 {
                            lambda * w64 / norm
                        } else {
                            0.0
                        }
                    }
                };
                *g = *g + T::from_f64_lossy(d);
            }
        }
    }
}

/// Forward pass, loss breakdown and gradients for one batch.
pub fn total_loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    setting: NormSetting,
    cfg: &ObjectiveConfig,
) -> Result<(LossBreakdown, Vec<Tensor<T>>), ObjectiveError> {
    let (out, cache) = forward_train(params, inputs)?;
    let n = sample_count(targets) as f64;
    let r = out.y_r.len() as f64;
    let alpha = cfg.alpha;

    let l1_term = empirical_error(targets, &out.y_learned)?;
    let l2_term = intermediate_loss(targets, &out.y_r)?;
    let (l3_term, per_subnet_penalty) = capacity_penalty(params, setting, cfg);
    let total = (1.0 - alpha) * l1_term + alpha * l2_term + l3_term;
    if !total.is_finite() {
        return Err(ObjectiveError::NonFinite {
            value: total,
            context: format!("l1={l1_term} l2={l2_term} l3={l3_term}"),
        });
    }

    let k_learned = T::from_f64_lossy((1.0 - alpha) / n);
    let grad_learned = out.y_learned.zip_map(targets, |a, b| (a - b) * k_learned)?;
    let k_r = T::from_f64_lossy(alpha / (r * n));
    let grad_y_r = out
        .y_r
        .iter()
        .map(|y| y.zip_map(targets, |a, b| (a - b) * k_r))
        .collect::<Result<Vec<_>, _>>()?;
    let mut grads = backward(params, &cache, &out, &grad_learned, &grad_y_r)?;
    add_penalty_gradient(params, setting, cfg, &mut grads);

    Ok((
        LossBreakdown {
            l1_term,
            l2_term,
            l3_term,
            total,
            per_subnet_penalty,
        },
        grads,
    ))
}

/// Loss only, no gradients.
pub fn total_loss<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &Tensor<T>,
    targets: &Tensor<T>,
    setting: NormSetting,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown, ObjectiveError> {
    let out = crate::model::forward(params, inputs)?;
    let l1_term = empirical_error(targets, &out.y_learned)?;
    let l2_term = intermediate_loss(targets, &out.y_r)?;
    let (l3_term, per_subnet_penalty) = capacity_penalty(params, setting, cfg);
    Ok(LossBreakdown {
        l1_term,
        l2_term,
        l3_term,
        total: (1.0 - cfg.alpha) * l1_term + cfg.alpha * l2_term + l3_term,
        per_subnet_penalty,
    })
}
