use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{GradientEstimator, DEFAULT_GS_TEMPERATURE, DEFAULT_P_MIN};

/// How embedding sizes are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    /// Deterministic hard mask with the size-penalized update.
    Ham,
    /// Deterministic soft mask.
    Sam,
    /// Stochastic soft mask (Gumbel-sigmoid).
    SamGs,
    /// Stochastic hard mask (Bernoulli).
    HamP,
    /// Equal share of `s` per field, no search.
    Uniform,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ham,
        Strategy::Sam,
        Strategy::SamGs,
        Strategy::HamP,
        Strategy::Uniform,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ham => "ham",
            Strategy::Sam => "sam",
            Strategy::SamGs => "sam-gs",
            Strategy::HamP => "ham-p",
            Strategy::Uniform => "uniform",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown strategy {name:?}")))
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Soft-orthogonality regularization of the embedding tables.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoConfig {
    /// `λ`; zero disables the penalty.
    pub weight: f64,
    /// Penalize column cosines instead of the raw Gram matrix.
    pub normalized: bool,
    /// Also regularize during search and retraining, not only pretraining.
    pub all_stages: bool,
}

impl Default for SoConfig {
    fn default() -> Self {
        SoConfig {
            weight: 1e-3,
            normalized: false,
            all_stages: false,
        }
    }
}

impl SoConfig {
    pub fn off() -> Self {
        SoConfig {
            weight: 0.0,
            ..SoConfig::default()
        }
    }

    /// Cosine variant at its default weight.
    pub fn cosine() -> Self {
        SoConfig {
            weight: 1e-6,
            normalized: true,
            all_stages: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// `s`: surviving embedding columns summed over all fields.
    pub target_size: usize,
    /// `μ`: step of the size penalty.
    pub mu: f64,
    /// `ε`: initial value of every auxiliary parameter.
    pub epsilon: f64,
    /// `η`: SGD step on auxiliary parameters of the hard mask.
    pub alpha_lr: f64,
    /// SGD step on auxiliary parameters of the soft and stochastic masks.
    pub baseline_alpha_lr: f64,
    pub adam: AdamConfig,
    pub so: SoConfig,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    /// Epochs without validation AUC gain before pretraining or
    /// retraining stops.
    pub patience: usize,
    /// Search may stop once the mask size is within this many columns of `s`.
    pub search_window: usize,
    /// Minimum validation AUC gain that counts as progress during search.
    pub search_auc_tol: f64,
    /// Validation evaluations compared by the search stopper.
    pub search_auc_evals: usize,
    /// Validation evaluations per search epoch.
    pub search_evals_per_epoch: usize,
    pub gs_temperature: f64,
    pub p_min: f64,
    pub hamp_estimator: GradientEstimator,
    /// Fail on the first NaN or infinity produced by any operation.
    pub finite_check: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            target_size: 0,
            mu: 5e-5,
            epsilon: 0.01,
            alpha_lr: 1e-3,
            baseline_alpha_lr: 1e-2,
            adam: AdamConfig::default(),
            so: SoConfig::default(),
            batch_size: 2048,
            pretrain_epochs: 20,
            search_epochs: 10,
            retrain_epochs: 20,
            patience: 2,
            search_window: 2,
            search_auc_tol: 1e-4,
            search_auc_evals: 3,
            search_evals_per_epoch: 1,
            gs_temperature: DEFAULT_GS_TEMPERATURE,
            p_min: DEFAULT_P_MIN,
            hamp_estimator: GradientEstimator::Ste,
            finite_check: true,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Checks the configuration against a supernet of `total_columns`.
    pub fn validate(&self, total_columns: usize) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        if self.target_size > total_columns {
            return Err(Error::invalid(format!(
                "target size {} exceeds the {total_columns} available columns",
                self.target_size
            )));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid(format!("mu must be non-negative, got {}", self.mu)));
        }
        positive("epsilon", self.epsilon)?;
        positive("alpha_lr", self.alpha_lr)?;
        positive("baseline_alpha_lr", self.baseline_alpha_lr)?;
        positive("adam.lr", self.adam.lr)?;
        positive("adam.eps", self.adam.eps)?;
        positive("gs_temperature", self.gs_temperature)?;
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.so.weight >= 0.0 && self.so.weight.is_finite()) {
            return Err(Error::invalid("so.weight must be non-negative"));
        }
        if !(self.p_min > 0.0 && self.p_min < 0.5) {
            return Err(Error::invalid("p_min must lie in (0, 0.5)"));
        }
        if self.batch_size == 0 || self.search_evals_per_epoch == 0 || self.search_auc_evals == 0 {
            return Err(Error::invalid(
                "batch_size, search_evals_per_epoch and search_auc_evals must be positive",
            ));
        }
        Ok(())
    }
}
