//! Training objectives and the optimisation loop.

mod fit;
pub mod losses;
mod objective;

pub use fit::{fit, Adam, EpochMetrics, FitOutput, MetricsLog};
pub use losses::{bce, loss_cov, loss_mh, loss_reach, loss_reg, ScoredPair};
pub use objective::{
    build_objective, build_objective_frozen, predicted_sources, sample_batch, total_loss,
    LossBreakdown, TrainBatch,
};

use crate::data::PairConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    /// `w_k`, one per rollout step.
    pub horizon: Vec<f64>,
    /// Weight of the latent moment regularizer.
    pub alpha: f64,
    /// Weight of the latent decorrelation term.
    pub gamma: f64,
    /// Reachability loss weight.
    pub beta: f64,
    pub omega_neg: f64,
    pub omega_pos: f64,
    pub rho_pred: f64,
}

impl LossWeights {
    /// `w_k = 1/K`, alpha 4, gamma 1, beta 1, unit class weights,
    /// rho_pred 0.5.
    pub fn uniform(k: usize) -> Self {
        Self {
            horizon: vec![1.0 / k.max(1) as f64; k],
            alpha: 4.0,
            gamma: 1.0,
            beta: 1.0,
            omega_neg: 1.0,
            omega_pos: 1.0,
            rho_pred: 0.5,
        }
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.horizon.len() != k {
            return Err(Error::Config(format!(
                "{} horizon weights for K = {k}",
                self.horizon.len()
            )));
        }
        let scalars = [
            self.alpha,
            self.gamma,
            self.beta,
            self.omega_neg,
            self.omega_pos,
            self.rho_pred,
        ];
        if self
            .horizon
            .iter()
            .chain(scalars.iter())
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    RcAux,
    /// One-step latent prediction only: forces K = 1 and beta = 0.
    OneStepBaseline,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rc_aux" => Ok(Self::RcAux),
            "one_step_baseline" => Ok(Self::OneStepBaseline),
            other => Err(Error::Config(format!("unknown training mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RcAux => "rc_aux",
            Self::OneStepBaseline => "one_step_baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Rollout horizon `K`.
    pub horizon: usize,
    pub context_len: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub pairs: PairConfig,
    /// Predicted-source pairs drawn per segment.
    pub pred_pairs_per_segment: usize,
    pub weights: LossWeights,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        let k = 6;
        let mut cfg = Self {
            mode,
            horizon: k,
            context_len: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            epochs: 60,
            steps_per_epoch: 100,
            seed: 0,
            pairs: PairConfig::default(),
            pred_pairs_per_segment: 4,
            weights: LossWeights::uniform(k),
        };
        cfg.normalize();
        cfg
    }

    /// Applies the baseline constraints (K = 1, beta = 0).
    pub fn normalize(&mut self) {
        if self.mode == TrainMode::OneStepBaseline {
            self.horizon = 1;
            self.weights.beta = 0.0;
            self.weights.horizon = vec![1.0];
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.context_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("K, L and batch size must be >= 1".into()));
        }
        if self.mode == TrainMode::OneStepBaseline && (self.horizon != 1 || self.weights.beta != 0.0)
        {
            return Err(Error::Config(
                "one_step_baseline requires K = 1 and beta = 0".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.weights.validate(self.horizon)
    }
}
