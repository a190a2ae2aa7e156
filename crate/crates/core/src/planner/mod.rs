//! Latent-space CEM planning with an optional reachability gate, and the
//! closed-loop MPC driver.

mod cem;
mod mpc;

pub use cem::{cem_plan, cost_call, rank, CandidateCost, IterationStats, Plan};
pub use mpc::{mpc_execute, write_diagnostics_csv, DiagnosticRow, EpisodeOutcome};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::model::{squared_distance, Latent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseCostMode {
    Terminal,
    Min,
    Mean,
}

impl BaseCostMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "terminal" => Ok(Self::Terminal),
            "min" => Ok(Self::Min),
            "mean" => Ok(Self::Mean),
            other => Err(Error::Config(format!("unknown base cost mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Terminal => "terminal",
            Self::Min => "min",
            Self::Mean => "mean",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    /// Planning horizon `H`.
    pub horizon: usize,
    pub n_samples: usize,
    pub n_iters: usize,
    pub top_k: usize,
    pub lambda: f64,
    /// Gate floor `m`.
    pub floor: f64,
    /// Environment steps allowed per episode.
    pub budget: usize,
    pub replan_every: usize,
    pub base_cost_mode: BaseCostMode,
    /// Additive smoothing for the categorical refit.
    pub smoothing: f64,
    /// When false candidates are ranked by base cost alone and the head is
    /// never consulted during search.
    pub gating: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            horizon: 6,
            n_samples: 300,
            n_iters: 10,
            top_k: 30,
            lambda: 0.35,
            floor: 0.05,
            budget: 50,
            replan_every: 1,
            base_cost_mode: BaseCostMode::Terminal,
            smoothing: 0.05,
            gating: true,
        }
    }
}

impl PlannerConfig {
    /// Wall-maze profile: larger candidate pool, stronger gate, 60-step budget.
    pub fn wall() -> Self {
        Self {
            n_samples: 600,
            top_k: 60,
            lambda: 0.85,
            budget: 60,
            ..Self::default()
        }
    }

    /// Terminal-L2 planner without the gate.
    pub fn base(mut self) -> Self {
        self.gating = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 || self.n_samples == 0 || self.n_iters == 0 || self.top_k == 0 {
            return fail("horizon, n_samples, n_iters and top_k must be >= 1");
        }
        if self.top_k > self.n_samples {
            return fail("top_k must not exceed n_samples");
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail("lambda_plan must lie in [0, 1]");
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return fail("gate floor must lie in (0, 1)");
        }
        if self.replan_every == 0 {
            return fail("replan_every must be >= 1");
        }
        if !(self.smoothing > 0.0 && self.smoothing.is_finite()) {
            return fail("smoothing must be positive");
        }
        Ok(())
    }
}

/// One scored action sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScore {
    pub actions: Vec<Action>,
    /// Predicted latents after each action.
    pub latents: Vec<Latent>,
    pub base: f64,
    pub reach: f64,
    pub cost: f64,
}

/// Goal cost of a rollout. Empty rollouts cost nothing.
pub fn base_cost(rollout: &[&[f64]], goal: &[f64], mode: BaseCostMode) -> f64 {
    let Some(last) = rollout.last() else {
        return 0.0;
    };
    match mode {
        BaseCostMode::Terminal => squared_distance(last, goal),
        BaseCostMode::Min => rollout
            .iter()
            .map(|z| squared_distance(z, goal))
            .fold(f64::INFINITY, f64::min),
        BaseCostMode::Mean => {
            rollout.iter().map(|z| squared_distance(z, goal)).sum::<f64>() / rollout.len() as f64
        }
    }
}

/// Maximum over intermediate steps `1 <= k < H` of the head's score for
/// reaching the goal from `rollout[k - 1]` within the remaining `H - k`
/// steps. Zero when `H < 2`.
pub fn trajectory_reachability<F>(rollout: &[&[f64]], head: F) -> f64
where
    F: Fn(&[f64], usize) -> f64,
{
    let h = rollout.len();
    (1..h)
        .map(|k| head(rollout[k - 1], h - k))
        .fold(0.0, f64::max)
}

/// `base * max(m, 1 - lambda * r)`.
pub fn rc_cost(base: f64, r: f64, lambda: f64, floor: f64) -> f64 {
    base * gate_factor(r, lambda, floor)
}

pub fn gate_factor(r: f64, lambda: f64, floor: f64) -> f64 {
    (1.0 - lambda * r).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_cost_modes() {
        let g = [0.0, 0.0];
        let a = [1.0, 0.0];
        let b = [0.0, 2.0];
        let c = [1.0, 1.0];
        let r: [&[f64]; 3] = [&a, &b, &c];
        assert_eq!(base_cost(&r, &g, BaseCostMode::Terminal), 2.0);
        assert_eq!(base_cost(&r, &g, BaseCostMode::Min), 1.0);
        assert!((base_cost(&r, &g, BaseCostMode::Mean) - 7.0 / 3.0).abs() < 1e-15);
        assert_eq!(base_cost(&[&g[..]], &g, BaseCostMode::Terminal), 0.0);
    }

    #[test]
    fn reachability_max_enumeration() {
        let zs: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let r: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        let head = |z: &[f64], h: usize| ((z[0] * 7.0 + h as f64 * 3.0) % 10.0) / 10.0;
        let brute = (1..5).map(|k| head(r[k - 1], 5 - k)).fold(0.0, f64::max);
        assert_eq!(trajectory_reachability(&r, head), brute);
        assert_eq!(trajectory_reachability(&r, |_, _| 0.5), 0.5);
        assert_eq!(trajectory_reachability(&r[..1], |_, _| 0.9), 0.0);
        let two = trajectory_reachability(&r[..2], |z, h| z[0] + h as f64 / 10.0);
        assert_eq!(two, 0.1);
    }

    #[test]
    fn rc_cost_cases() {
        assert_eq!(rc_cost(3.7, 0.8, 0.0, 0.05), 3.7);
        assert_eq!(rc_cost(2.0, 1.0, 1.0, 0.05), 0.1);
        let (da, db) = (1.5, 1.0);
        assert!(rc_cost(da, 1.0, 0.5, 0.05) < rc_cost(db, 0.0, 0.5, 0.05));
        assert!(rc_cost(2.5, 1.0, 0.5, 0.05) > rc_cost(1.0, 0.0, 0.5, 0.05));
    }

    #[test]
    fn config_validation() {
        assert!(PlannerConfig::default().validate().is_ok());
        assert!(PlannerConfig::wall().validate().is_ok());
        for bad in [
            PlannerConfig {
                top_k: 301,
                ..PlannerConfig::default()
            },
            PlannerConfig {
                lambda: 1.5,
                ..PlannerConfig::default()
            },
            PlannerConfig {
                floor: 0.0,
                ..PlannerConfig::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
