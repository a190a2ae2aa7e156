//! Run configuration: flat `key = value` text with `[section]` headers.
//!
//! Values are layered as defaults, then a config file, then explicit
//! overrides (command-line flags). Planner keys that were never set take the
//! environment's planner profile. Key names are unique across sections, so a
//! flag `--lambda-plan` maps to `lambda_plan` wherever it lives.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{BehaviorPolicy, PairConfig};
use crate::env::GridSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::planner::{BaseCostMode, PlannerConfig};
use crate::train::{LossWeights, TrainConfig, TrainMode};

/// Environment variable that overrides `seed` after file and flags.
pub const SEED_ENV: &str = "RCAUX_SEED";

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: '{raw}'")))
}

macro_rules! run_config {
    ($($section:literal { $($key:ident : $ty:ty = $default:expr,)* })*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(pub $key: $ty,)*)*
            /// Keys set by a file or an override rather than defaulted.
            explicit: BTreeSet<String>,
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self {
                    $($($key: $default,)*)*
                    explicit: BTreeSet::new(),
                }
            }
        }

        impl RunConfig {
            /// `(section, key)` for every field, in file order.
            pub const KEYS: &'static [(&'static str, &'static str)] =
                &[$($(($section, stringify!($key)),)*)*];

            fn assign(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($(stringify!($key) => self.$key = parse_value(key, raw)?,)*)*
                    other => return Err(Error::Config(format!("unknown key '{other}'"))),
                }
                Ok(())
            }

            fn rendered(&self) -> Vec<(&'static str, &'static str, String)> {
                vec![$($(($section, stringify!($key), render(&self.$key)),)*)*]
            }
        }
    };
}

fn render<T: Display>(v: &T) -> String {
    v.to_string()
}

run_config! {
    "run" {
        seed: u64 = 0,
        out_dir: String = "runs/default".into(),
    }
    "env" {
        env: String = "tworoom".into(),
    }
    "data" {
        n_trajectories: usize = 200,
        trajectory_len: usize = 64,
        policy: String = "waypoint".into(),
        epsilon: f64 = BehaviorPolicy::DEFAULT_EPSILON,
    }
    "model" {
        latent_dim: usize = 16,
        encoder_hidden: usize = 64,
        dynamics_hidden: usize = 64,
        head_hidden: usize = 64,
        context_len: usize = 1,
        h_max: usize = 12,
    }
    "train" {
        mode: String = "rc_aux".into(),
        rollout_horizon: usize = 6,
        batch_size: usize = 32,
        learning_rate: f64 = 1e-3,
        epochs: usize = 60,
        steps_per_epoch: usize = 100,
        alpha: f64 = 4.0,
        gamma: f64 = 1.0,
        beta: f64 = 1.0,
        rho_pred: f64 = 0.5,
        omega_pos: f64 = 1.0,
        omega_neg: f64 = 1.0,
        hard_negatives: bool = true,
        sampled_per_anchor: usize = 2,
        forced_hard_per_anchor: usize = 1,
        batch_neg_per_anchor: usize = 1,
        pred_pairs_per_segment: usize = 4,
    }
    "planner" {
        horizon: usize = 6,
        n_samples: usize = 300,
        n_iters: usize = 10,
        top_k: usize = 30,
        lambda_plan: f64 = 0.35,
        floor: f64 = 0.05,
        budget: usize = 50,
        replan_every: usize = 1,
        base_cost: String = "terminal".into(),
        smoothing: f64 = 0.05,
        gating: bool = true,
    }
    "eval" {
        n_groups: usize = 5,
        group_size: usize = 50,
        bench_warmup: usize = 5,
        bench_measured: usize = 20,
    }
    "analyze" {
        n_segments: usize = 200,
        distortion_samples: usize = 500,
        preference_tuples: usize = 10_000,
        lipschitz_pairs: usize = 10_000,
        lipschitz_radius: f64 = 0.1,
        identifiability: bool = false,
    }
}

impl RunConfig {
    /// Sets `key` (snake or kebab case) from its text form.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = key.replace('-', "_");
        self.assign(&key, raw.trim())?;
        self.explicit.insert(key);
        Ok(())
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies a config file's contents. Keys must sit under their own
    /// section; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Config(format!("line {}: {m}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !Self::KEYS.iter().any(|(s, _)| *s == name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got '{line}'")))?;
            let key = key.trim();
            let home = Self::KEYS
                .iter()
                .find(|(_, k)| *k == key)
                .map(|(s, _)| *s)
                .ok_or_else(|| err(format!("unknown key '{key}'")))?;
            if section.as_deref() != Some(home) {
                return Err(err(format!("key '{key}' belongs in [{home}]")));
            }
            self.set(key, value).map_err(|e| err(e.to_string()))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }

    /// Defaults, then `file`, then `overrides`, then the seed environment
    /// variable; finally resolves and validates.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = match file {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.set("seed", &seed)?;
        }
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills unset planner keys from the environment's planner profile and
    /// checks that every derived config is valid.
    pub fn resolve(&mut self) -> Result<()> {
        let spec = self.grid()?;
        let profile = if spec.name == "wall" {
            PlannerConfig::wall()
        } else {
            PlannerConfig::default()
        };
        let defaults = [
            ("horizon", profile.horizon.to_string()),
            ("n_samples", profile.n_samples.to_string()),
            ("n_iters", profile.n_iters.to_string()),
            ("top_k", profile.top_k.to_string()),
            ("lambda_plan", profile.lambda.to_string()),
            ("floor", profile.floor.to_string()),
            ("budget", profile.budget.to_string()),
            ("replan_every", profile.replan_every.to_string()),
            ("smoothing", profile.smoothing.to_string()),
        ];
        for (key, value) in defaults {
            if !self.is_explicit(key) {
                self.assign(key, &value)?;
            }
        }
        self.policy()?;
        self.planner()?.validate()?;
        self.train_config()?.validate()?;
        self.model_config(spec.obs_dim()).validate()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::by_name(&self.env)
    }

    pub fn policy(&self) -> Result<BehaviorPolicy> {
        match BehaviorPolicy::parse(&self.policy)? {
            BehaviorPolicy::Waypoint { .. } => Ok(BehaviorPolicy::Waypoint {
                epsilon: self.epsilon,
            }),
            p => Ok(p),
        }
    }

    pub fn model_config(&self, obs_dim: usize) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            encoder_hidden: self.encoder_hidden,
            dynamics_hidden: self.dynamics_hidden,
            head_hidden: self.head_hidden,
            context_len: self.context_len,
            h_max: self.h_max,
            ..ModelConfig::new(obs_dim)
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::new(TrainMode::parse(&self.mode)?);
        cfg.horizon = self.rollout_horizon;
        cfg.context_len = self.context_len;
        cfg.batch_size = self.batch_size;
        cfg.learning_rate = self.learning_rate;
        cfg.epochs = self.epochs;
        cfg.steps_per_epoch = self.steps_per_epoch;
        cfg.seed = self.seed;
        cfg.pred_pairs_per_segment = self.pred_pairs_per_segment;
        cfg.pairs = PairConfig {
            h_max: self.h_max as u32,
            sampled_per_anchor: self.sampled_per_anchor,
            forced_hard_per_anchor: self.forced_hard_per_anchor,
            batch_neg_per_anchor: self.batch_neg_per_anchor,
            hard_negatives: self.hard_negatives,
        };
        cfg.weights = LossWeights {
            alpha: self.alpha,
            gamma: self.gamma,
            beta: self.beta,
            rho_pred: self.rho_pred,
            omega_pos: self.omega_pos,
            omega_neg: self.omega_neg,
            ..LossWeights::uniform(self.rollout_horizon)
        };
        cfg.normalize();
        Ok(cfg)
    }

    pub fn planner(&self) -> Result<PlannerConfig> {
        Ok(PlannerConfig {
            horizon: self.horizon,
            n_samples: self.n_samples,
            n_iters: self.n_iters,
            top_k: self.top_k,
            lambda: self.lambda_plan,
            floor: self.floor,
            budget: self.budget,
            replan_every: self.replan_every,
            base_cost_mode: BaseCostMode::parse(&self.base_cost)?,
            smoothing: self.smoothing,
            gating: self.gating,
        })
    }

    /// Every key with its current value, grouped by section. Parsing this
    /// text back reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut current = "";
        for (section, key, value) in self.rendered() {
            if section != current {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{section}]\n"));
                current = section;
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    /// Writes the resolved config into `dir` as `config.txt`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("config.txt");
        std::fs::write(&path, self.to_text())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lambda-plan", "0.125").unwrap();
        cfg.set("env", "wall").unwrap();
        cfg.resolve().unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        back.resolve().unwrap();
        assert_eq!(back.to_text(), cfg.to_text());
        assert_eq!(back.lambda_plan, 0.125);
    }

    #[test]
    fn layering_and_profiles() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("[env]\nenv = wall\n[planner]\nbudget = 7\n").unwrap();
        cfg.resolve().unwrap();
        // Unset planner keys follow the wall profile, explicit ones win.
        assert_eq!((cfg.n_samples, cfg.lambda_plan, cfg.budget), (600, 0.85, 7));
        let mut tr = RunConfig::default();
        tr.resolve().unwrap();
        assert_eq!(tr.planner().unwrap(), PlannerConfig::default());
        assert_eq!(tr.train_config().unwrap(), TrainConfig::new(TrainMode::RcAux));
    }

    #[test]
    fn parse_errors() {
        let mut cfg = RunConfig::default();
        for bad in [
            "[planner]\nnope = 1\n",
            "[nowhere]\n",
            "[env]\nbudget = 3\n",
            "[planner]\nbudget = many\n",
            "[planner]\nbudget\n",
        ] {
            assert!(matches!(cfg.apply_text(bad), Err(Error::Config(_))), "{bad}");
        }
        let mut cfg = RunConfig::default();
        cfg.set("env", "mars").unwrap();
        assert!(cfg.resolve().is_err());
    }
}
