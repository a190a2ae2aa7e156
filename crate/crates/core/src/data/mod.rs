//! Offline trajectory datasets, segment sampling and reachability pairs.

mod io;
mod offsets;
mod pairs;
mod segment;

pub use io::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use offsets::OffsetTable;
pub use pairs::{
    make_predicted_pairs, make_reachability_pairs, Endpoint, Origin, PairBatch, PairConfig,
    ReachPair,
};
pub use segment::{sample_segment, Segment, SegmentSampler};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{observe, step, Action, GridSpec, Observation, Oracle, State};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    /// Ground truth for oracle-side checks; never shown to the model.
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Lengths agree and every transition replays under `step`.
    pub fn check_consistent(&self, spec: &GridSpec) -> Result<()> {
        let t = self.observations.len();
        if self.states.len() != t || self.actions.len() + 1 != t.max(1) {
            return Err(Error::LengthMismatch(format!(
                "trajectory with {} observations, {} states, {} actions",
                t,
                self.states.len(),
                self.actions.len()
            )));
        }
        for (i, a) in self.actions.iter().enumerate() {
            let next = step(spec, self.states[i], *a)?;
            if next != self.states[i + 1] {
                return Err(Error::Format(format!(
                    "transition {i} does not replay: {} --{}--> {} but recorded {}",
                    self.states[i],
                    a.name(),
                    next,
                    self.states[i + 1]
                )));
            }
        }
        for (o, s) in self.observations.iter().zip(&self.states) {
            if *o != observe(spec, *s)? {
                return Err(Error::Format(format!("observation mismatch at {s}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn obs_dim(&self) -> Option<usize> {
        self.trajectories
            .first()
            .and_then(|t| t.observations.first())
            .map(Observation::dim)
    }

    pub fn observation(&self, traj: usize, index: usize) -> &Observation {
        &self.trajectories[traj].observations[index]
    }

    pub fn state(&self, traj: usize, index: usize) -> State {
        self.trajectories[traj].states[index]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BehaviorPolicy {
    /// Uniform over all five actions.
    Random,
    /// Shortest-path steps toward a random waypoint, replaced by a uniform
    /// action with probability `epsilon`; a new waypoint is drawn on arrival.
    Waypoint { epsilon: f64 },
}

impl BehaviorPolicy {
    pub const DEFAULT_EPSILON: f64 = 0.3;

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "waypoint" => Ok(Self::Waypoint {
                epsilon: Self::DEFAULT_EPSILON,
            }),
            other => Err(Error::Config(format!("unknown behavior policy '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Waypoint { .. } => "waypoint",
        }
    }
}

/// `n` trajectories of `len` observations, starting from uniformly random
/// free cells. Bitwise deterministic per seed.
pub fn generate_trajectories(
    spec: &GridSpec,
    policy: BehaviorPolicy,
    n: usize,
    len: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || len == 0 {
        return Err(Error::Empty("need n >= 1 trajectories of length >= 1"));
    }
    spec.validate()?;
    let oracle = Oracle::new(spec);
    let free = spec.free_cells();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut trajectories = Vec::with_capacity(n);
    for _ in 0..n {
        let mut s = *free.choose(&mut rng).expect("validated grid has free cells");
        let mut waypoint = *free.choose(&mut rng).expect("validated grid has free cells");
        let mut states = vec![s];
        let mut actions = Vec::with_capacity(len - 1);
        for _ in 1..len {
            let a = match policy {
                BehaviorPolicy::Random => Action::ALL[rng.gen_range(0..Action::COUNT)],
                BehaviorPolicy::Waypoint { epsilon } => {
                    while waypoint == s {
                        waypoint = *free.choose(&mut rng).expect("free cells");
                    }
                    if rng.gen::<f64>() < epsilon {
                        Action::ALL[rng.gen_range(0..Action::COUNT)]
                    } else {
                        oracle.greedy_action(s, waypoint).unwrap_or(Action::Stay)
                    }
                }
            };
            s = step(spec, s, a)?;
            actions.push(a);
            states.push(s);
        }
        let observations = states
            .iter()
            .map(|&st| observe(spec, st))
            .collect::<Result<Vec<_>>>()?;
        trajectories.push(Trajectory {
            observations,
            actions,
            states,
        });
    }
    Ok(Dataset { trajectories })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let spec = GridSpec::wall();
        let policy = BehaviorPolicy::Waypoint { epsilon: 0.3 };
        let a = generate_trajectories(&spec, policy, 5, 20, 9).unwrap();
        let b = generate_trajectories(&spec, policy, 5, 20, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_trajectories(&spec, policy, 5, 20, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recorded_transitions_replay() {
        let spec = GridSpec::two_room();
        for policy in [BehaviorPolicy::Random, BehaviorPolicy::Waypoint { epsilon: 0.3 }] {
            let ds = generate_trajectories(&spec, policy, 10, 30, 1).unwrap();
            for t in &ds.trajectories {
                assert_eq!(t.len(), 30);
                assert_eq!(t.actions.len(), 29);
                t.check_consistent(&spec).unwrap();
            }
        }
    }

    #[test]
    fn tampered_trajectory_detected() {
        let spec = GridSpec::wall();
        let mut ds = generate_trajectories(&spec, BehaviorPolicy::Random, 1, 10, 2).unwrap();
        let t = &mut ds.trajectories[0];
        t.states[5] = State::new(0, 0);
        t.states[6] = State::new(8, 8);
        assert!(t.check_consistent(&spec).is_err());
    }

    #[test]
    fn waypoint_policy_crosses_the_door() {
        let spec = GridSpec::wall();
        let door = *spec.doors.iter().next().unwrap();
        let ds = generate_trajectories(
            &spec,
            BehaviorPolicy::Waypoint { epsilon: 0.3 },
            200,
            64,
            3,
        )
        .unwrap();
        let crossing = ds
            .trajectories
            .iter()
            .filter(|t| t.states.contains(&door))
            .count();
        assert!(crossing * 2 >= ds.len(), "only {crossing} of 200 crossed");
    }

    #[test]
    fn zero_sizes_rejected() {
        let spec = GridSpec::wall();
        assert!(generate_trajectories(&spec, BehaviorPolicy::Random, 0, 5, 0).is_err());
        assert!(generate_trajectories(&spec, BehaviorPolicy::Random, 5, 0, 0).is_err());
    }
}
