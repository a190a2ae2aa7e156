use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::env::{Action, Observation};
use crate::error::{Error, Result};

/// A training window on one trajectory: `L` context observations ending at
/// `t`, the `K` actions `a_t..a_{t+K-1}` and the `K` target observations
/// `o_{t+1}..o_{t+K}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub traj: usize,
    pub t: usize,
    pub context_len: usize,
    pub horizon: usize,
}

impl Segment {
    pub fn context_obs<'d>(&self, ds: &'d Dataset) -> &'d [Observation] {
        &ds.trajectories[self.traj].observations[self.t + 1 - self.context_len..=self.t]
    }

    /// Actions between consecutive context observations (`L - 1` of them).
    pub fn context_actions<'d>(&self, ds: &'d Dataset) -> &'d [Action] {
        &ds.trajectories[self.traj].actions[self.t + 1 - self.context_len..self.t]
    }

    pub fn future_actions<'d>(&self, ds: &'d Dataset) -> &'d [Action] {
        &ds.trajectories[self.traj].actions[self.t..self.t + self.horizon]
    }

    pub fn target_obs<'d>(&self, ds: &'d Dataset) -> &'d [Observation] {
        &ds.trajectories[self.traj].observations[self.t + 1..=self.t + self.horizon]
    }

    /// First and last observation index covered by the window.
    pub fn window(&self) -> (usize, usize) {
        (self.t + 1 - self.context_len, self.t + self.horizon)
    }

    pub fn is_valid(&self, ds: &Dataset) -> bool {
        self.context_len >= 1
            && self.horizon >= 1
            && self.t + 1 >= self.context_len
            && self.traj < ds.len()
            && self.t + self.horizon < ds.trajectories[self.traj].len()
    }
}

/// Uniform sampler over every valid `(trajectory, t)` placement.
#[derive(Debug, Clone)]
pub struct SegmentSampler {
    context_len: usize,
    horizon: usize,
    /// Cumulative count of valid placements per trajectory.
    cumulative: Vec<usize>,
    rng: ChaCha8Rng,
}

impl SegmentSampler {
    pub fn new(ds: &Dataset, context_len: usize, horizon: usize, seed: u64) -> Result<Self> {
        if context_len == 0 || horizon == 0 {
            return Err(Error::Config("segments need L >= 1 and K >= 1".into()));
        }
        let mut cumulative = Vec::with_capacity(ds.len());
        let mut total = 0;
        for t in &ds.trajectories {
            total += (t.len() + 1).saturating_sub(context_len + horizon);
            cumulative.push(total);
        }
        if total == 0 {
            return Err(Error::SegmentInfeasible {
                len: ds.trajectories.iter().map(|t| t.len()).max().unwrap_or(0),
                context: context_len,
                horizon,
            });
        }
        Ok(Self {
            context_len,
            horizon,
            cumulative,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn n_placements(&self) -> usize {
        self.cumulative.last().copied().unwrap_or(0)
    }

    pub fn sample(&mut self) -> Segment {
        let k = self.rng.gen_range(0..self.n_placements());
        let traj = self.cumulative.partition_point(|&c| c <= k);
        let before = if traj == 0 { 0 } else { self.cumulative[traj - 1] };
        Segment {
            traj,
            t: self.context_len - 1 + (k - before),
            context_len: self.context_len,
            horizon: self.horizon,
        }
    }

    pub fn sample_batch(&mut self, n: usize) -> Vec<Segment> {
        (0..n).map(|_| self.sample()).collect()
    }
}

pub fn sample_segment(ds: &Dataset, context_len: usize, horizon: usize, seed: u64) -> Result<Segment> {
    Ok(SegmentSampler::new(ds, context_len, horizon, seed)?.sample())
}
