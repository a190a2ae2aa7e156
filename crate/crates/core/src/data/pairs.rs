//! Budget-conditioned reachability pairs with trajectory-induced labels.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{Dataset, Segment};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Origin {
    Positive,
    HardNegative,
    BatchNegative,
    Predicted,
}

impl Origin {
    pub fn name(self) -> &'static str {
        match self {
            Origin::Positive => "pos",
            Origin::HardNegative => "hard_neg",
            Origin::BatchNegative => "batch_neg",
            Origin::Predicted => "pred",
        }
    }
}

/// Where a pair endpoint's latent comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    /// Encoded dataset observation.
    Observed { traj: usize, index: usize },
    /// Open-loop prediction `k` steps into the rollout of batch segment `segment`.
    Predicted { segment: usize, step: usize },
    /// Encoded target `o_{t+step}` of batch segment `segment`.
    Target { segment: usize, step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReachPair {
    pub source: Endpoint,
    pub target: Endpoint,
    pub budget: u32,
    pub label: bool,
    pub origin: Origin,
    /// Observed offset; `None` for batch negatives.
    pub offset: Option<u32>,
}

impl ReachPair {
    pub fn label_f64(&self) -> f64 {
        if self.label {
            1.0
        } else {
            0.0
        }
    }

    /// Checks the origin/label contract of a single pair.
    pub fn check(&self) -> Result<()> {
        let fail = |why: &str| Err(Error::Format(format!("{self:?}: {why}")));
        match self.origin {
            Origin::Positive | Origin::HardNegative => {
                let (
                    Endpoint::Observed { traj: a, index: i },
                    Endpoint::Observed { traj: b, index: j },
                ) = (self.source, self.target)
                else {
                    return fail("trajectory pair must reference observations");
                };
                let Some(delta) = self.offset else {
                    return fail("missing offset");
                };
                if a != b || j <= i || (j - i) as u32 != delta {
                    return fail("not an ordered same-trajectory pair with matching offset");
                }
                let expect_pos = self.origin == Origin::Positive;
                if expect_pos != (self.budget >= delta) || self.label != expect_pos {
                    return fail("label disagrees with budget and offset");
                }
            }
            Origin::BatchNegative => {
                let (
                    Endpoint::Observed { traj: a, .. },
                    Endpoint::Observed { traj: b, .. },
                ) = (self.source, self.target)
                else {
                    return fail("batch negative must reference observations");
                };
                if a == b || self.label || self.offset.is_some() {
                    return fail("batch negative must cross trajectories with label 0");
                }
            }
            Origin::Predicted => {
                let (
                    Endpoint::Predicted { segment: s, step: k },
                    Endpoint::Target { segment: s2, step: l },
                ) = (self.source, self.target)
                else {
                    return fail("predicted pair must be predicted source -> encoded target");
                };
                if s != s2 || k == 0 || l <= k || self.offset != Some((l - k) as u32) {
                    return fail("predicted pair indices out of order");
                }
                if self.label != (self.budget as usize >= l - k) {
                    return fail("label disagrees with remaining budget");
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairConfig {
    pub h_max: u32,
    /// Same-trajectory pairs per anchor with a uniformly drawn budget.
    pub sampled_per_anchor: usize,
    /// Extra pairs per anchor with the budget forced below the offset.
    pub forced_hard_per_anchor: usize,
    pub batch_neg_per_anchor: usize,
    /// When false no same-trajectory pair ever has `h < offset`: sampled
    /// pairs draw their budget from `offset..=h_max` and no hard negatives
    /// are forced.
    pub hard_negatives: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        Self {
            h_max: 12,
            sampled_per_anchor: 2,
            forced_hard_per_anchor: 1,
            batch_neg_per_anchor: 1,
            hard_negatives: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PairBatch {
    pub pairs: Vec<ReachPair>,
    /// Anchors that could not get a batch negative because every segment in
    /// the batch came from the same trajectory.
    pub missing_batch_negatives: usize,
}

/// Pairs anchored at each segment's context index `t`: targets lie
/// `1..=h_max` steps later on the same trajectory (as far as it extends),
/// batch negatives are drawn from other trajectories' windows.
pub fn make_reachability_pairs<R: Rng>(
    ds: &Dataset,
    batch: &[Segment],
    cfg: &PairConfig,
    rng: &mut R,
) -> Result<PairBatch> {
    if cfg.h_max == 0 {
        return Err(Error::Config("h_max must be >= 1".into()));
    }
    let mut out = PairBatch::default();
    for seg in batch {
        let len = ds.trajectories[seg.traj].len();
        let i = seg.t;
        let max_delta = (cfg.h_max as usize).min(len - 1 - i) as u32;
        let source = Endpoint::Observed {
            traj: seg.traj,
            index: i,
        };
        let target_at = |delta: u32| Endpoint::Observed {
            traj: seg.traj,
            index: i + delta as usize,
        };
        for _ in 0..cfg.sampled_per_anchor {
            let delta = rng.gen_range(1..=max_delta);
            let budget = if cfg.hard_negatives {
                rng.gen_range(0..=cfg.h_max)
            } else {
                rng.gen_range(delta..=cfg.h_max)
            };
            let label = budget >= delta;
            out.pairs.push(ReachPair {
                source,
                target: target_at(delta),
                budget,
                label,
                origin: if label {
                    Origin::Positive
                } else {
                    Origin::HardNegative
                },
                offset: Some(delta),
            });
        }
        if cfg.hard_negatives {
            for _ in 0..cfg.forced_hard_per_anchor {
                let delta = rng.gen_range(1..=max_delta);
                out.pairs.push(ReachPair {
                    source,
                    target: target_at(delta),
                    budget: rng.gen_range(0..delta),
                    label: false,
                    origin: Origin::HardNegative,
                    offset: Some(delta),
                });
            }
        }
        let others: Vec<&Segment> = batch.iter().filter(|s| s.traj != seg.traj).collect();
        for _ in 0..cfg.batch_neg_per_anchor {
            let Some(other) = others.choose(rng) else {
                out.missing_batch_negatives += 1;
                continue;
            };
            let (lo, hi) = other.window();
            out.pairs.push(ReachPair {
                source,
                target: Endpoint::Observed {
                    traj: other.traj,
                    index: rng.gen_range(lo..=hi),
                },
                budget: rng.gen_range(0..=cfg.h_max),
                label: false,
                origin: Origin::BatchNegative,
                offset: None,
            });
        }
    }
    Ok(out)
}

/// `n` predicted-source pairs for one rollout of length `horizon`: a
/// predicted latent at step `k` and the encoded target at step `l`, with
/// `0 < k < l <= horizon` and label `h >= l - k`. Empty when `horizon < 2`.
pub fn make_predicted_pairs<R: Rng>(
    segment: usize,
    horizon: usize,
    h_max: u32,
    n: usize,
    rng: &mut R,
) -> Vec<ReachPair> {
    if horizon < 2 {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..horizon);
            let l = rng.gen_range(k + 1..=horizon);
            let budget = rng.gen_range(0..=h_max);
            let delta = (l - k) as u32;
            ReachPair {
                source: Endpoint::Predicted { segment, step: k },
                target: Endpoint::Target { segment, step: l },
                budget,
                label: budget >= delta,
                origin: Origin::Predicted,
                offset: Some(delta),
            }
        })
        .collect()
}
