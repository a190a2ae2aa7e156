use std::collections::HashMap;

use rand::Rng;

use super::{LossWeights, TrainConfig};
use crate::data::{
    make_predicted_pairs, make_reachability_pairs, Dataset, Endpoint, PairBatch, ReachPair,
    Segment, SegmentSampler,
};
use crate::error::{Error, Result};
use crate::model::{Context, Gradients, NodeId, Tape, WorldModel};

/// One optimisation step's worth of segments and reachability pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainBatch {
    pub segments: Vec<Segment>,
    pub pairs: PairBatch,
    pub predicted: Vec<ReachPair>,
}

/// Draws segments, then trajectory pairs, then predicted pairs, in that
/// order. Pairs are skipped entirely when the reachability weight is zero.
pub fn sample_batch<R: Rng>(
    ds: &Dataset,
    sampler: &mut SegmentSampler,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainBatch> {
    let segments = sampler.sample_batch(cfg.batch_size);
    if cfg.weights.beta == 0.0 {
        return Ok(TrainBatch {
            segments,
            ..TrainBatch::default()
        });
    }
    let pairs = make_reachability_pairs(ds, &segments, &cfg.pairs, rng)?;
    let mut predicted = Vec::new();
    if cfg.weights.rho_pred > 0.0 {
        for i in 0..segments.len() {
            predicted.extend(make_predicted_pairs(
                i,
                cfg.horizon,
                cfg.pairs.h_max,
                cfg.pred_pairs_per_segment,
                rng,
            ));
        }
    }
    Ok(TrainBatch {
        segments,
        pairs,
        predicted,
    })
}

/// Component values of one objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub mh: f64,
    pub reach_enc: f64,
    pub reach_pred: f64,
    pub reg: f64,
    pub cov: f64,
}

impl LossBreakdown {
    /// `reach_enc + rho_pred * reach_pred`.
    pub fn reach(&self, w: &LossWeights) -> f64 {
        self.reach_enc + w.rho_pred * self.reach_pred
    }
}

/// Encodes each observation at most once per tape and remembers the order
/// in which latents were first needed.
struct EncodingCache {
    nodes: HashMap<(usize, usize), NodeId>,
    order: Vec<NodeId>,
}

impl EncodingCache {
    fn get(
        &mut self,
        model: &WorldModel,
        tape: &mut Tape<'_>,
        ds: &Dataset,
        traj: usize,
        index: usize,
    ) -> Result<NodeId> {
        if let Some(&n) = self.nodes.get(&(traj, index)) {
            return Ok(n);
        }
        let n = model.encode_on(tape, &ds.observation(traj, index).features)?;
        self.nodes.insert((traj, index), n);
        self.order.push(n);
        Ok(n)
    }
}

/// Records the full objective on `tape` and returns the loss node with its
/// component values. Latent moments are penalised over every distinct
/// observation encoded for the batch, and so is their cross-correlation.
pub fn build_objective(
    model: &WorldModel,
    tape: &mut Tape<'_>,
    ds: &Dataset,
    batch: &TrainBatch,
    weights: &LossWeights,
) -> Result<(NodeId, LossBreakdown)> {
    record(model, tape, ds, batch, weights, None)
}

/// Open-loop rollout latents of every batch segment, as plain values.
pub fn predicted_sources(
    model: &WorldModel,
    ds: &Dataset,
    batch: &TrainBatch,
) -> Result<Vec<Vec<Vec<f64>>>> {
    batch
        .segments
        .iter()
        .map(|seg| {
            let (lo, _) = seg.window();
            let latents = (lo..=seg.t)
                .map(|i| model.encode(ds.observation(seg.traj, i)))
                .collect::<Result<Vec<_>>>()?;
            let context = Context {
                latents,
                actions: seg.context_actions(ds).to_vec(),
            };
            Ok(model
                .rollout_open_loop(&context, seg.future_actions(ds))?
                .into_iter()
                .map(|z| z.0)
                .collect())
        })
        .collect()
}

/// Like [`build_objective`], but predicted-pair sources are the given fixed
/// values instead of this tape's rollouts. With sources taken at the current
/// parameters the value and gradients are identical to [`build_objective`];
/// as a function of the parameters it is the quantity whose derivative the
/// stop-gradient objective reports.
pub fn build_objective_frozen(
    model: &WorldModel,
    tape: &mut Tape<'_>,
    ds: &Dataset,
    batch: &TrainBatch,
    weights: &LossWeights,
    sources: &[Vec<Vec<f64>>],
) -> Result<(NodeId, LossBreakdown)> {
    record(model, tape, ds, batch, weights, Some(sources))
}

fn record(
    model: &WorldModel,
    tape: &mut Tape<'_>,
    ds: &Dataset,
    batch: &TrainBatch,
    weights: &LossWeights,
    frozen: Option<&[Vec<Vec<f64>>]>,
) -> Result<(NodeId, LossBreakdown)> {
    if batch.segments.is_empty() {
        return Err(Error::Empty("objective needs at least one segment"));
    }
    let k = weights.horizon.len();
    let mut cache = EncodingCache {
        nodes: HashMap::new(),
        order: Vec::new(),
    };
    let n_seg = batch.segments.len() as f64;
    let mut mh_terms = Vec::with_capacity(batch.segments.len() * k);
    let mut rollouts = Vec::with_capacity(batch.segments.len());
    for seg in &batch.segments {
        if seg.horizon != k {
            return Err(Error::LengthMismatch(format!(
                "segment horizon {} but {k} horizon weights",
                seg.horizon
            )));
        }
        let (lo, _) = seg.window();
        let context = (lo..=seg.t)
            .map(|i| cache.get(model, tape, ds, seg.traj, i))
            .collect::<Result<Vec<_>>>()?;
        let pred = model.rollout_on(
            tape,
            &context,
            seg.context_actions(ds),
            seg.future_actions(ds),
        )?;
        for (step, (&p, &w)) in pred.iter().zip(&weights.horizon).enumerate() {
            let target = cache.get(model, tape, ds, seg.traj, seg.t + step + 1)?;
            let diff = tape.sub(p, target);
            let sq = tape.squared_norm(diff);
            mh_terms.push((sq, w / n_seg));
        }
        rollouts.push(pred);
    }
    let mh = tape.weighted_sum(&mh_terms);

    let reach = |tape: &mut Tape<'_>,
                 cache: &mut EncodingCache,
                 pairs: &[ReachPair]|
     -> Result<Option<NodeId>> {
        if pairs.is_empty() {
            return Ok(None);
        }
        let n = pairs.len() as f64;
        let mut terms = Vec::with_capacity(pairs.len());
        for p in pairs {
            let mut endpoint = |tape: &mut Tape<'_>, e: Endpoint| -> Result<NodeId> {
                match e {
                    Endpoint::Observed { traj, index } => cache.get(model, tape, ds, traj, index),
                    Endpoint::Target { segment, step } => {
                        let seg = batch.segments[segment];
                        cache.get(model, tape, ds, seg.traj, seg.t + step)
                    }
                    Endpoint::Predicted { segment, step } => Ok(match frozen {
                        Some(f) => tape.constant(f[segment][step - 1].clone()),
                        None => tape.stop_gradient(rollouts[segment][step - 1]),
                    }),
                }
            };
            let src = endpoint(tape, p.source)?;
            let dst = endpoint(tape, p.target)?;
            let logit = model.logit_on(tape, src, dst, i64::from(p.budget))?;
            let b = tape.bce_with_logit(logit, p.label_f64());
            let omega = if p.label {
                weights.omega_pos
            } else {
                weights.omega_neg
            };
            terms.push((b, omega / n));
        }
        Ok(Some(tape.weighted_sum(&terms)))
    };

    let use_reach = weights.beta != 0.0;
    let reach_enc = if use_reach {
        if batch.pairs.pairs.is_empty() {
            return Err(Error::Empty("reachability loss needs encoded pairs"));
        }
        reach(tape, &mut cache, &batch.pairs.pairs)?
    } else {
        None
    };
    let reach_pred = if use_reach {
        reach(tape, &mut cache, &batch.predicted)?
    } else {
        None
    };

    let (reg, cov) = if cache.order.len() >= 2 {
        (
            Some(tape.moment_penalty(&cache.order)?),
            Some(tape.covariance_penalty(&cache.order)?),
        )
    } else {
        (None, None)
    };

    let mut terms = vec![(mh, 1.0)];
    if let Some(r) = reg {
        terms.push((r, weights.alpha));
    }
    if let Some(c) = cov {
        terms.push((c, weights.gamma));
    }
    if let Some(r) = reach_enc {
        terms.push((r, weights.beta));
    }
    if let Some(r) = reach_pred {
        terms.push((r, weights.beta * weights.rho_pred));
    }
    let total = tape.weighted_sum(&terms);
    let value = |n: Option<NodeId>, tape: &Tape<'_>| n.map_or(0.0, |n| tape.scalar(n));
    let breakdown = LossBreakdown {
        total: tape.scalar(total),
        mh: tape.scalar(mh),
        reach_enc: value(reach_enc, tape),
        reach_pred: value(reach_pred, tape),
        reg: value(reg, tape),
        cov: value(cov, tape),
    };
    Ok((total, breakdown))
}

/// Objective value and exact parameter gradients for one batch.
pub fn total_loss(
    model: &WorldModel,
    ds: &Dataset,
    batch: &TrainBatch,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let mut tape = Tape::new(&model.params);
    let (loss, breakdown) = build_objective(model, &mut tape, ds, batch, weights)?;
    Ok((breakdown, tape.backward(loss)?))
}
