//! Encoder, residual latent dynamics and budget-conditioned reachability head.
//!
//! Every network has a plain forward path (used by the planner and the
//! analysis checks) and a tape-recording path (used for training). Both run
//! the same kernels, so their outputs agree bit for bit.

mod checkpoint;
pub mod gradcheck;
pub mod params;
pub mod tape;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, round_to_f32, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use gradcheck::{finite_difference_check, Coordinates, GradCheckReport};
pub use params::{Gradients, ParamId, ParameterStore, Tensor};
pub use tape::{sigmoid, NodeId, Tape};

use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use tape::affine;

/// Latent state `z = e(o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &Latent) -> f64 {
        squared_distance(&self.0, &other.0).sqrt()
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetEncoding {
    /// `h / h_max` as one extra input.
    Scalar,
    /// One-hot over `0..=h_max`; larger budgets saturate at `h_max`.
    OneHot,
}

impl BudgetEncoding {
    pub fn name(self) -> &'static str {
        match self {
            BudgetEncoding::Scalar => "scalar",
            BudgetEncoding::OneHot => "onehot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(Self::Scalar),
            "onehot" => Ok(Self::OneHot),
            other => Err(Error::Config(format!("unknown budget encoding '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub obs_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: usize,
    pub dynamics_hidden: usize,
    pub head_hidden: usize,
    /// Number of context latents `L` fed to the dynamics.
    pub context_len: usize,
    pub h_max: usize,
    pub budget_encoding: BudgetEncoding,
}

impl ModelConfig {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            latent_dim: 16,
            encoder_hidden: 64,
            dynamics_hidden: 64,
            head_hidden: 64,
            context_len: 1,
            h_max: 12,
            budget_encoding: BudgetEncoding::Scalar,
        }
    }

    fn budget_dim(&self) -> usize {
        match self.budget_encoding {
            BudgetEncoding::Scalar => 1,
            BudgetEncoding::OneHot => self.h_max + 1,
        }
    }

    fn dynamics_in(&self) -> usize {
        self.context_len * self.latent_dim + self.context_len * Action::COUNT
    }

    fn head_in(&self) -> usize {
        2 * self.latent_dim + self.budget_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("obs_dim", self.obs_dim),
            ("latent_dim", self.latent_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("dynamics_hidden", self.dynamics_hidden),
            ("head_hidden", self.head_hidden),
            ("context_len", self.context_len),
            ("h_max", self.h_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ids {
    enc_w1: ParamId,
    enc_b1: ParamId,
    enc_w2: ParamId,
    enc_b2: ParamId,
    dyn_w1: ParamId,
    dyn_b1: ParamId,
    dyn_w2: ParamId,
    dyn_b2: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

impl Ids {
    fn resolve(params: &ParameterStore) -> Result<Self> {
        let get = |name: &str| {
            params
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter '{name}'")))
        };
        Ok(Self {
            enc_w1: get("encoder.w1")?,
            enc_b1: get("encoder.b1")?,
            enc_w2: get("encoder.w2")?,
            enc_b2: get("encoder.b2")?,
            dyn_w1: get("dynamics.w1")?,
            dyn_b1: get("dynamics.b1")?,
            dyn_w2: get("dynamics.w2")?,
            dyn_b2: get("dynamics.b2")?,
            head_w1: get("reach.w1")?,
            head_b1: get("reach.b1")?,
            head_w2: get("reach.w2")?,
            head_b2: get("reach.b2")?,
        })
    }
}

/// Which sub-network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Encoder,
    Dynamics,
    ReachHead,
}

impl Component {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('.').next()? {
            "encoder" => Some(Component::Encoder),
            "dynamics" => Some(Component::Dynamics),
            "reach" => Some(Component::ReachHead),
            _ => None,
        }
    }
}

/// Context for one dynamics step: the last `L` latents (oldest first) and the
/// `L - 1` actions taken between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Context {
    pub latents: Vec<Latent>,
    pub actions: Vec<Action>,
}

impl Context {
    pub fn single(z: Latent) -> Self {
        Self {
            latents: vec![z],
            actions: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldModel {
    pub config: ModelConfig,
    pub params: ParameterStore,
    ids: Ids,
}

fn one_hot_action(a: Action) -> [f64; Action::COUNT] {
    let mut v = [0.0; Action::COUNT];
    v[a.id() as usize] = 1.0;
    v
}

impl WorldModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParameterStore::new();
        let c = &config;
        let (dz, he, hd, hh) = (
            c.latent_dim,
            c.encoder_hidden,
            c.dynamics_hidden,
            c.head_hidden,
        );
        p.add_uniform("encoder.w1", &[he, c.obs_dim], c.obs_dim, &mut rng)?;
        p.add_uniform("encoder.b1", &[he], c.obs_dim, &mut rng)?;
        p.add_uniform("encoder.w2", &[dz, he], he, &mut rng)?;
        p.add_uniform("encoder.b2", &[dz], he, &mut rng)?;
        let din = c.dynamics_in();
        p.add_uniform("dynamics.w1", &[hd, din], din, &mut rng)?;
        p.add_uniform("dynamics.b1", &[hd], din, &mut rng)?;
        p.add_uniform("dynamics.w2", &[dz, hd], hd, &mut rng)?;
        p.add_uniform("dynamics.b2", &[dz], hd, &mut rng)?;
        let hin = c.head_in();
        p.add_uniform("reach.w1", &[hh, hin], hin, &mut rng)?;
        p.add_uniform("reach.b1", &[hh], hin, &mut rng)?;
        p.add_uniform("reach.w2", &[1, hh], hh, &mut rng)?;
        p.add_uniform("reach.b2", &[1], hh, &mut rng)?;
        Self::from_parts(config, p)
    }

    pub fn from_parts(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let ids = Ids::resolve(&params)?;
        let check = |id: ParamId, shape: &[usize]| -> Result<()> {
            let t = params.get(id);
            if t.shape != shape {
                return Err(Error::Format(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    t.name, t.shape, shape
                )));
            }
            Ok(())
        };
        let c = &config;
        check(ids.enc_w1, &[c.encoder_hidden, c.obs_dim])?;
        check(ids.enc_w2, &[c.latent_dim, c.encoder_hidden])?;
        check(ids.dyn_w1, &[c.dynamics_hidden, c.dynamics_in()])?;
        check(ids.dyn_w2, &[c.latent_dim, c.dynamics_hidden])?;
        check(ids.head_w1, &[c.head_hidden, c.head_in()])?;
        check(ids.head_w2, &[1, c.head_hidden])?;
        if !params.is_finite() {
            return Err(Error::Format("non-finite parameters".into()));
        }
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn h_max(&self) -> usize {
        self.config.h_max
    }

    fn w(&self, id: ParamId) -> &[f64] {
        &self.params.get(id).data
    }

    fn budget_features(&self, h: usize) -> Vec<f64> {
        match self.config.budget_encoding {
            BudgetEncoding::Scalar => vec![h as f64 / self.config.h_max as f64],
            BudgetEncoding::OneHot => {
                let mut v = vec![0.0; self.config.h_max + 1];
                v[h.min(self.config.h_max)] = 1.0;
                v
            }
        }
    }

    pub fn encode(&self, obs: &Observation) -> Result<Latent> {
        self.encode_features(&obs.features)
    }

    pub fn encode_features(&self, features: &[f64]) -> Result<Latent> {
        if features.len() != self.config.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.obs_dim,
                got: features.len(),
            });
        }
        let i = &self.ids;
        let mut h = vec![0.0; self.config.encoder_hidden];
        affine(self.w(i.enc_w1), self.w(i.enc_b1), features, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut z = vec![0.0; self.config.latent_dim];
        affine(self.w(i.enc_w2), self.w(i.enc_b2), &h, &mut z);
        Ok(Latent(z))
    }

    fn dynamics_input(&self, context: &Context, a: Action) -> Result<Vec<f64>> {
        let l = self.config.context_len;
        if context.latents.len() != l {
            return Err(Error::LengthMismatch(format!(
                "context holds {} latents, model expects {l}",
                context.latents.len()
            )));
        }
        if context.actions.len() + 1 != l {
            return Err(Error::LengthMismatch(format!(
                "context holds {} actions, model expects {}",
                context.actions.len(),
                l - 1
            )));
        }
        let mut input = Vec::with_capacity(self.config.dynamics_in());
        for z in &context.latents {
            if z.dim() != self.config.latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.latent_dim,
                    got: z.dim(),
                });
            }
            input.extend_from_slice(&z.0);
        }
        for &prev in &context.actions {
            input.extend_from_slice(&one_hot_action(prev));
        }
        input.extend_from_slice(&one_hot_action(a));
        Ok(input)
    }

    /// Next latent: the newest context latent plus a learned residual.
    pub fn predict_step(&self, context: &Context, a: Action) -> Result<Latent> {
        let input = self.dynamics_input(context, a)?;
        let i = &self.ids;
        let mut h = vec![0.0; self.config.dynamics_hidden];
        affine(self.w(i.dyn_w1), self.w(i.dyn_b1), &input, &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut delta = vec![0.0; self.config.latent_dim];
        affine(self.w(i.dyn_w2), self.w(i.dyn_b2), &h, &mut delta);
        let last = &context.latents[context.latents.len() - 1].0;
        Ok(Latent(last.iter().zip(&delta).map(|(z, d)| z + d).collect()))
    }

    /// Allocation-free dynamics step: `latents` are the `L` context latents
    /// (oldest first), `actions` the `L - 1` history actions followed by the
    /// step action. Action one-hots are applied as weight-column lookups.
    pub fn dynamics_into(
        &self,
        latents: &[&[f64]],
        actions: &[Action],
        hidden: &mut [f64],
        out: &mut [f64],
    ) {
        let c = &self.config;
        let dz = c.latent_dim;
        let n_in = c.dynamics_in();
        let w1 = self.w(self.ids.dyn_w1);
        let b1 = self.w(self.ids.dyn_b1);
        let za = latents.len() * dz;
        for (r, h) in hidden.iter_mut().enumerate() {
            let row = &w1[r * n_in..(r + 1) * n_in];
            let mut acc = b1[r];
            for (j, z) in latents.iter().enumerate() {
                for (w, x) in row[j * dz..(j + 1) * dz].iter().zip(z.iter()) {
                    acc += w * x;
                }
            }
            for (j, a) in actions.iter().enumerate() {
                acc += row[za + j * Action::COUNT + a.id() as usize];
            }
            *h = acc.tanh();
        }
        let last = latents[latents.len() - 1];
        affine(self.w(self.ids.dyn_w2), self.w(self.ids.dyn_b2), hidden, out);
        for (o, z) in out.iter_mut().zip(last) {
            *o += z;
        }
    }

    /// Open-loop rollout: each step after the first consumes the model's own
    /// previous prediction. Returns `actions.len()` latents in order.
    pub fn rollout_open_loop(&self, context: &Context, actions: &[Action]) -> Result<Vec<Latent>> {
        if actions.is_empty() {
            return Err(Error::Empty("rollout needs K >= 1 actions"));
        }
        let mut ctx = context.clone();
        let mut out = Vec::with_capacity(actions.len());
        for &a in actions {
            let next = self.predict_step(&ctx, a)?;
            out.push(next.clone());
            advance_context(&mut ctx, next, a);
        }
        Ok(out)
    }

    pub fn reachability_logit(&self, z: &Latent, target: &Latent, h: i64) -> Result<f64> {
        if h < 0 {
            return Err(Error::NegativeBudget(h));
        }
        for v in [z, target] {
            if v.dim() != self.config.latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.config.latent_dim,
                    got: v.dim(),
                });
            }
        }
        let mut input = Vec::with_capacity(self.config.head_in());
        input.extend_from_slice(&z.0);
        input.extend_from_slice(&target.0);
        input.extend(self.budget_features(h as usize));
        Ok(self.head_logit(&input))
    }

    fn head_logit(&self, input: &[f64]) -> f64 {
        let i = &self.ids;
        let mut hidden = vec![0.0; self.config.head_hidden];
        affine(self.w(i.head_w1), self.w(i.head_b1), input, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = [0.0];
        affine(self.w(i.head_w2), self.w(i.head_b2), &hidden, &mut out);
        out[0]
    }

    pub fn reachability_score(&self, z: &Latent, target: &Latent, h: i64) -> Result<f64> {
        Ok(sigmoid(self.reachability_logit(z, target, h)?))
    }

    // Tape-recording forward passes.

    pub fn encode_on(&self, tape: &mut Tape<'_>, features: &[f64]) -> Result<NodeId> {
        if features.len() != self.config.obs_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.obs_dim,
                got: features.len(),
            });
        }
        let i = self.ids;
        let x = tape.constant(features.to_vec());
        let pre = tape.affine(x, i.enc_w1, i.enc_b1);
        let h = tape.tanh(pre);
        Ok(tape.affine(h, i.enc_w2, i.enc_b2))
    }

    /// One dynamics step on tape. `latents` are the `L` context nodes,
    /// `actions` the `L - 1` history actions followed by the step action.
    pub fn predict_on(
        &self,
        tape: &mut Tape<'_>,
        latents: &[NodeId],
        actions: &[Action],
    ) -> Result<NodeId> {
        let l = self.config.context_len;
        if latents.len() != l || actions.len() != l {
            return Err(Error::LengthMismatch(format!(
                "tape context has {} latents / {} actions, model expects {l} / {l}",
                latents.len(),
                actions.len()
            )));
        }
        let i = self.ids;
        let onehots: Vec<f64> = actions.iter().flat_map(|a| one_hot_action(*a)).collect();
        let a_node = tape.constant(onehots);
        let mut parts = latents.to_vec();
        parts.push(a_node);
        let input = tape.concat(&parts);
        let pre = tape.affine(input, i.dyn_w1, i.dyn_b1);
        let h = tape.tanh(pre);
        let delta = tape.affine(h, i.dyn_w2, i.dyn_b2);
        Ok(tape.add(latents[l - 1], delta))
    }

    /// Open-loop rollout on tape. `history` holds the `L - 1` actions between
    /// context latents.
    pub fn rollout_on(
        &self,
        tape: &mut Tape<'_>,
        context: &[NodeId],
        history: &[Action],
        actions: &[Action],
    ) -> Result<Vec<NodeId>> {
        if actions.is_empty() {
            return Err(Error::Empty("rollout needs K >= 1 actions"));
        }
        let mut latents = context.to_vec();
        let mut acts = history.to_vec();
        let mut out = Vec::with_capacity(actions.len());
        for &a in actions {
            acts.push(a);
            let next = self.predict_on(tape, &latents, &acts)?;
            out.push(next);
            latents.remove(0);
            latents.push(next);
            acts.remove(0);
        }
        Ok(out)
    }

    pub fn logit_on(
        &self,
        tape: &mut Tape<'_>,
        z: NodeId,
        target: NodeId,
        h: i64,
    ) -> Result<NodeId> {
        if h < 0 {
            return Err(Error::NegativeBudget(h));
        }
        let i = self.ids;
        let budget = tape.constant(self.budget_features(h as usize));
        let input = tape.concat(&[z, target, budget]);
        let pre = tape.affine(input, i.head_w1, i.head_b1);
        let hidden = tape.tanh(pre);
        Ok(tape.affine(hidden, i.head_w2, i.head_b2))
    }

    /// Precomputed pieces for scoring many rollouts against one goal.
    pub fn goal_scorer(&self, goal: &Latent) -> GoalScorer<'_> {
        GoalScorer::new(self, goal)
    }
}

fn advance_context(ctx: &mut Context, next: Latent, a: Action) {
    ctx.latents.remove(0);
    ctx.latents.push(next);
    if !ctx.actions.is_empty() || ctx.latents.len() > 1 {
        ctx.actions.push(a);
        if ctx.actions.len() + 1 > ctx.latents.len() {
            ctx.actions.remove(0);
        }
    }
}

/// Reachability head specialised to a fixed goal latent: the goal half of the
/// first layer and the budget features are folded into per-budget biases once
/// per planning call.
pub struct GoalScorer<'m> {
    model: &'m WorldModel,
    goal: Latent,
    /// `w1[:, goal] * goal + w1[:, budget] * features(h) + b1` for
    /// `h = 0..=h_max`, each of length `head_hidden`.
    budget_bias: Vec<Vec<f64>>,
}

impl<'m> GoalScorer<'m> {
    fn new(model: &'m WorldModel, goal: &Latent) -> Self {
        let budget_bias = (0..=model.config.h_max)
            .map(|h| Self::bias_for(model, goal, h))
            .collect();
        Self {
            model,
            goal: goal.clone(),
            budget_bias,
        }
    }

    fn bias_for(model: &WorldModel, goal: &Latent, h: usize) -> Vec<f64> {
        let c = &model.config;
        let w1 = model.w(model.ids.head_w1);
        let b1 = model.w(model.ids.head_b1);
        let n_in = c.head_in();
        let dz = c.latent_dim;
        let budget = model.budget_features(h);
        (0..c.head_hidden)
            .map(|r| {
                let row = &w1[r * n_in..(r + 1) * n_in];
                let mut acc = b1[r];
                for (w, g) in row[dz..2 * dz].iter().zip(&goal.0) {
                    acc += w * g;
                }
                for (w, x) in row[2 * dz..].iter().zip(&budget) {
                    acc += w * x;
                }
                acc
            })
            .collect()
    }

    pub fn goal(&self) -> &Latent {
        &self.goal
    }

    /// Same value as `model.reachability_logit(z, goal, h)`, up to summation
    /// order.
    pub fn logit(&self, z: &[f64], h: usize) -> f64 {
        match self.budget_bias.get(h) {
            Some(bias) => self.logit_with(z, bias),
            None => self.logit_with(z, &Self::bias_for(self.model, &self.goal, h)),
        }
    }

    fn logit_with(&self, z: &[f64], bias: &[f64]) -> f64 {
        let m = self.model;
        let w1 = m.w(m.ids.head_w1);
        let w2 = m.w(m.ids.head_w2);
        let n_in = m.config.head_in();
        let dz = m.config.latent_dim;
        let mut out = m.w(m.ids.head_b2)[0];
        for (r, (b, w_out)) in bias.iter().zip(w2).enumerate() {
            let row = &w1[r * n_in..r * n_in + dz];
            let mut acc = *b;
            for (w, x) in row.iter().zip(z) {
                acc += w * x;
            }
            out += w_out * acc.tanh();
        }
        out
    }

    pub fn score(&self, z: &[f64], h: usize) -> f64 {
        sigmoid(self.logit(z, h))
    }
}
