use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{base_cost, gate_factor, BaseCostMode, CandidateScore, PlannerConfig};
use crate::env::Action;
use crate::error::{Error, Result};
use crate::model::{sigmoid, squared_distance, Context, GoalScorer, Latent, WorldModel};

const NONE: u32 = u32::MAX;

/// Prefix tree of open-loop rollouts from one context. A node holds the
/// latent reached after its action prefix, so candidates sharing a prefix
/// share those dynamics steps, and the head logit at each node (which only
/// depends on the node and its depth for a fixed horizon) is computed once.
struct RolloutTree<'m> {
    model: &'m WorldModel,
    dz: usize,
    horizon: usize,
    /// Context latents, oldest first; the last one is the root's latent.
    context: Vec<Vec<f64>>,
    context_actions: Vec<Action>,
    latents: Vec<f64>,
    children: Vec<[u32; Action::COUNT]>,
    parent: Vec<u32>,
    action: Vec<Action>,
    /// Cached head logits, NaN until computed.
    logit: Vec<f64>,
    hidden: Vec<f64>,
    out: Vec<f64>,
}

impl<'m> RolloutTree<'m> {
    fn new(model: &'m WorldModel, context: &Context, horizon: usize) -> Result<Self> {
        let l = model.config.context_len;
        if context.latents.len() != l || context.actions.len() + 1 != l {
            return Err(Error::LengthMismatch(format!(
                "planner context has {} latents / {} actions, model expects {l} / {}",
                context.latents.len(),
                context.actions.len(),
                l - 1
            )));
        }
        let dz = model.latent_dim();
        if let Some(z) = context.latents.iter().find(|z| z.dim() != dz) {
            return Err(Error::DimensionMismatch {
                expected: dz,
                got: z.dim(),
            });
        }
        let root = context.latents[l - 1].0.clone();
        Ok(Self {
            model,
            dz,
            horizon,
            context: context.latents.iter().map(|z| z.0.clone()).collect(),
            context_actions: context.actions.clone(),
            latents: root,
            children: vec![[NONE; Action::COUNT]],
            parent: vec![NONE],
            action: vec![Action::Stay],
            logit: vec![f64::NAN],
            hidden: vec![0.0; model.config.dynamics_hidden],
            out: vec![0.0; dz],
        })
    }

    fn latent(&self, node: u32) -> &[f64] {
        let i = node as usize * self.dz;
        &self.latents[i..i + self.dz]
    }

    fn child(&mut self, node: u32, a: Action) -> u32 {
        let existing = self.children[node as usize][a.id() as usize];
        if existing != NONE {
            return existing;
        }
        let mut hidden = std::mem::take(&mut self.hidden);
        let mut out = std::mem::take(&mut self.out);
        if self.context.len() == 1 {
            let acts = [a];
            self.model
                .dynamics_into(&[self.latent(node)], &acts, &mut hidden, &mut out);
        } else {
            let (latents, acts) = self.window(node, a);
            self.model.dynamics_into(&latents, &acts, &mut hidden, &mut out);
        }
        self.latents.extend_from_slice(&out);
        self.hidden = hidden;
        self.out = out;
        let id = self.parent.len() as u32;
        self.children.push([NONE; Action::COUNT]);
        self.parent.push(node);
        self.action.push(a);
        self.logit.push(f64::NAN);
        self.children[node as usize][a.id() as usize] = id;
        id
    }

    /// The last `L` latents and actions leading into a child of `node`
    /// reached by `a`, oldest first, continuing into the context.
    fn window(&self, node: u32, a: Action) -> (Vec<&[f64]>, Vec<Action>) {
        let l = self.context.len();
        let mut latents: Vec<&[f64]> = Vec::with_capacity(l);
        let mut acts = Vec::with_capacity(l);
        acts.push(a);
        let (mut cur, mut ci) = (node, l);
        while latents.len() < l {
            if cur != 0 {
                latents.push(self.latent(cur));
                if acts.len() < l {
                    acts.push(self.action[cur as usize]);
                }
                cur = self.parent[cur as usize];
            } else {
                ci -= 1;
                latents.push(&self.context[ci]);
                if acts.len() < l {
                    acts.push(self.context_actions[ci - 1]);
                }
            }
        }
        latents.reverse();
        acts.reverse();
        (latents, acts)
    }

    /// Node ids along `actions`, one per step.
    fn path(&mut self, actions: &[Action], out: &mut Vec<u32>) {
        out.clear();
        let mut node = 0;
        for &a in actions {
            node = self.child(node, a);
            out.push(node);
        }
    }

    /// Head logit for reaching the goal from the node at `depth`.
    fn node_logit(&mut self, scorer: &GoalScorer<'_>, node: u32, depth: usize) -> f64 {
        let s = self.logit[node as usize];
        if !s.is_nan() {
            return s;
        }
        let s = scorer.logit(self.latent(node), self.horizon - depth);
        self.logit[node as usize] = s;
        s
    }

    /// The sigmoid is monotone, so the best intermediate logit decides `R`.
    fn reachability(&mut self, scorer: &GoalScorer<'_>, path: &[u32]) -> f64 {
        let h = path.len();
        if h < 2 {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for k in 1..h {
            best = best.max(self.node_logit(scorer, path[k - 1], k));
        }
        sigmoid(best)
    }

    fn base(&self, path: &[u32], goal: &[f64], mode: BaseCostMode) -> f64 {
        match mode {
            BaseCostMode::Terminal => path
                .last()
                .map_or(0.0, |&n| squared_distance(self.latent(n), goal)),
            _ => {
                let zs: Vec<&[f64]> = path.iter().map(|&n| self.latent(n)).collect();
                base_cost(&zs, goal, mode)
            }
        }
    }

    fn candidate(
        &mut self,
        actions: &[Action],
        scorer: &GoalScorer<'_>,
        cfg: &PlannerConfig,
    ) -> CandidateScore {
        let mut path = Vec::with_capacity(actions.len());
        self.path(actions, &mut path);
        let base = self.base(&path, &scorer.goal().0, cfg.base_cost_mode);
        let reach = self.reachability(scorer, &path);
        let cost = if cfg.gating {
            base * gate_factor(reach, cfg.lambda, cfg.floor)
        } else {
            base
        };
        CandidateScore {
            actions: actions.to_vec(),
            latents: path.iter().map(|&n| Latent(self.latent(n).to_vec())).collect(),
            base,
            reach,
            cost,
        }
    }
}

/// Scores of one candidate inside a scoring pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateCost {
    pub base: f64,
    /// Zero when gating is off.
    pub reach: f64,
    pub cost: f64,
}

fn score_all(
    tree: &mut RolloutTree<'_>,
    scorer: &GoalScorer<'_>,
    candidates: &[Vec<Action>],
    cfg: &PlannerConfig,
    out: &mut Vec<CandidateCost>,
) {
    out.clear();
    let mut path = Vec::with_capacity(cfg.horizon);
    let goal = &scorer.goal().0;
    for c in candidates {
        tree.path(c, &mut path);
        let base = tree.base(&path, goal, cfg.base_cost_mode);
        let (reach, cost) = if cfg.gating {
            let r = tree.reachability(scorer, &path);
            (r, base * gate_factor(r, cfg.lambda, cfg.floor))
        } else {
            (0.0, base)
        };
        out.push(CandidateCost { base, reach, cost });
    }
}

/// One full scoring pass over a candidate batch from a fresh rollout tree.
pub fn cost_call(
    model: &WorldModel,
    scorer: &GoalScorer<'_>,
    context: &Context,
    candidates: &[Vec<Action>],
    cfg: &PlannerConfig,
) -> Result<Vec<CandidateCost>> {
    if let Some(c) = candidates.iter().find(|c| c.len() != cfg.horizon) {
        return Err(Error::LengthMismatch(format!(
            "candidate of length {} for horizon {}",
            c.len(),
            cfg.horizon
        )));
    }
    let mut tree = RolloutTree::new(model, context, cfg.horizon)?;
    let mut out = Vec::with_capacity(candidates.len());
    score_all(&mut tree, scorer, candidates, cfg, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationStats {
    pub iter: usize,
    /// Cheapest candidate seen so far (nonincreasing across iterations).
    pub best_cost: f64,
    pub best_base: f64,
    pub best_reach: f64,
    /// Mean cost of this iteration's elites.
    pub elite_mean: f64,
    /// Candidate indices of this iteration's elites, cheapest first.
    pub elites: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// The cheapest sequence over all iterations. Its `reach` is always the
    /// head's trajectory score, also when gating is off.
    pub best: CandidateScore,
    pub iterations: Vec<IterationStats>,
}

/// Candidate indices ordered by cost, cheapest first; equal costs keep the
/// lower index first.
pub fn rank(costs: &[f64]) -> Vec<usize> {
    let mut order = Vec::with_capacity(costs.len());
    rank_into(costs.iter().copied(), &mut order);
    order
}

fn rank_into(costs: impl Iterator<Item = f64>, order: &mut Vec<usize>) {
    let costs: Vec<f64> = costs.collect();
    order.clear();
    order.extend(0..costs.len());
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
}

fn sample_sequence<R: Rng>(probs: &[[f64; Action::COUNT]], rng: &mut R) -> Vec<Action> {
    probs
        .iter()
        .map(|p| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, q) in p.iter().enumerate() {
                acc += q;
                if u < acc {
                    return Action::ALL[i];
                }
            }
            Action::ALL[Action::COUNT - 1]
        })
        .collect()
}

/// Categorical cross-entropy method over `H`-step action sequences.
pub fn cem_plan(
    model: &WorldModel,
    context: &Context,
    goal: &Latent,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<Plan> {
    cfg.validate()?;
    if goal.dim() != model.latent_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.latent_dim(),
            got: goal.dim(),
        });
    }
    let scorer = model.goal_scorer(goal);
    let mut tree = RolloutTree::new(model, context, cfg.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uniform = 1.0 / Action::COUNT as f64;
    let mut probs = vec![[uniform; Action::COUNT]; cfg.horizon];
    let mut costs = Vec::with_capacity(cfg.n_samples);
    let mut order: Vec<usize> = Vec::with_capacity(cfg.n_samples);
    let mut best: Option<(Vec<Action>, CandidateCost)> = None;
    let mut iterations = Vec::with_capacity(cfg.n_iters);
    for iter in 0..cfg.n_iters {
        let candidates: Vec<Vec<Action>> = (0..cfg.n_samples)
            .map(|_| sample_sequence(&probs, &mut rng))
            .collect();
        score_all(&mut tree, &scorer, &candidates, cfg, &mut costs);
        rank_into(costs.iter().map(|c| c.cost), &mut order);
        let elites = &order[..cfg.top_k];
        let lead = elites[0];
        if best
            .as_ref()
            .is_none_or(|(_, c)| costs[lead].cost < c.cost)
        {
            best = Some((candidates[lead].clone(), costs[lead]));
        }
        let mut counts = vec![[0usize; Action::COUNT]; cfg.horizon];
        for &e in elites {
            for (t, a) in candidates[e].iter().enumerate() {
                counts[t][a.id() as usize] += 1;
            }
        }
        let denom = cfg.top_k as f64 + cfg.smoothing * Action::COUNT as f64;
        for (p, c) in probs.iter_mut().zip(&counts) {
            for (q, &n) in p.iter_mut().zip(c) {
                *q = (n as f64 + cfg.smoothing) / denom;
            }
        }
        let (seq, bc) = best.as_ref().expect("at least one iteration ran");
        let best_reach = if cfg.gating {
            bc.reach
        } else {
            tree.candidate(seq, &scorer, cfg).reach
        };
        iterations.push(IterationStats {
            iter,
            best_cost: bc.cost,
            best_base: bc.base,
            best_reach,
            elite_mean: elites.iter().map(|&e| costs[e].cost).sum::<f64>() / cfg.top_k as f64,
            elites: elites.to_vec(),
        });
    }
    let (seq, _) = best.expect("at least one iteration ran");
    let best = tree.candidate(&seq, &scorer, cfg);
    Ok(Plan { best, iterations })
}
