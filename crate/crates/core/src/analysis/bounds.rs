use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BoundReport, BoundSample};
use crate::data::{sample_segment, Dataset, Segment, SegmentSampler};
use crate::env::{Action, Observation};
use crate::error::{Error, Result};
use crate::model::{squared_distance, Context, Latent, WorldModel};

/// Random perturbation pairs used to estimate region-restricted Lipschitz
/// constants: each pair moves a visited latent by at most `radius`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzProbe {
    pub n_pairs: usize,
    pub radius: f64,
}

impl Default for LipschitzProbe {
    fn default() -> Self {
        Self {
            n_pairs: 10_000,
            radius: 0.1,
        }
    }
}

fn perturbation<R: Rng>(dim: usize, radius: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let u: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&u);
        if n > 1e-3 {
            let scale = radius * rng.gen_range(0.05..=1.0) / n;
            return u.into_iter().map(|x| x * scale).collect();
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

fn encode_all(model: &WorldModel, obs: &[Observation]) -> Result<Vec<Latent>> {
    obs.iter().map(|o| model.encode(o)).collect()
}

/// True and open-loop latents along one segment.
struct Unrolled {
    /// Encoded window `o_{t-L+1}..o_{t+K}`.
    truth: Vec<Latent>,
    /// `ẑ_{t+1}..ẑ_{t+K}`.
    predicted: Vec<Latent>,
    actions: Vec<Action>,
    context_len: usize,
}

impl Unrolled {
    fn new(model: &WorldModel, ds: &Dataset, seg: &Segment) -> Result<Self> {
        let (lo, hi) = seg.window();
        let obs = &ds.trajectories[seg.traj].observations[lo..=hi];
        let truth = encode_all(model, obs)?;
        let l = seg.context_len;
        let context = Context {
            latents: truth[..l].to_vec(),
            actions: seg.context_actions(ds).to_vec(),
        };
        let predicted = model.rollout_open_loop(&context, seg.future_actions(ds))?;
        Ok(Self {
            truth,
            predicted,
            actions: ds.trajectories[seg.traj].actions[lo..hi].to_vec(),
            context_len: l,
        })
    }

    fn horizon(&self) -> usize {
        self.predicted.len()
    }

    /// `z*_{t+j}` for `j` in `1 - L ..= K`.
    fn true_at(&self, j: isize) -> &Latent {
        &self.truth[(j + self.context_len as isize - 1) as usize]
    }

    /// Context ending at step `j` (0 = the real context), either all true
    /// latents or with every latent after `t` replaced by its prediction.
    fn context(&self, j: usize, predicted: bool) -> Context {
        let l = self.context_len as isize;
        let j = j as isize;
        let latents = (j - l + 1..=j)
            .map(|i| {
                if predicted && i >= 1 {
                    self.predicted[(i - 1) as usize].clone()
                } else {
                    self.true_at(i).clone()
                }
            })
            .collect();
        let first = (j + 1) as usize;
        let actions = self.actions[first - 1..first + self.context_len - 2].to_vec();
        Context { latents, actions }
    }

    fn action(&self, j: usize) -> Action {
        self.actions[j + self.context_len - 1]
    }
}

fn context_gap(a: &Context, b: &Context) -> f64 {
    a.latents
        .iter()
        .zip(&b.latents)
        .map(|(x, y)| x.distance(y))
        .fold(0.0, f64::max)
}

/// `eps * sum_{i<k} lf^i`.
pub fn compounding_bound(eps: f64, lf: f64, k: usize) -> f64 {
    let mut sum = 0.0;
    let mut p = 1.0;
    for _ in 0..k {
        sum += p;
        p *= lf;
    }
    eps * sum
}

/// K-step open-loop error against the geometric accumulation of the worst
/// one-step error. `eps` is the largest one-step error over every true
/// context met along the sampled segments and `L_f` the largest
/// output/input distance ratio of the dynamics over random perturbations of
/// visited contexts together with every (predicted, true) context pair the
/// rollouts pass through.
pub fn check_compounding(
    model: &WorldModel,
    ds: &Dataset,
    k: usize,
    n_segments: usize,
    probe: LipschitzProbe,
    seed: u64,
) -> Result<BoundReport> {
    if k == 0 {
        return Err(Error::Config("compounding check needs K >= 1".into()));
    }
    let l = model.config.context_len;
    let mut sampler = SegmentSampler::new(ds, l, k, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0b0);
    let runs = sampler
        .sample_batch(n_segments)
        .iter()
        .map(|s| Unrolled::new(model, ds, s))
        .collect::<Result<Vec<_>>>()?;

    let mut eps: f64 = 0.0;
    let mut lf: f64 = 0.0;
    let mut true_contexts = Vec::new();
    for u in &runs {
        for j in 0..k {
            let ctx = u.context(j, false);
            let next = model.predict_step(&ctx, u.action(j))?;
            eps = eps.max(next.distance(u.true_at(j as isize + 1)));
            if j >= 1 {
                let pctx = u.context(j, true);
                let gap = context_gap(&pctx, &ctx);
                if gap > 0.0 {
                    let pnext = model.predict_step(&pctx, u.action(j))?;
                    lf = lf.max(pnext.distance(&next) / gap);
                }
            }
            true_contexts.push((ctx, u.action(j)));
        }
    }
    for _ in 0..probe.n_pairs {
        let (ctx, _) = &true_contexts[rng.gen_range(0..true_contexts.len())];
        let a = Action::ALL[rng.gen_range(0..Action::COUNT)];
        let moved = Context {
            latents: ctx
                .latents
                .iter()
                .map(|z| {
                    let d = perturbation(z.dim(), probe.radius, &mut rng);
                    Latent(z.0.iter().zip(d).map(|(x, y)| x + y).collect())
                })
                .collect(),
            actions: ctx.actions.clone(),
        };
        let gap = context_gap(&moved, ctx);
        let out = model.predict_step(&moved, a)?;
        let base = model.predict_step(ctx, a)?;
        lf = lf.max(out.distance(&base) / gap);
    }

    let bound = compounding_bound(eps, lf, k);
    let mut report = BoundReport::new("compounding");
    for u in &runs {
        let err = u.predicted[k - 1].distance(u.true_at(k as isize));
        report.push(BoundSample::new(err, bound));
    }
    report.stat("k", k as f64);
    report.stat("eps_one_step", eps);
    report.stat("lipschitz_dynamics", lf);
    report.stat("bound", bound);
    report.stat("perturbation_pairs", probe.n_pairs as f64);
    Ok(report)
}

/// Terminal cost distortion `|C(ẑ) - C(z*)|` against `4B ||ẑ_H - z*_H||`
/// (`terminal`) and against `(4B / sqrt(w_min)) sqrt(l_mh)` with uniform
/// weights over the rollout (`mh`). Each sample draws `H` in `1..=h_max`,
/// a segment of that horizon and a goal latent from the dataset. With
/// `radius: None`, `B` is the largest latent norm seen in the run; with a
/// given radius, samples touching a larger latent are excluded.
pub fn check_cost_distortion(
    model: &WorldModel,
    ds: &Dataset,
    h_max: usize,
    n_samples: usize,
    radius: Option<f64>,
    seed: u64,
) -> Result<(BoundReport, BoundReport)> {
    if h_max == 0 {
        return Err(Error::Config("cost distortion needs H >= 1".into()));
    }
    let l = model.config.context_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let h = rng.gen_range(1..=h_max);
        let seg = sample_segment(ds, l, h, seed.wrapping_add(i as u64 + 1))?;
        let u = Unrolled::new(model, ds, &seg)?;
        let traj = rng.gen_range(0..ds.len());
        let idx = rng.gen_range(0..ds.trajectories[traj].len());
        let goal = model.encode(ds.observation(traj, idx))?;
        rows.push((u, goal));
    }
    let max_norm = rows
        .iter()
        .flat_map(|(u, g)| {
            let h = u.horizon();
            [u.predicted[h - 1].norm(), u.true_at(h as isize).norm(), g.norm()]
        })
        .fold(0.0, f64::max);
    let b = radius.unwrap_or(max_norm);

    let mut terminal = BoundReport::new("cost_distortion_terminal");
    let mut mh = BoundReport::new("cost_distortion_mh");
    for (u, g) in &rows {
        let h = u.horizon();
        let x = &u.predicted[h - 1];
        let y = u.true_at(h as isize);
        let inside = x.norm() <= b && y.norm() <= b && g.norm() <= b;
        let measured = (squared_distance(&x.0, &g.0) - squared_distance(&y.0, &g.0)).abs();
        let gap = distance(&x.0, &y.0);
        let w = 1.0 / h as f64;
        let l_mh: f64 = (1..=h)
            .map(|k| w * squared_distance(&u.predicted[k - 1].0, &u.true_at(k as isize).0))
            .sum();
        terminal.push(BoundSample {
            measured,
            bound: 4.0 * b * gap,
            applicable: inside,
        });
        mh.push(BoundSample {
            measured,
            bound: 4.0 * b / w.sqrt() * l_mh.sqrt(),
            applicable: inside,
        });
    }
    for r in [&mut terminal, &mut mh] {
        r.stat("radius_b", b);
        r.stat("h_max", h_max as f64);
    }
    Ok((terminal, mh))
}

/// Sign stability of the reachability decision when a true source latent is
/// replaced by its open-loop prediction. Pairs take the source at rollout
/// step `j < K`, the encoded final target `o_{t+K}` and a random budget with
/// the trajectory label `h >= K - j`. `gamma` is the smallest |logit| among
/// correctly classified true-source pairs, `L_r` the largest logit change per
/// unit source displacement (random perturbations plus the actual
/// substitutions) and `delta` the largest substitution distance. Each sample
/// compares the realised logit change with `L_r ||ẑ - z*||`; a pair is in
/// margin when that bound stays below its |logit|, and such pairs cannot
/// flip sign.
pub fn check_margin_robustness(
    model: &WorldModel,
    ds: &Dataset,
    k: usize,
    n_segments: usize,
    probe: LipschitzProbe,
    seed: u64,
) -> Result<BoundReport> {
    if k < 2 {
        return Err(Error::Config("margin check needs K >= 2".into()));
    }
    let l = model.config.context_len;
    let h_max = model.h_max() as u32;
    let mut sampler = SegmentSampler::new(ds, l, k, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a6);
    struct Row {
        truth: Latent,
        predicted: Latent,
        target: Latent,
        label: bool,
        logit_true: f64,
        logit_pred: f64,
    }
    let mut rows = Vec::new();
    for seg in sampler.sample_batch(n_segments) {
        let u = Unrolled::new(model, ds, &seg)?;
        let target = u.true_at(k as isize).clone();
        for j in 1..k {
            let budget = rng.gen_range(0..=h_max);
            let truth = u.true_at(j as isize).clone();
            let predicted = u.predicted[j - 1].clone();
            let h = i64::from(budget);
            rows.push(Row {
                logit_true: model.reachability_logit(&truth, &target, h)?,
                logit_pred: model.reachability_logit(&predicted, &target, h)?,
                truth,
                predicted,
                target: target.clone(),
                label: budget as usize >= k - j,
            });
        }
    }

    let mut lr: f64 = 0.0;
    for r in &rows {
        let gap = r.truth.distance(&r.predicted);
        if gap > 0.0 {
            lr = lr.max((r.logit_pred - r.logit_true).abs() / gap);
        }
    }
    for _ in 0..probe.n_pairs {
        let r = &rows[rng.gen_range(0..rows.len())];
        let target = &rows[rng.gen_range(0..rows.len())].target;
        let h = rng.gen_range(0..=i64::from(h_max));
        let d = perturbation(r.truth.dim(), probe.radius, &mut rng);
        let gap = norm(&d);
        let moved = Latent(r.truth.0.iter().zip(&d).map(|(x, y)| x + y).collect());
        let a = model.reachability_logit(&r.truth, target, h)?;
        let b = model.reachability_logit(&moved, target, h)?;
        lr = lr.max((b - a).abs() / gap);
    }

    let mut report = BoundReport::new("margin_robustness");
    let mut gamma = f64::INFINITY;
    let mut delta: f64 = 0.0;
    let (mut flips, mut in_margin, mut flips_in_margin) = (0usize, 0usize, 0usize);
    for r in &rows {
        let gap = r.truth.distance(&r.predicted);
        delta = delta.max(gap);
        if (r.logit_true > 0.0) == r.label {
            gamma = gamma.min(r.logit_true.abs());
        }
        let flipped = (r.logit_true > 0.0) != (r.logit_pred > 0.0);
        flips += usize::from(flipped);
        if lr * gap < r.logit_true.abs() {
            in_margin += 1;
            flips_in_margin += usize::from(flipped);
        }
        report.push(BoundSample::new((r.logit_pred - r.logit_true).abs(), lr * gap));
    }
    report.stat("gamma", gamma);
    report.stat("lipschitz_head", lr);
    report.stat("delta", delta);
    report.stat("condition_holds", f64::from(u8::from(lr * delta < gamma)));
    report.stat("pairs", rows.len() as f64);
    report.stat("flip_rate", flips as f64 / rows.len().max(1) as f64);
    report.stat("in_margin_pairs", in_margin as f64);
    report.stat("flips_in_margin", flips_in_margin as f64);
    Ok(report)
}
