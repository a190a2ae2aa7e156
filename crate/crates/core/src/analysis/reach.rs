use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{BoundReport, BoundSample};
use crate::data::Dataset;
use crate::env::{Observation, Oracle};
use crate::error::{Error, Result};
use crate::model::{sigmoid, Latent, ModelConfig, Tape, WorldModel};
use crate::train::{fit, Adam, TrainConfig};

/// One head input with its label. Inputs are raw latents, so the fixture
/// exercises the head alone.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureInput {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
    pub budget: i64,
    pub label: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BayesFixture {
    pub inputs: Vec<FixtureInput>,
}

fn random_latent<R: Rng>(dz: usize, rng: &mut R) -> Vec<f64> {
    (0..dz).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

impl BayesFixture {
    /// `n_pairs` random pairs with offsets spread over `1..=h_max`, each
    /// probed at every budget `0..=h_max` with label `h >= offset`.
    pub fn deterministic(dz: usize, n_pairs: usize, h_max: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        for p in 0..n_pairs {
            let source = random_latent(dz, &mut rng);
            let target = random_latent(dz, &mut rng);
            let delta = 1 + (p as u32 * h_max.max(1)) / n_pairs.max(1) as u32;
            for h in 0..=h_max {
                inputs.push(FixtureInput {
                    source: source.clone(),
                    target: target.clone(),
                    budget: i64::from(h),
                    label: f64::from(u8::from(h >= delta)),
                });
            }
        }
        Self { inputs }
    }

    /// `n` random inputs, each present twice with opposite labels.
    pub fn conflicting(dz: usize, n: usize, h_max: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = Vec::new();
        for _ in 0..n {
            let source = random_latent(dz, &mut rng);
            let target = random_latent(dz, &mut rng);
            let budget = i64::from(rng.gen_range(0..=h_max));
            for label in [0.0, 1.0] {
                inputs.push(FixtureInput {
                    source: source.clone(),
                    target: target.clone(),
                    budget,
                    label,
                });
            }
        }
        Self { inputs }
    }

    /// Mean label per distinct input: the minimiser of the expected
    /// cross-entropy on the fixture.
    pub fn bayes_targets(&self) -> Vec<(usize, f64)> {
        let mut groups: BTreeMap<Vec<u64>, (usize, f64, usize)> = BTreeMap::new();
        for (i, x) in self.inputs.iter().enumerate() {
            let mut key: Vec<u64> = x.source.iter().map(|v| v.to_bits()).collect();
            key.extend(x.target.iter().map(|v| v.to_bits()));
            key.push(x.budget as u64);
            let e = groups.entry(key).or_insert((i, 0.0, 0));
            e.1 += x.label;
            e.2 += 1;
        }
        let mut out: Vec<(usize, f64)> = groups
            .into_values()
            .map(|(i, sum, n)| (i, sum / n as f64))
            .collect();
        out.sort_by_key(|&(i, _)| i);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadFitConfig {
    pub max_steps: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
}

impl Default for HeadFitConfig {
    fn default() -> Self {
        Self {
            max_steps: 4000,
            learning_rate: 1e-2,
            tolerance: 0.05,
        }
    }
}

/// Full-batch cross-entropy fit of the head alone on the fixture (the
/// latents are constants), then one sample per distinct input comparing the
/// score with its Bayes target. Stops early once every gap is below a fifth
/// of the tolerance.
pub fn check_bayes_reach(
    model: &WorldModel,
    fixture: &BayesFixture,
    cfg: HeadFitConfig,
) -> Result<(BoundReport, WorldModel)> {
    if fixture.inputs.is_empty() {
        return Err(Error::Empty("Bayes fixture has no inputs"));
    }
    let mut model = model.clone();
    let targets = fixture.bayes_targets();
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let n = fixture.inputs.len() as f64;
    let scores = |m: &WorldModel| -> Result<Vec<f64>> {
        targets
            .iter()
            .map(|&(i, _)| {
                let x = &fixture.inputs[i];
                let s = Latent(x.source.clone());
                let t = Latent(x.target.clone());
                m.reachability_score(&s, &t, x.budget)
            })
            .collect()
    };
    let max_gap = |s: &[f64]| {
        s.iter()
            .zip(&targets)
            .map(|(s, (_, t))| (s - t).abs())
            .fold(0.0, f64::max)
    };
    let mut steps = 0;
    let mut loss = f64::NAN;
    while steps < cfg.max_steps {
        if steps % 50 == 0 && max_gap(&scores(&model)?) < cfg.tolerance / 5.0 {
            break;
        }
        let mut tape = Tape::new(&model.params);
        let mut terms = Vec::with_capacity(fixture.inputs.len());
        for x in &fixture.inputs {
            let s = tape.constant(x.source.clone());
            let t = tape.constant(x.target.clone());
            let logit = model.logit_on(&mut tape, s, t, x.budget)?;
            terms.push((tape.bce_with_logit(logit, x.label), 1.0 / n));
        }
        let total = tape.weighted_sum(&terms);
        loss = tape.scalar(total);
        let grads = tape.backward(total)?;
        drop(tape);
        adam.step(&mut model.params, &grads);
        steps += 1;
    }
    let final_scores = scores(&model)?;
    let mut report = BoundReport::new("bayes_reach");
    for (s, (_, t)) in final_scores.iter().zip(&targets) {
        report.push(BoundSample::new((s - t).abs(), cfg.tolerance));
    }
    report.stat("steps", steps as f64);
    report.stat("final_loss", loss);
    report.stat("max_gap", max_gap(&final_scores));
    report.stat("distinct_inputs", targets.len() as f64);
    Ok((report, model))
}

/// A held-out ordered pair whose observed offset is also its shortest
/// distance, so `delta - 1` and `delta` straddle the true label flip.
#[derive(Debug, Clone, PartialEq)]
pub struct FlipProbe {
    pub source: Observation,
    pub target: Observation,
    pub delta: u32,
}

/// Up to `n` distinct flip probes with `1 <= delta <= h_max`.
pub fn flip_probes(ds: &Dataset, oracle: &Oracle, n: usize, h_max: u32, seed: u64) -> Vec<FlipProbe> {
    let mut candidates = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (ti, traj) in ds.trajectories.iter().enumerate() {
        let states = &traj.states;
        for i in 0..states.len() {
            for j in i + 1..states.len().min(i + h_max as usize + 1) {
                let delta = (j - i) as u32;
                if oracle.distance(states[i], states[j]) == Some(delta)
                    && seen.insert((states[i], states[j]))
                {
                    candidates.push((ti, i, j));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = rand::seq::index::sample(&mut rng, candidates.len(), n.min(candidates.len()));
    let mut picks = picks.into_vec();
    picks.sort_unstable();
    picks
        .into_iter()
        .map(|p| {
            let (t, i, j) = candidates[p];
            FlipProbe {
                source: ds.observation(t, i).clone(),
                target: ds.observation(t, j).clone(),
                delta: (j - i) as u32,
            }
        })
        .collect()
}

struct FlipScores {
    below: Vec<f64>,
    at: Vec<f64>,
}

fn score_probes(model: &WorldModel, probes: &[FlipProbe]) -> Result<FlipScores> {
    let mut out = FlipScores {
        below: Vec::with_capacity(probes.len()),
        at: Vec::with_capacity(probes.len()),
    };
    for p in probes {
        let s = model.encode(&p.source)?;
        let t = model.encode(&p.target)?;
        let d = i64::from(p.delta);
        out.below.push(sigmoid(model.reachability_logit(&s, &t, d - 1)?));
        out.at.push(sigmoid(model.reachability_logit(&s, &t, d)?));
    }
    Ok(out)
}

fn frac(v: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for b in v {
        hit += usize::from(b);
        n += 1;
    }
    hit as f64 / n.max(1) as f64
}

/// Trains `cfg` twice, with and without hard negatives and otherwise
/// identical, and probes both heads at `delta - 1` and `delta` on held-out
/// shortest-path pairs. The report holds two threshold samples: flip
/// accuracy with hard negatives must reach `min_flip_accuracy`, and the
/// accuracy of the head trained without them on the `h < delta` half must
/// stay at or below `max_below_accuracy`.
pub fn check_budget_identifiability(
    ds: &Dataset,
    probes: &[FlipProbe],
    cfg: &TrainConfig,
    model_config: &ModelConfig,
    min_flip_accuracy: f64,
    max_below_accuracy: f64,
) -> Result<BoundReport> {
    if probes.is_empty() {
        return Err(Error::Empty("no flip probes"));
    }
    let mut report = BoundReport::new("budget_identifiability");
    let mut accs = Vec::new();
    for hard in [true, false] {
        let mut c = cfg.clone();
        c.pairs.hard_negatives = hard;
        let model = fit(ds, &c, model_config.clone())?.model;
        let s = score_probes(&model, probes)?;
        let below = frac(s.below.iter().map(|&x| x < 0.5));
        let at = frac(s.at.iter().map(|&x| x >= 0.5));
        let sensitivity =
            s.below.iter().zip(&s.at).map(|(b, a)| (a - b).abs()).sum::<f64>() / probes.len() as f64;
        let tag = if hard { "hard_neg" } else { "no_hard_neg" };
        report.stat(&format!("{tag}_flip_accuracy"), (below + at) / 2.0);
        report.stat(&format!("{tag}_below_accuracy"), below);
        report.stat(&format!("{tag}_at_accuracy"), at);
        report.stat(&format!("{tag}_sensitivity"), sensitivity);
        accs.push((below + at) / 2.0);
        accs.push(below);
    }
    report.push(BoundSample::new(min_flip_accuracy, accs[0]));
    report.push(BoundSample::new(accs[3], max_below_accuracy));
    report.stat("probes", probes.len() as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_trajectories, BehaviorPolicy};
    use crate::env::GridSpec;

    fn model() -> WorldModel {
        WorldModel::new(ModelConfig::new(GridSpec::open(3, 3).obs_dim()), 2).unwrap()
    }

    #[test]
    fn fixture_shapes_and_targets() {
        let f = BayesFixture::deterministic(16, 4, 12, 1);
        assert_eq!(f.inputs.len(), 52);
        assert_eq!(f.bayes_targets().len(), 52);
        let c = BayesFixture::conflicting(16, 5, 12, 1);
        let t = c.bayes_targets();
        assert_eq!(t.len(), 5);
        assert!(t.iter().all(|&(_, p)| p == 0.5));
    }

    #[test]
    fn single_positive_pair_overfits() {
        let f = BayesFixture {
            inputs: vec![FixtureInput {
                source: vec![0.3; 16],
                target: vec![-0.2; 16],
                budget: 4,
                label: 1.0,
            }],
        };
        let (r, _) = check_bayes_reach(&model(), &f, HeadFitConfig::default()).unwrap();
        assert!(r.passed());
        assert!(1.0 - r.get("max_gap").unwrap() >= 0.95);
    }

    #[test]
    fn single_pair_crosses_half_at_offset() {
        let f = BayesFixture::deterministic(16, 1, 12, 7);
        let (r, m) = check_bayes_reach(&model(), &f, HeadFitConfig::default()).unwrap();
        assert!(r.passed(), "{:?}", r.stats);
        let x = &f.inputs[0];
        let (s, t) = (Latent(x.source.clone()), Latent(x.target.clone()));
        // delta is 1 for the first pair
        assert!(m.reachability_score(&s, &t, 0).unwrap() < 0.5);
        assert!(m.reachability_score(&s, &t, 1).unwrap() > 0.5);
    }

    #[test]
    fn probes_sit_on_shortest_paths() {
        let spec = GridSpec::wall();
        let oracle = Oracle::new(&spec);
        let ds = generate_trajectories(&spec, BehaviorPolicy::Waypoint { epsilon: 0.3 }, 10, 30, 4)
            .unwrap();
        let probes = flip_probes(&ds, &oracle, 50, 12, 1);
        assert_eq!(probes.len(), 50);
        assert!(probes.iter().all(|p| (1..=12).contains(&p.delta)));
        assert_eq!(probes, flip_probes(&ds, &oracle, 50, 12, 1));
    }
}
