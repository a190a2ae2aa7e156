//! Success-rate evaluation over fixed episode groups, paired outcome tables
//! and the planner cost-call microbenchmark.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{observe, sample_episode_with, Action, GoalDistance, GridSpec, Oracle, State};
use crate::error::{Error, Result};
use crate::model::{Context, WorldModel};
use crate::planner::{cost_call, mpc_execute, PlannerConfig};

pub const DEFAULT_GROUPS: usize = 5;
pub const DEFAULT_GROUP_SIZE: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub start: State,
    pub goal: State,
    /// Planner seed; also the seed the start/goal pair was drawn from.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeGroup {
    pub id: usize,
    pub episodes: Vec<EpisodeSpec>,
}

impl EpisodeGroup {
    pub fn size(&self) -> usize {
        self.episodes.len()
    }
}

/// `n_groups` fixed groups with pairwise distinct episode seeds. Every goal is
/// reachable from its start and differs from it.
pub fn build_groups(
    spec: &GridSpec,
    n_groups: usize,
    group_size: usize,
    seed: u64,
) -> Result<Vec<EpisodeGroup>> {
    if group_size == 0 {
        return Err(Error::Config("group_size must be >= 1".into()));
    }
    let oracle = Oracle::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = BTreeSet::new();
    let mut groups = Vec::with_capacity(n_groups);
    for id in 0..n_groups {
        let mut episodes = Vec::with_capacity(group_size);
        while episodes.len() < group_size {
            let s: u64 = rng.gen();
            if !used.insert(s) {
                continue;
            }
            let (start, goal) = sample_episode_with(&oracle, s, GoalDistance::default())?;
            episodes.push(EpisodeSpec {
                start,
                goal,
                seed: s,
            });
        }
        groups.push(EpisodeGroup { id, episodes });
    }
    Ok(groups)
}

/// One row of the results CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeResult {
    pub method: String,
    pub group: usize,
    pub episode: usize,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub final_base_cost: f64,
    pub final_reach: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuccessReport {
    pub group_rates: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation of the group rates.
    pub std: f64,
    pub results: Vec<EpisodeResult>,
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize(results: Vec<EpisodeResult>, groups: &[EpisodeGroup]) -> SuccessReport {
    let group_rates: Vec<f64> = groups
        .iter()
        .map(|g| {
            let hits = results
                .iter()
                .filter(|r| r.group == g.id && r.success)
                .count();
            hits as f64 / g.size().max(1) as f64
        })
        .collect();
    let (mean, std) = mean_std(&group_rates);
    SuccessReport {
        group_rates,
        mean,
        std,
        results,
    }
}

/// Runs every episode of every group closed-loop. Results come back in group,
/// then episode order.
pub fn evaluate_success(
    spec: &GridSpec,
    model: &WorldModel,
    cfg: &PlannerConfig,
    groups: &[EpisodeGroup],
    method: &str,
) -> Result<SuccessReport> {
    let mut results = Vec::new();
    for g in groups {
        for (i, ep) in g.episodes.iter().enumerate() {
            let out = mpc_execute(spec, model, cfg, ep.start, ep.goal, ep.seed)?;
            results.push(EpisodeResult {
                method: method.to_string(),
                group: g.id,
                episode: i,
                seed: ep.seed,
                success: out.success,
                steps: out.steps,
                final_base_cost: out.final_base_cost,
                final_reach: out.final_reach,
            });
        }
    }
    Ok(summarize(results, groups))
}

pub fn write_results_csv<W: Write>(results: &[EpisodeResult], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "method",
        "group",
        "episode",
        "seed",
        "success",
        "steps",
        "final_base_cost",
        "final_R",
    ])?;
    for r in results {
        w.write_record([
            r.method.clone(),
            r.group.to_string(),
            r.episode.to_string(),
            r.seed.to_string(),
            u8::from(r.success).to_string(),
            r.steps.to_string(),
            r.final_base_cost.to_string(),
            r.final_reach.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_results(results: &[EpisodeResult], path: &Path) -> Result<()> {
    write_results_csv(results, std::fs::File::create(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PairedOutcome {
    pub both_fail: usize,
    pub a_only: usize,
    pub b_only: usize,
    pub both_succeed: usize,
}

impl PairedOutcome {
    pub fn total(&self) -> usize {
        self.both_fail + self.a_only + self.b_only + self.both_succeed
    }

    pub fn add(&mut self, a: bool, b: bool) {
        match (a, b) {
            (false, false) => self.both_fail += 1,
            (true, false) => self.a_only += 1,
            (false, true) => self.b_only += 1,
            (true, true) => self.both_succeed += 1,
        }
    }
}

/// Four-way outcome counts. Both result lists must cover exactly the episodes
/// of `groups`, in order.
pub fn paired_outcomes(
    a: &[EpisodeResult],
    b: &[EpisodeResult],
    groups: &[EpisodeGroup],
) -> Result<PairedOutcome> {
    let expected: Vec<(usize, usize, u64)> = groups
        .iter()
        .flat_map(|g| g.episodes.iter().enumerate().map(move |(i, e)| (g.id, i, e.seed)))
        .collect();
    for (name, rs) in [("A", a), ("B", b)] {
        if rs.len() != expected.len() {
            return Err(Error::GroupMismatch(format!(
                "{name} has {} results for {} episodes",
                rs.len(),
                expected.len()
            )));
        }
        if let Some((r, e)) = rs
            .iter()
            .zip(&expected)
            .find(|(r, e)| (r.group, r.episode, r.seed) != **e)
        {
            return Err(Error::GroupMismatch(format!(
                "{name} row (group {}, episode {}, seed {}) expected (group {}, episode {}, seed {})",
                r.group, r.episode, r.seed, e.0, e.1, e.2
            )));
        }
    }
    let mut out = PairedOutcome::default();
    for (x, y) in a.iter().zip(b) {
        out.add(x.success, y.success);
    }
    Ok(out)
}

pub fn write_paired_csv<W: Write>(
    a: &[EpisodeResult],
    b: &[EpisodeResult],
    counts: &PairedOutcome,
    out: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["group", "episode", "seed", "success_a", "success_b"])?;
    for (x, y) in a.iter().zip(b) {
        w.write_record([
            x.group.to_string(),
            x.episode.to_string(),
            x.seed.to_string(),
            u8::from(x.success).to_string(),
            u8::from(y.success).to_string(),
        ])?;
    }
    for (name, v) in [
        ("both_fail", counts.both_fail),
        ("a_only", counts.a_only),
        ("b_only", counts.b_only),
        ("both_succeed", counts.both_succeed),
    ] {
        w.write_record([format!("summary:{name}"), v.to_string(), String::new(), String::new(), String::new()])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-call timings of the ungated and gated scorers.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub n_candidates: usize,
    pub horizon: usize,
    pub base_ms: Vec<f64>,
    pub gated_ms: Vec<f64>,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl BenchReport {
    pub fn base_median(&self) -> f64 {
        median(&self.base_ms)
    }

    pub fn gated_median(&self) -> f64 {
        median(&self.gated_ms)
    }

    /// Relative cost of gating: `gated / base - 1` on medians.
    pub fn overhead(&self) -> f64 {
        self.gated_median() / self.base_median() - 1.0
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["variant", "call", "ms", "n_candidates", "horizon"])?;
        for (variant, xs) in [("base", &self.base_ms), ("gated", &self.gated_ms)] {
            for (i, ms) in xs.iter().enumerate() {
                w.write_record([
                    variant.to_string(),
                    i.to_string(),
                    ms.to_string(),
                    self.n_candidates.to_string(),
                    self.horizon.to_string(),
                ])?;
            }
        }
        for (name, v) in [
            ("base_median_ms", self.base_median()),
            ("gated_median_ms", self.gated_median()),
            ("overhead", self.overhead()),
        ] {
            w.write_record([format!("summary:{name}"), String::new(), v.to_string(), String::new(), String::new()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Times full scoring passes over one fixed batch of `cfg.n_samples` random
/// candidates, ungated against gated, alternating calls so both variants see
/// the same machine state. Only the scoring call is inside the timer.
pub fn cost_call_benchmark(
    spec: &GridSpec,
    model: &WorldModel,
    cfg: &PlannerConfig,
    n_warmup: usize,
    n_measured: usize,
    seed: u64,
) -> Result<BenchReport> {
    if n_measured == 0 {
        return Err(Error::Config("n_measured must be >= 1".into()));
    }
    let (start, goal) = sample_episode_with(&Oracle::new(spec), seed, GoalDistance::default())?;
    let z = model.encode(&observe(spec, start)?)?;
    let z_goal = model.encode(&observe(spec, goal)?)?;
    let scorer = model.goal_scorer(&z_goal);
    let l = model.config.context_len;
    let context = Context {
        latents: vec![z; l],
        actions: vec![Action::Stay; l - 1],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let candidates: Vec<Vec<Action>> = (0..cfg.n_samples)
        .map(|_| {
            (0..cfg.horizon)
                .map(|_| Action::ALL[rng.gen_range(0..Action::COUNT)])
                .collect()
        })
        .collect();
    let base = PlannerConfig {
        gating: false,
        ..cfg.clone()
    };
    let gated = PlannerConfig {
        gating: true,
        ..cfg.clone()
    };
    let time = |c: &PlannerConfig| -> Result<f64> {
        let t = Instant::now();
        let out = cost_call(model, &scorer, &context, &candidates, c)?;
        let ms = t.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(out);
        Ok(ms)
    };
    for _ in 0..n_warmup {
        time(&base)?;
        time(&gated)?;
    }
    let mut report = BenchReport {
        n_candidates: candidates.len(),
        horizon: cfg.horizon,
        base_ms: Vec::with_capacity(n_measured),
        gated_ms: Vec::with_capacity(n_measured),
    };
    for i in 0..n_measured {
        // Alternate which variant goes first.
        if i % 2 == 0 {
            report.base_ms.push(time(&base)?);
            report.gated_ms.push(time(&gated)?);
        } else {
            report.gated_ms.push(time(&gated)?);
            report.base_ms.push(time(&base)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn result(group: usize, episode: usize, seed: u64, success: bool) -> EpisodeResult {
        EpisodeResult {
            method: "m".into(),
            group,
            episode,
            seed,
            success,
            steps: 1,
            final_base_cost: 0.0,
            final_reach: 0.0,
        }
    }

    #[test]
    fn groups_are_deterministic_disjoint_and_feasible() {
        let spec = GridSpec::two_room();
        let oracle = Oracle::new(&spec);
        let a = build_groups(&spec, DEFAULT_GROUPS, DEFAULT_GROUP_SIZE, 4).unwrap();
        assert_eq!(a, build_groups(&spec, 5, 50, 4).unwrap());
        assert_eq!(a.len(), 5);
        let seeds: BTreeSet<u64> = a.iter().flat_map(|g| g.episodes.iter().map(|e| e.seed)).collect();
        assert_eq!(seeds.len(), 250);
        for e in a.iter().flat_map(|g| &g.episodes) {
            assert_ne!(e.start, e.goal);
            assert!(oracle.distance(e.start, e.goal).is_some());
        }
        assert!(build_groups(&spec, 1, 0, 4).is_err());
    }

    #[test]
    fn group_statistics() {
        let (m, s) = mean_std(&[0.8, 1.0, 0.9, 0.9, 0.9]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - 0.004_f64.sqrt()).abs() < 1e-12);
        assert_eq!(mean_std(&[1.0; 5]), (1.0, 0.0));
    }

    #[test]
    fn paired_counts_enumerate() {
        let groups = vec![EpisodeGroup {
            id: 0,
            episodes: (0..4)
                .map(|i| EpisodeSpec {
                    start: State::new(0, 0),
                    goal: State::new(0, 1),
                    seed: i,
                })
                .collect(),
        }];
        let a: Vec<_> = [true, false, true, false].iter().enumerate().map(|(i, &s)| result(0, i, i as u64, s)).collect();
        let b: Vec<_> = [true, true, false, false].iter().enumerate().map(|(i, &s)| result(0, i, i as u64, s)).collect();
        let p = paired_outcomes(&a, &b, &groups).unwrap();
        assert_eq!(
            p,
            PairedOutcome {
                both_fail: 1,
                a_only: 1,
                b_only: 1,
                both_succeed: 1
            }
        );
        assert_eq!(p.total(), 4);
        let same = paired_outcomes(&a, &a, &groups).unwrap();
        assert_eq!((same.a_only, same.b_only), (0, 0));
        let mut shifted = b.clone();
        shifted[2].seed = 99;
        assert!(matches!(paired_outcomes(&a, &shifted, &groups), Err(Error::GroupMismatch(_))));
        assert!(paired_outcomes(&a, &b[..3], &groups).is_err());
    }

    #[test]
    fn results_csv_header() {
        let mut buf = Vec::new();
        write_results_csv(&[result(1, 2, 3, true)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "method,group,episode,seed,success,steps,final_base_cost,final_R\nm,1,2,3,1,1,0,0\n"
        );
    }

    #[test]
    fn benchmark_shapes() {
        let spec = GridSpec::open(5, 5);
        let model = WorldModel::new(ModelConfig::new(spec.obs_dim()), 0).unwrap();
        let cfg = PlannerConfig {
            n_samples: 20,
            top_k: 5,
            ..PlannerConfig::default()
        };
        let r = cost_call_benchmark(&spec, &model, &cfg, 1, 3, 0).unwrap();
        assert_eq!((r.base_ms.len(), r.gated_ms.len(), r.n_candidates), (3, 3, 20));
        assert!(r.overhead().is_finite());
        assert!(cost_call_benchmark(&spec, &model, &cfg, 1, 0, 0).is_err());
    }

    #[test]
    fn all_success_fixture() {
        let groups = build_groups(&GridSpec::open(5, 5), 2, 3, 0).unwrap();
        let results = groups
            .iter()
            .flat_map(|g| g.episodes.iter().enumerate().map(|(i, e)| result(g.id, i, e.seed, true)))
            .collect();
        let r = summarize(results, &groups);
        assert_eq!((r.mean, r.std), (1.0, 0.0));
    }
}
