use std::io::Write;

use super::{cem_plan, PlannerConfig};
use crate::env::{observe, step, Action, GridSpec, State};
use crate::error::Result;
use crate::model::{squared_distance, Context, Latent, WorldModel};

/// One planner diagnostic line: a CEM iteration of the replan at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub step: usize,
    pub iter: usize,
    pub best_cost: f64,
    pub best_base: f64,
    pub best_reach: f64,
    /// First action of the plan selected at this step.
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    pub success: bool,
    pub steps: usize,
    /// Squared latent distance between the final observation and the goal.
    pub final_base_cost: f64,
    /// Trajectory reachability score of the last selected plan (0 if none).
    pub final_reach: f64,
    pub diagnostics: Vec<DiagnosticRow>,
}

/// Seed for the replan issued after `step` environment steps.
fn plan_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Closed-loop execution: replan from the current observation, execute the
/// first `replan_every` actions, repeat until the goal state is hit or the
/// budget runs out. Success is judged on ground-truth states.
pub fn mpc_execute(
    spec: &GridSpec,
    model: &WorldModel,
    cfg: &PlannerConfig,
    start: State,
    goal: State,
    seed: u64,
) -> Result<EpisodeOutcome> {
    cfg.validate()?;
    spec.check_state(start)?;
    let z_goal = model.encode(&observe(spec, goal)?)?;
    let l = model.config.context_len;
    let z0 = model.encode(&observe(spec, start)?)?;
    // Before L observations exist the context is padded with the start.
    let mut latents: Vec<Latent> = vec![z0; l];
    let mut history: Vec<Action> = vec![Action::Stay; l - 1];
    let mut state = start;
    let mut out = EpisodeOutcome {
        states: vec![start],
        actions: Vec::new(),
        success: state == goal,
        steps: 0,
        final_base_cost: 0.0,
        final_reach: 0.0,
        diagnostics: Vec::new(),
    };
    while !out.success && out.steps < cfg.budget {
        let context = Context {
            latents: latents[latents.len() - l..].to_vec(),
            actions: history[history.len() - (l - 1)..].to_vec(),
        };
        let plan = cem_plan(model, &context, &z_goal, cfg, plan_seed(seed, out.steps))?;
        out.final_reach = plan.best.reach;
        for it in &plan.iterations {
            out.diagnostics.push(DiagnosticRow {
                step: out.steps,
                iter: it.iter,
                best_cost: it.best_cost,
                best_base: it.best_base,
                best_reach: it.best_reach,
                action: plan.best.actions[0],
            });
        }
        for &a in plan.best.actions.iter().take(cfg.replan_every) {
            state = step(spec, state, a)?;
            out.states.push(state);
            out.actions.push(a);
            out.steps += 1;
            latents.push(model.encode(&observe(spec, state)?)?);
            history.push(a);
            if state == goal {
                out.success = true;
            }
            if out.success || out.steps >= cfg.budget {
                break;
            }
        }
        if latents.len() > l {
            latents.drain(..latents.len() - l);
        }
        if history.len() > l {
            history.drain(..history.len() - l);
        }
    }
    let last = latents.last().expect("context is never empty");
    out.final_base_cost = squared_distance(&last.0, &z_goal.0);
    Ok(out)
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "iter", "best_cost", "best_base", "best_R", "action"])?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.iter.to_string(),
            r.best_cost.to_string(),
            r.best_base.to_string(),
            r.best_reach.to_string(),
            r.action.name().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(spec: &GridSpec) -> WorldModel {
        WorldModel::new(ModelConfig::new(spec.obs_dim()), 1).unwrap()
    }

    fn quick() -> PlannerConfig {
        PlannerConfig {
            n_samples: 30,
            top_k: 5,
            n_iters: 2,
            budget: 4,
            ..PlannerConfig::default()
        }
    }

    #[test]
    fn start_at_goal_succeeds_immediately() {
        let spec = GridSpec::two_room();
        let s = State::new(2, 2);
        let o = mpc_execute(&spec, &model(&spec), &quick(), s, s, 0).unwrap();
        assert!(o.success);
        assert_eq!(o.steps, 0);
        assert!(o.diagnostics.is_empty());
        assert_eq!(o.final_base_cost, 0.0);
    }

    #[test]
    fn zero_budget_fails() {
        let spec = GridSpec::two_room();
        let cfg = PlannerConfig {
            budget: 0,
            ..quick()
        };
        let o = mpc_execute(&spec, &model(&spec), &cfg, State::new(0, 0), State::new(8, 8), 0)
            .unwrap();
        assert!(!o.success);
        assert_eq!(o.steps, 0);
    }

    #[test]
    fn budget_bounds_steps_and_states_follow_dynamics() {
        let spec = GridSpec::two_room();
        let m = model(&spec);
        let o = mpc_execute(&spec, &m, &quick(), State::new(0, 0), State::new(8, 8), 3).unwrap();
        assert_eq!(o.steps, 4);
        assert_eq!(o.states.len(), 5);
        for (w, a) in o.states.windows(2).zip(&o.actions) {
            assert_eq!(step(&spec, w[0], *a).unwrap(), w[1]);
        }
        assert_eq!(o.diagnostics.len(), 4 * 2);
        let mut buf = Vec::new();
        write_diagnostics_csv(&o.diagnostics, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,iter,best_cost,best_base,best_R,action\n"));
    }

    #[test]
    fn replanning_cadence() {
        let spec = GridSpec::two_room();
        let m = model(&spec);
        let cfg = PlannerConfig {
            replan_every: 3,
            budget: 7,
            ..quick()
        };
        let o = mpc_execute(&spec, &m, &cfg, State::new(0, 0), State::new(8, 8), 3).unwrap();
        let replans: std::collections::BTreeSet<usize> =
            o.diagnostics.iter().map(|d| d.step).collect();
        assert_eq!(replans.into_iter().collect::<Vec<_>>(), vec![0, 3, 6]);
    }

    #[test]
    fn longer_context_runs() {
        let spec = GridSpec::two_room();
        let mut mc = ModelConfig::new(spec.obs_dim());
        mc.context_len = 2;
        let m = WorldModel::new(mc, 1).unwrap();
        let o = mpc_execute(&spec, &m, &quick(), State::new(0, 0), State::new(8, 8), 3).unwrap();
        assert_eq!(o.steps, 4);
    }
}
