//! `rcaux`: data generation, training, evaluation, analysis and benchmarking
//! from one config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Arg, ArgMatches, Command};
use rcaux::analysis::{
    check_bayes_reach, check_budget_identifiability, check_compounding, check_cost_distortion,
    check_data_competitiveness, check_margin_robustness, check_preference_inequality,
    flip_probes, BayesFixture, BoundReport, HeadFitConfig, LipschitzProbe,
};
use rcaux::config::RunConfig;
use rcaux::data::{generate_trajectories, load_dataset, save_dataset};
use rcaux::env::Oracle;
use rcaux::eval::{
    build_groups, cost_call_benchmark, evaluate_success, paired_outcomes, write_paired_csv,
    write_results_csv,
};
use rcaux::model::{load_checkpoint, save_checkpoint, WorldModel};
use rcaux::train::fit;

const EXIT_CHECK_FAILED: u8 = 1;
const EXIT_MISSING_FILE: u8 = 3;
const EXIT_VERSION: u8 = 4;
const EXIT_CONFIG: u8 = 5;
const EXIT_FORMAT: u8 = 6;

/// A command ran to completion but one of its checks failed.
#[derive(Debug)]
struct CheckFailed(String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn file_args() -> Vec<Arg> {
    vec![
        Arg::new("config").long("config").value_name("FILE").help("Config file"),
        Arg::new("data").long("data").value_name("FILE").help("Dataset (default <out-dir>/dataset.bin)"),
        Arg::new("checkpoint")
            .long("checkpoint")
            .value_name("FILE")
            .help("Checkpoint (default <out-dir>/checkpoint.bin)"),
        Arg::new("checkpoint-b")
            .long("checkpoint-b")
            .value_name("FILE")
            .help("Second checkpoint for a paired evaluation"),
    ]
}

fn config_args() -> Vec<Arg> {
    RunConfig::KEYS
        .iter()
        .map(|(section, key)| {
            let flag = key.replace('_', "-");
            Arg::new(*key)
                .long(flag)
                .value_name("VALUE")
                .help(format!("[{section}] {key}"))
        })
        .collect()
}

fn cli() -> Command {
    let sub = |name: &'static str, about: &'static str| {
        Command::new(name)
            .about(about)
            .args(file_args())
            .args(config_args())
    };
    Command::new("rcaux")
        .about("Reachability-corrected latent world models on grid mazes")
        .subcommand_required(true)
        .subcommand(sub("gen-data", "Generate an offline trajectory dataset"))
        .subcommand(sub("train", "Train a world model on a dataset"))
        .subcommand(sub("eval", "Closed-loop success rates over fixed episode groups"))
        .subcommand(sub("analyze", "Numerical checks of the error and reachability bounds"))
        .subcommand(sub("bench", "Gated versus ungated scoring-call timing"))
}

fn load_config(m: &ArgMatches) -> Result<RunConfig> {
    let overrides: Vec<(String, String)> = RunConfig::KEYS
        .iter()
        .filter_map(|(_, key)| {
            m.get_one::<String>(key)
                .map(|v| (key.to_string(), v.clone()))
        })
        .collect();
    let file = m.get_one::<String>("config").map(PathBuf::from);
    if let Some(f) = &file {
        require(f)?;
    }
    Ok(RunConfig::load(file.as_deref(), &overrides)?)
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{} not found", path.display()),
        ))
        .context(format!("missing file {}", path.display()));
    }
    Ok(())
}

fn path_arg(m: &ArgMatches, name: &str, out: &Path, default: &str) -> PathBuf {
    m.get_one::<String>(name)
        .map(PathBuf::from)
        .unwrap_or_else(|| out.join(default))
}

fn load_model(path: &Path) -> Result<WorldModel> {
    require(path)?;
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn method_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn gen_data(cfg: &RunConfig, m: &ArgMatches, out: &Path) -> Result<()> {
    let spec = cfg.grid()?;
    let ds = generate_trajectories(&spec, cfg.policy()?, cfg.n_trajectories, cfg.trajectory_len, cfg.seed)?;
    let path = path_arg(m, "data", out, "dataset.bin");
    save_dataset(&ds, &path)?;
    println!("wrote {} trajectories to {}", ds.len(), path.display());
    Ok(())
}

fn train(cfg: &RunConfig, m: &ArgMatches, out: &Path) -> Result<()> {
    let data = path_arg(m, "data", out, "dataset.bin");
    require(&data)?;
    let ds = load_dataset(&data)?;
    let obs_dim = ds.obs_dim().context("empty dataset")?;
    let fitted = fit(&ds, &cfg.train_config()?, cfg.model_config(obs_dim))?;
    let ckpt = path_arg(m, "checkpoint", out, "checkpoint.bin");
    save_checkpoint(&fitted.model, &ckpt)?;
    fitted.metrics.save(&out.join("metrics.csv"))?;
    if let Some(last) = fitted.metrics.rows.last() {
        println!("epoch {} loss {:.6}; checkpoint {}", last.epoch, last.loss_total, ckpt.display());
    }
    Ok(())
}

fn eval(cfg: &RunConfig, m: &ArgMatches, out: &Path) -> Result<()> {
    let spec = cfg.grid()?;
    let planner = cfg.planner()?;
    let groups = build_groups(&spec, cfg.n_groups, cfg.group_size, cfg.seed)?;
    let path_a = path_arg(m, "checkpoint", out, "checkpoint.bin");
    let model_a = load_model(&path_a)?;
    let a = evaluate_success(&spec, &model_a, &planner, &groups, &method_name(&path_a))?;
    println!("{}: mean {:.4} std {:.4} groups {:?}", method_name(&path_a), a.mean, a.std, a.group_rates);
    let mut rows = a.results.clone();
    if let Some(pb) = m.get_one::<String>("checkpoint-b").map(PathBuf::from) {
        let model_b = load_model(&pb)?;
        let b = evaluate_success(&spec, &model_b, &planner, &groups, &method_name(&pb))?;
        println!("{}: mean {:.4} std {:.4} groups {:?}", method_name(&pb), b.mean, b.std, b.group_rates);
        let counts = paired_outcomes(&a.results, &b.results, &groups)?;
        println!(
            "paired: both_fail {} a_only {} b_only {} both_succeed {}",
            counts.both_fail, counts.a_only, counts.b_only, counts.both_succeed
        );
        write_paired_csv(&a.results, &b.results, &counts, std::fs::File::create(out.join("paired.csv"))?)?;
        rows.extend(b.results);
    }
    write_results_csv(&rows, std::fs::File::create(out.join("results.csv"))?)?;
    Ok(())
}

fn analyze(cfg: &RunConfig, m: &ArgMatches, out: &Path) -> Result<()> {
    let spec = cfg.grid()?;
    let oracle = Oracle::new(&spec);
    let model = load_model(&path_arg(m, "checkpoint", out, "checkpoint.bin"))?;
    let data = path_arg(m, "data", out, "dataset.bin");
    require(&data)?;
    let ds = load_dataset(&data)?;
    let probe = LipschitzProbe {
        n_pairs: cfg.lipschitz_pairs,
        radius: cfg.lipschitz_radius,
    };
    let k = cfg.rollout_horizon;
    let seed = cfg.seed;
    let mut reports: Vec<BoundReport> = vec![
        check_compounding(&model, &ds, k, cfg.n_segments, probe, seed)?,
        check_margin_robustness(&model, &ds, k.max(2), cfg.n_segments, probe, seed)?,
        check_data_competitiveness(&ds, &oracle)?,
        check_preference_inequality(cfg.preference_tuples, cfg.floor, seed)?,
    ];
    let (terminal, mh) = check_cost_distortion(&model, &ds, cfg.horizon, cfg.distortion_samples, None, seed)?;
    reports.push(terminal);
    reports.push(mh);
    let fit_cfg = HeadFitConfig::default();
    let dz = model.latent_dim();
    let h_max = model.h_max() as u32;
    reports.push(check_bayes_reach(&model, &BayesFixture::deterministic(dz, 4, h_max, seed), fit_cfg)?.0);
    let mut conflicting = check_bayes_reach(&model, &BayesFixture::conflicting(dz, 8, h_max, seed), fit_cfg)?.0;
    conflicting.name.push_str("_conflicting");
    reports.push(conflicting);
    if cfg.identifiability {
        let probes = flip_probes(&ds, &oracle, 500, h_max, seed);
        reports.push(check_budget_identifiability(
            &ds,
            &probes,
            &cfg.train_config()?,
            &model.config,
            0.9,
            0.6,
        )?);
    }
    let mut failed = Vec::new();
    for r in &reports {
        r.save(&out.join(format!("{}.csv", r.name)))?;
        println!("{}: {} samples, {} violations", r.name, r.samples.len(), r.violations());
        if !r.passed() {
            failed.push(format!("{} ({} violations)", r.name, r.violations()));
        }
    }
    if !failed.is_empty() {
        bail!(CheckFailed(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(())
}

fn bench(cfg: &RunConfig, m: &ArgMatches, out: &Path) -> Result<()> {
    let spec = cfg.grid()?;
    let model = load_model(&path_arg(m, "checkpoint", out, "checkpoint.bin"))?;
    let report = cost_call_benchmark(
        &spec,
        &model,
        &cfg.planner()?,
        cfg.bench_warmup,
        cfg.bench_measured,
        cfg.seed,
    )?;
    report.write_csv(std::fs::File::create(out.join("timing.csv"))?)?;
    println!(
        "base {:.4} ms gated {:.4} ms overhead {:.1}%",
        report.base_median(),
        report.gated_median(),
        100.0 * report.overhead()
    );
    Ok(())
}

fn run() -> Result<()> {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("subcommand is required");
    let cfg = load_config(m)?;
    let out = PathBuf::from(&cfg.out_dir);
    cfg.echo(&out)?;
    match name {
        "gen-data" => gen_data(&cfg, m, &out),
        "train" => train(&cfg, m, &out),
        "eval" => eval(&cfg, m, &out),
        "analyze" => analyze(&cfg, m, &out),
        "bench" => bench(&cfg, m, &out),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK_FAILED;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rcaux::Error>() {
            return match e {
                rcaux::Error::Version { .. } => EXIT_VERSION,
                rcaux::Error::Config(_) => EXIT_CONFIG,
                rcaux::Error::Format(_) => EXIT_FORMAT,
                rcaux::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING_FILE,
                _ => EXIT_CHECK_FAILED,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING_FILE;
            }
        }
    }
    EXIT_CHECK_FAILED
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
