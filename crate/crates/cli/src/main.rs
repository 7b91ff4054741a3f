//! Command-line front-end: model validation, propagation runs, error-bound
//! and tail-probability reports, timing comparisons, and the receding-horizon
//! replay demo.
//!
//! Exit codes: 0 success, 1 parse/validation failure, 2 element-count limit
//! exceeded, 3 divergence of the truncated system (partial CSV retained).

mod csvio;
mod replay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use momentprop::bounds::{bound_report, build_error_coefficients, refined_row_bound, JStrategy};
use momentprop::error::Error as MError;
use momentprop::init_moments::InitialMomentEngine;
use momentprop::model::PolynomialSystemSpec;
use momentprop::oracle::{empirical_moments, empirical_tail};
use momentprop::propagate::{extract_moment, init_state, TruncatedPropagator};
use momentprop::tail::{safety_bound, safety_radius};
use momentprop::{load_model, save_model, ScalarDistribution};

use csvio::{fmt, CsvWriter};

#[derive(Parser)]
#[command(
    name = "momentprop",
    version,
    about = "Moment propagation for stochastic polynomial systems via truncated Carleman linearization"
)]
struct Cli {
    /// Worker threads for block assembly and sampling (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Per-matrix element-count limit (default 10^7).
    #[arg(long, global = true)]
    size_limit: Option<u64>,

    /// RNG seed; overrides the MOMENT_SEED environment variable.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Bypass the propagator disk cache (./.moment_cache).
    #[arg(long, global = true)]
    no_cache: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum JStrategyArg {
    RowNorm,
    MomentNorm,
}

impl From<JStrategyArg> for JStrategy {
    fn from(v: JStrategyArg) -> Self {
        match v {
            JStrategyArg::RowNorm => JStrategy::ByRowNorm,
            JStrategyArg::MomentNorm => JStrategy::ByMomentNorm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoSystem {
    Logistic,
    Vehicle,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load a model file and report its shape.
    Validate {
        #[arg(long)]
        model: PathBuf,
    },
    /// Write the benchmark model files into a directory.
    Demo {
        #[arg(value_enum)]
        system: DemoSystem,
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
    /// Iterate the truncated moment system and write the trajectory.
    Propagate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nt: usize,
        #[arg(long)]
        steps: usize,
        /// Comma-separated Kronecker orders to write.
        #[arg(long, default_value = "1,2")]
        blocks: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Truncation-error bounds for one moment order over a |J| sweep.
    ErrorBound {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nt: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        j0: usize,
        #[arg(long, value_enum, default_value = "moment-norm")]
        j_strategy: JStrategyArg,
        /// Comma-separated subset sizes; `full` selects every index.
        #[arg(long, default_value = "0,2,4,8,16,full")]
        j_sizes: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Safety radii at a target exceedance probability per time step.
    Tail {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nt: usize,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        pmax: f64,
        /// Refinement budget: |J| = this value times t.
        #[arg(long, default_value_t = 6)]
        j_per_t: usize,
        /// Cross-check each radius with this many Monte Carlo samples.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Online-time comparison: propagation vs Monte Carlo estimation.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value = "4,16,64,256")]
        nt_list: String,
        #[arg(long, default_value = "10,10000")]
        mc_list: String,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Receding-horizon replay: measure, condition, predict, repeat.
    Replay {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        nt: usize,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        steps: usize,
        /// JSON array of four measurement-noise distributions [X, Y, psi, v].
        #[arg(long)]
        noise: PathBuf,
        /// Slip angle used to reconstruct the heading components.
        #[arg(long, default_value_t = std::f64::consts::PI / 8.0)]
        beta: f64,
        #[arg(long, default_value_t = 0.05)]
        pmax: f64,
        /// Monte Carlo cross-check sample count per measurement step.
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code_for(e: &MError) -> u8 {
    match e {
        MError::SizeLimit { .. } => 2,
        MError::Divergence { .. } => 3,
        _ => 1,
    }
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    if let Some(s) = flag {
        return s;
    }
    if let Ok(env) = std::env::var("MOMENT_SEED") {
        if let Ok(s) = env.parse() {
            return s;
        }
        log::warn!("MOMENT_SEED is not a valid u64, using 0");
    }
    0
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>, MError> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| MError::validation(format!("bad list entry {p:?}")))
        })
        .collect()
}

fn cache_dir(no_cache: bool) -> Option<PathBuf> {
    if no_cache {
        None
    } else {
        Some(PathBuf::from("./.moment_cache"))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    if let Some(limit) = cli.size_limit {
        momentprop::kron::set_size_limit(limit);
    }
    let seed = resolve_seed(cli.seed);
    let cache = cache_dir(cli.no_cache);
    let result = match cli.cmd {
        Cmd::Validate { model } => cmd_validate(&model),
        Cmd::Demo { system, dir } => cmd_demo(system, &dir),
        Cmd::Propagate { model, nt, steps, blocks, out } => {
            cmd_propagate(&model, nt, steps, &blocks, &out, cache.as_deref())
        }
        Cmd::ErrorBound { model, nt, steps, j0, j_strategy, j_sizes, out } => {
            cmd_error_bound(&model, nt, steps, j0, j_strategy.into(), &j_sizes, &out)
        }
        Cmd::Tail { model, nt, steps, pmax, j_per_t, mc, out } => {
            cmd_tail(&model, nt, steps, pmax, j_per_t, mc, seed, &out, cache.as_deref())
        }
        Cmd::Bench { model, nt_list, mc_list, reps, steps, out } => {
            cmd_bench(&model, &nt_list, &mc_list, reps, steps, seed, &out, cache.as_deref())
        }
        Cmd::Replay { model, nt, horizon, steps, noise, beta, pmax, mc, out } => replay::run(
            &model,
            nt,
            horizon,
            steps,
            &noise,
            beta,
            pmax,
            mc,
            seed,
            &out,
            cache.as_deref(),
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn cmd_validate(model: &Path) -> Result<(), MError> {
    let spec = load_model(model)?;
    println!(
        "{}: n={}, degree={}, parameters={}, sources={}, hash={}",
        spec.name,
        spec.coeffs.n(),
        spec.coeffs.degree(),
        spec.coeffs.params().len(),
        spec.init.sources.len(),
        spec.content_hash()
    );
    Ok(())
}

fn cmd_demo(system: DemoSystem, dir: &Path) -> Result<(), MError> {
    std::fs::create_dir_all(dir)?;
    match system {
        DemoSystem::Logistic => {
            let spec = momentprop::logistic_benchmark_model();
            let path = dir.join("logistic.json");
            save_model(&spec, &path)?;
            println!("wrote {}", path.display());
            println!("try:");
            println!("  momentprop propagate --model {} --nt 16 --steps 8 --out logistic_traj.csv", path.display());
            println!("  momentprop error-bound --model {} --nt 16 --steps 4 --j0 2 --j-sizes 0,2,4,8,16,32,full --out logistic_bounds.csv", path.display());
            println!("  momentprop tail --model {} --nt 16 --steps 5 --pmax 0.05 --mc 10000 --out logistic_tail.csv", path.display());
            println!("  momentprop bench --model {} --out logistic_bench.csv", path.display());
        }
        DemoSystem::Vehicle => {
            let spec = momentprop::bicycle_benchmark_model();
            let path = dir.join("vehicle.json");
            save_model(&spec, &path)?;
            let noise = dir.join("vehicle_noise.json");
            let noise_spec = vec![
                ScalarDistribution::gaussian(0.0, 0.02),
                ScalarDistribution::gaussian(0.0, 0.02),
                ScalarDistribution::gaussian(0.0, 0.01),
                ScalarDistribution::gaussian(0.0, 0.05),
            ];
            std::fs::write(
                &noise,
                serde_json::to_string_pretty(&noise_spec).expect("serializable"),
            )?;
            println!("wrote {}", path.display());
            println!("wrote {}", noise.display());
            println!("try:");
            println!("  momentprop propagate --model {} --nt 4 --steps 10 --blocks 1 --out vehicle_traj.csv", path.display());
            println!("  momentprop replay --model {} --nt 4 --horizon 4 --steps 5 --noise {} --out vehicle_replay.csv", path.display(), noise.display());
        }
    }
    Ok(())
}

fn cmd_propagate(
    model: &Path,
    nt: usize,
    steps: usize,
    blocks: &str,
    out: &Path,
    cache: Option<&Path>,
) -> Result<(), MError> {
    let spec = load_model(model)?;
    let blocks = parse_usize_list(blocks)?;
    for &b in &blocks {
        if b > nt {
            return Err(MError::BlockOutOfRange { index: b, max: nt });
        }
    }
    let prop = TruncatedPropagator::build(&spec, nt, cache)?;
    let eng = InitialMomentEngine::new(&spec.init)?;
    let s0 = init_state(&eng, nt)?;
    let (states, diverged) = prop.propagate_partial(s0, steps)?;

    let mut w = CsvWriter::create(out, &["t", "block", "index", "value"])?;
    for state in &states {
        for &b in &blocks {
            let block = extract_moment(state, b)?;
            for (idx, v) in block.iter().enumerate() {
                w.row(&[
                    state.t.to_string(),
                    b.to_string(),
                    idx.to_string(),
                    fmt(*v),
                ])?;
            }
        }
    }
    if let Some(step) = diverged {
        w.row(&[step.to_string(), "status".into(), "divergence".into(), String::new()])?;
        w.finish()?;
        return Err(MError::Divergence { step });
    }
    w.finish()?;
    println!("wrote {} ({} steps)", out.display(), states.len() - 1);
    Ok(())
}

fn parse_j_sizes(s: &str, full: usize) -> Result<Vec<usize>, MError> {
    s.split(',')
        .map(|p| {
            let p = p.trim();
            if p.eq_ignore_ascii_case("full") {
                Ok(full)
            } else {
                p.parse::<usize>()
                    .map(|k| k.min(full))
                    .map_err(|_| MError::validation(format!("bad |J| entry {p:?}")))
            }
        })
        .collect()
}

fn cmd_error_bound(
    model: &Path,
    nt: usize,
    steps: usize,
    j0: usize,
    strategy: JStrategy,
    j_sizes: &str,
    out: &Path,
) -> Result<(), MError> {
    let spec = load_model(model)?;
    let ec = build_error_coefficients(&spec.coeffs, j0, steps, nt)?;
    let eng = InitialMomentEngine::new(&spec.init)?;
    let sizes = parse_j_sizes(j_sizes, ec.max_order() + 1)?;
    if ec.exact {
        println!(
            "truncated system is exact for j0={j0}, t={steps}, N_T={nt} (j0 d_S^t <= N_T); all bounds are zero"
        );
    }
    let mut w = CsvWriter::create(
        out,
        &["j0", "t", "N_T", "J_size", "strategy", "row", "bound", "xi", "xi_J", "norm_kind"],
    )?;
    for &k in &sizes {
        let report = bound_report(&ec, &eng, k, strategy)?;
        for row in &report.rows {
            w.row(&[
                j0.to_string(),
                steps.to_string(),
                nt.to_string(),
                k.to_string(),
                strategy.to_string(),
                row.row.to_string(),
                fmt(row.bound),
                fmt(report.xi),
                fmt(row.xi_j),
                report.norm_kind.to_string(),
            ])?;
        }
    }
    w.finish()?;
    println!("wrote {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_tail(
    model: &Path,
    nt: usize,
    steps: usize,
    pmax: f64,
    j_per_t: usize,
    mc: Option<usize>,
    seed: u64,
    out: &Path,
    cache: Option<&Path>,
) -> Result<(), MError> {
    let spec = load_model(model)?;
    if nt < 2 {
        return Err(MError::validation("tail analysis needs N_T >= 2"));
    }
    let prop = TruncatedPropagator::build(&spec, nt, cache)?;
    let eng = InitialMomentEngine::new(&spec.init)?;
    let states = prop.propagate(init_state(&eng, nt)?, steps)?;
    let n = spec.coeffs.n();

    let mut header: Vec<&str> = vec!["t", "alpha", "bound_raw", "bound_clamped", "eps", "numerator"];
    if mc.is_some() {
        header.extend_from_slice(&["mc_freq", "mc_se"]);
    }
    let mut w = CsvWriter::create(out, &header)?;

    for t in 0..=steps {
        let x1 = extract_moment(&states[t], 1)?.to_vec();
        let x2_full = extract_moment(&states[t], 2)?;
        let x2_diag: Vec<f64> = (0..n).map(|i| x2_full[i * n + i]).collect();

        let budget = j_per_t * t;
        let (eps, eps_i) = moment_error_bounds(&spec, &eng, 1, t, nt, budget)?;
        let (_, eps_ii) = moment_error_bounds(&spec, &eng, 2, t, nt, budget)?;
        let eps_ii_diag: Vec<f64> = (0..n).map(|i| eps_ii[i * n + i]).collect();

        let alpha = safety_radius(&x1, &x2_diag, eps, &eps_i, &eps_ii_diag, pmax)?;
        let mut fields: Vec<String> = vec![t.to_string(), fmt(alpha)];
        if alpha > eps {
            let b = safety_bound(&x1, &x2_diag, eps, &eps_i, &eps_ii_diag, alpha)?;
            fields.extend_from_slice(&[fmt(b.raw), fmt(b.clamped), fmt(eps), fmt(b.numerator)]);
        } else {
            // Radius degenerated to eps: the bound is vacuous at this level.
            log::warn!("t={t}: error bound {eps} leaves no usable radius at pmax={pmax}");
            fields.extend_from_slice(&["inf".into(), fmt(1.0), fmt(eps), fmt(0.0)]);
        }
        if let Some(samples) = mc {
            let tail = empirical_tail(&spec, &x1, alpha, t, samples, seed)?;
            fields.push(fmt(tail.frequency));
            fields.push(fmt(tail.standard_error));
        }
        w.row(&fields)?;
    }
    w.finish()?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Global and per-entry error bounds for the order-j0 moment at time t,
/// refined with the prefix subset of size `budget` under the moment-norm
/// ordering.
fn moment_error_bounds(
    spec: &PolynomialSystemSpec,
    eng: &InitialMomentEngine,
    j0: usize,
    t: usize,
    nt: usize,
    budget: usize,
) -> Result<(f64, Vec<f64>), MError> {
    let n = spec.coeffs.n();
    let rows = n.pow(j0 as u32);
    let ec = build_error_coefficients(&spec.coeffs, j0, t, nt)?;
    if ec.exact {
        return Ok((0.0, vec![0.0; rows]));
    }
    let norms = eng.moment_norm_table(ec.max_order())?;
    let k = budget.min(ec.max_order() + 1);
    let mut per_row = Vec::with_capacity(rows);
    for i in 0..rows {
        let j_set = momentprop::bounds::choose_j(&ec, &norms, i, k, JStrategy::ByMomentNorm);
        per_row.push(refined_row_bound(&ec, eng, i, &j_set)?);
    }
    // A valid bound on the Euclidean error norm: the norm of the per-row
    // bound vector.
    let global = momentprop::kron::euclidean_norm(&per_row);
    Ok((global, per_row))
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    model: &Path,
    nt_list: &str,
    mc_list: &str,
    reps: usize,
    steps: usize,
    seed: u64,
    out: &Path,
    cache: Option<&Path>,
) -> Result<(), MError> {
    let spec = load_model(model)?;
    let nts = parse_usize_list(nt_list)?;
    let mcs = parse_usize_list(mc_list)?;
    if reps == 0 {
        return Err(MError::validation("reps must be positive"));
    }
    let note = if reps == 1 { "high-variance" } else { "" };
    let mut w = CsvWriter::create(
        out,
        &["method", "param", "steps", "reps", "median_us", "mean_us", "note"],
    )?;

    let micros = |d: std::time::Duration| d.as_secs_f64() * 1e6;
    let stats = |mut times: Vec<f64>| -> (f64, f64) {
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = times[times.len() / 2];
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        (median, mean)
    };

    let mut prop_medians = std::collections::BTreeMap::new();
    for &nt in &nts {
        let t0 = Instant::now();
        let prop = TruncatedPropagator::build(&spec, nt, cache)?;
        let eng = InitialMomentEngine::new(&spec.init)?;
        let s0 = init_state(&eng, nt)?;
        let offline = micros(t0.elapsed());
        w.row(&[
            "offline_build".into(),
            nt.to_string(),
            steps.to_string(),
            "1".into(),
            fmt(offline),
            fmt(offline),
            note.to_string(),
        ])?;

        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            let states = prop.propagate(s0.clone(), steps)?;
            std::hint::black_box(&states);
            times.push(micros(t0.elapsed()));
        }
        let (median, mean) = stats(times);
        prop_medians.insert(nt, median);
        w.row(&[
            "propagation".into(),
            nt.to_string(),
            steps.to_string(),
            reps.to_string(),
            fmt(median),
            fmt(mean),
            note.to_string(),
        ])?;
    }

    let mut mc_medians = std::collections::BTreeMap::new();
    for &samples in &mcs {
        let mut times = Vec::with_capacity(reps);
        for r in 0..reps {
            let t0 = Instant::now();
            let em = empirical_moments(&spec, 1, steps, samples, seed.wrapping_add(r as u64))?;
            std::hint::black_box(&em);
            times.push(micros(t0.elapsed()));
        }
        let (median, mean) = stats(times);
        mc_medians.insert(samples, median);
        w.row(&[
            "monte_carlo".into(),
            samples.to_string(),
            steps.to_string(),
            reps.to_string(),
            fmt(median),
            fmt(mean),
            note.to_string(),
        ])?;
    }

    if let (Some(&p16), Some(&mc10k)) = (prop_medians.get(&16), mc_medians.get(&10_000)) {
        let ratio = mc10k / p16.max(1e-9);
        w.row(&[
            "speedup_check".into(),
            "nt16_vs_mc10000".into(),
            steps.to_string(),
            reps.to_string(),
            fmt(ratio),
            fmt(ratio),
            if ratio >= 10.0 { "pass".into() } else { "fail".to_string() },
        ])?;
        println!("propagation(N_T=16) vs MC(10^4): {ratio:.0}x");
    }
    w.finish()?;
    println!("wrote {}", out.display());
    Ok(())
}
