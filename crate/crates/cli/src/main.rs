//! `ssmctl`: controller-design pipeline for polynomial nonlinear mechanical
//! models. Offline stage: spectrum, SSM, modal ranking and basis selection;
//! online stage: Riccati/compensation sweeps and a receding-horizon
//! closed-loop run validated against the full model.
//!
//! Exit codes: 0 ok, 2 config error, 3 numerical failure, 4 invariant
//! failure in the produced solution.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use config::{build_weights, RunConfig};
use ssm_control::elqr::{
    control_csv, receding_horizon, response_csv, ControlSolution, RecedingOptions, SeedMode,
};
use ssm_control::error::Error;
use ssm_control::linred::{
    build_reduced_linear, collocated_observation, rank_modes, ranking_csv, realify, select_basis,
    ReducedLinearModel, SelectionMetric,
};
use ssm_control::mechmodel::{
    build_oscillator_chain, load_model, save_model, to_first_order, FirstOrderSystem,
    ForcingChannel, ForcingSignal, SecondOrderSystem, Waveform,
};
use ssm_control::spectral::{solve_modes, spectrum_csv, EigenPair, MasterSubspace, ModeOrdering};
use ssm_control::ssm::{
    compute_autonomous_ssm, eval_parameterization, fit_loglog_slope, invariance_residual,
    load_ssm, save_ssm, SSMModel,
};
use ssm_control::C64;

#[derive(Parser)]
#[command(name = "ssmctl", version, about = "SSM-based vibration controller design")]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the pencil spectrum and export it as CSV.
    Eig,
    /// Compute and persist the autonomous SSM; print the residual slope.
    Ssm {
        /// Recompute even if a current artifact exists.
        #[arg(long)]
        fresh: bool,
    },
    /// Rank modes, select the correction basis, export the ranking CSV.
    Select {
        #[arg(long)]
        fresh: bool,
        /// Override the configured metric (dcgain | mhsv).
        #[arg(long)]
        metric: Option<String>,
        /// Override the configured threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run the full control pipeline over the configured horizon.
    Control {
        #[arg(long)]
        fresh: bool,
        /// Override segment boundaries, comma-separated times.
        #[arg(long, value_delimiter = ',')]
        boundaries: Option<Vec<f64>>,
        /// Skip full-model validation (design-only run).
        #[arg(long)]
        no_validate: bool,
    },
    /// Re-apply a stored control signal to the full model and report errors.
    Validate,
    /// Write the built-in 10-mass oscillator chain benchmark model + config.
    ChainDemo,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if let Error::Invalid(msg) = e {
        if msg.starts_with("INVARIANT") {
            return 4;
        }
    }
    match e {
        Error::Schema { .. } | Error::InvalidModel(_) | Error::Invalid(_) | Error::Io(_) => 2,
        Error::DimensionMismatch(_) | Error::ThresholdUnreachable { .. } => 2,
        Error::Eigen(_)
        | Error::Singular(_)
        | Error::Unstable(_)
        | Error::NearResonant(_)
        | Error::StepSizeCollapse(_)
        | Error::MaxStepsExceeded(_)
        | Error::RiccatiEscape(_) => 3,
    }
}

/// Invariant failures in produced solutions get their own exit code.
fn invariant_failure(msg: String) -> Error {
    Error::Invalid(format!("INVARIANT {msg}"))
}

fn run(cli: Cli) -> Result<(), Error> {
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::ChainDemo => chain_demo(&cli.out),
        other => {
            let cfg_path = cli
                .config
                .clone()
                .ok_or_else(|| Error::Invalid("--config is required for this command".into()))?;
            let cfg = RunConfig::load(&cfg_path)?;
            let base = cfg_path.parent().unwrap_or(Path::new(".")).to_path_buf();
            let ctx = Context::load(cfg, base, cli.out.clone())?;
            match other {
                Command::Eig => cmd_eig(&ctx),
                Command::Ssm { fresh } => cmd_ssm(&ctx, *fresh).map(|_| ()),
                Command::Select {
                    fresh,
                    metric,
                    threshold,
                } => cmd_select(&ctx, *fresh, metric.as_deref(), *threshold).map(|_| ()),
                Command::Control {
                    fresh,
                    boundaries,
                    no_validate,
                } => cmd_control(&ctx, *fresh, boundaries.clone(), *no_validate),
                Command::Validate => cmd_validate(&ctx),
                Command::ChainDemo => unreachable!(),
            }
        }
    }
}

struct Context {
    cfg: RunConfig,
    out: PathBuf,
    sys: SecondOrderSystem,
    fo: FirstOrderSystem,
    pairs: Vec<EigenPair>,
    c_obs: Array2<f64>,
    model_hash: String,
}

impl Context {
    fn load(cfg: RunConfig, base: PathBuf, out: PathBuf) -> Result<Self, Error> {
        let model_path = cfg.resolve(&base, &cfg.model_path);
        let sys = load_model(&model_path)?;
        let model_hash = ssm_control::file_sha256(&model_path)?;
        let fo = to_first_order(&sys)?;
        let pairs = solve_modes(&fo, sys.n, ModeOrdering::ByFrequencyAscending)?;
        for p in &pairs {
            if p.near_marginal() {
                eprintln!(
                    "warning: eigenvalue {} has numerically zero real part; hyperbolicity is in doubt",
                    p.lambda
                );
            }
        }
        let c_obs = collocated_observation(&sys);
        Ok(Context {
            cfg,
            out,
            sys,
            fo,
            pairs,
            c_obs,
            model_hash,
        })
    }

    fn master(&self) -> Result<MasterSubspace, Error> {
        let mut chosen = Vec::new();
        for &idx in &self.cfg.master_pairs {
            let p = self
                .pairs
                .get(idx - 1)
                .ok_or_else(|| Error::Invalid(format!("master pair {idx} out of range")))?;
            chosen.push(p.clone());
        }
        MasterSubspace::from_pairs(chosen)
    }

    fn ssm_path(&self) -> PathBuf {
        self.out.join("ssm.json")
    }

    fn selection_path(&self) -> PathBuf {
        self.out.join("selection.json")
    }
}

fn cmd_eig(ctx: &Context) -> Result<(), Error> {
    let csv = spectrum_csv(&ctx.pairs);
    let path = ctx.out.join("spectrum.csv");
    std::fs::write(&path, &csv)?;
    for &idx in &ctx.cfg.master_pairs {
        let p = &ctx.pairs[idx - 1];
        println!(
            "master pair {idx}: lambda = {:.17e} + {:.17e}i",
            p.lambda.re, p.lambda.im
        );
    }
    println!("spectrum written to {}", path.display());
    Ok(())
}

fn cmd_ssm(ctx: &Context, fresh: bool) -> Result<SSMModel, Error> {
    let path = ctx.ssm_path();
    if !fresh && path.exists() {
        let (ssm, hash) = load_ssm(&path)?;
        if hash.as_deref() == Some(ctx.model_hash.as_str()) {
            println!("ssm artifact current: {}", path.display());
            return Ok(ssm);
        }
    }
    let master = ctx.master()?;
    let ssm = compute_autonomous_ssm(&ctx.fo, &master, ctx.cfg.ssm_order, ctx.cfg.resonance_tol)?;
    save_ssm(&ssm, Some(&ctx.model_hash), &path)?;
    let amps: Vec<f64> = (0..9)
        .map(|i| 0.01 * (10.0f64).powf(i as f64 / 8.0))
        .collect();
    let table = invariance_residual(&ctx.fo, &ssm, &amps)?;
    let slope = fit_loglog_slope(&table);
    println!("ssm order {} written to {}", ssm.order, path.display());
    println!("invariance residual slope over a in [0.01, 0.1]: {slope:.3}");
    for (a, r) in &table {
        println!("  a = {a:.4}  residual = {r:.6e}");
    }
    Ok(ssm)
}

#[derive(Debug, Serialize, Deserialize)]
struct SelectionArtifact {
    model_hash: String,
    metric: String,
    threshold: f64,
    m_hat: usize,
    forced_pairs: Vec<usize>,
    /// 1-based pair indices.
    selected: Vec<usize>,
    dcgain_sum_selected: f64,
    mhsv_sum_selected: f64,
}

fn parse_metric(name: &str) -> Result<SelectionMetric, Error> {
    match name.to_ascii_lowercase().as_str() {
        "dcgain" => Ok(SelectionMetric::DcGain),
        "mhsv" => Ok(SelectionMetric::Mhsv),
        other => Err(Error::Invalid(format!(
            "unknown selection metric `{other}` (expected dcgain or mhsv)"
        ))),
    }
}

fn cmd_select(
    ctx: &Context,
    fresh: bool,
    metric_override: Option<&str>,
    threshold_override: Option<f64>,
) -> Result<SelectionArtifact, Error> {
    let metric_name = metric_override
        .map(|s| s.to_string())
        .unwrap_or_else(|| ctx.cfg.selection.metric.clone());
    let metric = parse_metric(&metric_name)?;
    let threshold = threshold_override.unwrap_or(ctx.cfg.selection.threshold);
    let path = ctx.selection_path();
    if !fresh && path.exists() {
        let text = std::fs::read_to_string(&path)?;
        if let Ok(art) = serde_json::from_str::<SelectionArtifact>(&text) {
            if art.model_hash == ctx.model_hash
                && art.metric == metric_name
                && art.threshold == threshold
                && art.m_hat == ctx.cfg.selection.m_hat
            {
                println!("selection artifact current: {}", path.display());
                return Ok(art);
            }
        }
    }

    let rankings = rank_modes(
        &ctx.pairs,
        &ctx.fo.bext,
        &ctx.c_obs,
        ctx.cfg.selection.m_hat,
    )?;
    let forced: Vec<usize> = ctx
        .cfg
        .selection
        .forced_pairs
        .iter()
        .map(|&i| i - 1)
        .collect();
    let selected0 = select_basis(&rankings, metric, threshold, &forced)?;
    let dc_sum: f64 = selected0
        .iter()
        .filter_map(|&i| rankings.get(i))
        .map(|r| r.normalized_dcgain)
        .sum();
    let mh_sum: f64 = selected0
        .iter()
        .filter_map(|&i| rankings.get(i))
        .map(|r| r.normalized_mhsv)
        .sum();

    let csv = ranking_csv(&rankings, &ctx.pairs, &selected0);
    std::fs::write(ctx.out.join("ranking.csv"), &csv)?;

    let art = SelectionArtifact {
        model_hash: ctx.model_hash.clone(),
        metric: metric_name,
        threshold,
        m_hat: ctx.cfg.selection.m_hat,
        forced_pairs: ctx.cfg.selection.forced_pairs.clone(),
        selected: selected0.iter().map(|&i| i + 1).collect(),
        dcgain_sum_selected: dc_sum,
        mhsv_sum_selected: mh_sum,
    };
    std::fs::write(&path, serde_json::to_string_pretty(&art).unwrap())?;
    println!(
        "selected pairs {:?} by {} at threshold {}: normalized DCgain sum {:.4}, MHSV sum {:.4}",
        art.selected, art.metric, art.threshold, dc_sum, mh_sum
    );
    Ok(art)
}

fn initial_state(ctx: &Context, ssm: &SSMModel) -> Result<Array1<f64>, Error> {
    match &ctx.cfg.initial {
        config::InitialCondition::Reduced { reduced } => {
            if reduced.len() != ssm.m {
                return Err(Error::Invalid(format!(
                    "initial.reduced needs {} entries (one per master pair), got {}",
                    ssm.m,
                    reduced.len()
                )));
            }
            let mut p = Vec::with_capacity(2 * ssm.m);
            for &(re, im) in reduced {
                let q = C64::new(re, im);
                p.push(q);
                p.push(q.conj());
            }
            eval_parameterization(ssm, &p)
        }
        config::InitialCondition::StateFile { state_file } => {
            let path = if state_file.is_absolute() {
                state_file.clone()
            } else {
                ctx.out.join(state_file)
            };
            let text = std::fs::read_to_string(&path)?;
            let v: Vec<f64> = serde_json::from_str(&text).map_err(|e| Error::Schema {
                field: path.display().to_string(),
                message: e.to_string(),
            })?;
            if v.len() != ctx.fo.dim {
                return Err(Error::Invalid(format!(
                    "state vector length {} != {}",
                    v.len(),
                    ctx.fo.dim
                )));
            }
            Ok(Array1::from_vec(v))
        }
    }
}

fn reduced_model(ctx: &Context, art: &SelectionArtifact) -> Result<ReducedLinearModel, Error> {
    let selection: Vec<usize> = art.selected.iter().map(|&i| i - 1).collect();
    let cm = build_reduced_linear(
        &ctx.pairs,
        &selection,
        &ctx.fo.bext,
        &ctx.fo.forcing,
        &ctx.c_obs,
    )?;
    realify(&cm)
}

#[derive(Debug, Serialize)]
struct RunSummary {
    model_hash: String,
    seed: u64,
    segment_boundaries: Vec<f64>,
    objective: f64,
    objective_reduced: f64,
    rms_prediction_error: Option<f64>,
    rms_per_segment: Vec<f64>,
    peak_controlled_amplitude: f64,
    validated: bool,
    rms_limit: Option<f64>,
    rms_within_limit: Option<bool>,
}

fn cmd_control(
    ctx: &Context,
    fresh: bool,
    boundaries_override: Option<Vec<f64>>,
    no_validate: bool,
) -> Result<(), Error> {
    // staged artifacts must exist and match the model file, unless --fresh
    let ssm = if fresh {
        cmd_ssm(ctx, true)?
    } else {
        let path = ctx.ssm_path();
        if !path.exists() {
            return Err(Error::Invalid(format!(
                "missing SSM artifact {}; run `ssmctl ssm` first or pass --fresh",
                path.display()
            )));
        }
        let (ssm, hash) = load_ssm(&path)?;
        if hash.as_deref() != Some(ctx.model_hash.as_str()) {
            return Err(Error::Invalid(format!(
                "SSM artifact {} is stale for this model file; rerun `ssmctl ssm` or pass --fresh",
                path.display()
            )));
        }
        ssm
    };
    let art = if fresh {
        cmd_select(ctx, true, None, None)?
    } else {
        let path = ctx.selection_path();
        if !path.exists() {
            return Err(Error::Invalid(format!(
                "missing selection artifact {}; run `ssmctl select` first or pass --fresh",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(&path)?;
        let art: SelectionArtifact = serde_json::from_str(&text).map_err(|e| Error::Schema {
            field: path.display().to_string(),
            message: e.to_string(),
        })?;
        if art.model_hash != ctx.model_hash {
            return Err(Error::Invalid(format!(
                "selection artifact {} is stale for this model file; rerun `ssmctl select` or pass --fresh",
                path.display()
            )));
        }
        art
    };

    let model = reduced_model(ctx, &art)?;
    let weights = build_weights(
        &ctx.cfg.weights,
        ctx.sys.n,
        ctx.sys.num_inputs(),
        ctx.out.as_path(),
    )?;
    let z0 = initial_state(ctx, &ssm)?;
    let boundaries = boundaries_override.unwrap_or_else(|| ctx.cfg.horizon.boundaries.clone());
    let (t0, t1) = (ctx.cfg.horizon.t0, ctx.cfg.horizon.t1);

    let mut edges = vec![t0];
    edges.extend_from_slice(&boundaries);
    edges.push(t1);
    let min_seg = edges
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let nodes = ((min_seg / ctx.cfg.grids.design_step).round() as usize).max(10);

    let opts = RecedingOptions {
        nodes_per_segment: nodes,
        seed_mode: if no_validate {
            SeedMode::Predicted
        } else {
            SeedMode::FullModel
        },
        ode_tol: 1e-8,
    };
    let sol = receding_horizon(
        &ctx.fo,
        &ssm,
        &model,
        &weights,
        &z0,
        t0,
        t1,
        &boundaries,
        ctx.cfg.epsilon,
        &opts,
    )?;

    check_solution_invariants(&sol)?;

    let stride = (ctx.cfg.grids.output_step / ctx.cfg.grids.design_step)
        .round()
        .max(1.0) as usize;
    let thinned = thin_solution(&sol, stride);
    std::fs::write(ctx.out.join("u.csv"), control_csv(&thinned))?;
    std::fs::write(
        ctx.out.join("response.csv"),
        response_csv(&thinned, &ctx.c_obs),
    )?;

    // the limit, when set, applies to the final (receding-corrected)
    // segment: earlier segments carry the accumulation error the boundary
    // re-anchoring exists to remove
    let rms_limit = ctx.cfg.max_rms_prediction_error;
    let rms_final_segment = sol.metrics.rms_per_segment.last().copied();
    let rms_within = match (rms_limit, rms_final_segment) {
        (Some(limit), Some(rms)) => Some(rms <= limit),
        _ => None,
    };
    let summary = RunSummary {
        model_hash: ctx.model_hash.clone(),
        seed: ctx.cfg.seed,
        segment_boundaries: sol.segment_boundaries.clone(),
        objective: sol.metrics.objective,
        objective_reduced: sol.metrics.objective_reduced,
        rms_prediction_error: sol.metrics.rms_prediction_error,
        rms_per_segment: sol.metrics.rms_per_segment.clone(),
        peak_controlled_amplitude: sol.metrics.peak_controlled_amplitude,
        validated: sol.z_full.is_some(),
        rms_limit,
        rms_within_limit: rms_within,
    };
    std::fs::write(
        ctx.out.join("summary.json"),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    println!(
        "control run complete: objective {:.6e}, peak amplitude {:.6e}{}",
        summary.objective,
        summary.peak_controlled_amplitude,
        match summary.rms_prediction_error {
            Some(r) => format!(", RMS prediction error {r:.6e}"),
            None => String::new(),
        }
    );
    if rms_within == Some(false) {
        return Err(invariant_failure(format!(
            "final-segment RMS prediction error {} exceeds limit {}",
            rms_final_segment.unwrap(),
            rms_limit.unwrap()
        )));
    }
    Ok(())
}

fn check_solution_invariants(sol: &ControlSolution) -> Result<(), Error> {
    for (i, u) in sol.u.iter().enumerate() {
        if u.iter().any(|x| !x.is_finite()) {
            return Err(invariant_failure(format!(
                "non-finite control at node {i}"
            )));
        }
    }
    for z in &sol.z_pred {
        if z.iter().any(|x| !x.is_finite()) {
            return Err(invariant_failure("non-finite predicted state".into()));
        }
    }
    if let Some(zf) = &sol.z_full {
        for z in zf {
            if z.iter().any(|x| !x.is_finite()) {
                return Err(invariant_failure("non-finite full-model state".into()));
            }
        }
    }
    Ok(())
}

fn thin_solution(sol: &ControlSolution, stride: usize) -> ControlSolution {
    if stride <= 1 {
        return sol.clone();
    }
    let keep: Vec<usize> = (0..sol.grid.len())
        .filter(|i| i % stride == 0 || *i == sol.grid.len() - 1)
        .collect();
    ControlSolution {
        grid: keep.iter().map(|&i| sol.grid[i]).collect(),
        u: keep.iter().map(|&i| sol.u[i].clone()).collect(),
        q: keep.iter().map(|&i| sol.q[i].clone()).collect(),
        z_pred: keep.iter().map(|&i| sol.z_pred[i].clone()).collect(),
        z_full: sol
            .z_full
            .as_ref()
            .map(|zf| keep.iter().map(|&i| zf[i].clone()).collect()),
        segment_boundaries: sol.segment_boundaries.clone(),
        metrics: sol.metrics.clone(),
    }
}

fn cmd_validate(ctx: &Context) -> Result<(), Error> {
    let u_path = ctx.out.join("u.csv");
    if !u_path.exists() {
        return Err(Error::Invalid(format!(
            "missing control signal {}; run `ssmctl control` first",
            u_path.display()
        )));
    }
    let (times, u) = read_control_csv(&u_path, ctx.sys.num_inputs())?;
    let ssm = {
        let (ssm, hash) = load_ssm(&ctx.ssm_path())?;
        if hash.as_deref() != Some(ctx.model_hash.as_str()) {
            return Err(Error::Invalid("SSM artifact is stale".into()));
        }
        ssm
    };
    let z0 = initial_state(ctx, &ssm)?;
    let (t0, t1) = (times[0], *times.last().unwrap());
    let traj =
        ssm_control::elqr::validate_full(&ctx.fo, &times, &u, &z0, t0, t1, 1e-8, &times)?;

    let mut csv = String::from("t");
    for j in 0..ctx.c_obs.nrows() {
        csv.push_str(&format!(",y{}_full", j + 1));
    }
    csv.push('\n');
    for (t, z) in times.iter().zip(traj.iter()) {
        csv.push_str(&format!("{t:.17e}"));
        let y = ctx.c_obs.dot(z);
        for v in y.iter() {
            csv.push_str(&format!(",{v:.17e}"));
        }
        csv.push('\n');
    }
    let out = ctx.out.join("response_validated.csv");
    std::fs::write(&out, csv)?;
    let peak = traj
        .iter()
        .map(|z| {
            ctx.c_obs
                .dot(z)
                .iter()
                .map(|x| x.abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    println!(
        "full-model validation written to {}; peak observable amplitude {peak:.6e}",
        out.display()
    );
    Ok(())
}

fn read_control_csv(path: &Path, q: usize) -> Result<(Vec<f64>, Vec<Array1<f64>>), Error> {
    let text = std::fs::read_to_string(path)?;
    let mut times = Vec::new();
    let mut u = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            continue; // header
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != q + 1 {
            return Err(Error::Invalid(format!(
                "{}: line {} has {} fields, expected {}",
                path.display(),
                lineno + 1,
                fields.len(),
                q + 1
            )));
        }
        let parse = |s: &str| -> Result<f64, Error> {
            s.parse()
                .map_err(|e| Error::Invalid(format!("{}: bad number `{s}`: {e}", path.display())))
        };
        times.push(parse(fields[0])?);
        u.push(Array1::from_shape_fn(q, |i| {
            fields[i + 1].parse().unwrap_or(f64::NAN)
        }));
    }
    if times.is_empty() {
        return Err(Error::Invalid(format!("{} is empty", path.display())));
    }
    Ok((times, u))
}

fn chain_demo(out: &Path) -> Result<(), Error> {
    let forcing = ForcingSignal {
        channels: vec![
            ForcingChannel {
                distribution: {
                    let mut d = vec![0.0; 10];
                    d[0] = 1.0;
                    d
                },
                amplitude: 1.0,
                angular_frequency: 0.1 * std::f64::consts::SQRT_2,
                phase: 0.0,
                waveform: Waveform::Sine,
            },
            ForcingChannel {
                distribution: {
                    let mut d = vec![0.0; 10];
                    d[4] = 1.0;
                    d
                },
                amplitude: 1.0,
                angular_frequency: 0.1 * 3.0f64.sqrt(),
                phase: 0.0,
                waveform: Waveform::Cosine,
            },
        ],
    };
    let sys = build_oscillator_chain(10, 1.0, 1.0, 0.1, 0.5, &[1, 5], forcing, 0.001)?;
    let model_path = out.join("chain_model.json");
    save_model(&sys, &model_path)?;

    let cfg = serde_json::json!({
        "model_path": "chain_model.json",
        "master_pairs": [1],
        "ssm_order": 3,
        "resonance_tol": 0.05,
        "selection": {"metric": "dcgain", "threshold": 0.9, "m_hat": 10, "forced_pairs": []},
        "weights": {
            "Q": {"displacement_scale": 1e5, "velocity_scale": 0.0},
            "R": {"diagonal": [0.05, 0.05]},
            "M": {"displacement_scale": 0.0, "velocity_scale": 0.0}
        },
        "epsilon": 0.001,
        "horizon": {"t0": 0.0, "t1": 100.0, "boundaries": [20.0]},
        "grids": {"design_step": 0.05, "output_step": 0.05},
        "initial": {"reduced": [[2.5, 0.0]]},
        "seed": 0,
        "max_rms_prediction_error": 0.10108
    });
    let cfg_path = out.join("chain_config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap())?;
    println!(
        "chain benchmark written: {} and {}",
        model_path.display(),
        cfg_path.display()
    );

    // smoke-check: the demo model reloads and its slow pair is as expected
    let back = load_model(&model_path)?;
    let fo = to_first_order(&back)?;
    let pairs = solve_modes(&fo, 1, ModeOrdering::ByRealPartDescending)?;
    println!(
        "slowest pair: {:.4} + {:.4}i",
        pairs[0].lambda.re, pairs[0].lambda.im
    );
    Ok(())
}
