//! `crw`: reproducible experiments on controlled lazy random walks.
//!
//! Every run writes newline-delimited [`ResultRecord`]s. A record's `config`
//! is the full effective parameter set, so `crw --config record.ndjson`
//! reruns it.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 usage or parameter error,
//! 3 calibration failure, 4 invariant violation found by `verify`.

pub mod args;
pub mod record;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::Path;

use clap::Parser;
use num_rational::BigRational;
use num_traits::Zero;
use serde::Serialize;
use serde_json::{json, Map, Value};
use thiserror::Error;

use crw_core::analysis::{
    calibrate_lemma5, calibrate_lemma6, exponent_sweep, heat_kernel_profile, reversibility_check,
    verify_lemma5, verify_lemma6, AnalysisError, ChainSpec, Lemma5Certificate, Lemma5Config,
    Lemma6Certificate, Lemma6Config, Method,
};
use crw_core::dp::{
    evolve_in, extract_region, solve_extremal, DpError, Objective, Retention, Target,
};
use crw_core::mc::{
    barrier_diagnostics, estimate_hit, exact_stage_profile, lemma0_check, lemma0_exact,
    sample_path, McError,
};
use crw_core::policy::{PolicyError, PolicySpec};
use crw_core::Site;

pub use args::{parse_policy, Cli, Command, PolicyArg};
pub use record::{
    artifact_version, load_config, merge_config, Provenance, RecordWriter, ResultRecord,
};

use args::*;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("{0}")]
    Calibration(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Usage(_) | CliError::Param(_) => 2,
            CliError::Calibration(_) => 3,
            CliError::Invariant(_) => 4,
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Calibration(m) => CliError::Calibration(m),
            other => CliError::Param(other.to_string()),
        }
    }
}

macro_rules! param_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Param(e.to_string())
            }
        }
    )*};
}
param_error!(DpError, McError, PolicyError);

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    match run(&argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("crw: {e}");
            e.exit_code()
        }
    }
}

fn config_path(argv: &[String]) -> Option<String> {
    argv.iter().enumerate().find_map(|(i, a)| {
        if a == "--config" {
            argv.get(i + 1).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    })
}

fn run(argv: &[String]) -> Result<(), CliError> {
    let (program, rest) = argv
        .split_first()
        .map_or(("crw".to_string(), &[][..]), |(p, r)| (p.clone(), r));
    let mut effective: Vec<String> = rest.to_vec();
    if let Some(path) = config_path(rest) {
        let cfg = load_config(Path::new(&path)).map_err(CliError::Usage)?;
        effective = merge_config(rest, &cfg).map_err(CliError::Usage)?;
    }
    let cli = match Cli::try_parse_from(std::iter::once(program).chain(effective)) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return Ok(());
            }
            return Err(CliError::Usage(e.render().to_string()));
        }
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Param("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Param(e.to_string()))?;
    pool.install(|| dispatch(&cli))
}

/// Run context shared by the command implementations.
struct Ctx<'a> {
    cli: &'a Cli,
    command: String,
    config: Map<String, Value>,
    started_at: String,
    writer: RecordWriter,
}

impl Ctx<'_> {
    fn emit(
        &mut self,
        payload: Value,
        provenance: BTreeMap<String, Provenance>,
    ) -> Result<(), CliError> {
        let record = ResultRecord {
            command: self.command.clone(),
            config: self.config.clone(),
            version: artifact_version(),
            started_at: self.started_at.clone(),
            finished_at: now(),
            payload,
            provenance,
        };
        self.writer.write(&record)?;
        Ok(())
    }

    fn seed(&self) -> Result<u64, CliError> {
        self.cli.seed.ok_or_else(|| {
            CliError::Param(format!(
                "`{}` samples trajectories and needs --seed",
                self.command
            ))
        })
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Micros, true)
}

fn echo<T: Serialize>(cli: &Cli, args: &T) -> Map<String, Value> {
    let mut map = match serde_json::to_value(args).expect("arguments serialize") {
        Value::Object(m) => m,
        _ => Map::new(),
    };
    map.retain(|_, v| !v.is_null());
    if let Some(seed) = cli.seed {
        map.insert("seed".into(), json!(seed));
    }
    map
}

fn tags<const N: usize>(entries: [(&str, Provenance); N]) -> BTreeMap<String, Provenance> {
    entries
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
}

fn target_from(lo: Option<i64>, hi: Option<i64>) -> Result<Target, CliError> {
    match (lo, hi) {
        (None, None) => Ok(Target::origin()),
        (Some(a), Some(b)) => Ok(Target::interval(a, b)?),
        (Some(a), None) | (None, Some(a)) => Ok(Target::interval(a, a)?),
    }
}

fn objective(o: ObjectiveArg) -> Objective {
    match o {
        ObjectiveArg::Max => Objective::Max,
        ObjectiveArg::Min => Objective::Min,
    }
}

fn build_policy(spec: &str, n: usize) -> Result<(PolicyArg, PolicySpec), CliError> {
    let arg = parse_policy(spec).map_err(CliError::Param)?;
    let policy = arg.kind.build(arg.q_cap, n)?;
    Ok((arg, policy))
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let (words, config): (&str, Map<String, Value>) = match &cli.command {
        Command::Evolve(a) => ("evolve", echo(cli, a)),
        Command::Solve(a) => ("solve", echo(cli, a)),
        Command::Simulate(a) => ("simulate", echo(cli, a)),
        Command::Exponent(a) => ("exponent", echo(cli, a)),
        Command::Barriers(a) => ("barriers", echo(cli, a)),
        Command::Region(a) => ("region", echo(cli, a)),
        Command::Verify(v) => match v {
            VerifyCommand::Lemma0(a) => ("verify lemma0", echo(cli, a)),
            VerifyCommand::Lemma5(a) => ("verify lemma5", echo(cli, a)),
            VerifyCommand::Lemma6(a) => ("verify lemma6", echo(cli, a)),
            VerifyCommand::Reversibility(a) => ("verify reversibility", echo(cli, a)),
            VerifyCommand::Heatkernel(a) => ("verify heatkernel", echo(cli, a)),
        },
        Command::Calibrate(c) => match c {
            CalibrateCommand::Lemma5(a) => ("calibrate lemma5", echo(cli, a)),
            CalibrateCommand::Lemma6(a) => ("calibrate lemma6", echo(cli, a)),
        },
    };
    let writer = RecordWriter::open(cli.out.as_deref(), words)?;
    let mut ctx = Ctx {
        cli,
        command: words.to_string(),
        config,
        started_at: now(),
        writer,
    };
    match &cli.command {
        Command::Evolve(a) => cmd_evolve(&mut ctx, a),
        Command::Solve(a) => cmd_solve(&mut ctx, a),
        Command::Simulate(a) => cmd_simulate(&mut ctx, a),
        Command::Exponent(a) => cmd_exponent(&mut ctx, a),
        Command::Barriers(a) => cmd_barriers(&mut ctx, a),
        Command::Region(a) => cmd_region(&mut ctx, a),
        Command::Verify(v) => match v {
            VerifyCommand::Lemma0(a) => cmd_verify_lemma0(&mut ctx, a),
            VerifyCommand::Lemma5(a) => cmd_verify_lemma5(&mut ctx, a),
            VerifyCommand::Lemma6(a) => cmd_verify_lemma6(&mut ctx, a),
            VerifyCommand::Reversibility(a) => cmd_verify_reversibility(&mut ctx, a),
            VerifyCommand::Heatkernel(a) => cmd_verify_heatkernel(&mut ctx, a),
        },
        Command::Calibrate(c) => match c {
            CalibrateCommand::Lemma5(a) => cmd_calibrate_lemma5(&mut ctx, a),
            CalibrateCommand::Lemma6(a) => cmd_calibrate_lemma6(&mut ctx, a),
        },
    }
}

fn cmd_evolve(ctx: &mut Ctx, a: &EvolveArgs) -> Result<(), CliError> {
    let (_, policy) = build_policy(&a.policy, a.n)?;
    let target = target_from(a.target_lo, a.target_hi)?;
    let mut payload = json!({ "n": a.n, "start": a.start, "target": [target.lo, target.hi] });
    match a.numeric {
        Numeric::Float => {
            let d = evolve_in::<f64>(&policy, a.n, a.start)?;
            payload["p"] = json!(d.interval_mass(target.lo, target.hi));
            payload["total_mass"] = json!(d.total_mass());
            payload["hit_zero_mass"] = json!(d.hit_mass());
            if a.dump {
                payload["law"] = serde_json::to_value(d.marginal()).expect("serializable");
            }
        }
        Numeric::Rational => {
            let d = evolve_in::<BigRational>(&policy, a.n, a.start)?;
            let p = d.interval_mass(target.lo, target.hi);
            payload["p"] = json!(crw_core::lattice::Probability::to_f64(&p));
            payload["p_exact"] = json!(p.to_string());
            let total = d.total_mass();
            payload["total_mass_exact"] = json!(total.to_string());
            if a.dump {
                let law: Vec<(Site, String)> = (d.offset()..=d.last_site())
                    .map(|x| (x, d.mass_at(x)))
                    .filter(|(_, m)| !m.is_zero())
                    .map(|(x, m)| (x, m.to_string()))
                    .collect();
                payload["law"] = json!(law);
            }
        }
    }
    ctx.emit(payload, tags([("p", Provenance::Exact)]))
}

fn cmd_solve(ctx: &mut Ctx, a: &SolveArgs) -> Result<(), CliError> {
    let target = target_from(a.target_lo, a.target_hi)?;
    let retention = if a.values_csv.is_some() {
        Retention::Full
    } else {
        Retention::Streaming
    };
    let (values, table) = solve_extremal(a.q, a.n, objective(a.objective), target, retention)?;
    if let Some(path) = &a.values_csv {
        values.write_csv(BufWriter::new(File::create(path)?), a.cutoff)?;
    }
    let region = extract_region(&table);
    let payload = json!({
        "q": a.q,
        "n": a.n,
        "objective": a.objective,
        "target": [target.lo, target.hi],
        "value": values.initial_value(0),
        "slow_cells": table.count_slow(),
        "region": region,
    });
    ctx.emit(
        payload,
        tags([("value", Provenance::Exact), ("region", Provenance::Exact)]),
    )
}

fn cmd_region(ctx: &mut Ctx, a: &RegionArgs) -> Result<(), CliError> {
    let (_, table) = solve_extremal(
        a.q,
        a.n,
        objective(a.objective),
        Target::origin(),
        Retention::Streaming,
    )?;
    let region = extract_region(&table);
    if let Some(path) = &a.csv {
        region.write_boundary_csv(BufWriter::new(File::create(path)?))?;
    }
    let payload = json!({ "q": a.q, "n": a.n, "objective": a.objective, "slow_cells": table.count_slow(), "region": region });
    ctx.emit(payload, tags([("region", Provenance::Exact)]))
}

fn cmd_simulate(ctx: &mut Ctx, a: &SimulateArgs) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let (_, policy) = build_policy(&a.policy, a.n)?;
    let target = target_from(a.target_lo, a.target_hi)?;
    let est = estimate_hit(&policy, a.n, a.start, target, a.trials, seed)?;
    let mut payload =
        json!({ "n": a.n, "start": a.start, "target": [target.lo, target.hi], "estimate": est });
    let mc = Provenance::Mc {
        seed,
        trials: a.trials,
    };
    let mut prov = tags([("estimate", mc)]);
    if a.paths > 0 {
        let paths: Vec<Vec<Site>> = (0..a.paths)
            .map(|i| {
                sample_path(&policy, a.n, a.start, seed.wrapping_add(i), None).map(|p| p.sites)
            })
            .collect::<Result<_, _>>()?;
        payload["paths"] = json!(paths);
        prov.insert(
            "paths".into(),
            Provenance::Mc {
                seed,
                trials: a.paths,
            },
        );
    }
    ctx.emit(payload, prov)
}

fn cmd_exponent(ctx: &mut Ctx, a: &ExponentArgs) -> Result<(), CliError> {
    let arg = parse_policy(&a.policy).map_err(CliError::Param)?;
    let (method, prov) = match a.method {
        MethodArg::Exact => (Method::Exact, Provenance::Exact),
        MethodArg::Mc => {
            let seed = ctx.seed()?;
            (
                Method::Mc {
                    trials: a.trials,
                    seed,
                },
                Provenance::Mc {
                    seed,
                    trials: a.trials,
                },
            )
        }
    };
    let sweep = exponent_sweep(&arg.kind, arg.q_cap, &a.n_grid, method, a.n_min)?;
    for r in &sweep.records {
        ctx.emit(
            serde_json::to_value(r).expect("serializable"),
            tags([("p", prov.clone())]),
        )?;
    }
    if let Some(path) = &a.csv {
        sweep.write_csv(BufWriter::new(File::create(path)?))?;
    }
    let payload = json!({
        "policy_kind": arg.kind.name(),
        "q": arg.q_cap,
        "fit": sweep.fit.summary(),
        "residuals": sweep.fit.residuals,
    });
    ctx.emit(payload, tags([("fit", prov)]))
}

fn cmd_barriers(ctx: &mut Ctx, a: &BarriersArgs) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let (_, policy) = build_policy(&a.policy, a.n)?;
    let stats = barrier_diagnostics(&policy, a.n, a.beta, a.trials, seed)?;
    let mut payload = json!({
        "stats": stats,
        "monotone": stats.is_monotone(),
        "min_escape": stats.min_escape(),
    });
    let mc = Provenance::Mc {
        seed,
        trials: a.trials,
    };
    let mut prov = tags([
        ("stats", mc.clone()),
        ("monotone", mc.clone()),
        ("min_escape", mc),
    ]);
    if a.exact {
        let exact = exact_stage_profile(&policy, &stats.family)?;
        payload["exact"] = serde_json::to_value(exact).expect("serializable");
        prov.insert("exact".into(), Provenance::Exact);
    }
    ctx.emit(payload, prov)
}

fn cmd_verify_lemma0(ctx: &mut Ctx, a: &Lemma0Args) -> Result<(), CliError> {
    let seed = ctx.seed()?;
    let report = lemma0_check(a.q, a.h, a.delta, a.ell, a.trials, seed)?;
    let exact = lemma0_exact(a.q, a.h, a.ell)?;
    let est = &report.estimate;
    let margin_sigmas = (est.p_hat - report.bound) / est.standard_error().max(f64::MIN_POSITIVE);
    let pass = !report.violated && est.p_hat - 4.0 * est.standard_error() >= report.bound;
    let payload =
        json!({ "report": report, "exact": exact, "margin_sigmas": margin_sigmas, "pass": pass });
    ctx.emit(
        payload,
        tags([
            (
                "report",
                Provenance::Mc {
                    seed,
                    trials: a.trials,
                },
            ),
            ("exact", Provenance::Exact),
        ]),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "estimate {} is not above {} by 4 standard errors",
            est.p_hat, report.bound
        )))
    }
}

fn read_payload_field<T: serde::de::DeserializeOwned>(
    path: &Path,
    field: &str,
) -> Result<T, CliError> {
    let text = fs::read_to_string(path)?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line)
            .map_err(|e| CliError::Param(format!("{}: {e}", path.display())))?;
        let candidate = v
            .get("payload")
            .and_then(|p| p.get(field))
            .cloned()
            .unwrap_or(v);
        if let Ok(t) = serde_json::from_value(candidate) {
            return Ok(t);
        }
    }
    serde_json::from_str(&text)
        .map_err(|e| CliError::Param(format!("{} holds no certificate: {e}", path.display())))
}

fn replay_outcome(
    ctx: &mut Ctx,
    cert: Value,
    result: Result<(), AnalysisError>,
) -> Result<(), CliError> {
    let pass = result.is_ok();
    let detail = result.as_ref().err().map(|e| e.to_string());
    ctx.emit(
        json!({ "certificate": cert, "replay_identical": pass, "detail": detail, "pass": pass }),
        tags([("certificate", Provenance::Exact)]),
    )?;
    match result {
        Ok(()) => Ok(()),
        Err(e) => Err(CliError::Invariant(e.to_string())),
    }
}

fn cmd_verify_lemma5(ctx: &mut Ctx, a: &VerifyLemma5Args) -> Result<(), CliError> {
    let cert: Lemma5Certificate = match (&a.cert, a.q) {
        (Some(path), _) => read_payload_field(path, "certificate")?,
        (None, Some(q)) => calibrate_lemma5(q, &Lemma5Config::default())?,
        (None, None) => return Err(CliError::Param("give --cert or --q".into())),
    };
    let result = verify_lemma5(&cert);
    replay_outcome(
        ctx,
        serde_json::to_value(&cert).expect("serializable"),
        result,
    )
}

fn cmd_verify_lemma6(ctx: &mut Ctx, a: &VerifyLemma6Args) -> Result<(), CliError> {
    let cert: Lemma6Certificate = match (&a.cert, a.eps) {
        (Some(path), _) => read_payload_field(path, "certificate")?,
        (None, Some(eps)) => calibrate_lemma6(eps, &Lemma6Config::default())?,
        (None, None) => return Err(CliError::Param("give --cert or --eps".into())),
    };
    let result = verify_lemma6(&cert);
    replay_outcome(
        ctx,
        serde_json::to_value(&cert).expect("serializable"),
        result,
    )
}

fn cmd_verify_reversibility(ctx: &mut Ctx, a: &ReversibilityArgs) -> Result<(), CliError> {
    let chain = ChainSpec::new(a.q, a.band)?;
    let window = a.window.unwrap_or(a.band + 16);
    let kernel_gap = chain.kernel_gap(window);
    let (residual, residual_text, pass) = match a.numeric {
        Numeric::Float => {
            let r = reversibility_check::<f64>(&chain, window);
            (r, r.to_string(), r <= 1e-15)
        }
        Numeric::Rational => {
            let r = reversibility_check::<BigRational>(&chain, window);
            (
                crw_core::lattice::Probability::to_f64(&r),
                r.to_string(),
                r.is_zero(),
            )
        }
    };
    let pass = pass && kernel_gap <= 1e-15;
    let payload = json!({
        "q": a.q,
        "band": a.band,
        "window": window,
        "numeric": a.numeric,
        "residual": residual,
        "residual_exact": residual_text,
        "kernel_gap": kernel_gap,
        "pass": pass,
    });
    ctx.emit(
        payload,
        tags([
            ("residual", Provenance::Exact),
            ("kernel_gap", Provenance::Exact),
        ]),
    )?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "detailed-balance residual {residual_text}, kernel gap {kernel_gap}"
        )))
    }
}

fn cmd_verify_heatkernel(ctx: &mut Ctx, a: &HeatKernelArgs) -> Result<(), CliError> {
    if a.t_min == 0 || a.t_max < a.t_min {
        return Err(CliError::Param("need 0 < t_min <= t_max".into()));
    }
    let chain = ChainSpec::new(a.q, a.band)?;
    let mut grid = Vec::new();
    let mut t = a.t_min.next_power_of_two().max(2);
    while t <= a.t_max {
        grid.push(t);
        t *= 2;
    }
    if grid.is_empty() {
        return Err(CliError::Param("no power of two in [t_min, t_max]".into()));
    }
    let probes = a.probes.clone().unwrap_or_else(|| {
        let b = a.band as Site;
        let mut p = vec![0, b / 2, b, 2 * b];
        p.dedup();
        p
    });
    let profile = heat_kernel_profile(&chain, &grid, &probes)?;
    let pass = profile.bounded && profile.top_octave_growth < a.tolerance;
    let payload = json!({ "profile": profile, "pass": pass });
    ctx.emit(payload, tags([("profile", Provenance::Exact)]))?;
    if pass {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "running max grew by {:.4} over the top octave",
            profile.top_octave_growth
        )))
    }
}

fn cmd_calibrate_lemma5(ctx: &mut Ctx, a: &CalibrateLemma5Args) -> Result<(), CliError> {
    let d = Lemma5Config::default();
    let config = Lemma5Config {
        alphas: a.alphas.clone().unwrap_or(d.alphas),
        betas: a.betas.clone().unwrap_or(d.betas),
        k0s: a.k0s.clone().unwrap_or(d.k0s),
        eps_fraction: a.eps_fraction.unwrap_or(d.eps_fraction),
    };
    let cert = calibrate_lemma5(a.q, &config)?;
    let replay = verify_lemma5(&cert);
    let payload = json!({
        "search": config,
        "certificate": cert,
        "replay_identical": replay.is_ok(),
    });
    ctx.emit(payload, tags([("certificate", Provenance::Exact)]))?;
    replay.map_err(|e| CliError::Calibration(e.to_string()))
}

fn cmd_calibrate_lemma6(ctx: &mut Ctx, a: &CalibrateLemma6Args) -> Result<(), CliError> {
    let d = Lemma6Config::default();
    let config = Lemma6Config {
        ks: a.ks.clone().unwrap_or(d.ks),
        a_grid: a.a_grid.clone().unwrap_or(d.a_grid),
        q_grid: a.q_grid.clone().unwrap_or(d.q_grid),
    };
    let cert = calibrate_lemma6(a.eps, &config)?;
    let replay = verify_lemma6(&cert);
    let payload = json!({
        "search": config,
        "certificate": cert,
        "replay_identical": replay.is_ok(),
    });
    ctx.emit(payload, tags([("certificate", Provenance::Exact)]))?;
    replay.map_err(|e| CliError::Calibration(e.to_string()))
}
