//! Command-line grammar.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crw_core::analysis::PolicyKind;

#[derive(Debug, Parser)]
#[command(
    name = "crw",
    version,
    about = "Exact and sampled experiments on controlled lazy random walks"
)]
pub struct Cli {
    /// Master seed; required by every sampling command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file for NDJSON records (default: $CRW_OUT_DIR/<command>-<time>.ndjson, else stdout).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Flat JSON parameter file, or a previous result record to replay.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Cap on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Exact law of S_n under a policy.
    Evolve(EvolveArgs),
    /// Optimal value and bang-bang policy by backward induction.
    Solve(SolveArgs),
    /// Sampled hit frequency with a Wilson interval.
    Simulate(SimulateArgs),
    /// Hit probabilities over a horizon grid and the fitted decay exponent.
    Exponent(ExponentArgs),
    /// Successive barrier entrance statistics.
    Barriers(BarriersArgs),
    #[command(subcommand)]
    Verify(VerifyCommand),
    #[command(subcommand)]
    Calibrate(CalibrateCommand),
    /// Slow region of the optimal policy.
    Region(RegionArgs),
}

#[derive(Debug, Subcommand)]
pub enum VerifyCommand {
    /// Exit-side probability of the lazy walk.
    Lemma0(Lemma0Args),
    /// Replay a localization certificate, or calibrate and check one.
    Lemma5(VerifyLemma5Args),
    /// Replay a return-to-origin certificate, or calibrate and check one.
    Lemma6(VerifyLemma6Args),
    /// Detailed balance of the two-zone chain.
    Reversibility(ReversibilityArgs),
    /// Boundedness of the scaled two-zone heat kernel.
    Heatkernel(HeatKernelArgs),
}

#[derive(Debug, Subcommand)]
pub enum CalibrateCommand {
    Lemma5(CalibrateLemma5Args),
    Lemma6(CalibrateLemma6Args),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Numeric {
    #[default]
    Float,
    Rational,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodArg {
    #[default]
    Exact,
    Mc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveArg {
    #[default]
    Max,
    Min,
}

#[derive(Debug, Args, Serialize)]
pub struct EvolveArgs {
    /// Policy, e.g. `constant:q=0.5,u=0.5` or `two_zone:q=0.5,band=16`.
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub start: i64,
    #[arg(long, allow_hyphen_values = true)]
    pub target_lo: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    pub target_hi: Option<i64>,
    #[arg(long, value_enum, default_value_t = Numeric::Float)]
    pub numeric: Numeric,
    /// Include the whole terminal law in the record.
    #[arg(long)]
    pub dump: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SolveArgs {
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Max)]
    pub objective: ObjectiveArg,
    #[arg(long, allow_hyphen_values = true)]
    pub target_lo: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    pub target_hi: Option<i64>,
    /// Write the value table (`t,x,value`) for `|x| <= cutoff`.
    #[arg(long)]
    pub values_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub cutoff: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct RegionArgs {
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub n: usize,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::Max)]
    pub objective: ObjectiveArg,
    /// Write the boundary curve (`t,max_radius`).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
    pub start: i64,
    #[arg(long)]
    pub trials: u64,
    #[arg(long, allow_hyphen_values = true)]
    pub target_lo: Option<i64>,
    #[arg(long, allow_hyphen_values = true)]
    pub target_hi: Option<i64>,
    /// Also record this many sample paths, seeded `seed`, `seed + 1`, ...
    #[arg(long, default_value_t = 0)]
    pub paths: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ExponentArgs {
    #[arg(long)]
    pub policy: String,
    /// Comma-separated even horizons.
    #[arg(long, value_delimiter = ',', required = true)]
    pub n_grid: Vec<usize>,
    #[arg(long, value_enum, default_value_t = MethodArg::Exact)]
    pub method: MethodArg,
    #[arg(long, default_value_t = 10_000)]
    pub trials: u64,
    /// Smallest horizon entering the fit.
    #[arg(long, default_value_t = crw_core::analysis::FIT_CUTOFF)]
    pub n_min: usize,
    /// Aggregate CSV of the sweep.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BarriersArgs {
    #[arg(long)]
    pub policy: String,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0.0)]
    pub beta: f64,
    #[arg(long)]
    pub trials: u64,
    /// Also evolve the stage counts exactly.
    #[arg(long)]
    pub exact: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct Lemma0Args {
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub h: f64,
    #[arg(long)]
    pub delta: f64,
    #[arg(long)]
    pub ell: usize,
    #[arg(long)]
    pub trials: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyLemma5Args {
    /// Certificate or record file from `calibrate lemma5`.
    #[arg(long)]
    pub cert: Option<PathBuf>,
    #[arg(long)]
    pub q: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyLemma6Args {
    /// Certificate or record file from `calibrate lemma6`.
    #[arg(long)]
    pub cert: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReversibilityArgs {
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub band: u64,
    /// Half-width of the checked window (default band + 16).
    #[arg(long)]
    pub window: Option<u64>,
    #[arg(long, value_enum, default_value_t = Numeric::Float)]
    pub numeric: Numeric,
}

#[derive(Debug, Args, Serialize)]
pub struct HeatKernelArgs {
    #[arg(long)]
    pub q: f64,
    #[arg(long)]
    pub band: u64,
    #[arg(long, default_value_t = 16)]
    pub t_min: usize,
    #[arg(long, default_value_t = 4096)]
    pub t_max: usize,
    /// Start sites (default 0, band/2, band, 2 band).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub probes: Option<Vec<i64>>,
    /// Largest accepted relative growth over the top octave.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateLemma5Args {
    #[arg(long)]
    pub q: f64,
    #[arg(long, value_delimiter = ',')]
    pub alphas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub k0s: Option<Vec<u64>>,
    #[arg(long)]
    pub eps_fraction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct CalibrateLemma6Args {
    #[arg(long)]
    pub eps: f64,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    pub a_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub q_grid: Option<Vec<f64>>,
}

/// A policy string split into its family and cap.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyArg {
    pub kind: PolicyKind,
    pub q_cap: f64,
}

/// Parses `kind:key=value,...`. Kinds: `constant` (q, u), `lazy` (q),
/// `two_zone` (q, band), `fast_until_zero` (q), `multiscale`
/// (q, alpha, beta, k0), `qto1` (q, a), `optimal` (q).
pub fn parse_policy(s: &str) -> Result<PolicyArg, String> {
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    let mut fields = Vec::new();
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("policy field `{part}` is not key=value"))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| format!("policy field `{k}` has non-numeric value `{v}`"))?;
        fields.push((k.trim().to_string(), v));
    }
    let mut take = |key: &str| -> Result<f64, String> {
        let i = fields
            .iter()
            .position(|(k, _)| k == key)
            .ok_or_else(|| format!("policy `{kind}` needs `{key}=`"))?;
        Ok(fields.remove(i).1)
    };
    let q_cap = take("q")?;
    let kind = match kind.trim().replace('-', "_").as_str() {
        "constant" => PolicyKind::Constant { u: take("u")? },
        "lazy" => PolicyKind::Lazy,
        "two_zone" => {
            let band = take("band")?;
            if band < 0.0 || band.fract() != 0.0 {
                return Err(format!("band = {band} must be a nonnegative integer"));
            }
            PolicyKind::TwoZone { band: band as u64 }
        }
        "fast_until_zero" => PolicyKind::FastUntilZero,
        "multiscale" => PolicyKind::Multiscale {
            alpha: take("alpha")?,
            beta: take("beta")?,
            k0: take("k0")?,
        },
        "qto1" => PolicyKind::Qto1 { a: take("a")? },
        "optimal" => PolicyKind::Optimal,
        other => return Err(format!("unknown policy kind `{other}`")),
    };
    if let Some((k, _)) = fields.first() {
        return Err(format!("unexpected policy field `{k}`"));
    }
    Ok(PolicyArg { kind, q_cap })
}
