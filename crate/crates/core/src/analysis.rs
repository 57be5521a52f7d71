//! Exponent fits, policy sweeps, structural checks of the two-zone chain and
//! parameter calibration for the localization and return-to-origin controls.

use std::fmt;
use std::io::{self, Write};
use std::ops::Div;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::dp::{hit_probability, solve_extremal, DpError, Objective, Retention, Target};
use crate::lattice::{
    AugmentedDistribution, ControlRow, FrozenSites, HitFlag, LatticeError, Probability, Site,
};
use crate::mc::{estimate_hit, McError};
use crate::policy::{
    constant_policy, fast_until_zero_policy, lazy_policy, multiscale_localization_schedule,
    multiscale_qto1_schedule, two_zone_policy, PolicyError, PolicySpec,
};

/// Fits exclude horizons below this by default.
pub const FIT_CUTOFF: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("invalid fit input: {0}")]
    FitInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
}

/// Least-squares fit of `log p = -sigma log n + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExponentFit {
    pub points: Vec<(usize, f64)>,
    pub sigma_hat: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub residuals: Vec<f64>,
    pub n_min: usize,
    pub n_max: usize,
}

/// The fit fields written to JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub sigma_hat: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n_min: usize,
    pub n_max: usize,
}

impl ExponentFit {
    pub fn summary(&self) -> FitSummary {
        FitSummary {
            sigma_hat: self.sigma_hat,
            intercept: self.intercept,
            r2: self.r_squared,
            n_min: self.n_min,
            n_max: self.n_max,
        }
    }
}

pub fn fit_exponent(points: &[(usize, f64)]) -> Result<ExponentFit, AnalysisError> {
    if points.len() < 3 {
        return Err(AnalysisError::FitInput(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    for w in points.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(AnalysisError::FitInput(
                "horizons must be strictly increasing".into(),
            ));
        }
    }
    if let Some(&(n, p)) = points.iter().find(|(_, p)| !(*p > 0.0) || !p.is_finite()) {
        return Err(AnalysisError::FitInput(format!(
            "p = {p} at n = {n} is not positive; odd horizons make P(S_n = 0) vanish for u = 0"
        )));
    }
    if points[0].0 == 0 {
        return Err(AnalysisError::FitInput("horizon 0 has no logarithm".into()));
    }
    let xs: Vec<f64> = points.iter().map(|&(n, _)| (n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, p)| p.ln()).collect();
    let m = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals: Vec<f64> = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| y - (intercept + slope * x))
        .collect();
    let ss_res: f64 = residuals.iter().map(|r| r * r).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ss_res / syy };
    Ok(ExponentFit {
        points: points.to_vec(),
        sigma_hat: -slope,
        intercept,
        r_squared,
        residuals,
        n_min: points[0].0,
        n_max: points[points.len() - 1].0,
    })
}

/// [`fit_exponent`] over the points with `n >= n_min`.
pub fn fit_exponent_above(
    points: &[(usize, f64)],
    n_min: usize,
) -> Result<ExponentFit, AnalysisError> {
    let kept: Vec<(usize, f64)> = points
        .iter()
        .copied()
        .filter(|&(n, _)| n >= n_min)
        .collect();
    fit_exponent(&kept)
}

/// Policy families that can be swept over horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyKind {
    Constant { u: f64 },
    Lazy,
    TwoZone { band: u64 },
    FastUntilZero,
    Multiscale { alpha: f64, beta: f64, k0: f64 },
    Qto1 { a: f64 },
    Optimal,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Constant { .. } => "constant",
            PolicyKind::Lazy => "lazy",
            PolicyKind::TwoZone { .. } => "two_zone",
            PolicyKind::FastUntilZero => "fast_until_zero",
            PolicyKind::Multiscale { .. } => "multiscale",
            PolicyKind::Qto1 { .. } => "qto1",
            PolicyKind::Optimal => "optimal",
        }
    }

    /// The concrete policy at cap `q_cap` and horizon `n`. For `Optimal`
    /// this solves the maximization and returns its table.
    pub fn build(&self, q_cap: f64, n: usize) -> Result<PolicySpec, AnalysisError> {
        Ok(match *self {
            PolicyKind::Constant { u } => constant_policy(q_cap, u)?,
            PolicyKind::Lazy => lazy_policy(q_cap)?,
            PolicyKind::TwoZone { band } => two_zone_policy(q_cap, band)?,
            PolicyKind::FastUntilZero => fast_until_zero_policy(q_cap)?,
            PolicyKind::Multiscale { alpha, beta, k0 } => {
                multiscale_localization_schedule(q_cap, alpha, beta, k0, n)?.into_policy()
            }
            PolicyKind::Qto1 { a } => multiscale_qto1_schedule(q_cap, a, n)?.into_policy(),
            PolicyKind::Optimal => solve_extremal(
                q_cap,
                n,
                Objective::Max,
                Target::origin(),
                Retention::Streaming,
            )?
            .1
            .into_policy(),
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    Exact,
    Mc { trials: u64, seed: u64 },
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Mc { .. } => "mc",
        }
    }
}

/// One grid point of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub policy_kind: String,
    pub q: f64,
    pub n: usize,
    pub p: f64,
    pub method: String,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub records: Vec<SweepRecord>,
    pub fit: ExponentFit,
}

impl Sweep {
    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        write_sweep_csv(&self.records, w)
    }
}

pub fn write_sweep_csv<W: Write>(records: &[SweepRecord], mut w: W) -> io::Result<()> {
    writeln!(w, "policy_kind,q,n,p,method,ci_low,ci_high")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.policy_kind,
            r.q,
            r.n,
            r.p,
            r.method,
            opt(r.ci_low),
            opt(r.ci_high)
        )?;
    }
    Ok(())
}

/// Hit probability of the origin at one horizon.
pub fn sweep_point(
    kind: &PolicyKind,
    q_cap: f64,
    n: usize,
    method: Method,
) -> Result<SweepRecord, AnalysisError> {
    let (p, ci_low, ci_high) = match (kind, method) {
        (PolicyKind::Optimal, Method::Exact) => {
            let (v, _) = solve_extremal(
                q_cap,
                n,
                Objective::Max,
                Target::origin(),
                Retention::Streaming,
            )?;
            (v.initial_value(0), None, None)
        }
        (_, Method::Exact) => {
            let policy = kind.build(q_cap, n)?;
            (
                hit_probability(&policy, n, 0, Target::origin())?,
                None,
                None,
            )
        }
        (_, Method::Mc { trials, seed }) => {
            let policy = kind.build(q_cap, n)?;
            let est = estimate_hit(&policy, n, 0, Target::origin(), trials, seed)?;
            (est.p_hat, Some(est.ci_low), Some(est.ci_high))
        }
    };
    Ok(SweepRecord {
        policy_kind: kind.name().to_string(),
        q: q_cap,
        n,
        p,
        method: method.name().to_string(),
        ci_low,
        ci_high,
    })
}

/// Hit probabilities over `n_grid` and the fit over `n >= n_min`.
pub fn exponent_sweep(
    kind: &PolicyKind,
    q_cap: f64,
    n_grid: &[usize],
    method: Method,
    n_min: usize,
) -> Result<Sweep, AnalysisError> {
    if let Some(&n) = n_grid.iter().find(|&&n| n % 2 != 0 || n == 0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "grid horizon {n} must be even and positive"
        )));
    }
    let mut records: Vec<SweepRecord> = n_grid
        .par_iter()
        .map(|&n| sweep_point(kind, q_cap, n, method))
        .collect::<Result<_, _>>()?;
    records.sort_by_key(|r| r.n);
    let points: Vec<(usize, f64)> = records.iter().map(|r| (r.n, r.p)).collect();
    let fit = fit_exponent_above(&points, n_min)?;
    Ok(Sweep { records, fit })
}

/// The two-zone chain as a reversible chain with conductances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub q_cap: f64,
    pub band: u64,
}

impl ChainSpec {
    pub fn new(q_cap: f64, band: u64) -> Result<Self, AnalysisError> {
        two_zone_policy(q_cap, band)?;
        Ok(ChainSpec { q_cap, band })
    }

    pub fn policy(&self) -> PolicySpec {
        PolicySpec::TwoZone {
            q_cap: self.q_cap,
            band: self.band,
        }
    }

    fn inside(&self, x: Site) -> bool {
        x.unsigned_abs() <= self.band
    }

    /// Conductance of the edge `{x, y}`.
    pub fn weight<P: Probability + Div<Output = P>>(&self, x: Site, y: Site) -> P {
        let q = P::from_f64(self.q_cap);
        if x == y {
            if self.inside(x) {
                (P::one() + P::one()) * q.clone() / (P::one() - q)
            } else {
                P::zero()
            }
        } else if (x - y).abs() == 1 {
            P::one()
        } else {
            P::zero()
        }
    }

    /// Total conductance at `x`, the reversing measure.
    pub fn pi<P: Probability + Div<Output = P>>(&self, x: Site) -> P {
        self.weight::<P>(x, x) + P::one() + P::one()
    }

    /// `p(x, y) = w(x, y) / pi(x)`.
    pub fn transition<P: Probability + Div<Output = P>>(&self, x: Site, y: Site) -> P {
        self.weight::<P>(x, y) / self.pi::<P>(x)
    }

    /// Largest gap over `[-window, window]` between the conductance kernel and
    /// the two-zone policy kernel.
    pub fn kernel_gap(&self, window: u64) -> f64 {
        let policy = self.policy();
        let w = window as Site;
        let mut gap = 0.0f64;
        for x in -w..=w {
            let u = policy
                .evaluate(0, x, HitFlag::HasHit)
                .expect("validated chain");
            let stay = self.transition::<f64>(x, x);
            let mv = self.transition::<f64>(x, x + 1);
            gap = gap.max((stay - u).abs()).max((mv - (1.0 - u) * 0.5).abs());
        }
        gap
    }
}

/// Largest `|pi_x p(x,y) - pi_y p(y,x)|` over adjacent pairs in the window.
pub fn reversibility_check<P: Probability + Div<Output = P>>(chain: &ChainSpec, window: u64) -> P {
    let w = window as Site;
    let mut worst = P::zero();
    for x in -w..w {
        let y = x + 1;
        let a = chain.pi::<P>(x) * chain.transition::<P>(x, y);
        let b = chain.pi::<P>(y) * chain.transition::<P>(y, x);
        let d = if a > b { a - b } else { b - a };
        if d > worst {
            worst = d;
        }
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelPoint {
    pub t: usize,
    /// `max over probes x and all sites y of p^t(x, y) sqrt(t)`.
    pub scaled_sup: f64,
    pub argmax: (Site, Site),
    pub running_max: f64,
    /// Largest total mass of any row, at most 1.
    pub row_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatKernelProfile {
    pub chain: ChainSpec,
    pub probes: Vec<Site>,
    pub points: Vec<HeatKernelPoint>,
    /// Relative increase of the running max from the last grid time at or
    /// below `t_max / 2` to `t_max`.
    pub top_octave_growth: f64,
    pub bounded: bool,
}

/// Exact heat-kernel profile from each probe start.
pub fn heat_kernel_profile(
    chain: &ChainSpec,
    t_grid: &[usize],
    probes: &[Site],
) -> Result<HeatKernelProfile, AnalysisError> {
    if t_grid.is_empty() || t_grid.contains(&0) || probes.is_empty() {
        return Err(AnalysisError::InvalidParameter(
            "need positive times and at least one probe".into(),
        ));
    }
    let mut grid = t_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let t_max = *grid.last().expect("nonempty");
    let policy = chain.policy();
    // per probe: (t, sup_y p^t(x, y), argmax y, row mass) at every grid time
    let per_probe: Vec<Vec<(usize, f64, Site, f64)>> =
        probes
            .par_iter()
            .map(|&x| {
                let mut d: AugmentedDistribution =
                    AugmentedDistribution::point_mass(x, Some(HitFlag::HasHit));
                let mut out = Vec::with_capacity(grid.len());
                let mut next = 0;
                for t in 0..t_max {
                    let row = policy.control_row(t, d.offset(), d.width())?;
                    d = d.step(&row)?;
                    if grid[next] == t + 1 {
                        let m = d.marginal();
                        let (j, best) = m.mass.iter().enumerate().fold(
                            (0, f64::NEG_INFINITY),
                            |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                        );
                        out.push((t + 1, best, m.offset + j as Site, m.mass.iter().sum()));
                        next += 1;
                    }
                }
                Ok(out)
            })
            .collect::<Result<_, AnalysisError>>()?;
    let mut points = Vec::with_capacity(grid.len());
    let mut running = f64::NEG_INFINITY;
    for (k, &t) in grid.iter().enumerate() {
        let scale = (t as f64).sqrt();
        let (mut sup, mut arg, mut row_mass) = (f64::NEG_INFINITY, (0, 0), 0.0f64);
        for (i, rows) in per_probe.iter().enumerate() {
            let (_, v, y, mass) = rows[k];
            if v * scale > sup {
                sup = v * scale;
                arg = (probes[i], y);
            }
            row_mass = row_mass.max(mass);
        }
        running = running.max(sup);
        points.push(HeatKernelPoint {
            t,
            scaled_sup: sup,
            argmax: arg,
            running_max: running,
            row_mass,
        });
    }
    let top = points.last().expect("nonempty").running_max;
    let base = points
        .iter()
        .rev()
        .find(|p| 2 * p.t <= t_max)
        .map_or(points[0].running_max, |p| p.running_max);
    Ok(HeatKernelProfile {
        chain: *chain,
        probes: probes.to_vec(),
        bounded: points.iter().all(|p| p.running_max.is_finite()),
        top_octave_growth: top / base - 1.0,
        points,
    })
}

/// Search grid for the localization calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma5Config {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub k0s: Vec<u64>,
    /// The certified `eps` is this fraction of the smallest margin.
    pub eps_fraction: f64,
}

impl Default for Lemma5Config {
    fn default() -> Self {
        Lemma5Config {
            alphas: vec![0.05, 0.1, 0.2, 0.4],
            betas: vec![0.0625, 0.125, 0.25],
            k0s: vec![8, 16],
            eps_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma5Entry {
    pub k: u64,
    pub t: usize,
    pub band: u64,
    pub y: Site,
    /// `(1/(1-q)) [P_y(|S_t| <= K) - q P_y(|S_t| <= band)]`.
    pub closed_form: f64,
    /// `sum_{|x| <= K} P_x(S_t = y)` by pushing the indicator measure forward.
    pub direct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma5Certificate {
    pub q_cap: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k0: u64,
    pub eps: f64,
    pub min_margin: f64,
    pub max_identity_gap: f64,
    /// `ln(1 + eps) / (2 ln(1/beta))`, the localization exponent gain the
    /// tuple supports.
    pub exponent_gain: f64,
    pub entries: Vec<Lemma5Entry>,
}

/// Evaluates the localization sums for one tuple at `K in {K0, 2K0, 4K0}`.
pub fn lemma5_entries(
    q_cap: f64,
    alpha: f64,
    beta: f64,
    k0: u64,
) -> Result<Vec<Lemma5Entry>, AnalysisError> {
    let mut entries = Vec::new();
    for k in [k0, 2 * k0, 4 * k0] {
        let t = (alpha * (k * k) as f64).floor() as usize;
        let band = (beta * k as f64 + 1e-9).floor() as u64;
        let chain = ChainSpec::new(q_cap, band)?;
        let policy = chain.policy();
        let ks = k as Site;

        let mut pushed: AugmentedDistribution =
            AugmentedDistribution::from_measure(-ks, vec![1.0; 2 * k as usize + 1]);
        for s in 0..t {
            let row = policy.control_row(s, pushed.offset(), pushed.width())?;
            pushed = pushed.step(&row)?;
        }

        let b = band as Site;
        let rows: Vec<Lemma5Entry> = (-b..=b)
            .into_par_iter()
            .map(|y| {
                let mut d: AugmentedDistribution =
                    AugmentedDistribution::point_mass(y, Some(HitFlag::HasHit));
                for s in 0..t {
                    let row = policy.control_row(s, d.offset(), d.width())?;
                    d = d.step(&row)?;
                }
                let closed_form =
                    (d.interval_mass(-ks, ks) - q_cap * d.interval_mass(-b, b)) / (1.0 - q_cap);
                Ok(Lemma5Entry {
                    k,
                    t,
                    band,
                    y,
                    closed_form,
                    direct: pushed.mass_at(y),
                })
            })
            .collect::<Result<_, AnalysisError>>()?;
        entries.extend(rows);
    }
    Ok(entries)
}

fn lemma5_summary(entries: &[Lemma5Entry]) -> (f64, f64) {
    let min_margin = entries
        .iter()
        .map(|e| e.closed_form - 1.0)
        .fold(f64::INFINITY, f64::min);
    let gap = entries
        .iter()
        .map(|e| (e.closed_form - e.direct).abs())
        .fold(0.0, f64::max);
    (min_margin, gap)
}

/// Grid search for `(alpha, beta, K0, eps)` with every sum above `1 + eps`.
/// Among admissible tuples the one with the largest exponent gain wins.
pub fn calibrate_lemma5(
    q_cap: f64,
    config: &Lemma5Config,
) -> Result<Lemma5Certificate, AnalysisError> {
    if !(q_cap > 0.0 && q_cap < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "q = {q_cap} must lie in (0, 1)"
        )));
    }
    if !(config.eps_fraction > 0.0 && config.eps_fraction < 1.0) {
        return Err(AnalysisError::InvalidParameter(
            "eps_fraction must lie in (0, 1)".into(),
        ));
    }
    let mut best: Option<Lemma5Certificate> = None;
    let mut best_margin = f64::NEG_INFINITY;
    for &k0 in &config.k0s {
        for &beta in &config.betas {
            for &alpha in &config.alphas {
                if (beta * k0 as f64 + 1e-9).floor() < 1.0 || alpha * ((k0 * k0) as f64) < 1.0 {
                    continue;
                }
                let entries = lemma5_entries(q_cap, alpha, beta, k0)?;
                let (min_margin, gap) = lemma5_summary(&entries);
                best_margin = best_margin.max(min_margin);
                if min_margin <= 0.0 {
                    continue;
                }
                let eps = config.eps_fraction * min_margin;
                let gain = (1.0 + eps).ln() / (2.0 * (1.0 / beta).ln());
                if best.as_ref().map_or(true, |b| gain > b.exponent_gain) {
                    best = Some(Lemma5Certificate {
                        q_cap,
                        alpha,
                        beta,
                        k0,
                        eps,
                        min_margin,
                        max_identity_gap: gap,
                        exponent_gain: gain,
                        entries,
                    });
                }
            }
        }
    }
    best.ok_or_else(|| {
        AnalysisError::Calibration(format!(
            "no tuple on the grid has a positive margin; best margin {best_margin}"
        ))
    })
}

/// Recomputes every entry and reports the first mismatch.
pub fn verify_lemma5(cert: &Lemma5Certificate) -> Result<(), AnalysisError> {
    let fresh = lemma5_entries(cert.q_cap, cert.alpha, cert.beta, cert.k0)?;
    if fresh.len() != cert.entries.len() {
        return Err(AnalysisError::Calibration(
            "entry count differs on replay".into(),
        ));
    }
    for (a, b) in fresh.iter().zip(&cert.entries) {
        if a.closed_form.to_bits() != b.closed_form.to_bits()
            || a.direct.to_bits() != b.direct.to_bits()
        {
            return Err(AnalysisError::Calibration(format!(
                "replay differs at K = {}, y = {}",
                b.k, b.y
            )));
        }
        if !(a.closed_form > 1.0 + cert.eps) {
            return Err(AnalysisError::Calibration(format!(
                "sum at K = {}, y = {} is not above 1 + eps",
                b.k, b.y
            )));
        }
    }
    let (min_margin, gap) = lemma5_summary(&fresh);
    if min_margin.to_bits() != cert.min_margin.to_bits()
        || gap.to_bits() != cert.max_identity_gap.to_bits()
    {
        return Err(AnalysisError::Calibration(
            "summary differs on replay".into(),
        ));
    }
    if gap > 1e-12 {
        return Err(AnalysisError::Calibration(format!(
            "reversibility identity gap {gap} exceeds 1e-12"
        )));
    }
    Ok(())
}

/// Search grid for the return-to-origin calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma6Config {
    pub ks: Vec<u64>,
    pub a_grid: Vec<f64>,
    pub q_grid: Vec<f64>,
}

impl Default for Lemma6Config {
    fn default() -> Self {
        Lemma6Config {
            ks: vec![16, 64, 256],
            a_grid: (0..=12).map(|i| f64::from(1u32 << i)).collect(),
            q_grid: (1..=24).map(|k| 1.0 - 0.5f64.powi(k)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma6Entry {
    pub k: u64,
    pub horizon: usize,
    /// `P_0(tau_{2K} > A K^2)` for the simple walk.
    pub slow_hit: f64,
    /// `P_0(tau_{-K, K} < A K^2)` for the lazy walk `u = q`.
    pub early_exit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma6Certificate {
    pub eps: f64,
    pub a: f64,
    pub q_cap: f64,
    pub entries: Vec<Lemma6Entry>,
}

/// `P_0(tau_a > t)` for the simple walk: by reflection, `P(-a <= S_t <= a - 1)`.
pub fn simple_walk_survival(a: u64, t: usize) -> f64 {
    let lo = -(a as i64);
    let hi = a as i64 - 1;
    let tt = t as i64;
    let ln2 = std::f64::consts::LN_2;
    let mut acc = 0.0;
    // S_t = 2j - t
    let j_lo = ((lo + tt + 1) / 2).max(0);
    let j_hi = ((hi + tt).div_euclid(2)).min(tt);
    for j in j_lo..=j_hi {
        acc += (ln_binomial(t as u64, j as u64) - tt as f64 * ln2).exp();
    }
    acc.min(1.0)
}

/// `P(tau <= m)` for `m = 0..=m_max`, `tau` the exit time of the simple walk
/// from `(-K, K)`.
fn simple_exit_cdf(k: u64, m_max: usize) -> Result<Vec<f64>, AnalysisError> {
    let ks = k as Site;
    let mut d: AugmentedDistribution = AugmentedDistribution::point_mass(0, None);
    let mut cdf = Vec::with_capacity(m_max + 1);
    cdf.push(0.0);
    for m in 0..m_max {
        let row = ControlRow::uniform(m, 0.0, d.offset(), vec![0.0; d.width()]);
        d = d.step_absorbing(&row, FrozenSites::OutsideOpenBand(ks))?;
        cdf.push(d.interval_mass(ks, Site::MAX) + d.interval_mass(Site::MIN, -ks));
    }
    Ok(cdf)
}

/// `P_0(tau_{-K,K} < t)` for the lazy walk `u = q`. The lazy walk is the
/// simple walk run at the moves of an independent Bernoulli(1 - q) clock,
/// so this is `E F(M)` with `M ~ Bin(t - 1, 1 - q)` and `F` the simple exit
/// CDF. Tail mass of `M` beyond the evaluated range counts as exit.
pub fn lazy_early_exit(q_cap: f64, k: u64, t: usize) -> Result<f64, AnalysisError> {
    if t == 0 {
        return Ok(0.0);
    }
    let trials = (t - 1) as u64;
    let p = 1.0 - q_cap;
    let mean = trials as f64 * p;
    let sd = (mean * q_cap).sqrt();
    let m_max = ((mean + 12.0 * sd + 64.0).ceil() as u64).min(trials) as usize;
    let cdf = simple_exit_cdf(k, m_max)?;
    let (lp, lq) = (p.ln(), q_cap.ln());
    let mut acc = 0.0;
    let mut weight = 0.0;
    for (m, &f) in cdf.iter().enumerate() {
        let w =
            (ln_binomial(trials, m as u64) + m as f64 * lp + (trials - m as u64) as f64 * lq).exp();
        weight += w;
        acc += w * f;
    }
    Ok((acc + (1.0 - weight).max(0.0)).min(1.0))
}

fn lemma6_entries(a: f64, q_cap: f64, ks: &[u64]) -> Result<Vec<Lemma6Entry>, AnalysisError> {
    ks.par_iter()
        .map(|&k| {
            let horizon = (a * (k * k) as f64).floor() as usize;
            Ok(Lemma6Entry {
                k,
                horizon,
                slow_hit: simple_walk_survival(2 * k, horizon),
                early_exit: lazy_early_exit(q_cap, k, horizon)?,
            })
        })
        .collect()
}

/// Smallest `A` on the grid with `P_0(tau_{2K} > A K^2) < eps/2` at every `K`,
/// then the smallest `q` with `P_0(tau_{-K,K} < A K^2) < eps/2` at every `K`.
pub fn calibrate_lemma6(
    eps: f64,
    config: &Lemma6Config,
) -> Result<Lemma6Certificate, AnalysisError> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "eps = {eps} must lie in (0, 1)"
        )));
    }
    if config.ks.is_empty() {
        return Err(AnalysisError::InvalidParameter(
            "no scales to calibrate".into(),
        ));
    }
    let half = eps / 2.0;
    let a = config
        .a_grid
        .iter()
        .copied()
        .find(|&a| {
            config
                .ks
                .iter()
                .all(|&k| simple_walk_survival(2 * k, (a * (k * k) as f64).floor() as usize) < half)
        })
        .ok_or_else(|| {
            AnalysisError::Calibration(format!(
                "no A on the grid meets the hitting bound at eps = {eps}"
            ))
        })?;
    let mut ks = config.ks.clone();
    ks.sort_unstable();
    for &q in &config.q_grid {
        // screen on the cheap scales first
        let mut ok = true;
        for &k in &ks {
            let t = (a * (k * k) as f64).floor() as usize;
            if lazy_early_exit(q, k, t)? >= half {
                ok = false;
                break;
            }
        }
        if ok {
            let entries = lemma6_entries(a, q, &config.ks)?;
            return Ok(Lemma6Certificate {
                eps,
                a,
                q_cap: q,
                entries,
            });
        }
    }
    Err(AnalysisError::Calibration(format!(
        "no q on the grid meets the exit bound at A = {a}"
    )))
}

pub fn verify_lemma6(cert: &Lemma6Certificate) -> Result<(), AnalysisError> {
    let ks: Vec<u64> = cert.entries.iter().map(|e| e.k).collect();
    let fresh = lemma6_entries(cert.a, cert.q_cap, &ks)?;
    for (a, b) in fresh.iter().zip(&cert.entries) {
        if a.slow_hit.to_bits() != b.slow_hit.to_bits()
            || a.early_exit.to_bits() != b.early_exit.to_bits()
        {
            return Err(AnalysisError::Calibration(format!(
                "replay differs at K = {}",
                b.k
            )));
        }
        if !(a.slow_hit < cert.eps / 2.0 && a.early_exit < cert.eps / 2.0) {
            return Err(AnalysisError::Calibration(format!(
                "bound fails at K = {}",
                b.k
            )));
        }
    }
    Ok(())
}
