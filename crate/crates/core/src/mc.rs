//! Trajectory sampling and Monte Carlo diagnostics.
//!
//! Trial `i` of a batch seeded with `seed` draws from ChaCha8 keyed by
//! `seed` on stream `i`, so every trial is a pure function of
//! `(seed, i)` and batches parallelize without changing any result.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dp::{evolve, DpError, Target};
use crate::lattice::{AugmentedDistribution, ControlRow, FrozenSites, HitFlag, LatticeError, Site};
use crate::policy::{fast_until_zero_policy, lazy_policy, PolicyError, PolicySpec};
use crate::stats::Proportion;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Dp(#[from] DpError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("degenerate barrier family: {0}")]
    DegenerateFamily(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Independent random stream of trial `trial` under master `seed`.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// A walker following a policy; carries the hit flag.
#[derive(Clone, Debug)]
struct Walker<'a> {
    policy: &'a PolicySpec,
    t: usize,
    x: Site,
    flag: HitFlag,
}

impl<'a> Walker<'a> {
    fn new(policy: &'a PolicySpec, start: Site) -> Self {
        Walker {
            policy,
            t: 0,
            x: start,
            flag: HitFlag::at(start),
        }
    }

    /// Advances one step and returns the control that was used.
    fn step<R: Rng>(&mut self, rng: &mut R) -> Result<f64, PolicyError> {
        if self.policy.restarts_flag_at(self.t) {
            self.flag = HitFlag::at(self.x);
        }
        let u = self.policy.evaluate(self.t, self.x, self.flag)?;
        let r: f64 = rng.random();
        if r >= u {
            if r < u + (1.0 - u) * 0.5 {
                self.x -= 1;
            } else {
                self.x += 1;
            }
        }
        self.t += 1;
        if self.x == 0 {
            self.flag = HitFlag::HasHit;
        }
        Ok(u)
    }
}

fn check_policy(policy: &PolicySpec, n: usize) -> Result<(), McError> {
    policy.validate()?;
    if let Some(h) = policy.horizon() {
        if h < n {
            return Err(PolicyError::OutOfHorizon { t: n, horizon: h }.into());
        }
    }
    Ok(())
}

/// Nested space-time barriers `D_i = {|x| <= r_i} x [t_i, n]` with
/// `r_i = floor(2^{-i/2} sqrt n)` and `t_i = ceil((1 - 2^{-i}) n)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierFamily {
    pub n: usize,
    pub beta_exp: f64,
    /// Number of stages `N0 = max{i : 2^{-i/2} sqrt n >= n^beta}`.
    pub n0: usize,
    /// `stages[i - 1]` describes `D_i`.
    pub stages: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub index: usize,
    pub radius: u64,
    pub t_start: usize,
}

impl BarrierFamily {
    pub fn new(n: usize, beta_exp: f64) -> Result<Self, McError> {
        if n == 0 {
            return Err(McError::InvalidParameter("horizon must be positive".into()));
        }
        if !(0.0..0.5).contains(&beta_exp) {
            return Err(McError::InvalidParameter(format!(
                "beta = {beta_exp} must lie in [0, 1/2)"
            )));
        }
        let log_n = (n as f64).ln();
        // 2^{-i/2} sqrt(n) >= n^beta  <=>  (1/2 - beta) ln n - (i/2) ln 2 >= 0
        let qualifies = |i: usize| {
            if beta_exp == 0.0 {
                i < usize::BITS as usize && (1usize << i) <= n
            } else {
                (0.5 - beta_exp) * log_n - 0.5 * i as f64 * std::f64::consts::LN_2 >= -1e-12
            }
        };
        let mut n0 = 0;
        while qualifies(n0 + 1) {
            n0 += 1;
        }
        if n0 < 1 {
            return Err(McError::DegenerateFamily(format!(
                "N0 = 0 for n = {n}, beta = {beta_exp}"
            )));
        }
        let stages = (1..=n0)
            .map(|i| Stage {
                index: i,
                radius: floor_sqrt_ratio(n as u64, i as u32),
                t_start: n - (n >> i),
            })
            .collect();
        Ok(BarrierFamily {
            n,
            beta_exp,
            n0,
            stages,
        })
    }

    /// `(x, t) in D_i` for `1 <= i <= N0`.
    #[inline]
    pub fn contains(&self, i: usize, x: Site, t: usize) -> bool {
        let s = &self.stages[i - 1];
        t >= s.t_start && t <= self.n && x.unsigned_abs() <= s.radius
    }

    /// Stage reached after visiting `(x, t)` with `entered` stages done:
    /// a walk enters at most one new stage per step.
    #[inline]
    fn advance(&self, entered: usize, x: Site, t: usize) -> usize {
        if entered < self.n0 && self.contains(entered + 1, x, t) {
            entered + 1
        } else {
            entered
        }
    }

    fn small_ball(&self, x: Site) -> bool {
        (x.unsigned_abs() as f64) <= (self.n as f64).powf(self.beta_exp)
    }
}

/// `floor(sqrt(n / 2^i))`, i.e. the largest `r` with `r^2 2^i <= n`.
fn floor_sqrt_ratio(n: u64, i: u32) -> u64 {
    let target = n >> i; // r^2 2^i <= n  <=>  r^2 <= floor(n / 2^i)
    let mut r = (target as f64).sqrt() as u64;
    while r * r > target {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= target {
        r += 1;
    }
    r
}

/// One sampled trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub sites: Vec<Site>,
    /// `entrance_times[i - 1] = tau_i` for the stages that were entered.
    pub entrance_times: Vec<usize>,
}

/// Samples `S_0..S_n` from `start` with the stream of trial 0 under `seed`,
/// recording the strict successive entrance times `tau_i > tau_{i-1}` into
/// `family` when given.
pub fn sample_path(
    policy: &PolicySpec,
    n: usize,
    start: Site,
    seed: u64,
    family: Option<&BarrierFamily>,
) -> Result<SamplePath, McError> {
    check_policy(policy, n)?;
    let mut rng = trial_rng(seed, 0);
    let mut walker = Walker::new(policy, start);
    let mut sites = Vec::with_capacity(n + 1);
    sites.push(start);
    let mut entrance_times = Vec::new();
    for _ in 0..n {
        walker.step(&mut rng)?;
        sites.push(walker.x);
        if let Some(f) = family {
            let k = entrance_times.len();
            if f.advance(k, walker.x, walker.t) > k {
                entrance_times.push(walker.t);
            }
        }
    }
    Ok(SamplePath {
        sites,
        entrance_times,
    })
}

/// Terminal sites of `trials` independent walks, ordered by trial index.
pub fn terminal_sites(
    policy: &PolicySpec,
    n: usize,
    start: Site,
    trials: u64,
    seed: u64,
) -> Result<Vec<Site>, McError> {
    check_policy(policy, n)?;
    (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let mut w = Walker::new(policy, start);
            for _ in 0..n {
                w.step(&mut rng)?;
            }
            Ok(w.x)
        })
        .collect()
}

/// Frequency of `S_n in target` with its Wilson interval.
pub fn estimate_hit(
    policy: &PolicySpec,
    n: usize,
    start: Site,
    target: Target,
    trials: u64,
    seed: u64,
) -> Result<Proportion, McError> {
    if trials == 0 {
        return Err(McError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let sites = terminal_sites(policy, n, start, trials, seed)?;
    let hits = sites.iter().filter(|&&x| target.contains(x)).count() as u64;
    Ok(Proportion::new(hits, trials))
}

/// Per-stage entrance statistics of a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub family: BarrierFamily,
    pub trials: u64,
    pub seed: u64,
    /// `entered_before_horizon[i]`: trials with `tau_i < n`, for
    /// `i = 0..=N0` (`tau_0 = 0`).
    pub entered_before_horizon: Vec<u64>,
    /// Trials with `tau_i <= n`, for `i = 0..=N0`.
    pub entered_by_horizon: Vec<u64>,
    /// `escape[i]`: frequency of `tau_{i+1} >= n` among trials with
    /// `tau_i < n`, for `i = 0..N0`.
    pub escape: Vec<Proportion>,
    /// Trials ending with `|S_n| <= n^beta`.
    pub small_ball: u64,
    /// Trials ending with `|S_n| <= n^beta` but `tau_{N0} > n`.
    pub inclusion_violations: u64,
    /// Trials ending at the origin but with `tau_{N0} > n`.
    pub origin_violations: u64,
}

impl StageStats {
    /// Entrance counts never increase with the stage index.
    pub fn is_monotone(&self) -> bool {
        self.entered_by_horizon.windows(2).all(|w| w[1] <= w[0])
            && self.entered_before_horizon.windows(2).all(|w| w[1] <= w[0])
    }

    /// Smallest conditional escape frequency over stages with data.
    pub fn min_escape(&self) -> Option<f64> {
        self.escape
            .iter()
            .filter(|p| p.trials > 0)
            .map(|p| p.p_hat)
            .min_by(f64::total_cmp)
    }
}

/// Samples `trials` walks from the origin and tracks their successive
/// entrances into the barrier family of `(n, beta_exp)`.
pub fn barrier_diagnostics(
    policy: &PolicySpec,
    n: usize,
    beta_exp: f64,
    trials: u64,
    seed: u64,
) -> Result<StageStats, McError> {
    check_policy(policy, n)?;
    let family = BarrierFamily::new(n, beta_exp)?;
    let n0 = family.n0;
    // per trial: (last stage entered before n, last stage entered by n, terminal)
    let outcomes: Vec<(usize, usize, Site)> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let mut w = Walker::new(policy, 0);
            let mut entered = 0;
            let mut before = 0;
            for _ in 0..n {
                w.step(&mut rng)?;
                entered = family.advance(entered, w.x, w.t);
                if w.t < n {
                    before = entered;
                }
            }
            Ok((before, entered, w.x))
        })
        .collect::<Result<_, McError>>()?;

    let mut entered_before_horizon = vec![0u64; n0 + 1];
    let mut entered_by_horizon = vec![0u64; n0 + 1];
    let mut small_ball = 0;
    let mut inclusion_violations = 0;
    let mut origin_violations = 0;
    for &(before, by, x) in &outcomes {
        for c in &mut entered_before_horizon[..=before] {
            *c += 1;
        }
        for c in &mut entered_by_horizon[..=by] {
            *c += 1;
        }
        if family.small_ball(x) {
            small_ball += 1;
            if by < n0 {
                inclusion_violations += 1;
            }
        }
        if x == 0 && by < n0 {
            origin_violations += 1;
        }
    }
    // tau_{i+1} >= n  <=>  stage i+1 not entered before n
    let escape = (0..n0)
        .map(|i| {
            let base = entered_before_horizon[i];
            Proportion::new(base - entered_before_horizon[i + 1], base)
        })
        .collect();
    Ok(StageStats {
        family,
        trials,
        seed,
        entered_before_horizon,
        entered_by_horizon,
        escape,
        small_ball,
        inclusion_violations,
        origin_violations,
    })
}

/// Exact counterpart of [`barrier_diagnostics`] from the origin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactStageProfile {
    /// `P(tau_i <= n)` for `i = 0..=N0`.
    pub entered_by_horizon: Vec<f64>,
    /// `P(|S_n| <= n^beta, tau_{N0} > n)`.
    pub inclusion_violation: f64,
    /// `P(S_n = 0, tau_{N0} > n)`.
    pub origin_violation: f64,
}

/// Evolves the joint law of (site, flag, stages entered) exactly.
pub fn exact_stage_profile(
    policy: &PolicySpec,
    family: &BarrierFamily,
) -> Result<ExactStageProfile, McError> {
    let n = family.n;
    check_policy(policy, n)?;
    let n0 = family.n0;
    let mut layers: Vec<AugmentedDistribution> = (0..=n0)
        .map(|k| {
            let mut d = AugmentedDistribution::point_mass(0, None);
            if k > 0 {
                d = AugmentedDistribution::from_measure(0, vec![0.0]);
            }
            d
        })
        .collect();
    for t in 0..n {
        let restart = policy.restarts_flag_at(t);
        let mut stepped = Vec::with_capacity(n0 + 1);
        for mut d in layers {
            if restart {
                d.reset_flag();
            }
            let row: ControlRow = policy.control_row(t, d.offset(), d.width())?;
            stepped.push(d.step(&row)?);
        }
        // move mass that just entered D_{k+1} up one layer; at most one stage per step
        let time = t + 1;
        let offset = stepped[0].offset();
        let width = stepped[0].width();
        let mut nh: Vec<Vec<f64>> = stepped.iter().map(|d| d.not_hit().to_vec()).collect();
        let mut h: Vec<Vec<f64>> = stepped.iter().map(|d| d.hit().to_vec()).collect();
        for k in (0..n0).rev() {
            for j in 0..width {
                let x = offset + j as Site;
                if family.contains(k + 1, x, time) {
                    let a = std::mem::take(&mut nh[k][j]);
                    let b = std::mem::take(&mut h[k][j]);
                    nh[k + 1][j] += a;
                    h[k + 1][j] += b;
                }
            }
        }
        layers = nh
            .into_iter()
            .zip(h)
            .map(|(a, b)| rebuild(time, offset, a, b))
            .collect();
    }
    let mut entered_by_horizon = vec![0.0; n0 + 1];
    for (k, d) in layers.iter().enumerate() {
        let mass = d.total_mass();
        for e in &mut entered_by_horizon[..=k] {
            *e += mass;
        }
    }
    let mut inclusion_violation = 0.0;
    let mut origin_violation = 0.0;
    for d in &layers[..n0] {
        let (lo, hi) = (d.offset(), d.last_site());
        for x in lo..=hi {
            if family.small_ball(x) {
                inclusion_violation += d.mass_at(x);
            }
        }
        origin_violation += d.mass_at(0);
    }
    Ok(ExactStageProfile {
        entered_by_horizon,
        inclusion_violation,
        origin_violation,
    })
}

fn rebuild(time: usize, offset: Site, not_hit: Vec<f64>, hit: Vec<f64>) -> AugmentedDistribution {
    let snapshot = crate::lattice::DistributionSnapshot {
        time,
        offset,
        mass: not_hit.into_iter().chain(hit).collect(),
        flag_split: true,
    };
    AugmentedDistribution::from_snapshot(&snapshot).expect("masses stay finite and nonnegative")
}

/// Outcome of the exit-side check for the lazy walk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma0Report {
    pub q_cap: f64,
    pub h: f64,
    pub delta: f64,
    pub ell: usize,
    pub estimate: Proportion,
    pub bound: f64,
    /// The upper end of the confidence interval is below the bound.
    pub violated: bool,
}

fn lemma0_preconditions(q_cap: f64, h: f64, delta: f64, ell: usize) -> Result<(), McError> {
    if !(0.0..1.0).contains(&q_cap) {
        return Err(PolicyError::InvalidCap(q_cap).into());
    }
    if !(h >= 1.0) {
        return Err(McError::InvalidParameter(format!(
            "h = {h} must be at least 1"
        )));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(McError::InvalidParameter(format!(
            "delta = {delta} must lie in (0, 1]"
        )));
    }
    let need = 24.0 * h * h / delta;
    if (ell as f64) < need * (1.0 - 1e-12) {
        return Err(McError::InvalidParameter(format!(
            "ell = {ell} violates ell >= 24 h^2 / delta = {need}"
        )));
    }
    if 1.0 - q_cap < delta * (1.0 - 1e-12) {
        return Err(McError::InvalidParameter(format!(
            "the lazy walk has step variance 1 - q = {} < delta = {delta}",
            1.0 - q_cap
        )));
    }
    Ok(())
}

/// Estimates `P(M_tau >= h, tau <= ell)` with `tau = min{i : |M_i| >= h}` for
/// the lazy walk `u = q_cap` from the origin.
pub fn lemma0_check(
    q_cap: f64,
    h: f64,
    delta: f64,
    ell: usize,
    trials: u64,
    seed: u64,
) -> Result<Lemma0Report, McError> {
    lemma0_preconditions(q_cap, h, delta, ell)?;
    if trials == 0 {
        return Err(McError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let policy = lazy_policy(q_cap)?;
    let level = h.ceil() as Site;
    let successes = (0..trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(seed, i);
            let mut w = Walker::new(&policy, 0);
            for _ in 0..ell {
                w.step(&mut rng)?;
                if w.x.abs() >= level {
                    return Ok(u64::from(w.x > 0));
                }
            }
            Ok(0)
        })
        .sum::<Result<u64, McError>>()?;
    let estimate = Proportion::new(successes, trials);
    let bound = 1.0 / 6.0;
    Ok(Lemma0Report {
        q_cap,
        h,
        delta,
        ell,
        violated: estimate.ci_high < bound,
        estimate,
        bound,
    })
}

/// Exact value of the quantity estimated by [`lemma0_check`].
pub fn lemma0_exact(q_cap: f64, h: f64, ell: usize) -> Result<f64, McError> {
    let level = h.ceil() as Site;
    let mut d: AugmentedDistribution = AugmentedDistribution::point_mass(0, None);
    for t in 0..ell {
        let row = ControlRow::uniform(t, q_cap, d.offset(), vec![q_cap; d.width()]);
        d = d.step_absorbing(&row, FrozenSites::OutsideOpenBand(level))?;
    }
    Ok(d.interval_mass(level, Site::MAX))
}

/// Per-start outcome of the fast-until-zero containment check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartReport {
    pub start: Site,
    /// `|S_T| <= K`.
    pub contained: Proportion,
    /// The origin was not visited by time `T`.
    pub zero_not_hit: Proportion,
    /// After visiting the origin the walk reached `|x| >= K` before `T`.
    pub premature_exit: Proportion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaOriReport {
    pub q_cap: f64,
    pub a: f64,
    pub k: u64,
    pub horizon: usize,
    pub trials: u64,
    pub seed: u64,
    pub starts: Vec<StartReport>,
    pub min_contained: f64,
    pub worst_start: Site,
}

/// Estimates `P_x(|S_{A K^2}| <= K)` under fast-until-zero for every start
/// `x` in `[-2K, 2K]`. Start `x` uses trials `j * (4K + 1) + (x + 2K)`.
pub fn lemma_ori_check(
    q_cap: f64,
    a: f64,
    k: u64,
    trials: u64,
    seed: u64,
) -> Result<LemmaOriReport, McError> {
    if k < 1 || !(a >= 1.0) {
        return Err(McError::InvalidParameter(format!(
            "need K >= 1 and A >= 1, got K = {k}, A = {a}"
        )));
    }
    if trials == 0 {
        return Err(McError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let policy = fast_until_zero_policy(q_cap)?;
    let horizon = (a * (k * k) as f64).floor() as usize;
    let span = 4 * k + 1;
    let radius = k as Site;
    let starts = (0..span)
        .into_par_iter()
        .map(|j| {
            let start = j as Site - 2 * radius;
            let (mut contained, mut missed, mut exited) = (0, 0, 0);
            for trial in 0..trials {
                let mut rng = trial_rng(seed, trial * span + j);
                let mut w = Walker::new(&policy, start);
                let mut left = false;
                for _ in 0..horizon {
                    w.step(&mut rng)?;
                    if w.flag == HitFlag::HasHit && w.x.abs() >= radius {
                        left = true;
                    }
                }
                if w.x.abs() <= radius {
                    contained += 1;
                }
                if w.flag == HitFlag::NotYetHit {
                    missed += 1;
                }
                if left {
                    exited += 1;
                }
            }
            Ok(StartReport {
                start,
                contained: Proportion::new(contained, trials),
                zero_not_hit: Proportion::new(missed, trials),
                premature_exit: Proportion::new(exited, trials),
            })
        })
        .collect::<Result<Vec<_>, McError>>()?;
    let worst = starts
        .iter()
        .min_by(|a, b| a.contained.p_hat.total_cmp(&b.contained.p_hat))
        .expect("at least one start");
    Ok(LemmaOriReport {
        q_cap,
        a,
        k,
        horizon,
        trials,
        seed,
        min_contained: worst.contained.p_hat,
        worst_start: worst.start,
        starts,
    })
}

/// Exact law of the terminal site for comparison with sampled frequencies.
pub fn exact_terminal_probability(
    policy: &PolicySpec,
    n: usize,
    start: Site,
    target: Target,
) -> Result<f64, McError> {
    Ok(evolve(policy, n, start)?.interval_mass(target.lo, target.hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{constant_policy, two_zone_policy};

    #[test]
    fn barrier_family_formulas() {
        let f = BarrierFamily::new(1024, 0.0).unwrap();
        assert_eq!(f.n0, 10);
        assert_eq!(f.stages[1].radius, 16);
        assert_eq!(f.stages[1].t_start, 768);
        let radii: Vec<u64> = f.stages.iter().map(|s| s.radius).collect();
        assert_eq!(radii, vec![22, 16, 11, 8, 5, 4, 2, 2, 1, 1]);
        for w in f.stages.windows(2) {
            assert!(w[1].radius <= w[0].radius);
            assert!(w[1].t_start >= w[0].t_start);
        }
        assert!(matches!(
            BarrierFamily::new(1, 0.0),
            Err(McError::DegenerateFamily(_))
        ));
        // 2^{-i/2} sqrt(1024) >= 1024^{0.25} = 5.66 for i <= 5
        assert_eq!(BarrierFamily::new(1024, 0.25).unwrap().n0, 5);
    }

    #[test]
    fn floor_sqrt_ratio_is_exact() {
        assert_eq!(floor_sqrt_ratio(2048, 1), 32);
        assert_eq!(floor_sqrt_ratio(2047, 1), 31);
        assert_eq!(floor_sqrt_ratio(1024, 3), 11);
    }

    #[test]
    fn paths_are_reproducible_and_lattice_valid() {
        let p = lazy_policy(0.999).unwrap();
        let a = sample_path(&p, 500, 3, 11, None).unwrap();
        let b = sample_path(&p, 500, 3, 11, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.sites.len(), 501);
        assert_eq!(a.sites[0], 3);
        assert!(a.sites.windows(2).all(|w| (w[1] - w[0]).abs() <= 1));

        let simple = constant_policy(0.5, 0.0).unwrap();
        let s = sample_path(&simple, 1000, 0, 5, None).unwrap();
        assert!(s.sites.windows(2).all(|w| w[1] != w[0]));

        let tz = two_zone_policy(0.6, 3).unwrap();
        let s = sample_path(&tz, 2000, 0, 9, None).unwrap();
        for (t, w) in s.sites.windows(2).enumerate() {
            if w[0] == w[1] {
                assert!(tz.evaluate(t, w[0], HitFlag::HasHit).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn entrance_times_strictly_increase() {
        let p = lazy_policy(0.5).unwrap();
        let f = BarrierFamily::new(256, 0.0).unwrap();
        for seed in 0..20 {
            let s = sample_path(&p, 256, 0, seed, Some(&f)).unwrap();
            assert!(s.entrance_times.windows(2).all(|w| w[0] < w[1]));
            for (i, &t) in s.entrance_times.iter().enumerate() {
                assert!(f.contains(i + 1, s.sites[t], t));
            }
        }
    }

    #[test]
    fn target_everything_hits_always() {
        let p = two_zone_policy(0.5, 4).unwrap();
        let est = estimate_hit(&p, 50, 0, Target::interval(-50, 50).unwrap(), 2000, 1).unwrap();
        assert_eq!(est.p_hat, 1.0);
    }

    #[test]
    fn batches_are_reproducible() {
        let p = fast_until_zero_policy(0.7).unwrap();
        let a = terminal_sites(&p, 64, 5, 500, 42).unwrap();
        let b = terminal_sites(&p, 64, 5, 500, 42).unwrap();
        let c = terminal_sites(&p, 64, 5, 500, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn stage_stats_are_monotone_and_match_exact() {
        let p = lazy_policy(0.5).unwrap();
        let stats = barrier_diagnostics(&p, 256, 0.0, 20_000, 3).unwrap();
        assert!(stats.is_monotone());
        let exact = exact_stage_profile(&p, &stats.family).unwrap();
        for (i, &e) in exact.entered_by_horizon.iter().enumerate() {
            let prop = Proportion::new(stats.entered_by_horizon[i], stats.trials);
            assert!(
                prop.z_score_against(e) < 4.5,
                "stage {i}: {} vs {e}",
                prop.p_hat
            );
        }
        let viol = Proportion::new(stats.inclusion_violations, stats.trials);
        assert!(viol.z_score_against(exact.inclusion_violation) < 4.5);
    }

    #[test]
    fn lemma0_first_step_case() {
        let r = lemma0_check(0.0, 1.0, 1.0, 24, 20_000, 1).unwrap();
        assert!(r.estimate.z_score_against(0.5) < 4.0);
        assert!(!r.violated);
        assert!((lemma0_exact(0.0, 1.0, 24).unwrap() - 0.5).abs() < 1e-15);
        let expected = 0.5 * (1.0 - 0.9f64.powi(240));
        assert!((lemma0_exact(0.9, 1.0, 240).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn lemma0_rejects_short_horizon() {
        let err = lemma0_check(0.5, 2.0, 0.5, 100, 10, 1).unwrap_err();
        assert!(err.to_string().contains("24 h^2 / delta"));
        assert!(lemma0_check(0.95, 1.0, 0.1, 240, 10, 1).is_err());
    }

    #[test]
    fn lemma_ori_small_scale() {
        let r = lemma_ori_check(0.99, 16.0, 4, 200, 8).unwrap();
        assert_eq!(r.starts.len(), 17);
        assert_eq!(r.horizon, 256);
        // start 0 is lazy from the outset
        let s0 = r.starts.iter().find(|s| s.start == 0).unwrap();
        assert_eq!(s0.zero_not_hit.successes, 0);
        for s in &r.starts {
            let mirror = r.starts.iter().find(|m| m.start == -s.start).unwrap();
            let (a, b) = (&s.contained, &mirror.contained);
            assert!(a.ci_low <= b.ci_high && b.ci_low <= a.ci_high);
        }
        assert!(r.min_contained <= s0.contained.p_hat);
    }
}
