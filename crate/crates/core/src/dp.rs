//! Forward evolution under a policy and backward Bellman recursion for the
//! extremal probability of ending in a target interval.
//!
//! The one-step objective
//! `u V(x) + (1 - u) / 2 (V(x - 1) + V(x + 1))` is affine in `u`, so the
//! extremum over `[0, q]` sits at an endpoint and the optimal control is
//! bang-bang. The solver records the cells where `u = q` in a
//! [`BangBangTable`].

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{AugmentedDistribution, LatticeError, Probability, Site};
use crate::policy::{BangBangTable, PolicyError, PolicySpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Max,
    Min,
}

impl std::str::FromStr for Objective {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" | "sup" => Ok(Objective::Max),
            "min" | "inf" => Ok(Objective::Min),
            other => Err(format!("unknown objective '{other}' (expected max or min)")),
        }
    }
}

/// Closed site interval `[lo, hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub lo: Site,
    pub hi: Site,
}

impl Target {
    pub fn origin() -> Self {
        Target { lo: 0, hi: 0 }
    }

    pub fn interval(lo: Site, hi: Site) -> Result<Self, DpError> {
        if lo > hi {
            return Err(DpError::InvalidParameter(format!(
                "empty target [{lo}, {hi}]"
            )));
        }
        Ok(Target { lo, hi })
    }

    pub fn contains(&self, x: Site) -> bool {
        (self.lo..=self.hi).contains(&x)
    }

    fn reach(&self) -> u64 {
        self.lo.unsigned_abs().max(self.hi.unsigned_abs())
    }
}

/// Law of `S_n` under `policy` started from `start`, in scalar type `P`.
pub fn evolve_in<P: Probability>(
    policy: &PolicySpec,
    n: usize,
    start: Site,
) -> Result<AugmentedDistribution<P>, DpError> {
    policy.validate()?;
    if let Some(h) = policy.horizon() {
        if h < n {
            return Err(PolicyError::OutOfHorizon { t: n, horizon: h }.into());
        }
    }
    let mut d = AugmentedDistribution::point_mass(start, None);
    for t in 0..n {
        if policy.restarts_flag_at(t) {
            d.reset_flag();
        }
        let row = policy.control_row(t, d.offset(), d.width())?;
        d = d.step(&row)?;
    }
    Ok(d)
}

pub fn evolve(
    policy: &PolicySpec,
    n: usize,
    start: Site,
) -> Result<AugmentedDistribution, DpError> {
    evolve_in::<f64>(policy, n, start)
}

/// `P(S_n in target)` under `policy` from `start`.
pub fn hit_probability(
    policy: &PolicySpec,
    n: usize,
    start: Site,
    target: Target,
) -> Result<f64, DpError> {
    Ok(evolve(policy, n, start)?.interval_mass(target.lo, target.hi))
}

/// How much of the value function the solver keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retention {
    /// Every time slice, `O(n^2)` floats.
    Full,
    /// Only `V_0`; the region bitmap is always kept.
    Streaming,
}

/// Backward-recursion values `V_t(x)` over the window `[-radius, radius]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueTable {
    pub horizon: usize,
    pub q_cap: f64,
    pub objective: Objective,
    pub target: Target,
    pub radius: u64,
    initial: Vec<f64>,
    slices: Option<Vec<Vec<f64>>>,
}

impl ValueTable {
    fn idx(&self, x: Site) -> Option<usize> {
        (x.unsigned_abs() <= self.radius).then(|| (x + self.radius as Site) as usize)
    }

    /// `V_0(x)`, the extremal probability from start `x`.
    pub fn initial_value(&self, x: Site) -> f64 {
        self.idx(x).map_or(0.0, |i| self.initial[i])
    }

    /// `V_t(x)`; `None` when slice `t` was not retained.
    pub fn value(&self, t: usize, x: Site) -> Option<f64> {
        if t == 0 {
            return Some(self.initial_value(x));
        }
        if t == self.horizon {
            return Some(if self.target.contains(x) { 1.0 } else { 0.0 });
        }
        let slices = self.slices.as_ref()?;
        let row = slices.get(t)?;
        Some(self.idx(x).map_or(0.0, |i| row[i]))
    }

    pub fn is_full(&self) -> bool {
        self.slices.is_some()
    }

    /// Writes `t,x,value` rows with `|x| <= cutoff` (retained slices only).
    pub fn write_csv<W: Write>(&self, mut w: W, cutoff: u64) -> io::Result<()> {
        writeln!(w, "t,x,value")?;
        let c = cutoff.min(self.radius) as Site;
        let times: Vec<usize> = if self.is_full() {
            (0..=self.horizon).collect()
        } else {
            vec![0, self.horizon]
        };
        for t in times {
            for x in -c..=c {
                if let Some(v) = self.value(t, x) {
                    writeln!(w, "{t},{x},{v:e}")?;
                }
            }
        }
        Ok(())
    }
}

/// The optimal bang-bang control: `u = q_cap` exactly on the table's cells.
pub type BangBangPolicy = BangBangTable;

/// Solves `ext_{u in U_q} P(S_n in target)` by backward induction.
///
/// At exact indifference (`V_{t+1}(x)` equal to the neighbour average) the
/// control is `u = 0`. Each cell is accumulated as
/// `(V(x-1) + V(x+1)) * ((1-u)/2) + u * V(x)`.
pub fn solve_extremal(
    q_cap: f64,
    n: usize,
    objective: Objective,
    target: Target,
    retention: Retention,
) -> Result<(ValueTable, BangBangPolicy), DpError> {
    if !(0.0..1.0).contains(&q_cap) {
        return Err(PolicyError::InvalidCap(q_cap).into());
    }
    if n == 0 {
        return Err(DpError::InvalidParameter(
            "horizon n must be at least 1".into(),
        ));
    }
    let radius = n as u64 + target.reach();
    let width = 2 * radius as usize + 1;
    let r = radius as Site;

    let mut next: Vec<f64> = (-r..=r)
        .map(|x| if target.contains(x) { 1.0 } else { 0.0 })
        .collect();
    let mut cur = vec![0.0; width];
    let mut table = BangBangTable::new(q_cap, n, radius);
    let mut slices = match retention {
        Retention::Full => Some(vec![Vec::new(); n + 1]),
        Retention::Streaming => None,
    };
    let move_q = (1.0 - q_cap) * 0.5;

    for t in (0..n).rev() {
        for i in 0..width {
            let left = if i > 0 { next[i - 1] } else { 0.0 };
            let right = if i + 1 < width { next[i + 1] } else { 0.0 };
            let stay = next[i];
            let sum = left + right;
            let mean = sum * 0.5;
            let slow = match objective {
                Objective::Max => stay > mean,
                Objective::Min => stay < mean,
            };
            cur[i] = if slow {
                table.set(t, i as Site - r, true);
                sum * move_q + q_cap * stay
            } else {
                mean
            };
        }
        std::mem::swap(&mut cur, &mut next);
        if let Some(s) = slices.as_mut() {
            s[t] = next.clone();
        }
    }
    if let Some(s) = slices.as_mut() {
        s[n] = (-r..=r)
            .map(|x| if target.contains(x) { 1.0 } else { 0.0 })
            .collect();
    }

    let values = ValueTable {
        horizon: n,
        q_cap,
        objective,
        target,
        radius,
        initial: next,
        slices,
    };
    Ok((values, table))
}

/// Slow cells of one time slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub t: usize,
    pub intervals: Vec<(Site, Site)>,
}

/// Slow region of a bang-bang policy, per time slice, with the outermost
/// slow site of each slice for plotting the boundary curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub q_cap: f64,
    pub horizon: usize,
    pub rows: Vec<RegionRow>,
    /// `(t, max |x|)` over nonempty slices.
    pub boundary: Vec<(usize, u64)>,
}

impl RegionSummary {
    pub fn cells(&self) -> impl Iterator<Item = (usize, Site)> + '_ {
        self.rows.iter().flat_map(|r| {
            r.intervals
                .iter()
                .flat_map(move |&(lo, hi)| (lo..=hi).map(move |x| (r.t, x)))
        })
    }

    pub fn write_boundary_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t,max_radius")?;
        for (t, r) in &self.boundary {
            writeln!(w, "{t},{r}")?;
        }
        Ok(())
    }
}

pub fn extract_region(bb: &BangBangPolicy) -> RegionSummary {
    let rows: Vec<RegionRow> = (0..bb.horizon)
        .map(|t| RegionRow {
            t,
            intervals: bb.row_intervals(t),
        })
        .collect();
    let boundary = rows
        .iter()
        .filter_map(|row| {
            row.intervals
                .iter()
                .map(|&(lo, hi)| lo.unsigned_abs().max(hi.unsigned_abs()))
                .max()
                .map(|m| (row.t, m))
        })
        .collect();
    RegionSummary {
        q_cap: bb.q_cap,
        horizon: bb.horizon,
        rows,
        boundary,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{constant_policy, fast_until_zero_policy, lazy_policy, two_zone_policy};

    #[test]
    fn one_step_max_stays() {
        let (v, bb) =
            solve_extremal(0.5, 1, Objective::Max, Target::origin(), Retention::Full).unwrap();
        assert_eq!(v.initial_value(0), 0.5);
        assert!(bb.get(0, 0));
        let region = extract_region(&bb);
        assert!(region.cells().any(|c| c == (0, 0)));
    }

    #[test]
    fn two_step_values() {
        let (v, _) =
            solve_extremal(0.5, 2, Objective::Max, Target::origin(), Retention::Full).unwrap();
        assert_eq!(v.value(1, 0), Some(0.5));
        assert_eq!(v.value(1, 1), Some(0.5));
        assert_eq!(v.value(1, -1), Some(0.5));
        assert_eq!(v.initial_value(0), 0.5);

        let (v, bb) =
            solve_extremal(0.5, 2, Objective::Min, Target::origin(), Retention::Full).unwrap();
        assert_eq!(v.initial_value(0), 0.125);
        assert!(bb.get(0, 0));
        assert!(!bb.get(1, 0));
    }

    #[test]
    fn tie_breaks_to_fast() {
        // V_1(0) = 1/2 equals the neighbour average at t = 0
        let (_, bb) =
            solve_extremal(0.5, 2, Objective::Max, Target::origin(), Retention::Full).unwrap();
        assert!(!bb.get(0, 0));
    }

    #[test]
    fn evolve_examples() {
        let p = constant_policy(0.5, 0.0).unwrap();
        let d = evolve(&p, 100, 0).unwrap();
        assert!((d.mass_at(0) - 0.079_589_237_387_178_77).abs() < 1e-15);
        let p = lazy_policy(0.3).unwrap();
        assert_eq!(hit_probability(&p, 1, 0, Target::origin()).unwrap(), 0.3);
        let lazy = evolve(&lazy_policy(0.6).unwrap(), 40, 0).unwrap();
        let fuz = evolve(&fast_until_zero_policy(0.6).unwrap(), 40, 0).unwrap();
        assert_eq!(lazy.marginal(), fuz.marginal());
    }

    #[test]
    fn hit_probability_examples() {
        let p = lazy_policy(0.5).unwrap();
        assert!((hit_probability(&p, 2, 0, Target::origin()).unwrap() - 0.375).abs() < 1e-15);
        let p = constant_policy(0.5, 0.0).unwrap();
        assert_eq!(hit_probability(&p, 7, 0, Target::origin()).unwrap(), 0.0);
        let all = Target::interval(-20, 20).unwrap();
        let p = two_zone_policy(0.5, 2).unwrap();
        assert!((hit_probability(&p, 20, 0, all).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn region_respects_reachability_and_symmetry() {
        let n = 40;
        let (_, bb) = solve_extremal(
            0.7,
            n,
            Objective::Max,
            Target::origin(),
            Retention::Streaming,
        )
        .unwrap();
        let region = extract_region(&bb);
        for (t, x) in region.cells() {
            assert!(x.unsigned_abs() as usize <= n - t);
            assert!(bb.get(t, -x));
        }
        let (_, bb) = solve_extremal(
            0.7,
            n,
            Objective::Min,
            Target::origin(),
            Retention::Streaming,
        )
        .unwrap();
        for (t, x) in extract_region(&bb).cells() {
            assert!(x.unsigned_abs() as usize <= n - t);
        }
    }

    #[test]
    fn table_policy_reproduces_value() {
        for &q in &[0.3, 0.5, 0.9] {
            for obj in [Objective::Max, Objective::Min] {
                let n = 64;
                let (v, bb) =
                    solve_extremal(q, n, obj, Target::origin(), Retention::Streaming).unwrap();
                let p = bb.into_policy();
                let h = hit_probability(&p, n, 0, Target::origin()).unwrap();
                assert!(
                    (h - v.initial_value(0)).abs() < 1e-12,
                    "q={q} {obj:?}: {h} vs {}",
                    v.initial_value(0)
                );
            }
        }
    }

    #[test]
    fn interval_target_dominates_point_target() {
        let n = 30;
        let (v0, _) = solve_extremal(
            0.5,
            n,
            Objective::Max,
            Target::origin(),
            Retention::Streaming,
        )
        .unwrap();
        let (v2, _) = solve_extremal(
            0.5,
            n,
            Objective::Max,
            Target::interval(-2, 2).unwrap(),
            Retention::Streaming,
        )
        .unwrap();
        assert!(v2.initial_value(0) >= v0.initial_value(0));
        assert!(v2.initial_value(0) <= 1.0);
    }

    #[test]
    fn csv_export_has_header() {
        let (v, _) =
            solve_extremal(0.5, 3, Objective::Max, Target::origin(), Retention::Full).unwrap();
        let mut buf = Vec::new();
        v.write_csv(&mut buf, 1).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("t,x,value\n"));
        assert_eq!(s.lines().count(), 1 + 4 * 3);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(solve_extremal(1.0, 3, Objective::Max, Target::origin(), Retention::Full).is_err());
        assert!(solve_extremal(0.5, 0, Objective::Max, Target::origin(), Retention::Full).is_err());
        assert!(Target::interval(2, 1).is_err());
    }
}
