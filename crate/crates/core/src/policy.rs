//! q-admissible controls.
//!
//! Every policy here is a deterministic function of `(t, x, flag)`, where the
//! flag records whether the walk has visited the origin (since the last flag
//! restart). That makes each of them adapted to the walk's own filtration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{ControlRow, HitFlag, Site};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("admissibility: control {value} outside [0, {q_cap}]")]
    Admissibility { value: f64, q_cap: f64 },
    #[error("invalid cap q = {0}: must lie in [0, 1)")]
    InvalidCap(f64),
    #[error("time {t} is outside the policy horizon {horizon}")]
    OutOfHorizon { t: usize, horizon: usize },
    #[error("degenerate schedule: {0}")]
    DegenerateSchedule(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

fn check_cap(q_cap: f64) -> Result<(), PolicyError> {
    if (0.0..1.0).contains(&q_cap) {
        Ok(())
    } else {
        Err(PolicyError::InvalidCap(q_cap))
    }
}

/// Declarative description of a q-admissible control.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    /// `u = value` everywhere (`value = q_cap` is the lazy walk, `0` the
    /// simple walk).
    Constant {
        q_cap: f64,
        u: f64,
    },
    /// Slow (`u = q_cap`) on `|x| <= band`, fast (`u = 0`) outside.
    TwoZone {
        q_cap: f64,
        band: u64,
    },
    /// `u = 0` until the walk visits the origin, `u = q_cap` afterwards.
    FastUntilZero {
        q_cap: f64,
    },
    Schedule(Schedule),
    BangBangTable(BangBangTable),
}

impl PolicySpec {
    pub fn q_cap(&self) -> f64 {
        match self {
            PolicySpec::Constant { q_cap, .. }
            | PolicySpec::TwoZone { q_cap, .. }
            | PolicySpec::FastUntilZero { q_cap } => *q_cap,
            PolicySpec::Schedule(s) => s.q_cap,
            PolicySpec::BangBangTable(b) => b.q_cap,
        }
    }

    /// Number of steps the policy is defined for; `None` when unbounded.
    pub fn horizon(&self) -> Option<usize> {
        match self {
            PolicySpec::Schedule(s) => Some(s.horizon),
            PolicySpec::BangBangTable(b) => Some(b.horizon),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicySpec::Constant { .. } => "constant",
            PolicySpec::TwoZone { .. } => "two_zone",
            PolicySpec::FastUntilZero { .. } => "fast_until_zero",
            PolicySpec::Schedule(_) => "schedule",
            PolicySpec::BangBangTable(_) => "bang_bang_table",
        }
    }

    /// Control value at `(t, x)` for a walk carrying `flag`.
    pub fn evaluate(&self, t: usize, x: Site, flag: HitFlag) -> Result<f64, PolicyError> {
        if let Some(h) = self.horizon() {
            if t >= h {
                return Err(PolicyError::OutOfHorizon { t, horizon: h });
            }
        }
        Ok(self.evaluate_in_horizon(t, x, flag))
    }

    fn evaluate_in_horizon(&self, t: usize, x: Site, flag: HitFlag) -> f64 {
        match self {
            PolicySpec::Constant { u, .. } => *u,
            PolicySpec::TwoZone { q_cap, band } => {
                if x.unsigned_abs() <= *band {
                    *q_cap
                } else {
                    0.0
                }
            }
            PolicySpec::FastUntilZero { q_cap } => match flag {
                HitFlag::NotYetHit => 0.0,
                HitFlag::HasHit => *q_cap,
            },
            PolicySpec::Schedule(s) => s.segment_at(t).inner.evaluate_in_horizon(t, x, flag),
            PolicySpec::BangBangTable(b) => {
                if b.get(t, x) {
                    b.q_cap
                } else {
                    0.0
                }
            }
        }
    }

    /// Controls at time `t` over `[offset, offset + width)`.
    pub fn control_row(
        &self,
        t: usize,
        offset: Site,
        width: usize,
    ) -> Result<ControlRow, PolicyError> {
        if let Some(h) = self.horizon() {
            if t >= h {
                return Err(PolicyError::OutOfHorizon { t, horizon: h });
            }
        }
        let policy = match self {
            PolicySpec::Schedule(s) => s.segment_at(t).inner.as_ref(),
            p => p,
        };
        let q_cap = self.q_cap();
        let row = match policy {
            PolicySpec::FastUntilZero { q_cap } => ControlRow {
                time: t,
                q_cap: *q_cap,
                offset,
                not_hit: vec![0.0; width],
                hit: vec![*q_cap; width],
            },
            p => {
                let u = (0..width)
                    .map(|i| p.evaluate_in_horizon(t, offset + i as Site, HitFlag::NotYetHit))
                    .collect();
                ControlRow::uniform(t, q_cap, offset, u)
            }
        };
        Ok(row)
    }

    /// Whether the hit flag restarts at the start of step `t`.
    pub fn restarts_flag_at(&self, t: usize) -> bool {
        match self {
            PolicySpec::Schedule(s) => {
                t > 0
                    && s.segments
                        .iter()
                        .any(|seg| seg.restart_flag && seg.t_start == t)
            }
            _ => false,
        }
    }

    /// Checks parameters and the admissibility of every value the policy can
    /// emit.
    pub fn validate(&self) -> Result<(), PolicyError> {
        check_cap(self.q_cap())?;
        match self {
            PolicySpec::Constant { q_cap, u } => {
                if !(0.0..=*q_cap).contains(u) {
                    return Err(PolicyError::Admissibility {
                        value: *u,
                        q_cap: *q_cap,
                    });
                }
            }
            PolicySpec::TwoZone { .. } | PolicySpec::FastUntilZero { .. } => {}
            PolicySpec::Schedule(s) => s.validate()?,
            PolicySpec::BangBangTable(b) => b.validate()?,
        }
        Ok(())
    }
}

pub fn constant_policy(q_cap: f64, u: f64) -> Result<PolicySpec, PolicyError> {
    let p = PolicySpec::Constant { q_cap, u };
    p.validate()?;
    Ok(p)
}

pub fn lazy_policy(q_cap: f64) -> Result<PolicySpec, PolicyError> {
    constant_policy(q_cap, q_cap)
}

pub fn two_zone_policy(q_cap: f64, band: u64) -> Result<PolicySpec, PolicyError> {
    check_cap(q_cap)?;
    Ok(PolicySpec::TwoZone { q_cap, band })
}

pub fn fast_until_zero_policy(q_cap: f64) -> Result<PolicySpec, PolicyError> {
    check_cap(q_cap)?;
    Ok(PolicySpec::FastUntilZero { q_cap })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSegment {
    pub t_start: usize,
    pub t_end: usize,
    pub inner: Box<PolicySpec>,
    /// Restart the hit flag at `t_start`, so a fast-until-zero inner policy
    /// waits for a fresh visit to the origin.
    #[serde(default)]
    pub restart_flag: bool,
    /// Spatial scale `K` the segment was built for, if any.
    #[serde(default)]
    pub scale: Option<f64>,
}

/// Time-partitioned composition of policies covering `[0, horizon)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub q_cap: f64,
    pub horizon: usize,
    pub segments: Vec<ScheduleSegment>,
    /// Number of scales `L` given by the construction formula.
    #[serde(default)]
    pub levels: u32,
}

impl Schedule {
    fn segment_at(&self, t: usize) -> &ScheduleSegment {
        let i = self.segments.partition_point(|s| s.t_end <= t);
        &self.segments[i]
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let mut expected = 0;
        for seg in &self.segments {
            if seg.t_start != expected || seg.t_start >= seg.t_end {
                return Err(PolicyError::DegenerateSchedule(format!(
                    "segment [{}, {}) does not continue a partition at {}",
                    seg.t_start, seg.t_end, expected
                )));
            }
            match seg.inner.as_ref() {
                PolicySpec::Schedule(_) | PolicySpec::BangBangTable(_) => {
                    return Err(PolicyError::InvalidParameter(
                        "schedule segments must hold constant, two-zone or fast-until-zero policies".into(),
                    ))
                }
                inner => {
                    if inner.q_cap() != self.q_cap {
                        return Err(PolicyError::InvalidParameter(format!(
                            "segment cap {} differs from schedule cap {}",
                            inner.q_cap(),
                            self.q_cap
                        )));
                    }
                    inner.validate()?;
                }
            }
            expected = seg.t_end;
        }
        if expected != self.horizon {
            return Err(PolicyError::DegenerateSchedule(format!(
                "segments end at {expected}, horizon is {}",
                self.horizon
            )));
        }
        Ok(())
    }

    pub fn into_policy(self) -> PolicySpec {
        PolicySpec::Schedule(self)
    }
}

/// Turns breakpoints `0 <= b_0 <= ... <= b_k = horizon` (already clamped)
/// into segments, dropping empty ones.
fn assemble(
    q_cap: f64,
    horizon: usize,
    levels: u32,
    pieces: Vec<(usize, usize, PolicySpec, bool, Option<f64>)>,
) -> Schedule {
    let segments = pieces
        .into_iter()
        .filter(|(s, e, ..)| s < e)
        .map(
            |(t_start, t_end, inner, restart_flag, scale)| ScheduleSegment {
                t_start,
                t_end,
                inner: Box::new(inner),
                restart_flag,
                scale,
            },
        )
        .collect();
    Schedule {
        q_cap,
        horizon,
        segments,
        levels,
    }
}

fn floor_breakpoint(horizon: usize, consumed: f64) -> usize {
    let b = (horizon as f64 - consumed).floor();
    if b <= 0.0 {
        0
    } else {
        b as usize
    }
}

/// Multi-scale schedule for localization at a fixed cap.
///
/// With `L = floor(-ln(T / K0^2) / (2 ln beta))` and
/// `T_l = T - alpha K0^2 sum_{i=1}^{l} beta^{-2i}` (rounded down, clamped at
/// 0), the walk is lazy on `[0, T_L)` and on `[T_l, T_{l-1})` runs the
/// two-zone control for the scale `K = K0 beta^{-l}`, slow on
/// `|x| <= beta K`.
pub fn multiscale_localization_schedule(
    q_cap: f64,
    alpha: f64,
    beta: f64,
    k0: f64,
    horizon: usize,
) -> Result<Schedule, PolicyError> {
    check_cap(q_cap)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(PolicyError::InvalidParameter(format!(
            "beta = {beta} must lie in (0, 1)"
        )));
    }
    if !(alpha > 0.0) {
        return Err(PolicyError::InvalidParameter(format!(
            "alpha = {alpha} must be positive"
        )));
    }
    if !(k0 >= 1.0) {
        return Err(PolicyError::InvalidParameter(format!(
            "K0 = {k0} must be at least 1"
        )));
    }
    let t = horizon as f64;
    if !(t > alpha * k0 * k0) {
        return Err(PolicyError::InvalidParameter(format!(
            "horizon {horizon} must exceed alpha K0^2 = {}",
            alpha * k0 * k0
        )));
    }
    let levels = (-(t / (k0 * k0)).ln() / (2.0 * beta.ln())).floor();
    if !(levels >= 1.0) {
        return Err(PolicyError::DegenerateSchedule(format!(
            "L = {levels} < 1 for T = {horizon}, K0 = {k0}, beta = {beta}"
        )));
    }
    let levels = levels as u32;

    // breakpoints[l] = T_l for l = 0..=L
    let mut breakpoints = vec![horizon];
    let mut consumed = 0.0;
    for l in 1..=levels {
        consumed += alpha * k0 * k0 * beta.powi(-2 * l as i32);
        breakpoints.push(floor_breakpoint(horizon, consumed));
    }
    let lazy = PolicySpec::Constant { q_cap, u: q_cap };
    let mut pieces = vec![(0, breakpoints[levels as usize], lazy, false, None)];
    for l in (1..=levels).rev() {
        let scale = k0 * beta.powi(-(l as i32));
        let band = (beta * scale + 1e-9).floor() as u64;
        pieces.push((
            breakpoints[l as usize],
            breakpoints[l as usize - 1],
            PolicySpec::TwoZone { q_cap, band },
            false,
            Some(scale),
        ));
    }
    Ok(assemble(q_cap, horizon, levels, pieces))
}

/// Multi-scale schedule driving the exponent to zero as the cap approaches 1.
///
/// With `L = floor(log_4(n / A))` and `T_l = n - A sum_{i=0}^{l} 4^i`
/// (rounded down, clamped at 0), the walk is simple on `[0, T_L)`; each
/// phase `[T_l, T_{l-1})` (with `T_{-1} = n`) restarts the hit flag and runs
/// fast-until-zero at scale `K = 2^l`.
pub fn multiscale_qto1_schedule(
    q_cap: f64,
    a: f64,
    horizon: usize,
) -> Result<Schedule, PolicyError> {
    check_cap(q_cap)?;
    if !(a >= 1.0) {
        return Err(PolicyError::InvalidParameter(format!(
            "A = {a} must be at least 1"
        )));
    }
    let n = horizon as f64;
    if !(n > a) {
        return Err(PolicyError::DegenerateSchedule(format!(
            "n = {horizon} must exceed A = {a}"
        )));
    }
    let mut levels = 0u32;
    while a * 4f64.powi(levels as i32 + 1) <= n {
        levels += 1;
    }

    // breakpoints[l] = T_l for l = 0..=L
    let mut breakpoints = Vec::with_capacity(levels as usize + 1);
    let mut consumed = 0.0;
    for l in 0..=levels {
        consumed += a * 4f64.powi(l as i32);
        breakpoints.push(floor_breakpoint(horizon, consumed));
    }
    let free = PolicySpec::Constant { q_cap, u: 0.0 };
    let mut pieces = vec![(0, breakpoints[levels as usize], free, false, None)];
    for l in (0..=levels).rev() {
        let end = if l == 0 {
            horizon
        } else {
            breakpoints[l as usize - 1]
        };
        pieces.push((
            breakpoints[l as usize],
            end,
            PolicySpec::FastUntilZero { q_cap },
            true,
            Some(2f64.powi(l as i32)),
        ));
    }
    Ok(assemble(q_cap, horizon, levels, pieces))
}

/// Space-time bitmap of cells where a bang-bang control uses `u = q_cap`.
///
/// Rows cover `t = 0..horizon` and sites `[-radius, radius]`; cells outside
/// the window read as `u = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "RleTable", try_from = "RleTable")]
pub struct BangBangTable {
    pub q_cap: f64,
    pub horizon: usize,
    pub radius: u64,
    words_per_row: usize,
    bits: Vec<u64>,
}

impl BangBangTable {
    pub fn new(q_cap: f64, horizon: usize, radius: u64) -> Self {
        let width = 2 * radius as usize + 1;
        let words_per_row = width.div_ceil(64);
        BangBangTable {
            q_cap,
            horizon,
            radius,
            words_per_row,
            bits: vec![0; words_per_row * horizon],
        }
    }

    pub fn width(&self) -> usize {
        2 * self.radius as usize + 1
    }

    fn locate(&self, t: usize, x: Site) -> Option<(usize, u64)> {
        if t >= self.horizon || x.unsigned_abs() > self.radius {
            return None;
        }
        let j = (x + self.radius as Site) as usize;
        Some((t * self.words_per_row + j / 64, 1u64 << (j % 64)))
    }

    pub fn get(&self, t: usize, x: Site) -> bool {
        self.locate(t, x)
            .is_some_and(|(w, m)| self.bits[w] & m != 0)
    }

    pub fn set(&mut self, t: usize, x: Site, on: bool) {
        if let Some((w, m)) = self.locate(t, x) {
            if on {
                self.bits[w] |= m;
            } else {
                self.bits[w] &= !m;
            }
        }
    }

    /// Maximal runs `[lo, hi]` of slow cells in row `t`.
    pub fn row_intervals(&self, t: usize) -> Vec<(Site, Site)> {
        let r = self.radius as Site;
        let mut out = Vec::new();
        let mut start: Option<Site> = None;
        for x in -r..=r {
            match (self.get(t, x), start) {
                (true, None) => start = Some(x),
                (false, Some(s)) => {
                    out.push((s, x - 1));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, r));
        }
        out
    }

    pub fn count_slow(&self) -> u64 {
        self.bits.iter().map(|w| w.count_ones() as u64).sum()
    }

    fn validate(&self) -> Result<(), PolicyError> {
        check_cap(self.q_cap)?;
        if self.bits.len() != self.words_per_row * self.horizon {
            return Err(PolicyError::InvalidParameter(
                "bitmap size does not match its shape".into(),
            ));
        }
        Ok(())
    }

    pub fn into_policy(self) -> PolicySpec {
        PolicySpec::BangBangTable(self)
    }
}

/// Wire form of a [`BangBangTable`]: each row over `[-radius, radius]` as
/// alternating run lengths, starting with a (possibly empty) run of fast
/// cells.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct RleTable {
    q_cap: f64,
    horizon: usize,
    radius: u64,
    rows: Vec<Vec<u64>>,
}

impl From<BangBangTable> for RleTable {
    fn from(b: BangBangTable) -> Self {
        let r = b.radius as Site;
        let rows = (0..b.horizon)
            .map(|t| {
                let mut runs = Vec::new();
                let mut current = false;
                let mut len = 0u64;
                for x in -r..=r {
                    let bit = b.get(t, x);
                    if bit != current {
                        runs.push(len);
                        current = bit;
                        len = 0;
                    }
                    len += 1;
                }
                runs.push(len);
                runs
            })
            .collect();
        RleTable {
            q_cap: b.q_cap,
            horizon: b.horizon,
            radius: b.radius,
            rows,
        }
    }
}

impl TryFrom<RleTable> for BangBangTable {
    type Error = PolicyError;

    fn try_from(rle: RleTable) -> Result<Self, Self::Error> {
        if rle.rows.len() != rle.horizon {
            return Err(PolicyError::InvalidParameter(format!(
                "{} rows for horizon {}",
                rle.rows.len(),
                rle.horizon
            )));
        }
        let mut b = BangBangTable::new(rle.q_cap, rle.horizon, rle.radius);
        let width = b.width() as u64;
        for (t, runs) in rle.rows.iter().enumerate() {
            if runs.iter().sum::<u64>() != width {
                return Err(PolicyError::InvalidParameter(format!(
                    "row {t} runs do not sum to {width}"
                )));
            }
            let mut x = -(rle.radius as Site);
            for (k, &len) in runs.iter().enumerate() {
                if k % 2 == 1 {
                    for y in x..x + len as Site {
                        b.set(t, y, true);
                    }
                }
                x += len as Site;
            }
        }
        b.validate()?;
        Ok(b)
    }
}
