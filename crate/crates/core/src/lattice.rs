//! Exact walk distributions on the integer lattice.
//!
//! A distribution is stored densely over a contiguous window of sites and is
//! split by a one-bit history flag recording whether the walk has visited the
//! origin. One step of the controlled walk keeps a fraction `u(x)` of the mass
//! at `x` in place and sends `(1 - u(x)) / 2` to each neighbour.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A site of the integer lattice.
pub type Site = i64;

/// One-bit summary of the path history: has the walk visited site 0?
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitFlag {
    NotYetHit,
    HasHit,
}

impl HitFlag {
    /// The flag of a walk that has just been observed at `x` with no earlier
    /// visit to the origin.
    pub fn at(x: Site) -> Self {
        if x == 0 {
            HitFlag::HasHit
        } else {
            HitFlag::NotYetHit
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error(
        "admissibility violation at time {time}, site {site}: control {value} outside [0, {q_cap}]"
    )]
    Admissibility {
        time: usize,
        site: Site,
        value: f64,
        q_cap: f64,
    },
    #[error("control row for time {row} applied to distribution at time {dist}")]
    TimeMismatch { row: usize, dist: usize },
    #[error("control row covers [{row_lo}, {row_hi}] but the support spans [{lo}, {hi}]")]
    Coverage {
        row_lo: Site,
        row_hi: Site,
        lo: Site,
        hi: Site,
    },
    #[error("invalid snapshot: {0}")]
    Snapshot(String),
}

/// Scalar type a distribution can be evolved in.
///
/// `f64` is the working type; [`BigRational`] gives exact arithmetic for
/// small horizons and is used to certify the float results.
pub trait Probability:
    Clone
    + fmt::Debug
    + PartialOrd
    + Zero
    + One
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Send
    + Sync
{
    /// Exact conversion of a finite float (every finite `f64` is a dyadic
    /// rational, so the rational implementation loses nothing).
    fn from_f64(v: f64) -> Self;
    fn to_f64(&self) -> f64;
    fn half() -> Self;
}

impl Probability for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(&self) -> f64 {
        *self
    }
    #[inline]
    fn half() -> Self {
        0.5
    }
}

impl Probability for BigRational {
    fn from_f64(v: f64) -> Self {
        BigRational::from_float(v).expect("finite control value")
    }
    fn to_f64(&self) -> f64 {
        ToPrimitive::to_f64(self).unwrap_or(f64::NAN)
    }
    fn half() -> Self {
        BigRational::new(BigInt::one(), BigInt::from(2))
    }
}

/// Controls for one time step, per site and per history flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlRow {
    pub time: usize,
    pub q_cap: f64,
    /// Leftmost site covered by the row.
    pub offset: Site,
    pub not_hit: Vec<f64>,
    pub hit: Vec<f64>,
}

impl ControlRow {
    /// A row whose control ignores the flag.
    pub fn uniform(time: usize, q_cap: f64, offset: Site, u: Vec<f64>) -> Self {
        ControlRow {
            time,
            q_cap,
            offset,
            hit: u.clone(),
            not_hit: u,
        }
    }

    pub fn len(&self) -> usize {
        self.not_hit.len()
    }

    pub fn is_empty(&self) -> bool {
        self.not_hit.is_empty()
    }

    pub fn last_site(&self) -> Site {
        self.offset + self.len() as Site - 1
    }

    pub fn get(&self, x: Site, flag: HitFlag) -> Option<f64> {
        let i = x - self.offset;
        if i < 0 || i >= self.len() as Site {
            return None;
        }
        let row = match flag {
            HitFlag::NotYetHit => &self.not_hit,
            HitFlag::HasHit => &self.hit,
        };
        Some(row[i as usize])
    }

    /// Checks `0 <= u <= q_cap` at every covered cell.
    pub fn validate(&self) -> Result<(), LatticeError> {
        for (i, (&a, &b)) in self.not_hit.iter().zip(&self.hit).enumerate() {
            for v in [a, b] {
                if !(0.0..=self.q_cap).contains(&v) {
                    return Err(LatticeError::Admissibility {
                        time: self.time,
                        site: self.offset + i as Site,
                        value: v,
                        q_cap: self.q_cap,
                    });
                }
            }
        }
        Ok(())
    }
}

/// Sites whose mass is frozen in place (absorbing boundary).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FrozenSites {
    /// Every site `x >= level`.
    AtOrAbove(Site),
    /// Every site with `|x| >= radius`.
    OutsideOpenBand(Site),
    /// Exactly the origin.
    Origin,
}

impl FrozenSites {
    #[inline]
    pub fn contains(&self, x: Site) -> bool {
        match *self {
            FrozenSites::AtOrAbove(level) => x >= level,
            FrozenSites::OutsideOpenBand(radius) => x.abs() >= radius,
            FrozenSites::Origin => x == 0,
        }
    }
}

/// Law of the walk at a fixed time, split by the hit-zero flag.
///
/// Built by [`AugmentedDistribution::point_mass`] it is a probability
/// distribution; [`AugmentedDistribution::from_measure`] admits any
/// nonnegative measure, which steps linearly and keeps its total.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDistribution<P = f64> {
    time: usize,
    offset: Site,
    not_hit: Vec<P>,
    hit: Vec<P>,
}

impl<P: Probability> AugmentedDistribution<P> {
    /// Unit mass at `x`. The flag defaults to the one implied by `x`; site 0
    /// always carries the has-hit flag.
    pub fn point_mass(x: Site, flag: Option<HitFlag>) -> Self {
        let flag = if x == 0 {
            HitFlag::HasHit
        } else {
            flag.unwrap_or(HitFlag::NotYetHit)
        };
        let (not_hit, hit) = match flag {
            HitFlag::NotYetHit => (vec![P::one()], vec![P::zero()]),
            HitFlag::HasHit => (vec![P::zero()], vec![P::one()]),
        };
        AugmentedDistribution {
            time: 0,
            offset: x,
            not_hit,
            hit,
        }
    }

    /// A nonnegative measure over `[offset, offset + weights.len())`, flags
    /// assigned from the site.
    pub fn from_measure(offset: Site, weights: Vec<P>) -> Self {
        let mut not_hit = weights;
        let mut hit = vec![P::zero(); not_hit.len()];
        let zero_idx = -offset;
        if zero_idx >= 0 && (zero_idx as usize) < not_hit.len() {
            let z = zero_idx as usize;
            hit[z] = std::mem::replace(&mut not_hit[z], P::zero());
        }
        AugmentedDistribution {
            time: 0,
            offset,
            not_hit,
            hit,
        }
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn offset(&self) -> Site {
        self.offset
    }

    /// Number of sites in the stored window.
    pub fn width(&self) -> usize {
        self.not_hit.len()
    }

    pub fn last_site(&self) -> Site {
        self.offset + self.width() as Site - 1
    }

    pub fn not_hit(&self) -> &[P] {
        &self.not_hit
    }

    pub fn hit(&self) -> &[P] {
        &self.hit
    }

    fn index(&self, x: Site) -> Option<usize> {
        let i = x - self.offset;
        (i >= 0 && i < self.width() as Site).then_some(i as usize)
    }

    pub fn mass_at(&self, x: Site) -> P {
        match self.index(x) {
            Some(i) => self.not_hit[i].clone() + self.hit[i].clone(),
            None => P::zero(),
        }
    }

    pub fn flagged_mass_at(&self, x: Site, flag: HitFlag) -> P {
        match (self.index(x), flag) {
            (Some(i), HitFlag::NotYetHit) => self.not_hit[i].clone(),
            (Some(i), HitFlag::HasHit) => self.hit[i].clone(),
            (None, _) => P::zero(),
        }
    }

    /// Mass of `[a, b]` summed over both flags; empty when `a > b`.
    pub fn interval_mass(&self, a: Site, b: Site) -> P {
        let lo = a.max(self.offset);
        let hi = b.min(self.last_site());
        let mut acc = P::zero();
        if lo > hi {
            return acc;
        }
        for x in lo..=hi {
            let i = (x - self.offset) as usize;
            acc = acc + self.not_hit[i].clone() + self.hit[i].clone();
        }
        acc
    }

    pub fn total_mass(&self) -> P {
        self.interval_mass(self.offset, self.last_site())
    }

    /// Total mass carrying the has-hit flag.
    pub fn hit_mass(&self) -> P {
        self.hit.iter().fold(P::zero(), |acc, m| acc + m.clone())
    }

    /// Smallest and largest site with nonzero mass.
    pub fn support(&self) -> Option<(Site, Site)> {
        let nonzero = |i: &usize| !(self.not_hit[*i].is_zero() && self.hit[*i].is_zero());
        let first = (0..self.width()).find(nonzero)?;
        let last = (0..self.width()).rev().find(nonzero)?;
        Some((self.offset + first as Site, self.offset + last as Site))
    }

    /// Per-site mass summed over flags.
    pub fn marginal(&self) -> LatticeDistribution<P> {
        LatticeDistribution {
            time: self.time,
            offset: self.offset,
            mass: self
                .not_hit
                .iter()
                .zip(&self.hit)
                .map(|(a, b)| a.clone() + b.clone())
                .collect(),
        }
    }

    /// Restarts the history flag: afterwards it records visits to the origin
    /// from the current time on.
    pub fn reset_flag(&mut self) {
        for (nh, h) in self.not_hit.iter_mut().zip(self.hit.iter_mut()) {
            let h = std::mem::replace(h, P::zero());
            *nh = nh.clone() + h;
        }
        if let Some(z) = self.index(0) {
            self.hit[z] = std::mem::replace(&mut self.not_hit[z], P::zero());
        }
    }

    /// Drops exactly-zero sites at both window edges.
    pub fn trim(&mut self) {
        let nonzero = |nh: &P, h: &P| !(nh.is_zero() && h.is_zero());
        let Some(first) = (0..self.width()).find(|&i| nonzero(&self.not_hit[i], &self.hit[i]))
        else {
            return;
        };
        let last = (0..self.width())
            .rev()
            .find(|&i| nonzero(&self.not_hit[i], &self.hit[i]))
            .unwrap_or(first);
        self.not_hit.truncate(last + 1);
        self.hit.truncate(last + 1);
        self.not_hit.drain(..first);
        self.hit.drain(..first);
        self.offset += first as Site;
    }

    /// One step of the controlled walk.
    pub fn step(&self, row: &ControlRow) -> Result<Self, LatticeError> {
        self.check_row(row)?;
        row.validate()?;
        Ok(self.step_unchecked(row, None))
    }

    /// One step in which the mass on `frozen` sites stays put regardless of
    /// the control; exactly-zero edges are trimmed afterwards.
    pub fn step_absorbing(
        &self,
        row: &ControlRow,
        frozen: FrozenSites,
    ) -> Result<Self, LatticeError> {
        self.check_row(row)?;
        row.validate()?;
        let mut next = self.step_unchecked(row, Some(frozen));
        next.trim();
        Ok(next)
    }

    fn check_row(&self, row: &ControlRow) -> Result<(), LatticeError> {
        if row.time != self.time {
            return Err(LatticeError::TimeMismatch {
                row: row.time,
                dist: self.time,
            });
        }
        if row.offset > self.offset || row.last_site() < self.last_site() {
            return Err(LatticeError::Coverage {
                row_lo: row.offset,
                row_hi: row.last_site(),
                lo: self.offset,
                hi: self.last_site(),
            });
        }
        Ok(())
    }

    fn step_unchecked(&self, row: &ControlRow, frozen: Option<FrozenSites>) -> Self {
        let width = self.width();
        let shift = (self.offset - row.offset) as usize;
        let coeffs = |u_row: &[f64]| -> (Vec<P>, Vec<P>) {
            let mut stay = Vec::with_capacity(width);
            let mut mv = Vec::with_capacity(width);
            for i in 0..width {
                let x = self.offset + i as Site;
                if frozen.is_some_and(|f| f.contains(x)) {
                    stay.push(P::one());
                    mv.push(P::zero());
                } else {
                    let u = P::from_f64(u_row[shift + i]);
                    mv.push((P::one() - u.clone()) * P::half());
                    stay.push(u);
                }
            }
            (stay, mv)
        };
        let (stay_nh, move_nh) = coeffs(&row.not_hit);
        let (stay_h, move_h) = coeffs(&row.hit);

        let new_width = width + 2;
        let new_offset = self.offset - 1;
        let gather = |mass: &[P], stay: &[P], mv: &[P], j: usize| -> P {
            // new index j <-> site new_offset + j; old index of the same site is j - 1
            let mut acc = P::zero();
            if j >= 2 {
                acc = acc + mv[j - 2].clone() * mass[j - 2].clone();
            }
            if j < width {
                acc = acc + mv[j].clone() * mass[j].clone();
            }
            if j >= 1 && j - 1 < width {
                acc = acc + stay[j - 1].clone() * mass[j - 1].clone();
            }
            acc
        };
        let mut not_hit = Vec::with_capacity(new_width);
        let mut hit = Vec::with_capacity(new_width);
        for j in 0..new_width {
            let nh = gather(&self.not_hit, &stay_nh, &move_nh, j);
            let h = gather(&self.hit, &stay_h, &move_h, j);
            if new_offset + j as Site == 0 {
                not_hit.push(P::zero());
                hit.push(h + nh);
            } else {
                not_hit.push(nh);
                hit.push(h);
            }
        }
        AugmentedDistribution {
            time: self.time + 1,
            offset: new_offset,
            not_hit,
            hit,
        }
    }
}

impl AugmentedDistribution<f64> {
    /// JSON-ready snapshot. With `flag_split` the mass array holds the
    /// not-yet-hit block followed by the has-hit block.
    pub fn to_snapshot(&self, flag_split: bool) -> DistributionSnapshot {
        let mass = if flag_split {
            self.not_hit.iter().chain(&self.hit).copied().collect()
        } else {
            self.marginal().mass
        };
        DistributionSnapshot {
            time: self.time,
            offset: self.offset,
            mass,
            flag_split,
        }
    }

    /// Rebuilds a distribution from a snapshot. Unsplit snapshots get flags
    /// from their sites, which is exact for walks that never had their flag
    /// restarted.
    pub fn from_snapshot(s: &DistributionSnapshot) -> Result<Self, LatticeError> {
        if s.mass.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(LatticeError::Snapshot("negative or non-finite mass".into()));
        }
        let mut d = if s.flag_split {
            if s.mass.len() % 2 != 0 {
                return Err(LatticeError::Snapshot("split mass has odd length".into()));
            }
            let half = s.mass.len() / 2;
            AugmentedDistribution {
                time: 0,
                offset: s.offset,
                not_hit: s.mass[..half].to_vec(),
                hit: s.mass[half..].to_vec(),
            }
        } else {
            AugmentedDistribution::from_measure(s.offset, s.mass.clone())
        };
        d.time = s.time;
        Ok(d)
    }

    pub fn to_rational(&self) -> AugmentedDistribution<BigRational> {
        AugmentedDistribution {
            time: self.time,
            offset: self.offset,
            not_hit: self
                .not_hit
                .iter()
                .map(|&m| BigRational::from_f64(m))
                .collect(),
            hit: self.hit.iter().map(|&m| BigRational::from_f64(m)).collect(),
        }
    }
}

/// Flag-free law of the walk: `mass[i]` is the probability of site
/// `offset + i` at `time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeDistribution<P = f64> {
    pub time: usize,
    pub offset: Site,
    pub mass: Vec<P>,
}

impl<P: Probability> LatticeDistribution<P> {
    pub fn get(&self, x: Site) -> P {
        let i = x - self.offset;
        if i < 0 || i >= self.mass.len() as Site {
            P::zero()
        } else {
            self.mass[i as usize].clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSnapshot {
    pub time: usize,
    pub offset: Site,
    pub mass: Vec<f64>,
    pub flag_split: bool,
}
