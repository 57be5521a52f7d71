//! Controlled lazy random walks on the integer lattice.
//!
//! A controller picks, at every step, the probability `u in [0, q]` that the
//! walk stays put; otherwise it moves one site left or right with equal
//! probability. This crate evolves the exact law of such walks, solves for
//! the controls that maximize or minimize `P(S_n = 0)`, samples trajectories
//! reproducibly, and measures the power-law decay of the hit probability.

pub mod analysis;
pub mod dp;
pub mod lattice;
pub mod mc;
pub mod policy;
pub mod stats;

pub use analysis::{exponent_sweep, fit_exponent, ChainSpec, ExponentFit, Method, PolicyKind};
pub use dp::{evolve, hit_probability, solve_extremal, Objective, Retention, Target, ValueTable};
pub use lattice::{AugmentedDistribution, ControlRow, HitFlag, LatticeDistribution, Site};
pub use mc::{
    barrier_diagnostics, estimate_hit, sample_path, trial_rng, BarrierFamily, StageStats,
};
pub use policy::{BangBangTable, PolicySpec, Schedule, ScheduleSegment};
pub use stats::Proportion;
