//! Fine-tuning of the rig parameters used inside an inverse-rig solver.
//!
//! The solver (the tracker) is treated as a black box mapping geometry to
//! controls. Its derivative with respect to the rig parameters is recovered
//! from the implicit rig equation together with secant estimates of how the
//! tracker's reconstructed geometry moves.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod error;
pub mod fitting;
pub mod implicit;
pub mod io;
pub mod linalg;
pub mod objective;
pub mod optimizer;
pub mod repro;
pub mod rig;
pub mod tracker;

pub use error::{Result, RigError};
pub use rig::{JointPsdRig, LinearRig, ParamJacobian, ParamSet, Rig, SparsityPattern};
