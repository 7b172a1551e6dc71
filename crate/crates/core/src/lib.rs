//! Weak-form greedy latent-space dynamics identification.
//!
//! An autoencoder compresses full-order PDE snapshots into a handful of latent
//! variables while per-parameter polynomial ODEs are fit to the latent
//! trajectories in weak (test-function) form. Training parameters are chosen
//! greedily by the backward-Euler residual of the reduced-order prediction, and
//! unseen parameters are served through k-nearest-neighbour interpolation of
//! the ODE coefficients.
//!
//! Module map:
//!
//! * [`fom`]: full-order solvers (1D/2D Burgers, radial advection) and the
//!   time-step residual.
//! * [`data`]: parameter grids, noise injection, dataset assembly and on-disk
//!   formats.
//! * [`net`]: dense ReLU networks with batched forward, Jacobian-vector and
//!   reverse-mode passes, plus Adam.
//! * [`latentdi`]: polynomial libraries, test functions, weak integrals and the
//!   strong/weak dynamics residuals.
//! * [`trainer`]: composite loss with exact gradients, joint optimisation and
//!   the greedy sampling loop.
//! * [`interp`]: partition-of-unity interpolation of ODE coefficients.
//! * [`rom`]: latent rollout, residual error indicator and error metrics.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod fom;
pub mod interp;
pub mod latentdi;
pub mod net;
pub mod par;
pub mod rom;
pub mod trainer;

pub use error::{Error, Result};
pub use ndarray;
