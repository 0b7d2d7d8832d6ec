// SPDX-License-Identifier: Apache-2.0

//! Approximate message passing, state evolution and phase-transition location
//! for the rank-r spiked Wigner model `Y = X0 X0^T / sqrt(N) + W` with sparse
//! priors.

// Parameter checks are written as `!(x > 0.0)` on purpose so that NaN fails.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amp;
pub mod cli;
pub mod denoiser;
pub mod error;
pub mod model;
pub mod parallel;
pub mod phase;
pub mod quadrature;
pub mod state_evolution;

pub use error::{Error, Result};
