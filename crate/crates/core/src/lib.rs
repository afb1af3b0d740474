// SPDX-License-Identifier: MIT OR Apache-2.0

//! Residual-stream update analysis.
//!
//! Measures what an additive update `X' = X + ΔX` contributes to a hidden-state
//! matrix `X ∈ ℝ^{S×H}`:
//!
//! - **innovation** ([`spectral::rid`]): change in effective rank plus the
//!   energy of `X'` outside the column and row spaces of `X`;
//! - **reconfiguration** ([`mixing::mixing_information_gain`]): change in the
//!   average entropy of token-to-token cosine-similarity distributions.
//!
//! Around these sit a small deterministic decoder that produces genuine
//! residual-stream traces ([`toy`]), stochastic controls ([`baselines`]),
//! shared attention priors that replace decoder attention scores ([`sap`]),
//! visual interaction graphs over attention maps ([`graph`]), and the binary
//! tensor container used to move traces around ([`tensor`]).
//!
//! The crate is `no_std` with `alloc`; all file and process IO lives in the
//! companion `rlens` crate.

#![cfg_attr(not(any(feature = "std", test)), no_std)]
#![forbid(unsafe_code)]
// NaN must fail range checks, so `!(x >= 0.0)` is deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod baselines;
pub mod error;
pub mod graph;
pub mod matrix;
pub mod mixing;
pub mod numeric;
pub mod rng;
pub mod sap;
pub mod spectral;
pub mod svd;
pub mod tensor;
pub mod toy;
pub mod trace;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use spectral::{rid, InnovationReport};
pub use svd::{svd, SvdFactors};
pub use trace::{LayerStates, LayerTrace, TokenSpans};

/// Seed used whenever the caller does not supply one.
pub const DEFAULT_SEED: u64 = 0x5EED_1729;
