//! Dither computing: a hybrid deterministic-stochastic pulse-stream arithmetic.
//!
//! Real numbers in `[0, 1]` are represented as `N`-pulse binary sequences whose
//! fraction of ones estimates the value. Three families of encodings are provided:
//!
//! - **stochastic computing**: iid Bernoulli pulses, unbiased with variance `Θ(1/N)`;
//! - **deterministic variants**: unary (Format 1) and clock-divided (Format 2)
//!   patterns, zero variance but biased by up to `1/(2N)`;
//! - **dither computing**: a deterministic block for `⌊Nx⌋` (or `⌈Nx⌉`) pulses plus
//!   Bernoulli residual pulses, unbiased with variance `O(1/N²)`.
//!
//! On top of the encodings the crate implements pulse-stream multiplication and
//! scaled addition ([`arithmetic`]), a Monte Carlo bias/variance/EMSE harness
//! ([`stats`]), k-bit deterministic, stochastic and dither rounding ([`rounding`]),
//! quantized matrix multiplication with Frobenius-error measurement ([`linalg`]) and
//! quantized MNIST softmax inference ([`nn`]).
//!
//! All randomness flows from explicit seeds; see [`seed`] for the substream scheme.

pub mod arithmetic;
pub mod bitstream;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod rounding;
pub mod seed;
pub mod stats;

pub use error::{Error, Result};
