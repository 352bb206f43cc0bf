//! Nested-lattice quantization over the Gosset E8 lattice.
//!
//! The crate implements the NestQuant scheme for approximate matrix
//! multiplication: matrices are chopped into 8-dimensional blocks, each block
//! is quantized with a Voronoi code of the E8 lattice at one of `k` scaling
//! coefficients β, and inner products are evaluated directly on the
//! compressed representations.
//!
//! Module map:
//! - [`lattice`] — exact E8/D8 closest-point oracles and lattice coordinates;
//! - [`voronoi`] — Voronoi codebook encode/decode with overload detection;
//! - [`codec`] — multi-β row/matrix quantization, dot products, rate accounting;
//! - [`beta`] — error profiling and the dynamic program selecting β subsets;
//! - [`rotation`] — deterministic fast Hadamard rotations;
//! - [`ldlq`] — Hessian-feedback weight quantization and the
//!   quantization-aware variant;
//! - [`bounds`] — closed-form rate-distortion bounds, Gaussian shaping
//!   measures and NSM estimation;
//! - [`bench`] — the synthetic Gaussian matmul rate-distortion benchmark;
//! - [`io`] — dense (`DMAT`) and quantized (`NLQ1`) file formats.

// The lattice/linear-algebra kernels index several slices by the same loop
// variable to mirror the underlying formulas; iterator rewrites obscure them.
#![allow(clippy::needless_range_loop)]

pub mod bench;
pub mod beta;
pub mod bounds;
pub mod codec;
pub mod error;
pub mod io;
pub mod lattice;
pub mod ldlq;
pub mod mat;
pub mod rotation;
pub mod sampling;
pub mod voronoi;

pub use error::{Error, Result};
pub use mat::Mat;
