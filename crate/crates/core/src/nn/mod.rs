//! Network building blocks: residual MLPs, a GRU cell, and the positive
//! output heads used for sqrt-covariance predictions.
//!
//! Parameters live in plain [`Mat`] storage and are staged onto a [`Tape`]
//! as leaves before use. Every forward has a companion `*_with_tangent`
//! variant that pushes an input tangent matrix through the same computation
//! using tape primitives, so Jacobians of the network outputs are themselves
//! differentiable quantities.

pub mod gru;
pub mod mlp;

pub use gru::{GruParams, GruVars};
pub use mlp::{MlpParams, MlpVars};

use rand::Rng;

use crate::mat::Mat;
use crate::tape::{Tape, Var};

/// Additive floor applied after softplus in positive heads.
pub const SQRT_DIAG_FLOOR: f64 = 1e-4;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weight initialization.
pub(crate) fn init_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Mat {
    let s = 1.0 / (cols as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-s..s))
}

/// softplus(x) + floor, elementwise: strictly positive for any finite input.
pub fn positive_head(tape: &mut Tape, x: Var) -> Var {
    let sp = tape.softplus(x);
    tape.affine(sp, 1.0, SQRT_DIAG_FLOOR)
}
