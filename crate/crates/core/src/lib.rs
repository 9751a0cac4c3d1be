//! Active tactile perception: learn a generative model of contact-rich
//! interaction, filter beliefs over latent object properties with a
//! differentiable extended Kalman filter, and pick actions that shrink
//! property uncertainty fastest.

pub mod baselines;
pub mod controller;
pub mod ekf;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod mat;
pub mod model;
pub mod nn;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
