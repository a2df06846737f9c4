//! Variational autoencoder with a factorized latent space: a Euclidean factor
//! for pitch and a Lorentz-model hyperbolic factor for timbre.
//!
//! The crate is organized bottom-up:
//!
//! - [`lorentz`]: hyperbolic geometry primitives in plain `f64`.
//! - [`hypergauss`]: the wrapped (pseudo-hyperbolic) Gaussian.
//! - [`tensor`]: a small reverse-mode autodiff kernel, parameters, Adam.
//! - [`diffgeo`]: the geometry rebuilt from differentiable primitives.
//! - [`model`], [`loss`], [`train`]: the VAE, its objective and the loop.
//! - [`data`]: synthetic instrument corpus, mel features, `MEL1` files.
//! - [`eval`]: timbre accuracy and hierarchical separability.
//! - [`gradcheck`]: finite-difference verification of every gradient path.

mod binio;
pub mod config;
pub mod data;
pub mod diffgeo;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod hypergauss;
pub mod lorentz;
pub mod loss;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use data::{Dataset, Split};
pub use eval::EvalReport;
pub use lorentz::{Curvature, ManifoldPoint, TangentVector};
pub use model::{Geometry, Model, ModelConfig, TimbreLatent};
pub use train::{TrainConfig, TrainReport};
