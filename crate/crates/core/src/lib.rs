//! Density-on-density regression through a warping function.
//!
//! Pairs of densities `(f_i, g_i)` on [0, 1] are linked by `g_i ≈ f_i ⊙ β`,
//! where `β` is a boundary-preserving warp and `⊙` is the push-forward action.
//! `β` is estimated by minimizing the average squared Hellinger distance
//! between half densities, with a smooth monotone parameterization and a
//! roughness penalty, and comes with pointwise confidence bands.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod grid_density;
pub mod inference;
pub mod io;
pub mod simulation;
pub mod sphere_geometry;
pub mod warping;

pub use error::{Error, Result};
pub use estimator::{FitConfig, RegressionData, WarpFit};
pub use grid_density::{Grid, GridDensity, SampleSet, VariableTag};
pub use sphere_geometry::{HalfDensity, TangentVector};
pub use warping::{BasisExpansion, WarpingFunction};
