//! Probability-flow ODE samplers for diffusion models, evaluated against
//! analytic score models.
//!
//! The crate is organised bottom-up:
//!
//! - [`schedule`]: noise schedules, the half-log-SNR coordinate and time grids.
//! - [`models`]: closed-form noise/data predictors (isotropic Gaussian,
//!   Gaussian mixture, polynomial-in-λ).
//! - [`solvers`]: DDIM, exponential-integrator multistep solvers, UniPC and
//!   the forward-value samplers, plus the trajectory driver.
//! - [`oracle`]: exact Gaussian trajectories, scalar κ recursions and a
//!   refined RK4 reference integrator.
//! - [`harness`]: convergence experiments, slope fitting and report output.
//! - [`verify`]: the built-in acceptance suite.

pub mod harness;
pub mod models;
pub mod oracle;
pub mod schedule;
pub mod solvers;
pub mod verify;

mod error;
mod numfmt;

pub use error::{Error, Result};
pub use numfmt::{fmt17, to_json_bytes, Fmt17Formatter};

pub use models::{
    data_from_noise, noise_from_data, GaussianMixtureModel, IsotropicGaussianModel, MixtureComponent,
    Model, ModelSpec, PolyLambdaModel, Predictor,
};
pub use schedule::{GridKind, GridSpec, NoiseLevel, NoiseSchedule, TimeGrid};
pub use solvers::{run_sampler, Lookahead, Rule, SamplerSpec, Trajectory};

/// Dense state vector.
pub type Vector = ndarray::Array1<f64>;
