//! Generalized cascade click models: finite latent state spaces, symbolic
//! transition factorizations, a generic forward-backward EM engine, the
//! built-in CZM and UBM models, a click-log simulator and evaluation tools.

pub mod activations;
pub mod compiler;
pub mod data;
pub mod em;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod models;
pub mod simulator;
pub mod state_space;

pub use activations::{Activation, ActivationKind};
pub use compiler::{ParameterSpec, TransitionFactorization, Weights};
pub use data::{Session, SessionLog};
pub use em::{fit, FitOptions, FitReport, FittedModel};
pub use error::{GcmError, Result};
pub use models::{build_czm, build_ubm, ModelDefinition, Sharing};
pub use state_space::{LatentVector, StateSpace};
