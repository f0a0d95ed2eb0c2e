//! Adaptive multi-objective preference optimization on a toy causal language
//! model.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`). The
//! aliases below fix the scalar to `f64`, which is what the trainer, the CLI
//! and the checkpoint files use.

pub mod autodiff;
pub mod checks;
pub mod objectives;
pub mod policy;
pub mod prefdata;
pub mod scalar;
pub mod trainer;
pub mod weights;

pub type Graph = autodiff::Graph<f64>;
pub type Gradients = autodiff::Gradients<f64>;
pub type PolicyModel = policy::PolicyModel<f64>;
pub type TokenProbTrace = policy::TokenProbTrace<f64>;
pub type ObjectiveConfig = objectives::ObjectiveConfig<f64>;
pub type WeightVector = weights::WeightVector<f64>;
pub type DimensionStats = weights::DimensionStats<f64>;
pub type Optimizer = trainer::Optimizer<f64>;
