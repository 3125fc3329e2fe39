//! Online moment selection: GMM estimation over heterogeneous data sources,
//! adaptive source-selection policies and a Monte Carlo regret harness.

pub mod allocator;
pub mod error;
pub mod gmm;
pub mod harness;
pub mod history_io;
pub mod linalg;
pub mod model;
pub mod models;
pub mod nelder_mead;
pub mod policy;
pub mod rng;
pub mod variance;

pub use error::{OmsError, Result};
pub use gmm::{estimate, estimate_with, EstimateOptions, GmmEstimate, WeightSpec};
pub use model::{DataSourceSet, History, MomentModel, Observation, SourceIndex};
pub use models::{by_name, ModelOptions, Scm};
pub use policy::{run_policy, Horizon, PolicyKind, RunContext};
pub use variance::SelectionRatio;
