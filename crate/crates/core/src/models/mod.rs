//! The experimental environments: structural samplers plus their
//! registered moment models and true parameters.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use serde::Serialize;

use crate::allocator::minimize_over_simplex;
use crate::error::{OmsError, Result};
use crate::model::{MomentModel, Observation, SourceIndex};
use crate::rng::NoiseStreams;
use crate::variance::{PluginMatrices, SelectionRatio, VarianceObjective};

pub mod confounder_mediator;
pub mod ihdp;
pub mod iv;
pub mod two_iv;
pub mod vietnam;

pub const MODEL_NAMES: [&str; 5] = ["iv", "two_iv", "confounder_mediator", "ihdp", "vietnam"];

/// Draws used for Monte Carlo population plug-ins.
pub const POPULATION_DRAWS: usize = 1_000_000;
const POPULATION_SEED: u64 = 0x0005_EED0_0001;

/// Structural description of an environment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScmSpec {
    pub name: String,
    pub params: Vec<(String, f64)>,
    pub true_theta: Vec<f64>,
    pub true_beta: f64,
    pub noise: Vec<String>,
}

impl ScmSpec {
    pub fn param(&self, name: &str) -> Option<f64> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Draws one full joint sample of every model variable.
pub trait Sampler: Send + Sync {
    /// Number of independent noise substreams the sampler reads.
    fn n_equations(&self) -> usize;
    fn draw(&self, streams: &mut NoiseStreams, out: &mut [f64]);
}

/// A registered environment.
#[derive(Clone)]
pub struct Scm {
    spec: ScmSpec,
    model: MomentModel,
    sampler: Arc<dyn Sampler>,
    population: Arc<OnceLock<PluginMatrices>>,
    analytic: bool,
    metadata: serde_json::Map<String, serde_json::Value>,
}

impl std::fmt::Debug for Scm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scm")
            .field("spec", &self.spec)
            .field("model", &self.model)
            .finish()
    }
}

/// The oracle selection ratio and its objective value.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRatio {
    pub kappa: SelectionRatio,
    pub value: f64,
}

impl Scm {
    pub fn new(
        spec: ScmSpec,
        model: MomentModel,
        sampler: Arc<dyn Sampler>,
        analytic: Option<PluginMatrices>,
    ) -> Self {
        let population = Arc::new(OnceLock::new());
        let is_analytic = analytic.is_some();
        if let Some(pm) = analytic {
            let _ = population.set(pm);
        }
        Scm {
            spec,
            model,
            sampler,
            population,
            analytic: is_analytic,
            metadata: serde_json::Map::new(),
        }
    }

    pub fn with_metadata(mut self, key: &str, value: serde_json::Value) -> Self {
        self.metadata.insert(key.to_string(), value);
        self
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &ScmSpec {
        &self.spec
    }

    pub fn model(&self) -> &MomentModel {
        &self.model
    }

    pub fn true_theta(&self) -> &[f64] {
        &self.spec.true_theta
    }

    pub fn true_beta(&self) -> f64 {
        self.spec.true_beta
    }

    pub fn metadata(&self) -> serde_json::Value {
        let mut m = self.metadata.clone();
        m.insert("name".into(), self.spec.name.clone().into());
        m.insert("true_theta".into(), serde_json::json!(self.spec.true_theta));
        m.insert("true_beta".into(), self.spec.true_beta.into());
        m.insert("params".into(), serde_json::json!(self.spec.params));
        m.insert("costs".into(), serde_json::json!(self.model.costs()));
        m.insert(
            "population_plugins".into(),
            if self.analytic {
                "analytic".into()
            } else {
                format!("monte_carlo_{POPULATION_DRAWS}").into()
            },
        );
        serde_json::Value::Object(m)
    }

    /// Same environment with a different cost vector.
    pub fn with_costs(&self, costs: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.model = self.model.with_costs(costs)?;
        Ok(out)
    }

    pub fn noise_streams(&self, seed: u64) -> NoiseStreams {
        NoiseStreams::new(seed, self.sampler.n_equations())
    }

    pub fn n_variables(&self) -> usize {
        self.model.sources().variable_names().len()
    }

    /// One full joint draw.
    pub fn draw_joint(&self, streams: &mut NoiseStreams, out: &mut [f64]) {
        self.sampler.draw(streams, out)
    }

    /// Draws a full joint sample and keeps only the variables of `source`.
    pub fn sample(&self, source: SourceIndex, streams: &mut NoiseStreams) -> Result<Observation> {
        if source.0 >= self.model.n_sources() {
            return Err(OmsError::Observation(format!("no source with index {source}")));
        }
        let mut joint = vec![0.0; self.n_variables()];
        self.draw_joint(streams, &mut joint);
        Ok(Observation::restrict(self.model.sources(), source, &joint))
    }

    /// Population `G` and `Ω` at the true parameters: analytic where the
    /// model provides them, otherwise a seeded Monte Carlo average.
    pub fn population_plugins(&self) -> &PluginMatrices {
        self.population.get_or_init(|| {
            let mut streams = self.noise_streams(POPULATION_SEED);
            PluginMatrices::from_full_draws(&self.model, self.true_theta(), POPULATION_DRAWS, |x| {
                self.sampler.draw(&mut streams, x)
            })
        })
    }

    /// `κ* = argmin V(θ*, κ)`, times `κᵀc` when `costs` is given.
    pub fn oracle_kappa(&self, costs: Option<&[f64]>) -> Result<OracleRatio> {
        let pm = self.population_plugins();
        let obj = VarianceObjective::new(pm, &self.model, self.true_theta(), costs)?;
        let kappa = minimize_over_simplex(|k| obj.eval(k), self.model.n_sources())?;
        let value = obj.eval(kappa.weights());
        Ok(OracleRatio { kappa, value })
    }
}

/// Options that change how an environment is built.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelOptions {
    /// Real IHDP covariates (`W1,W2,X` CSV); the synthetic fallback otherwise.
    pub ihdp_covariates: Option<PathBuf>,
}

pub fn by_name(name: &str, opts: &ModelOptions) -> Result<Scm> {
    match name {
        "iv" => iv::build(iv::IvParams::default()),
        "two_iv" => two_iv::build(two_iv::TwoIvParams::default()),
        "confounder_mediator" => {
            confounder_mediator::build(confounder_mediator::CmParams::default())
        }
        "ihdp" => {
            let cov = match &opts.ihdp_covariates {
                Some(p) => ihdp::IhdpCovariates::load(p)?,
                None => ihdp::IhdpCovariates::synthetic(),
            };
            ihdp::build(ihdp::IhdpParams::default(), cov)
        }
        "vietnam" => vietnam::build(vietnam::VietnamParams::default()),
        other => Err(OmsError::config(format!(
            "unknown model `{other}`; known models: {}",
            MODEL_NAMES.join(", ")
        ))),
    }
}

/// All five environments with default options.
pub fn registry() -> Result<Vec<Scm>> {
    MODEL_NAMES
        .iter()
        .map(|n| by_name(n, &ModelOptions::default()))
        .collect()
}
