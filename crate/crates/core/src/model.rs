//! Declarative description of an estimation problem.
//!
//! A [`MomentModel`] bundles the raw moment functions `g̃(θ, x)`, their
//! Jacobian, the mask map from a queried source to the moment rows it can
//! evaluate, the scalar target functional and the parameter box. Estimation
//! only ever sees the masked moments `m(s_t) ⊙ g̃(θ, x_t)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{OmsError, Result};
use crate::variance::SelectionRatio;

/// Index of a variable in a model's variable list.
pub type VarId = usize;

/// A product of variables, e.g. `Z·X`. The empty product is the constant 1.
pub type Monomial = Vec<VarId>;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSource {
    pub name: String,
    pub variables: Vec<VarId>,
    pub cost: f64,
}

/// The queryable data sources `ψ` together with their per-query costs.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSourceSet {
    variables: Vec<String>,
    sources: Vec<DataSource>,
}

impl DataSourceSet {
    /// `sources` holds `(name, variable names, cost)` triples.
    pub fn new(variables: &[&str], sources: &[(&str, &[&str], f64)]) -> Result<Self> {
        if sources.len() < 2 {
            return Err(OmsError::config("a model needs at least two data sources"));
        }
        let variables: Vec<String> = variables.iter().map(|v| v.to_string()).collect();
        let mut built = Vec::with_capacity(sources.len());
        for (name, vars, cost) in sources {
            if !(cost.is_finite() && *cost > 0.0) {
                return Err(OmsError::config(format!(
                    "source `{name}` has non-positive cost {cost}"
                )));
            }
            if built.iter().any(|s: &DataSource| s.name == *name) {
                return Err(OmsError::config(format!("duplicate source name `{name}`")));
            }
            let mut ids = Vec::with_capacity(vars.len());
            for v in vars.iter() {
                let id = variables
                    .iter()
                    .position(|known| known == v)
                    .ok_or_else(|| OmsError::config(format!("unknown variable `{v}`")))?;
                ids.push(id);
            }
            ids.sort_unstable();
            ids.dedup();
            built.push(DataSource {
                name: name.to_string(),
                variables: ids,
                cost: *cost,
            });
        }
        Ok(DataSourceSet {
            variables,
            sources: built,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn get(&self, source: SourceIndex) -> &DataSource {
        &self.sources[source.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &DataSource> {
        self.sources.iter()
    }

    pub fn variable_names(&self) -> &[String] {
        &self.variables
    }

    pub fn variable_id(&self, name: &str) -> Option<VarId> {
        self.variables.iter().position(|v| v == name)
    }

    pub fn costs(&self) -> Vec<f64> {
        self.sources.iter().map(|s| s.cost).collect()
    }

    pub fn observes(&self, source: SourceIndex, var: VarId) -> bool {
        self.sources[source.0].variables.binary_search(&var).is_ok()
    }

    /// Same sources with a replacement cost vector.
    pub fn with_costs(&self, costs: &[f64]) -> Result<Self> {
        if costs.len() != self.sources.len() {
            return Err(OmsError::config(format!(
                "expected {} costs, got {}",
                self.sources.len(),
                costs.len()
            )));
        }
        let mut out = self.clone();
        for (s, &c) in out.sources.iter_mut().zip(costs) {
            if !(c.is_finite() && c > 0.0) {
                return Err(OmsError::config(format!("cost {c} is not strictly positive")));
            }
            s.cost = c;
        }
        Ok(out)
    }
}

/// One-hot selection vector `s_t`, stored as the index of the queried source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SourceIndex(pub usize);

impl fmt::Display for SourceIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A record returned by one query: the source and the values of the
/// variables that source exposes. Values are stored densely over the model's
/// variable list; unobserved variables hold NaN and are never read.
#[derive(Debug, Clone)]
pub struct Observation {
    source: SourceIndex,
    values: Vec<f64>,
}

/// Bitwise equality, so unobserved (NaN) slots compare equal.
impl PartialEq for Observation {
    fn eq(&self, other: &Self) -> bool {
        self.source == other.source
            && self.values.len() == other.values.len()
            && self.values.iter().zip(&other.values).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Observation {
    /// Builds an observation from `(name, value)` pairs, which must cover
    /// exactly the variables of `source`.
    pub fn from_pairs(
        sources: &DataSourceSet,
        source: SourceIndex,
        pairs: &[(&str, f64)],
    ) -> Result<Self> {
        if source.0 >= sources.len() {
            return Err(OmsError::Observation(format!("no source with index {source}")));
        }
        let mut values = vec![f64::NAN; sources.variable_names().len()];
        for (name, value) in pairs {
            let id = sources
                .variable_id(name)
                .ok_or_else(|| OmsError::Observation(format!("unknown variable `{name}`")))?;
            if !sources.observes(source, id) {
                return Err(OmsError::Observation(format!(
                    "source {source} does not observe `{name}`"
                )));
            }
            if !value.is_finite() {
                return Err(OmsError::Observation(format!("`{name}` = {value} is not finite")));
            }
            values[id] = *value;
        }
        for &id in &sources.get(source).variables {
            if values[id].is_nan() {
                return Err(OmsError::Observation(format!(
                    "source {source} record is missing `{}`",
                    sources.variable_names()[id]
                )));
            }
        }
        Ok(Observation { source, values })
    }

    /// Restricts a full joint draw to the variables of `source`.
    pub fn restrict(sources: &DataSourceSet, source: SourceIndex, joint: &[f64]) -> Self {
        let mut values = vec![f64::NAN; joint.len()];
        for &id in &sources.get(source).variables {
            values[id] = joint[id];
        }
        Observation { source, values }
    }

    pub fn source(&self) -> SourceIndex {
        self.source
    }

    /// Dense value vector; entries for unobserved variables are NaN.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, var: VarId) -> Option<f64> {
        self.values.get(var).copied().filter(|v| !v.is_nan())
    }

    /// Observed `(variable id, value)` pairs in canonical variable order.
    pub fn observed(&self) -> impl Iterator<Item = (VarId, f64)> + '_ {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| !v.is_nan())
            .map(|(i, v)| (i, *v))
    }
}

/// Ordered record of everything collected so far.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    records: Vec<Observation>,
    counts: Vec<usize>,
}

impl History {
    pub fn new(n_sources: usize) -> Self {
        History {
            records: Vec::new(),
            counts: vec![0; n_sources],
        }
    }

    pub fn push(&mut self, obs: Observation) {
        self.counts[obs.source.0] += 1;
        self.records.push(obs);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Observation] {
        &self.records
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn n_sources(&self) -> usize {
        self.counts.len()
    }

    /// Empirical selection ratio `κ_t`; the simplex center for an empty history.
    pub fn selection_ratio(&self) -> SelectionRatio {
        if self.records.is_empty() {
            return SelectionRatio::center(self.counts.len());
        }
        let t = self.records.len() as f64;
        SelectionRatio::from_weights_unchecked(self.counts.iter().map(|&c| c as f64 / t).collect())
    }

    /// Total cost paid for the records so far.
    pub fn spent(&self, costs: &[f64]) -> f64 {
        self.counts
            .iter()
            .zip(costs)
            .map(|(&n, &c)| n as f64 * c)
            .sum()
    }
}

/// Coordinate box `Θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ThetaBox {
    pub const DEFAULT_BOUND: f64 = 10.0;
    pub const VARIANCE_FLOOR: f64 = 1e-6;

    /// `[-10, 10]` per coordinate, with the listed coordinates bounded below
    /// by `1e-6` instead.
    pub fn standard(dim: usize, variance_coords: &[usize]) -> Self {
        let mut lower = vec![-Self::DEFAULT_BOUND; dim];
        for &i in variance_coords {
            lower[i] = Self::VARIANCE_FLOOR;
        }
        ThetaBox {
            lower,
            upper: vec![Self::DEFAULT_BOUND; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.check(theta).is_ok()
    }

    pub fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(OmsError::config(format!(
                "theta has {} coordinates, model has {}",
                theta.len(),
                self.dim()
            )));
        }
        for (i, &v) in theta.iter().enumerate() {
            if !(v >= self.lower[i] && v <= self.upper[i]) {
                return Err(OmsError::Domain {
                    index: i,
                    value: v,
                    lower: self.lower[i],
                    upper: self.upper[i],
                });
            }
        }
        Ok(())
    }

    pub fn clamp(&self, theta: &mut [f64]) {
        for (i, v) in theta.iter_mut().enumerate() {
            *v = v.clamp(self.lower[i], self.upper[i]);
        }
    }
}

/// The analytic moment system of a model.
///
/// Rows only read the variables listed by [`MomentSystem::row_variables`].
/// Systems whose moments are affine in a fixed set of data monomials can
/// also expose that form, which lets the estimator reduce a history to
/// per-row monomial sums once and evaluate the objective in `O(M·F)`.
pub trait MomentSystem: Send + Sync {
    fn n_params(&self) -> usize;

    /// Variables read by each moment row; its length is the moment count.
    fn row_variables(&self) -> &[Vec<VarId>];

    fn moment(&self, row: usize, theta: &[f64], x: &[f64]) -> f64;

    /// Writes `∂g̃_row/∂θ` into `out` (length `n_params`).
    fn jacobian_row(&self, row: usize, theta: &[f64], x: &[f64], out: &mut [f64]);

    /// `f_tar(θ)`; `None` at a pole.
    fn target(&self, theta: &[f64]) -> Option<f64>;

    /// `∇f_tar(θ)`; returns false at a pole.
    fn target_gradient(&self, theta: &[f64], out: &mut [f64]) -> bool;

    /// Monomials `φ_k` such that `g̃_j(θ, x) = Σ_k C_jk(θ) φ_k(x)`. Empty
    /// when the system has no such form.
    fn monomials(&self) -> &[Monomial] {
        &[]
    }

    /// Row-major `M × F` coefficient matrix `C(θ)` for [`Self::monomials`].
    fn coefficients(&self, _theta: &[f64], _out: &mut [f64]) {}
}

/// A registered estimation problem.
#[derive(Clone)]
pub struct MomentModel {
    name: String,
    param_names: Vec<String>,
    sources: DataSourceSet,
    masks: Vec<Vec<bool>>,
    theta_box: ThetaBox,
    system: Arc<dyn MomentSystem>,
}

impl fmt::Debug for MomentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MomentModel")
            .field("name", &self.name)
            .field("params", &self.param_names)
            .field("sources", &self.sources)
            .field("masks", &self.masks)
            .finish()
    }
}

impl MomentModel {
    /// Validates dimensions and mask consistency: every row masked in for a
    /// source may only read variables that source observes.
    pub fn new(
        name: &str,
        param_names: &[&str],
        sources: DataSourceSet,
        masks: Vec<Vec<bool>>,
        theta_box: ThetaBox,
        system: Arc<dyn MomentSystem>,
    ) -> Result<Self> {
        let m = system.row_variables().len();
        let d = system.n_params();
        if param_names.len() != d || theta_box.dim() != d {
            return Err(OmsError::config(format!(
                "model `{name}`: parameter names/box do not match {d} parameters"
            )));
        }
        if masks.len() != sources.len() {
            return Err(OmsError::config(format!(
                "model `{name}`: {} masks for {} sources",
                masks.len(),
                sources.len()
            )));
        }
        for (i, mask) in masks.iter().enumerate() {
            if mask.len() != m {
                return Err(OmsError::config(format!(
                    "model `{name}`: mask {i} has length {}, expected {m}",
                    mask.len()
                )));
            }
            for (row, _) in mask.iter().enumerate().filter(|(_, on)| **on) {
                for &v in &system.row_variables()[row] {
                    if !sources.observes(SourceIndex(i), v) {
                        return Err(OmsError::config(format!(
                            "model `{name}`: row {row} reads `{}` which source {i} does not observe",
                            sources.variable_names()[v]
                        )));
                    }
                }
            }
        }
        Ok(MomentModel {
            name: name.to_string(),
            param_names: param_names.iter().map(|s| s.to_string()).collect(),
            sources,
            masks,
            theta_box,
            system,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn param_names(&self) -> &[String] {
        &self.param_names
    }

    pub fn n_moments(&self) -> usize {
        self.system.row_variables().len()
    }

    pub fn n_params(&self) -> usize {
        self.system.n_params()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &DataSourceSet {
        &self.sources
    }

    pub fn costs(&self) -> Vec<f64> {
        self.sources.costs()
    }

    pub fn theta_box(&self) -> &ThetaBox {
        &self.theta_box
    }

    pub fn system(&self) -> &dyn MomentSystem {
        self.system.as_ref()
    }

    pub fn mask(&self, source: SourceIndex) -> &[bool] {
        &self.masks[source.0]
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    /// Same model with a different cost vector.
    pub fn with_costs(&self, costs: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.sources = self.sources.with_costs(costs)?;
        Ok(out)
    }

    fn check_observation(&self, obs: &Observation) -> Result<()> {
        let s = obs.source();
        if s.0 >= self.sources.len() {
            return Err(OmsError::Observation(format!("no source with index {s}")));
        }
        if obs.values().len() != self.sources.variable_names().len() {
            return Err(OmsError::Observation(format!(
                "observation carries {} variable slots, model has {}",
                obs.values().len(),
                self.sources.variable_names().len()
            )));
        }
        for (row, _) in self.mask(s).iter().enumerate().filter(|(_, on)| **on) {
            for &v in &self.system.row_variables()[row] {
                if obs.get(v).is_none() {
                    return Err(OmsError::Schema {
                        source_index: s.0,
                        variable: self.sources.variable_names()[v].clone(),
                        row,
                    });
                }
            }
        }
        Ok(())
    }

    /// `m(s_t) ⊙ g̃(θ, x_t)`. Unmasked rows are exactly zero and never evaluated.
    pub fn masked_moments(&self, theta: &[f64], obs: &Observation) -> Result<DVector<f64>> {
        self.theta_box.check(theta)?;
        self.check_observation(obs)?;
        let mut out = DVector::zeros(self.n_moments());
        self.masked_moments_into(theta, obs, out.as_mut_slice());
        Ok(out)
    }

    /// Unchecked variant used on hot paths.
    pub(crate) fn masked_moments_into(&self, theta: &[f64], obs: &Observation, out: &mut [f64]) {
        let mask = self.mask(obs.source());
        for (row, slot) in out.iter_mut().enumerate() {
            *slot = if mask[row] {
                self.system.moment(row, theta, obs.values())
            } else {
                0.0
            };
        }
    }

    /// Masked Jacobian `m(s_t) ⊙ ∂g̃/∂θ` (`M × D`).
    pub fn masked_jacobian(&self, theta: &[f64], obs: &Observation) -> Result<DMatrix<f64>> {
        self.theta_box.check(theta)?;
        self.check_observation(obs)?;
        let (m, d) = (self.n_moments(), self.n_params());
        let mut out = DMatrix::zeros(m, d);
        let mut row_buf = vec![0.0; d];
        let mask = self.mask(obs.source());
        for row in 0..m {
            if mask[row] {
                self.system.jacobian_row(row, theta, obs.values(), &mut row_buf);
                for (c, v) in row_buf.iter().enumerate() {
                    out[(row, c)] = *v;
                }
            }
        }
        Ok(out)
    }

    /// `f_tar(θ)` and `∇f_tar(θ)`.
    pub fn target_value(&self, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
        self.theta_box.check(theta)?;
        self.target_unchecked(theta)
    }

    /// Target and gradient without the box check; estimates always lie in the
    /// box, population parameters may sit on its edge.
    pub fn target_unchecked(&self, theta: &[f64]) -> Result<(f64, DVector<f64>)> {
        let pole = || OmsError::Pole {
            theta: theta.to_vec(),
        };
        let value = self.system.target(theta).ok_or_else(pole)?;
        let mut grad = DVector::zeros(self.n_params());
        if !self.system.target_gradient(theta, grad.as_mut_slice()) || !value.is_finite() {
            return Err(pole());
        }
        Ok((value, grad))
    }
}
