//! Data-collection policies as explicit state machines over a history.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::allocator::{
    integer_allocate, interleave, minimize_over_simplex, spend_toward, within_budget, FeasibleRegion,
};
use crate::error::{OmsError, Result};
use crate::gmm::{estimate_with, EstimateOptions, GmmEstimate, WeightSpec, DEFAULT_LAMBDA_W};
use crate::model::{History, MomentModel, Observation, SourceIndex};
use crate::models::Scm;
use crate::rng::{derive_seed, NoiseStreams};
use crate::variance::{PluginMatrices, SelectionRatio, VarianceObjective};

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyKind {
    Fixed(SelectionRatio),
    /// Fixed at the simplex center, whatever the number of sources.
    FixedEqual,
    Oracle,
    Etc(f64),
    Etg(f64),
    EtcCs(f64),
    EtgFs(f64),
    EtgFb(f64),
}

impl PolicyKind {
    pub fn label(&self) -> String {
        self.to_string()
    }

    pub fn uses_costs(&self) -> bool {
        matches!(self, PolicyKind::EtcCs(_) | PolicyKind::EtgFs(_) | PolicyKind::EtgFb(_))
    }

    /// Parses a comma-separated list; numbers after `fixed:` belong to that
    /// policy's ratio, e.g. `etc:0.1,fixed:0.5,0.5,oracle`.
    pub fn parse_list(s: &str) -> Result<Vec<PolicyKind>> {
        let mut items: Vec<String> = Vec::new();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let numeric = tok.parse::<f64>().is_ok();
            match items.last_mut() {
                Some(last) if numeric && last.starts_with("fixed:") => {
                    last.push(',');
                    last.push_str(tok);
                }
                _ => items.push(tok.to_string()),
            }
        }
        if items.is_empty() {
            return Err(OmsError::config("policy list is empty"));
        }
        items.iter().map(|i| i.parse()).collect()
    }
}

fn check_fraction(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(OmsError::config(format!("{name} fraction {v} must lie in (0, 1)")))
    }
}

impl FromStr for PolicyKind {
    type Err = OmsError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "oracle" => return Ok(PolicyKind::Oracle),
            "fixed_equal" => return Ok(PolicyKind::FixedEqual),
            _ => {}
        }
        let (name, arg) = s
            .split_once(':')
            .ok_or_else(|| OmsError::config(format!("cannot parse policy `{s}`")))?;
        if name == "fixed" {
            let w: std::result::Result<Vec<f64>, _> = arg.split(',').map(|x| x.trim().parse()).collect();
            let w = w.map_err(|_| OmsError::config(format!("bad ratio in `{s}`")))?;
            return Ok(PolicyKind::Fixed(SelectionRatio::new(w)?));
        }
        let v: f64 = arg
            .parse()
            .map_err(|_| OmsError::config(format!("bad fraction in `{s}`")))?;
        match name {
            "etc" => Ok(PolicyKind::Etc(check_fraction(name, v)?)),
            "etg" => Ok(PolicyKind::Etg(check_fraction(name, v)?)),
            "etc_cs" => Ok(PolicyKind::EtcCs(check_fraction(name, v)?)),
            "etg_fs" => Ok(PolicyKind::EtgFs(check_fraction(name, v)?)),
            "etg_fb" => Ok(PolicyKind::EtgFb(check_fraction(name, v)?)),
            _ => Err(OmsError::config(format!("unknown policy `{name}`"))),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Fixed(k) => {
                let parts: Vec<String> = k.weights().iter().map(|w| w.to_string()).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
            PolicyKind::FixedEqual => write!(f, "fixed_equal"),
            PolicyKind::Oracle => write!(f, "oracle"),
            PolicyKind::Etc(e) => write!(f, "etc:{e}"),
            PolicyKind::Etg(s) => write!(f, "etg:{s}"),
            PolicyKind::EtcCs(e) => write!(f, "etc_cs:{e}"),
            PolicyKind::EtgFs(s) => write!(f, "etg_fs:{s}"),
            PolicyKind::EtgFb(s) => write!(f, "etg_fb:{s}"),
        }
    }
}

impl Serialize for PolicyKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label())
    }
}

/// Sample horizon `T` or monetary budget `B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Horizon {
    Samples(usize),
    Budget(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Phase {
    Explore,
    Committed,
    Round(usize),
    Done,
}

/// One interim re-targeting step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterimRecord {
    /// Records collected when the estimate was made.
    pub t: usize,
    pub theta_hat: Option<Vec<f64>>,
    /// Unprojected variance minimizer (the previous one on failure).
    pub k_hat: SelectionRatio,
    pub target: SelectionRatio,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyState {
    pub kind: PolicyKind,
    pub phase: Phase,
    pub current_target: Option<SelectionRatio>,
    pub horizon: Horizon,
    pub budget_left: f64,
    /// Batches collected, including exploration.
    pub rounds: usize,
    pub interim_estimates: Vec<InterimRecord>,
    #[serde(skip)]
    pub final_region: Option<FeasibleRegion>,
}

impl PolicyState {
    fn new(kind: PolicyKind, horizon: Horizon) -> Self {
        let budget_left = match horizon {
            Horizon::Samples(t) => t as f64,
            Horizon::Budget(b) => b,
        };
        PolicyState {
            kind,
            phase: Phase::Explore,
            current_target: None,
            horizon,
            budget_left,
            rounds: 0,
            interim_estimates: Vec::new(),
            final_region: None,
        }
    }
}

/// Answers queries one record at a time.
pub trait Environment {
    fn query(&mut self, source: SourceIndex) -> Result<Observation>;
}

/// Draws from a structural model with per-equation noise streams. Every
/// query draws a full joint sample, so step `t` sees the same underlying
/// draw whichever source a policy picks.
pub struct ScmEnvironment<'a> {
    scm: &'a Scm,
    streams: NoiseStreams,
    joint: Vec<f64>,
}

impl<'a> ScmEnvironment<'a> {
    pub fn new(scm: &'a Scm, seed: u64) -> Self {
        ScmEnvironment {
            scm,
            streams: scm.noise_streams(seed),
            joint: vec![0.0; scm.n_variables()],
        }
    }
}

impl Environment for ScmEnvironment<'_> {
    fn query(&mut self, source: SourceIndex) -> Result<Observation> {
        self.scm.draw_joint(&mut self.streams, &mut self.joint);
        Ok(Observation::restrict(self.scm.model().sources(), source, &self.joint))
    }
}

/// Replays a logged history; fails if a policy asks for a different source
/// than the log recorded.
pub struct ReplayEnvironment {
    records: Vec<Observation>,
    next: usize,
}

impl ReplayEnvironment {
    pub fn new(history: &History) -> Self {
        ReplayEnvironment {
            records: history.records().to_vec(),
            next: 0,
        }
    }
}

impl Environment for ReplayEnvironment {
    fn query(&mut self, source: SourceIndex) -> Result<Observation> {
        let obs = self
            .records
            .get(self.next)
            .ok_or_else(|| OmsError::Observation("replay log exhausted".into()))?;
        if obs.source() != source {
            return Err(OmsError::Observation(format!(
                "replay diverged at step {}: logged source {}, requested {source}",
                self.next,
                obs.source()
            )));
        }
        self.next += 1;
        Ok(obs.clone())
    }
}

/// Per-episode settings shared by all policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RunContext {
    pub seed: u64,
    /// Interim ridge; `0` switches interim estimates to the efficient weight.
    pub lambda_w: f64,
    /// `κ*` for the oracle policy.
    pub oracle: Option<SelectionRatio>,
}

impl RunContext {
    pub fn new(seed: u64) -> Self {
        RunContext {
            seed,
            lambda_w: DEFAULT_LAMBDA_W,
            oracle: None,
        }
    }

    fn interim_weight(&self) -> WeightSpec {
        if self.lambda_w > 0.0 {
            WeightSpec::Regularized(self.lambda_w)
        } else {
            WeightSpec::Efficient
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub history: History,
    pub estimate: GmmEstimate,
    pub state: PolicyState,
    pub spent: f64,
}

struct Runner<'a, E: Environment> {
    model: &'a MomentModel,
    env: &'a mut E,
    ctx: &'a RunContext,
    costs: Vec<f64>,
    history: History,
    state: PolicyState,
    k_hat: SelectionRatio,
    last_theta: Option<Vec<f64>>,
}

impl<'a, E: Environment> Runner<'a, E> {
    fn collect(&mut self, alloc: &[usize]) -> Result<()> {
        if alloc.iter().sum::<usize>() == 0 {
            return Ok(());
        }
        for i in interleave(alloc) {
            let obs = self.env.query(SourceIndex(i))?;
            if obs.source() != SourceIndex(i) {
                return Err(OmsError::Observation(format!(
                    "environment answered source {} for a query to {i}",
                    obs.source()
                )));
            }
            self.history.push(obs);
        }
        self.state.rounds += 1;
        let spent = self.spent();
        self.state.budget_left = match self.state.horizon {
            Horizon::Samples(t) => (t - self.history.len()) as f64,
            Horizon::Budget(b) => (b - spent).max(0.0),
        };
        Ok(())
    }

    fn spent(&self) -> f64 {
        self.history.spent(&self.costs)
    }

    fn counts(&self) -> Vec<usize> {
        self.history.counts().to_vec()
    }

    fn kappa(&self) -> SelectionRatio {
        self.history.selection_ratio()
    }

    /// Re-estimates θ, recomputes `k̂` and projects it onto `region`. On any
    /// failure the previous `k̂` is kept and re-projected.
    fn retarget(&mut self, region: FeasibleRegion, with_costs: bool) -> SelectionRatio {
        let tag = self.state.interim_estimates.len() as u64 + 1;
        let opts = EstimateOptions {
            warm_starts: self.last_theta.iter().cloned().collect(),
            force_generic: false,
        };
        // Equal costs leave the argmin unchanged; skipping them keeps the
        // unit-cost variants on exactly the same path as their plain forms.
        let uniform = self.costs.windows(2).all(|w| w[0] == w[1]);
        let costs = (with_costs && !uniform).then_some(self.costs.as_slice());
        let attempt = estimate_with(
            &self.history,
            self.model,
            self.ctx.interim_weight(),
            derive_seed(self.ctx.seed, tag),
            &opts,
        )
        .and_then(|est| {
            if !est.optimizer_report.converged {
                return Err(OmsError::config("interim optimizer did not converge"));
            }
            let pm = PluginMatrices::from_history(&self.history, self.model, &est.theta_hat);
            let obj = VarianceObjective::new(&pm, self.model, &est.theta_hat, costs)?;
            let k = minimize_over_simplex(|k| obj.eval(k), self.model.n_sources())?;
            Ok((est.theta_hat, k))
        });
        let (theta, failure) = match attempt {
            Ok((theta, k)) => {
                self.k_hat = k;
                self.last_theta = Some(theta.clone());
                (Some(theta), None)
            }
            Err(e) => (None, Some(e.to_string())),
        };
        let target = region.project(&self.k_hat);
        self.state.interim_estimates.push(InterimRecord {
            t: self.history.len(),
            theta_hat: theta,
            k_hat: self.k_hat.clone(),
            target: target.clone(),
            failure,
        });
        self.state.current_target = Some(target.clone());
        self.state.final_region = Some(region);
        target
    }

    fn finish(mut self) -> Result<EpisodeOutcome> {
        self.state.phase = Phase::Done;
        let opts = EstimateOptions {
            warm_starts: self.last_theta.iter().cloned().collect(),
            force_generic: false,
        };
        let estimate = estimate_with(
            &self.history,
            self.model,
            WeightSpec::Efficient,
            derive_seed(self.ctx.seed, 0),
            &opts,
        )?;
        let spent = self.spent();
        Ok(EpisodeOutcome {
            history: self.history,
            estimate,
            state: self.state,
            spent,
        })
    }
}

fn cost_of(alloc: &[usize], costs: &[f64]) -> f64 {
    alloc.iter().zip(costs).map(|(n, c)| *n as f64 * c).sum()
}

/// Runs one episode of `kind` against `env`.
///
/// With a sample horizon, costs are ignored and cost-aware policies run with
/// unit costs and budget `T`. With a budget, sample-count policies are
/// rejected and fixed policies spend the budget at their ratio.
pub fn run_policy<E: Environment>(
    kind: &PolicyKind,
    model: &MomentModel,
    horizon: Horizon,
    env: &mut E,
    ctx: &RunContext,
) -> Result<EpisodeOutcome> {
    let n_src = model.n_sources();
    let costs = match horizon {
        Horizon::Samples(_) => vec![1.0; n_src],
        Horizon::Budget(_) => model.costs(),
    };
    let mut r = Runner {
        model,
        env,
        ctx,
        costs,
        history: History::new(n_src),
        state: PolicyState::new(kind.clone(), horizon),
        k_hat: SelectionRatio::center(n_src),
        last_theta: None,
    };
    let budget = match horizon {
        Horizon::Samples(t) => t as f64,
        Horizon::Budget(b) => b,
    };
    if !(budget.is_finite() && budget > 0.0) {
        return Err(OmsError::config(format!("horizon/budget {budget} must be positive")));
    }

    match (kind, horizon) {
        (PolicyKind::Fixed(_) | PolicyKind::FixedEqual | PolicyKind::Oracle, _) => {
            let k = match kind {
                PolicyKind::Fixed(k) => k.clone(),
                PolicyKind::FixedEqual => SelectionRatio::center(n_src),
                _ => ctx
                    .oracle
                    .clone()
                    .ok_or_else(|| OmsError::config("oracle policy needs the oracle ratio"))?,
            };
            if k.len() != n_src {
                return Err(OmsError::config(format!(
                    "fixed ratio has {} entries, model has {n_src} sources",
                    k.len()
                )));
            }
            r.state.phase = Phase::Committed;
            r.state.current_target = Some(k.clone());
            let alloc = match horizon {
                Horizon::Samples(t) => integer_allocate(&k, &vec![0; n_src], t),
                Horizon::Budget(b) => spend_toward(&k, &vec![0; n_src], &r.costs.clone(), b),
            };
            r.collect(&alloc)?;
        }
        (PolicyKind::Etc(e), Horizon::Samples(t)) => run_etc(&mut r, *e, t)?,
        (PolicyKind::Etg(s), Horizon::Samples(t)) => run_etg(&mut r, *s, t)?,
        (PolicyKind::Etc(_) | PolicyKind::Etg(_), Horizon::Budget(_)) => {
            return Err(OmsError::config(format!(
                "policy `{kind}` needs a sample horizon; use its cost-aware variant with budgets"
            )))
        }
        (PolicyKind::EtcCs(e), _) => run_etc_cs(&mut r, *e, budget)?,
        (PolicyKind::EtgFs(s), _) => run_etg_fs(&mut r, *s, budget)?,
        (PolicyKind::EtgFb(s), _) => run_etg_fb(&mut r, *s, budget)?,
    }
    r.finish()
}

fn rounds_for(s: f64) -> usize {
    (1.0 / s - 1e-9).ceil() as usize
}

fn run_etc<E: Environment>(r: &mut Runner<'_, E>, e: f64, t: usize) -> Result<()> {
    let n_src = r.model.n_sources();
    let n = (t as f64 * e).floor() as usize;
    let need = n_src.max(r.model.n_params() + 1);
    if n < need || n >= t {
        return Err(OmsError::config(format!(
            "etc:{e} with T = {t} explores {n} records; needs at least {need} and fewer than T"
        )));
    }
    let explore = integer_allocate(&SelectionRatio::center(n_src), &vec![0; n_src], n);
    r.collect(&explore)?;
    r.state.phase = Phase::Committed;
    let region = FeasibleRegion::etc(n as f64 / t as f64, r.kappa())?;
    let target = r.retarget(region, false);
    let alloc = integer_allocate(&target, &r.counts(), t - n);
    r.collect(&alloc)
}

fn run_etg<E: Environment>(r: &mut Runner<'_, E>, s: f64, t: usize) -> Result<()> {
    let n_src = r.model.n_sources();
    let b = (t as f64 * s).floor() as usize;
    let j_total = rounds_for(s);
    if b < n_src || j_total < 2 || b * (j_total - 1) >= t {
        return Err(OmsError::config(format!(
            "etg:{s} with T = {t} gives batches of {b}; needs at least {n_src} per batch and two rounds"
        )));
    }
    let first = integer_allocate(&SelectionRatio::center(n_src), &vec![0; n_src], b);
    r.collect(&first)?;
    for j in 1..j_total {
        r.state.phase = Phase::Round(j + 1);
        let b_next = if j == j_total - 1 { t - b * (j_total - 1) } else { b };
        let n_done = r.history.len();
        let region = FeasibleRegion::round(n_done as f64 / b_next as f64, r.kappa())?;
        let target = r.retarget(region, false);
        let alloc = integer_allocate(&target, &r.counts(), b_next);
        r.collect(&alloc)?;
    }
    Ok(())
}

fn run_etc_cs<E: Environment>(r: &mut Runner<'_, E>, e: f64, budget: f64) -> Result<()> {
    let n_src = r.model.n_sources();
    let costs = r.costs.clone();
    let c_sum: f64 = costs.iter().sum();
    let c_max = costs.iter().cloned().fold(0.0, f64::max);
    if budget * e < c_sum || budget * (1.0 - e) < c_max {
        return Err(OmsError::config(format!(
            "etc_cs:{e} with budget {budget} cannot explore every source and still buy one more record"
        )));
    }
    let center = SelectionRatio::center(n_src);
    let explore_cap = budget * e;
    let mut n = (explore_cap / center.dot(&costs)).floor() as usize;
    let mut explore = integer_allocate(&center, &vec![0; n_src], n);
    while !within_budget(cost_of(&explore, &costs), explore_cap) && n > 0 {
        n -= 1;
        explore = integer_allocate(&center, &vec![0; n_src], n);
    }
    r.collect(&explore)?;
    r.state.phase = Phase::Committed;
    let spent = r.spent();
    let region = FeasibleRegion::cost_etc(spent / budget, r.kappa(), &costs)?;
    let target = r.retarget(region, true);
    let add = spend_toward(&target, &r.counts(), &costs, budget - spent);
    r.collect(&add)
}

fn run_etg_fs<E: Environment>(r: &mut Runner<'_, E>, s: f64, budget: f64) -> Result<()> {
    let n_src = r.model.n_sources();
    let costs = r.costs.clone();
    let c_max = costs.iter().cloned().fold(0.0, f64::max);
    let c_min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let b = (budget * s / c_max).floor() as usize;
    if b < n_src {
        return Err(OmsError::config(format!(
            "etg_fs:{s} with budget {budget} gives batches of {b} records; needs at least {n_src}"
        )));
    }
    let first = integer_allocate(&SelectionRatio::center(n_src), &vec![0; n_src], b);
    r.collect(&first)?;
    let mut round = 1;
    loop {
        let left = budget - r.spent();
        if !within_budget(c_min, left) {
            break;
        }
        round += 1;
        r.state.phase = Phase::Round(round);
        let spent = r.spent();
        if left / c_max <= b as f64 {
            // Truncated last batch: spend what is left toward the target.
            let region = FeasibleRegion::cost_round(spent / left, r.kappa(), &costs)?;
            let target = r.retarget(region, true);
            let add = spend_toward(&target, &r.counts(), &costs, left);
            r.collect(&add)?;
            break;
        }
        let region = FeasibleRegion::round(r.history.len() as f64 / b as f64, r.kappa())?;
        let target = r.retarget(region, true);
        let alloc = integer_allocate(&target, &r.counts(), b);
        r.collect(&alloc)?;
    }
    Ok(())
}

fn run_etg_fb<E: Environment>(r: &mut Runner<'_, E>, s: f64, budget: f64) -> Result<()> {
    let n_src = r.model.n_sources();
    let costs = r.costs.clone();
    let c_max = costs.iter().cloned().fold(0.0, f64::max);
    let c_min = costs.iter().cloned().fold(f64::INFINITY, f64::min);
    let j_total = rounds_for(s);
    let per_round = budget * s;
    if per_round < c_max || j_total < 2 {
        return Err(OmsError::config(format!(
            "etg_fb:{s} with budget {budget} spends {per_round} per round; needs at least {c_max} and two rounds"
        )));
    }
    let first = spend_toward(&SelectionRatio::center(n_src), &vec![0; n_src], &costs, per_round);
    r.collect(&first)?;
    for j in 1..j_total {
        r.state.phase = Phase::Round(j + 1);
        let spent = r.spent();
        let cap = if j == j_total - 1 {
            budget - spent
        } else {
            (j + 1) as f64 * per_round - spent
        };
        if !within_budget(c_min, cap) {
            continue;
        }
        let region = FeasibleRegion::cost_round(spent / cap, r.kappa(), &costs)?;
        let target = r.retarget(region, true);
        let add = spend_toward(&target, &r.counts(), &costs, cap);
        r.collect(&add)?;
    }
    Ok(())
}
