//! Monte Carlo regret experiments: paired episodes across policies, MSE and
//! relative-regret curves, and file outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{OmsError, Result};
use crate::gmm::DEFAULT_LAMBDA_W;
use crate::models::{by_name, ModelOptions, Scm};
use crate::policy::{run_policy, Horizon, PolicyKind, RunContext, ScmEnvironment};
use crate::rng::derive_seed;
use crate::variance::SelectionRatio;

pub const BOOTSTRAP_RESAMPLES: usize = 2000;
pub const CI_LEVEL: f64 = 0.95;
pub const DEFAULT_RUNS: usize = 2000;
pub const DEFAULT_SEED: u64 = 20_230_401;
pub const THREADS_ENV: &str = "OMS_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Horizon,
    Budget,
}

/// Everything needed to reproduce a regret table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: String,
    #[serde(with = "policy_list")]
    pub policies: Vec<PolicyKind>,
    /// Sample horizons `T`, or budgets `B` in budget mode.
    pub horizons: Vec<u64>,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub costs: Option<Vec<f64>>,
    #[serde(default = "default_lambda_w")]
    pub lambda_w: f64,
    #[serde(default)]
    pub ihdp_covariates: Option<PathBuf>,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_mode() -> Mode {
    Mode::Horizon
}
fn default_runs() -> usize {
    DEFAULT_RUNS
}
fn default_seed() -> u64 {
    DEFAULT_SEED
}
fn default_lambda_w() -> f64 {
    DEFAULT_LAMBDA_W
}

mod policy_list {
    use super::PolicyKind;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[PolicyKind], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|p| p.label()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<PolicyKind>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter().map(|s| s.parse().map_err(D::Error::custom)).collect()
    }
}

impl ExperimentConfig {
    pub fn new(model: &str, policies: Vec<PolicyKind>, horizons: Vec<u64>) -> Self {
        ExperimentConfig {
            model: model.to_string(),
            policies,
            horizons,
            mode: Mode::Horizon,
            runs: DEFAULT_RUNS,
            seed: DEFAULT_SEED,
            costs: None,
            lambda_w: DEFAULT_LAMBDA_W,
            ihdp_covariates: None,
            out: None,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty() {
            return Err(OmsError::config("no policies given"));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(OmsError::config("horizons must be a nonempty list of positive integers"));
        }
        if self.horizons.windows(2).any(|w| w[0] >= w[1]) {
            return Err(OmsError::config("horizons must be strictly increasing"));
        }
        if self.runs < 2 {
            return Err(OmsError::config("runs must be at least 2"));
        }
        if !(self.lambda_w >= 0.0 && self.lambda_w.is_finite()) {
            return Err(OmsError::config(format!("lambda_w {} must be finite and >= 0", self.lambda_w)));
        }
        Ok(())
    }

    /// Builds the model with any cost override applied.
    pub fn build_scm(&self) -> Result<Scm> {
        let opts = ModelOptions {
            ihdp_covariates: self.ihdp_covariates.clone(),
        };
        let scm = by_name(&self.model, &opts)?;
        match &self.costs {
            Some(c) => scm.with_costs(c),
            None => Ok(scm),
        }
    }

    fn horizon(&self, h: u64) -> Horizon {
        match self.mode {
            Mode::Horizon => Horizon::Samples(h as usize),
            Mode::Budget => Horizon::Budget(h as f64),
        }
    }
}

/// Result of one episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub beta_hat: f64,
    pub sq_error: f64,
    pub final_kappa: SelectionRatio,
    pub records: usize,
    pub spent: f64,
    pub optimizer_converged: bool,
}

/// Runs one seeded episode; errors carry the seed.
pub fn run_episode(
    policy: &PolicyKind,
    scm: &Scm,
    horizon: Horizon,
    seed: u64,
    ctx: &RunContext,
) -> Result<EpisodeResult> {
    let ctx = RunContext { seed, ..ctx.clone() };
    let run = || -> Result<EpisodeResult> {
        let mut env = ScmEnvironment::new(scm, seed);
        let out = run_policy(policy, scm.model(), horizon, &mut env, &ctx)?;
        let (beta_hat, _) = scm.model().target_unchecked(&out.estimate.theta_hat)?;
        Ok(EpisodeResult {
            seed,
            beta_hat,
            sq_error: (beta_hat - scm.true_beta()).powi(2),
            final_kappa: out.history.selection_ratio(),
            records: out.history.len(),
            spent: out.spent,
            optimizer_converged: out.estimate.optimizer_report.converged,
        })
    };
    run().map_err(|e| e.with_seed(seed))
}

/// One `(policy, horizon)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretRow {
    pub policy: String,
    pub horizon: u64,
    pub mse: f64,
    pub mse_se: f64,
    pub rr_pct: f64,
    pub rr_lo: f64,
    pub rr_hi: f64,
    pub mean_kappa: Option<Vec<f64>>,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretTable {
    pub config: ExperimentConfig,
    pub rows: Vec<RegretRow>,
    pub oracle_kappa: SelectionRatio,
    pub oracle_value: f64,
    pub true_beta: f64,
    pub model_metadata: serde_json::Value,
}

impl RegretTable {
    pub fn cell(&self, policy: &str, horizon: u64) -> Option<&RegretRow> {
        self.rows.iter().find(|r| r.policy == policy && r.horizon == horizon)
    }

    pub fn failures(&self) -> Vec<(String, u64, String)> {
        self.rows
            .iter()
            .filter_map(|r| r.failure.as_ref().map(|f| (r.policy.clone(), r.horizon, f.clone())))
            .collect()
    }
}

fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean, `sd/√n` with the `n − 1` denominator.
fn standard_error(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `RR = (MSE_π − MSE_oracle)/MSE_oracle × 100`.
pub fn relative_regret(mse: f64, oracle: f64) -> f64 {
    (mse - oracle) / oracle * 100.0
}

/// Linear-interpolation percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Paired percentile bootstrap CI for the relative regret; the same run
/// indices are resampled for policy and oracle. Clamped to contain `point`.
pub fn bootstrap_rr_ci(policy: &[f64], oracle: &[f64], point: f64, seed: u64) -> (f64, f64) {
    let n = policy.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(BOOTSTRAP_RESAMPLES);
    for _ in 0..BOOTSTRAP_RESAMPLES {
        let (mut sp, mut so) = (0.0, 0.0);
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sp += policy[i];
            so += oracle[i];
        }
        let v = relative_regret(sp, so);
        if v.is_finite() {
            stats.push(v);
        }
    }
    if stats.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - CI_LEVEL) / 2.0;
    let lo = percentile(&stats, alpha);
    let hi = percentile(&stats, 1.0 - alpha);
    (lo.min(point), hi.max(point))
}

fn label_hash(label: &str) -> u64 {
    // FNV-1a keeps bootstrap streams independent of the policy list order.
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

struct Cell {
    sq: std::result::Result<Vec<f64>, String>,
    mean_kappa: Option<Vec<f64>>,
}

fn run_cell(
    policy: &PolicyKind,
    scm: &Scm,
    cfg: &ExperimentConfig,
    h: u64,
    ctx: &RunContext,
    pool: &rayon::ThreadPool,
) -> Cell {
    let horizon = cfg.horizon(h);
    let results: Vec<Result<EpisodeResult>> = pool.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|i| run_episode(policy, scm, horizon, cfg.seed.wrapping_add(i as u64), ctx))
            .collect()
    });
    let mut sq = Vec::with_capacity(cfg.runs);
    let mut kappa_sum = vec![0.0; scm.model().n_sources()];
    for r in results {
        match r {
            Ok(ep) => {
                sq.push(ep.sq_error);
                for (s, k) in kappa_sum.iter_mut().zip(ep.final_kappa.weights()) {
                    *s += k;
                }
            }
            Err(e) => {
                return Cell {
                    sq: Err(e.to_string()),
                    mean_kappa: None,
                }
            }
        }
    }
    let n = sq.len() as f64;
    Cell {
        sq: Ok(sq),
        mean_kappa: Some(kappa_sum.iter().map(|s| s / n).collect()),
    }
}

/// Runs every `(policy, horizon)` cell with paired seeds and tabulates MSE
/// and relative regret against the oracle, which is always included.
pub fn mse_curve(cfg: &ExperimentConfig) -> Result<RegretTable> {
    cfg.validate()?;
    let scm = cfg.build_scm()?;
    let costs = scm.model().costs();
    let oracle = match cfg.mode {
        Mode::Horizon => scm.oracle_kappa(None)?,
        Mode::Budget => scm.oracle_kappa(Some(&costs))?,
    };
    let mut ctx = RunContext::new(cfg.seed);
    ctx.lambda_w = cfg.lambda_w;
    ctx.oracle = Some(oracle.kappa.clone());

    let mut policies = cfg.policies.clone();
    if !policies.contains(&PolicyKind::Oracle) {
        policies.push(PolicyKind::Oracle);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| OmsError::config(format!("thread pool: {e}")))?;

    let mut rows = Vec::new();
    for &h in &cfg.horizons {
        let oracle_cell = run_cell(&PolicyKind::Oracle, &scm, cfg, h, &ctx, &pool);
        for p in &policies {
            let label = p.label();
            let cell = if *p == PolicyKind::Oracle {
                None
            } else {
                Some(run_cell(p, &scm, cfg, h, &ctx, &pool))
            };
            let cell = cell.as_ref().unwrap_or(&oracle_cell);
            let mut row = RegretRow {
                policy: label.clone(),
                horizon: h,
                mse: f64::NAN,
                mse_se: f64::NAN,
                rr_pct: f64::NAN,
                rr_lo: f64::NAN,
                rr_hi: f64::NAN,
                mean_kappa: cell.mean_kappa.clone(),
                failure: None,
            };
            match (&cell.sq, &oracle_cell.sq) {
                (Err(e), _) => row.failure = Some(e.clone()),
                (Ok(sq), or) => {
                    row.mse = mean(sq);
                    row.mse_se = standard_error(sq);
                    match or {
                        Ok(_) if *p == PolicyKind::Oracle => {
                            row.rr_pct = 0.0;
                            row.rr_lo = 0.0;
                            row.rr_hi = 0.0;
                        }
                        Ok(osq) => {
                            row.rr_pct = relative_regret(row.mse, mean(osq));
                            let seed = derive_seed(derive_seed(cfg.seed, h), label_hash(&label));
                            let (lo, hi) = bootstrap_rr_ci(sq, osq, row.rr_pct, seed);
                            row.rr_lo = lo;
                            row.rr_hi = hi;
                        }
                        Err(e) => row.failure = Some(format!("oracle cell failed: {e}")),
                    }
                }
            }
            rows.push(row);
        }
    }
    rows.sort_by(|a, b| a.policy.cmp(&b.policy).then(a.horizon.cmp(&b.horizon)));

    Ok(RegretTable {
        config: cfg.clone(),
        rows,
        oracle_kappa: oracle.kappa,
        oracle_value: oracle.value,
        true_beta: scm.true_beta(),
        model_metadata: scm.metadata(),
    })
}

pub const CSV_HEADER: [&str; 7] = ["policy", "horizon", "mse", "mse_se", "rr_pct", "rr_lo", "rr_hi"];

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(table: &RegretTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for r in &table.rows {
        w.write_record([
            r.policy.clone(),
            r.horizon.to_string(),
            fmt_f(r.mse),
            fmt_f(r.mse_se),
            fmt_f(r.rr_pct),
            fmt_f(r.rr_lo),
            fmt_f(r.rr_hi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Row read back from `regret.csv`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CsvRow {
    pub policy: String,
    pub horizon: u64,
    pub mse: f64,
    pub mse_se: f64,
    pub rr_pct: f64,
    pub rr_lo: f64,
    pub rr_hi: f64,
}

pub fn read_csv(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<CsvRow>, _> = r.deserialize().collect();
    Ok(rows?)
}

pub fn config_json(table: &RegretTable) -> serde_json::Value {
    let failures: Vec<serde_json::Value> = table
        .failures()
        .into_iter()
        .map(|(p, h, f)| serde_json::json!({ "policy": p, "horizon": h, "error": f }))
        .collect();
    serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "git_describe": env!("OMS_GIT_DESCRIBE"),
        "config": table.config,
        "threads": thread_count(),
        "episode_seeds": "seed + run index, shared across policies",
        "ci": {
            "method": "paired percentile bootstrap, clamped to contain the point estimate",
            "level": CI_LEVEL,
            "resamples": BOOTSTRAP_RESAMPLES,
        },
        "oracle_kappa": table.oracle_kappa,
        "oracle_value": table.oracle_value,
        "true_beta": table.true_beta,
        "model": table.model_metadata,
        "mean_final_kappa": table.rows.iter().map(|r| {
            serde_json::json!({ "policy": r.policy, "horizon": r.horizon, "kappa": r.mean_kappa })
        }).collect::<Vec<_>>(),
        "failures": failures,
    })
}

const SVG_W: f64 = 720.0;
const SVG_H: f64 = 440.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Relative-regret curves, one polyline per policy with CI bars.
pub fn render_svg(table: &RegretTable) -> String {
    let finite: Vec<&RegretRow> = table.rows.iter().filter(|r| r.rr_pct.is_finite()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y0, mut y1) = (0.0f64, 0.0f64);
    for r in &finite {
        let x = r.horizon as f64;
        x0 = x0.min(x);
        x1 = x1.max(x);
        for v in [r.rr_pct, r.rr_lo, r.rr_hi] {
            if v.is_finite() {
                y0 = y0.min(v);
                y1 = y1.max(v);
            }
        }
    }
    if !x0.is_finite() {
        x0 = 0.0;
        x1 = 1.0;
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-size="14" text-anchor="middle">Relative regret (%), model {}</text>"#,
        SVG_W / 2.0,
        table.config.model
    );
    let (ax, ay) = (sx(x0), sy(y0));
    let _ = writeln!(
        s,
        r#"<line x1="{ax:.1}" y1="{ay:.1}" x2="{:.1}" y2="{ay:.1}" stroke="black"/>"#,
        sx(x1)
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ax:.1}" y1="{ay:.1}" x2="{ax:.1}" y2="{:.1}" stroke="black"/>"#,
        sy(y1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{ax:.1}" y="{:.1}" font-size="11">{x0}</text><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{x1}</text>"#,
        ay + 16.0,
        sx(x1),
        ay + 16.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{y0:.1}</text><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{y1:.1}</text>"#,
        ax - 4.0,
        ay,
        ax - 4.0,
        sy(y1) + 4.0
    );

    let mut by_policy: BTreeMap<&str, Vec<&RegretRow>> = BTreeMap::new();
    for r in &finite {
        by_policy.entry(r.policy.as_str()).or_default().push(r);
    }
    for (i, (policy, rows)) in by_policy.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = rows
            .iter()
            .map(|r| format!("{:.1},{:.1}", sx(r.horizon as f64), sy(r.rr_pct)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"><title>{policy}</title></polyline>"#,
            pts.join(" ")
        );
        for r in rows {
            if r.rr_lo.is_finite() && r.rr_hi.is_finite() {
                let x = sx(r.horizon as f64);
                let _ = writeln!(
                    s,
                    r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{color}"/>"#,
                    sy(r.rr_lo),
                    sy(r.rr_hi)
                );
            }
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{color}" text-anchor="end">{policy}</text>"#,
            SVG_W - 8.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `regret.csv`, `config.json` and `regret.svg` into `dir`.
pub fn emit_outputs(table: &RegretTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(table, &dir.join("regret.csv"))?;
    let json = serde_json::to_string_pretty(&config_json(table))?;
    fs::write(dir.join("config.json"), json + "\n")?;
    fs::write(dir.join("regret.svg"), render_svg(table))?;
    Ok(())
}
