use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use oms::gmm::{estimate, WeightSpec, DEFAULT_LAMBDA_W};
use oms::harness::{emit_outputs, mse_curve, ExperimentConfig, Mode};
use oms::history_io::{read_history, write_history};
use oms::models::{by_name, ModelOptions, Scm};
use oms::policy::{run_policy, Horizon, PolicyKind, RunContext, ScmEnvironment};
use oms::{OmsError, Result};

#[derive(Parser)]
#[command(name = "oms", version, about = "Online moment selection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo regret curves; writes regret.csv, config.json and regret.svg.
    Regret(RegretArgs),
    /// Oracle selection ratio for a model.
    KappaStar {
        #[arg(long)]
        model: String,
        /// Comma-separated per-source costs; defaults to the model's own.
        #[arg(long, value_delimiter = ',')]
        costs: Option<Vec<f64>>,
        /// Ignore costs and minimize the plain variance.
        #[arg(long)]
        no_costs: bool,
        #[arg(long)]
        ihdp_covariates: Option<PathBuf>,
    },
    /// GMM estimate from a logged history.
    Estimate {
        #[arg(long)]
        model: String,
        /// Lines of `source_index,Var=value,...`.
        #[arg(long)]
        history: PathBuf,
        #[arg(long, value_enum, default_value_t = WeightArg::Efficient)]
        weight: WeightArg,
        #[arg(long, default_value_t = DEFAULT_LAMBDA_W)]
        lambda_w: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ihdp_covariates: Option<PathBuf>,
    },
    /// Runs one episode and prints its history log.
    Simulate {
        #[arg(long)]
        model: String,
        #[arg(long)]
        policy: String,
        /// Sample horizon; use --budget instead for cost-aware runs.
        #[arg(long, conflicts_with = "budget")]
        horizon: Option<usize>,
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        ihdp_covariates: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightArg {
    Identity,
    Efficient,
    Regularized,
}

#[derive(Parser)]
struct RegretArgs {
    /// JSON experiment config; flags given alongside override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<String>,
    /// e.g. `etc:0.1,etg:0.1,fixed:0.3,0.7,oracle`.
    #[arg(long)]
    policies: Option<String>,
    #[arg(long, value_delimiter = ',')]
    horizons: Option<Vec<u64>>,
    #[arg(long)]
    budget_mode: bool,
    /// Budgets; implies --budget-mode.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    costs: Option<Vec<f64>>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda_w: Option<f64>,
    #[arg(long)]
    ihdp_covariates: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(a: RegretArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => {
            let model = a.model.clone().ok_or_else(|| OmsError::config("--model is required"))?;
            ExperimentConfig::new(&model, Vec::new(), Vec::new())
        }
    };
    if let Some(m) = a.model {
        cfg.model = m;
    }
    if let Some(p) = a.policies {
        cfg.policies = PolicyKind::parse_list(&p)?;
    }
    if let Some(h) = a.horizons {
        cfg.horizons = h;
    }
    if a.budget_mode {
        cfg.mode = Mode::Budget;
    }
    if let Some(b) = a.budgets {
        cfg.mode = Mode::Budget;
        cfg.horizons = b;
    }
    if a.costs.is_some() {
        cfg.costs = a.costs;
    }
    if let Some(r) = a.runs {
        cfg.runs = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(l) = a.lambda_w {
        cfg.lambda_w = l;
    }
    if a.ihdp_covariates.is_some() {
        cfg.ihdp_covariates = a.ihdp_covariates;
    }
    if a.out.is_some() {
        cfg.out = a.out;
    }
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("oms-out"));
    Ok((cfg, out))
}

fn load_model(name: &str, covariates: Option<PathBuf>) -> Result<Scm> {
    by_name(
        name,
        &ModelOptions {
            ihdp_covariates: covariates,
        },
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Regret(args) => {
            let (cfg, out) = resolve_config(args)?;
            let table = mse_curve(&cfg)?;
            emit_outputs(&table, &out)?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{:<16} {:>8} {:>12} {:>10} {:>22}", "policy", "horizon", "mse", "rr_pct", "95% ci")?;
            for r in &table.rows {
                writeln!(
                    stdout,
                    "{:<16} {:>8} {:>12.4e} {:>10.2} {:>10.2} .. {:<9.2}",
                    r.policy, r.horizon, r.mse, r.rr_pct, r.rr_lo, r.rr_hi
                )?;
            }
            for (p, h, e) in table.failures() {
                eprintln!("failed cell {p} @ {h}: {e}");
            }
            writeln!(stdout, "outputs written to {}", out.display())?;
        }
        Command::KappaStar {
            model,
            costs,
            no_costs,
            ihdp_covariates,
        } => {
            let scm = load_model(&model, ihdp_covariates)?;
            let scm = match &costs {
                Some(c) => scm.with_costs(c)?,
                None => scm,
            };
            let used = (!no_costs).then(|| scm.model().costs());
            let k = scm.oracle_kappa(used.as_deref())?;
            let json = serde_json::json!({
                "model": model,
                "costs": used,
                "sources": scm.model().sources().iter().map(|s| s.name.clone()).collect::<Vec<_>>(),
                "kappa_star": k.kappa,
                "objective": k.value,
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::Estimate {
            model,
            history,
            weight,
            lambda_w,
            seed,
            ihdp_covariates,
        } => {
            let scm = load_model(&model, ihdp_covariates)?;
            let h = read_history(BufReader::new(File::open(&history)?), scm.model().sources())?;
            let spec = match weight {
                WeightArg::Identity => WeightSpec::Identity,
                WeightArg::Efficient => WeightSpec::Efficient,
                WeightArg::Regularized => WeightSpec::Regularized(lambda_w),
            };
            let est = estimate(&h, scm.model(), spec, seed)?;
            let target = scm.model().target_unchecked(&est.theta_hat).ok().map(|t| t.0);
            let json = serde_json::json!({
                "model": model,
                "records": h.len(),
                "counts": h.counts(),
                "param_names": scm.model().param_names(),
                "theta_hat": est.theta_hat,
                "target": target,
                "objective": est.objective,
                "converged": est.optimizer_report.converged,
                "iterations": est.optimizer_report.iterations,
            });
            println!("{}", serde_json::to_string_pretty(&json)?);
        }
        Command::Simulate {
            model,
            policy,
            horizon,
            budget,
            seed,
            ihdp_covariates,
        } => {
            let scm = load_model(&model, ihdp_covariates)?;
            let kind: PolicyKind = policy.parse()?;
            let h = match (horizon, budget) {
                (Some(t), _) => Horizon::Samples(t),
                (None, Some(b)) => Horizon::Budget(b),
                (None, None) => return Err(OmsError::config("give --horizon or --budget")),
            };
            let mut ctx = RunContext::new(seed);
            if kind == PolicyKind::Oracle {
                let costs = scm.model().costs();
                let c = matches!(h, Horizon::Budget(_)).then_some(costs.as_slice());
                ctx.oracle = Some(scm.oracle_kappa(c)?.kappa);
            }
            let mut env = ScmEnvironment::new(&scm, seed);
            let out = run_policy(&kind, scm.model(), h, &mut env, &ctx)?;
            write_history(io::stdout().lock(), &out.history, scm.model().sources())?;
            let target = scm.model().target_unchecked(&out.estimate.theta_hat).ok().map(|t| t.0);
            eprintln!(
                "records {} spent {} counts {:?} target {:?} (true {})",
                out.history.len(),
                out.spent,
                out.history.counts(),
                target,
                scm.true_beta()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
