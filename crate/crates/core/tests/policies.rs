mod common;

use common::*;
use oms::harness::run_episode;
use oms::policy::{run_policy, EpisodeOutcome, Horizon, PolicyKind, RunContext, ScmEnvironment};
use oms::variance::target_variance;
use oms::{OmsError, Scm, SelectionRatio};

fn run(scm: &Scm, policy: &str, horizon: Horizon, seed: u64) -> oms::Result<EpisodeOutcome> {
    let kind: PolicyKind = policy.parse().unwrap();
    let mut ctx = RunContext::new(seed);
    ctx.oracle = Some(SelectionRatio::center(scm.model().n_sources()));
    let mut env = ScmEnvironment::new(scm, seed);
    run_policy(&kind, scm.model(), horizon, &mut env, &ctx)
}

/// Counts at the first interim estimate, i.e. after exploration.
fn explore_counts(out: &EpisodeOutcome) -> Vec<usize> {
    let t = out.state.interim_estimates[0].t;
    let mut c = vec![0; out.history.n_sources()];
    for obs in &out.history.records()[..t] {
        c[obs.source().0] += 1;
    }
    c
}

#[test]
fn etc_explores_round_robin() {
    let scm = model("iv");
    let out = run(&scm, "etc:0.5", Horizon::Samples(10), 1).unwrap();
    assert_eq!(explore_counts(&out), vec![3, 2]);
    let first: Vec<usize> = out.history.records()[..5].iter().map(|o| o.source().0).collect();
    assert_eq!(first, vec![0, 1, 0, 1, 0]);
    assert_eq!(out.state.interim_estimates.len(), 1);
    assert!(matches!(run(&scm, "etc:0.2", Horizon::Samples(10), 1), Err(OmsError::Config(_))));
}

#[test]
fn etc_lands_near_an_interior_target() {
    let scm = model("iv");
    for seed in 0..20 {
        let out = run(&scm, "etc:0.2", Horizon::Samples(1000), seed).unwrap();
        let rec = &out.state.interim_estimates[0];
        if rec.k_hat.linf_distance(&rec.target) < 1e-12 {
            let k = out.history.selection_ratio();
            assert!(k.linf_distance(&rec.k_hat) <= 1.0 / 1000.0 + 1e-12, "{:?} vs {:?}", k, rec.k_hat);
        }
    }
}

#[test]
fn etg_with_two_rounds_is_etc() {
    for name in ["iv", "confounder_mediator"] {
        let scm = model(name);
        for seed in 0..10 {
            let a = run(&scm, "etc:0.5", Horizon::Samples(200), seed).unwrap();
            let b = run(&scm, "etg:0.5", Horizon::Samples(200), seed).unwrap();
            assert_eq!(a.history, b.history, "{name} seed {seed}");
            assert_eq!(a.estimate, b.estimate);
        }
    }
}

#[test]
fn etg_round_arithmetic() {
    let scm = model("iv");
    let out = run(&scm, "etg:0.25", Horizon::Samples(100), 3).unwrap();
    let ts: Vec<usize> = out.state.interim_estimates.iter().map(|r| r.t).collect();
    assert_eq!(ts, vec![25, 50, 75]);
    assert_eq!(out.state.rounds, 4);
    assert_eq!(out.history.len(), 100);
}

#[test]
fn horizon_is_exact_and_final_kappa_is_feasible() {
    for name in ["iv", "two_iv", "confounder_mediator", "vietnam"] {
        let scm = model(name);
        for p in ["etc:0.2", "etg:0.1", "etg:0.3", "fixed_equal", "oracle"] {
            for (seed, t) in [(1, 300), (2, 517), (3, 1000)] {
                let out = run(&scm, p, Horizon::Samples(t), seed).unwrap();
                assert_eq!(out.history.len(), t, "{name} {p}");
                if let Some(region) = &out.state.final_region {
                    let k = out.history.selection_ratio();
                    assert!(region.contains(k.weights(), 1e-9), "{name} {p}: {k:?}");
                }
            }
        }
    }
}

#[test]
fn cost_variants_end_in_their_final_region() {
    let scm = model("confounder_mediator");
    for p in ["etc_cs:0.2", "etg_fs:0.1", "etg_fb:0.2"] {
        for seed in 0..10 {
            let out = run(&scm, p, Horizon::Budget(2000.0), seed).unwrap();
            let region = out.state.final_region.as_ref().unwrap();
            let k = out.history.selection_ratio();
            // Integer purchases leave less than one record of slack.
            assert!(region.contains(k.weights(), 2.0 / out.history.len() as f64), "{p}: {k:?}");
        }
    }
}

#[test]
fn phases_only_move_forward() {
    let scm = model("iv");
    let out = run(&scm, "etg:0.1", Horizon::Samples(500), 4).unwrap();
    let ts: Vec<usize> = out.state.interim_estimates.iter().map(|r| r.t).collect();
    assert!(ts.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(out.state.phase, oms::policy::Phase::Done);
}

#[test]
fn two_iv_etg_heads_for_the_corner() {
    let scm = model("two_iv");
    let (k, _) = mean_kappa(&scm, &"etg:0.1".parse().unwrap(), Horizon::Samples(2000), 2000, 1);
    // The first round pins κ1 ≥ 0.05, and the linear variance makes each
    // interim target a vertex, so an early wrong corner costs a whole round.
    // Observed mean κ2 is 0.895.
    assert!(k[1] >= 0.85, "{k:?}");
}

#[test]
fn iv_etc_tracks_the_oracle_ratio() {
    let scm = model("iv");
    let (k, _) = mean_kappa(&scm, &"etc:0.2".parse().unwrap(), Horizon::Samples(5000), 2000, 1);
    assert!(linf(&k, &[0.36, 0.64]) <= 0.03, "{k:?}");
}

#[test]
fn unit_cost_etc_cs_is_etc() {
    let scm = model("iv");
    for seed in 0..10 {
        let a = run(&scm, "etc:0.2", Horizon::Samples(400), seed).unwrap();
        let b = run(&scm, "etc_cs:0.2", Horizon::Budget(400.0), seed).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.estimate, b.estimate);
    }
}

#[test]
fn etc_cs_exploration_spends_be() {
    let scm = model("iv").with_costs(&[2.0, 1.0]).unwrap();
    let out = run(&scm, "etc_cs:0.5", Horizon::Budget(30.0), 2).unwrap();
    assert_eq!(explore_counts(&out), vec![5, 5]);
    assert!(out.spent <= 30.0);
}

#[test]
fn cm_etc_cs_tracks_the_budgeted_oracle() {
    let scm = model("confounder_mediator");
    let (k, _) = mean_kappa(&scm, &"etc_cs:0.2".parse().unwrap(), Horizon::Budget(5000.0), 2000, 1);
    assert!(linf(&k, &[0.15, 0.85]) <= 0.05, "{k:?}");
}

#[test]
fn etg_fs_batch_size() {
    let scm = model("iv").with_costs(&[1.0, 2.0]).unwrap();
    let out = run(&scm, "etg_fs:0.1", Horizon::Budget(100.0), 5).unwrap();
    assert_eq!(out.state.interim_estimates[0].t, 5);
    assert_eq!(explore_counts(&out), vec![3, 2]);
}

#[test]
fn unit_cost_etg_fs_is_etg() {
    let scm = model("iv");
    for seed in 0..10 {
        let a = run(&scm, "etg:0.25", Horizon::Samples(400), seed).unwrap();
        let b = run(&scm, "etg_fs:0.25", Horizon::Budget(400.0), seed).unwrap();
        assert_eq!(a.history, b.history, "seed {seed}");
        assert_eq!(a.estimate, b.estimate);
    }
}

#[test]
fn etg_fs_round_count_is_bounded() {
    use rand::{Rng, SeedableRng};
    use rayon::prelude::*;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0xF5);
    let cases: Vec<(f64, f64, f64, u64)> = (0..1000)
        .map(|_| (rng.random_range(0.5..3.0), rng.random_range(0.1..0.34), rng.random_range(200.0..800.0), rng.random()))
        .collect();
    let base = model("iv");
    let bad: Vec<String> = cases
        .par_iter()
        .filter_map(|&(c0, s, budget, seed)| {
            let scm = base.with_costs(&[c0, 1.0]).unwrap();
            let out = run(&scm, &format!("etg_fs:{s}"), Horizon::Budget(budget), seed).ok()?;
            let (c_min, c_max) = (c0.min(1.0), c0.max(1.0));
            let j = out.state.rounds as f64;
            let ok = j >= (1.0 / s).floor() && j <= (c_max / (s * c_min)).ceil();
            (!ok).then(|| format!("c0 {c0} s {s} B {budget}: J = {j}"))
        })
        .collect();
    assert!(bad.is_empty(), "{} violations, first {:?}", bad.len(), bad.first());
}

#[test]
fn etg_fb_round_structure() {
    let scm = model("iv");
    let out = run(&scm, "etg_fb:0.2", Horizon::Budget(500.0), 6).unwrap();
    assert_eq!(out.state.rounds, 5);
    let ts: Vec<usize> = out.state.interim_estimates.iter().map(|r| r.t).collect();
    assert_eq!(ts, vec![100, 200, 300, 400]);
    assert_eq!(out.history.len(), 500);
    let scm = model("confounder_mediator");
    for seed in 0..10 {
        let out = run(&scm, "etg_fb:0.2", Horizon::Budget(1000.0), seed).unwrap();
        assert_eq!(out.state.rounds, 5);
    }
}

/// 100 seeds rather than 2,000 to keep the suite fast; the tolerance is
/// unchanged.
#[test]
fn ihdp_etg_fb_tracks_the_budgeted_oracle() {
    let scm = ihdp_real();
    let oracle = scm.oracle_kappa(Some(&scm.model().costs())).unwrap().kappa;
    let (k, _) = mean_kappa(&scm, &"etg_fb:0.1".parse().unwrap(), Horizon::Budget(8000.0), 100, 1);
    assert!(linf(&k, oracle.weights()) <= 0.05, "{k:?} vs oracle {oracle:?}");
}

#[test]
fn fixed_ratio_without_a_moment_fails_at_the_end() {
    let scm = model("iv");
    let err = run(&scm, "fixed:1,0", Horizon::Samples(100), 1).unwrap_err();
    assert_eq!(err, OmsError::UnderIdentified { row: 1 });
    let ctx = RunContext::new(1);
    let err = run_episode(&"fixed:1,0".parse().unwrap(), &scm, Horizon::Samples(100), 7, &ctx).unwrap_err();
    assert!(matches!(err, OmsError::Episode { seed: 7, .. }));
}

#[test]
fn fixed_equal_tie_break() {
    let scm = model("iv");
    let out = run(&scm, "fixed_equal", Horizon::Samples(7), 1).unwrap();
    assert_eq!(out.history.counts(), &[4, 3]);
}

#[test]
fn budget_mode_rejects_sample_policies() {
    let scm = model("iv");
    assert!(matches!(run(&scm, "etc:0.2", Horizon::Budget(100.0), 1), Err(OmsError::Config(_))));
    assert!(matches!(run(&scm, "etg:0.2", Horizon::Budget(100.0), 1), Err(OmsError::Config(_))));
}

#[test]
fn oracle_mse_matches_asymptotic_variance() {
    let scm = model("iv");
    let t = 5000;
    let (_, mse) = mean_kappa(&scm, &PolicyKind::Oracle, Horizon::Samples(t), 12_000, 1);
    let kstar = scm.oracle_kappa(None).unwrap().kappa;
    let v = target_variance(scm.population_plugins(), scm.model(), scm.true_theta(), &kstar).unwrap();
    let ratio = mse * t as f64 / v;
    assert!((ratio - 1.0).abs() <= 0.10, "MSE·T = {} vs V = {v}", mse * t as f64);
}

#[test]
fn interim_weight_follows_lambda() {
    let scm = model("confounder_mediator");
    let interim = |lambda: f64| {
        let mut env = ScmEnvironment::new(&scm, 1);
        let mut ctx = RunContext::new(1);
        ctx.lambda_w = lambda;
        let out = run_policy(&"etc:0.2".parse().unwrap(), scm.model(), Horizon::Samples(400), &mut env, &ctx).unwrap();
        out.state.interim_estimates[0].theta_hat.clone().unwrap()
    };
    assert_ne!(interim(0.0), interim(0.01));
    assert_ne!(interim(0.01), interim(1.0));
}
