mod common;

use common::*;
use oms::harness::{
    emit_outputs, mse_curve, read_csv, relative_regret, render_svg, run_episode, ExperimentConfig, Mode, RegretTable,
    CSV_HEADER,
};
use oms::policy::{Horizon, PolicyKind, RunContext};
use oms::OmsError;

fn config(model: &str, policies: &str, horizons: &[u64], runs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(model, PolicyKind::parse_list(policies).unwrap(), horizons.to_vec());
    cfg.runs = runs;
    cfg.seed = 11;
    cfg
}

fn mse_cells(t: &RegretTable) -> Vec<(String, u64, u64)> {
    t.rows.iter().map(|r| (r.policy.clone(), r.horizon, r.mse.to_bits())).collect()
}

#[test]
fn episodes_are_bitwise_deterministic() {
    let scm = model("confounder_mediator");
    let ctx = RunContext::new(0);
    for p in ["etg:0.2", "etc_cs:0.3"] {
        let kind: PolicyKind = p.parse().unwrap();
        let h = if kind.uses_costs() { Horizon::Budget(600.0) } else { Horizon::Samples(400) };
        let a = run_episode(&kind, &scm, h, 42, &ctx).unwrap();
        let b = run_episode(&kind, &scm, h, 42, &ctx).unwrap();
        assert_eq!(a.beta_hat.to_bits(), b.beta_hat.to_bits());
        assert_eq!(a, b);
    }
}

#[test]
fn oracle_episode_sanity() {
    let scm = model("iv");
    let mut ctx = RunContext::new(0);
    ctx.oracle = Some(scm.oracle_kappa(None).unwrap().kappa);
    let r = run_episode(&PolicyKind::Oracle, &scm, Horizon::Samples(2000), 5, &ctx).unwrap();
    assert!((r.beta_hat - 1.0).abs() < 0.5, "{}", r.beta_hat);
    assert_eq!(r.records, 2000);
}

#[test]
fn episode_errors_carry_the_seed() {
    let scm = model("iv");
    let err = run_episode(&"fixed:1,0".parse().unwrap(), &scm, Horizon::Samples(50), 123, &RunContext::new(0))
        .unwrap_err();
    match err {
        OmsError::Episode { seed, cause } => {
            assert_eq!(seed, 123);
            assert_eq!(*cause, OmsError::UnderIdentified { row: 1 });
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn regret_formula() {
    assert!((relative_regret(1.2, 1.0) - 20.0).abs() < 1e-12);
    assert_eq!(relative_regret(1.0, 1.0), 0.0);
}

#[test]
fn identical_policies_have_identical_rows() {
    let t = mse_curve(&config("iv", "fixed:0.5,0.5,fixed_equal", &[100, 200], 30)).unwrap();
    for h in [100, 200] {
        let a = t.cell("fixed:0.5,0.5", h).unwrap();
        let b = t.cell("fixed_equal", h).unwrap();
        assert_eq!(a.mse.to_bits(), b.mse.to_bits());
        assert_eq!(a.rr_pct - b.rr_pct, 0.0);
    }
}

#[test]
fn table_shape_and_oracle_row() {
    let t = mse_curve(&config("iv", "etg:0.2,etc:0.2", &[100, 300], 20)).unwrap();
    let labels: Vec<(&str, u64)> = t.rows.iter().map(|r| (r.policy.as_str(), r.horizon)).collect();
    assert_eq!(
        labels,
        vec![("etc:0.2", 100), ("etc:0.2", 300), ("etg:0.2", 100), ("etg:0.2", 300), ("oracle", 100), ("oracle", 300)]
    );
    for r in &t.rows {
        assert!(r.rr_lo <= r.rr_pct && r.rr_pct <= r.rr_hi, "{r:?}");
        if r.policy == "oracle" {
            assert_eq!((r.rr_pct, r.rr_lo, r.rr_hi), (0.0, 0.0, 0.0));
        }
    }
}

#[test]
fn pairing_is_independent_of_policy_order() {
    let a = mse_curve(&config("two_iv", "etc:0.2,etg:0.2,fixed_equal", &[200], 20)).unwrap();
    let b = mse_curve(&config("two_iv", "fixed_equal,etg:0.2,etc:0.2", &[200], 20)).unwrap();
    assert_eq!(mse_cells(&a), mse_cells(&b));
    let rr = |t: &RegretTable| t.rows.iter().map(|r| (r.rr_lo.to_bits(), r.rr_hi.to_bits())).collect::<Vec<_>>();
    assert_eq!(rr(&a), rr(&b));
}

#[test]
fn failed_cells_become_nan_rows() {
    let t = mse_curve(&config("iv", "etc:0.1,fixed_equal", &[20, 200], 5)).unwrap();
    let bad = t.cell("etc:0.1", 20).unwrap();
    assert!(bad.mse.is_nan() && bad.rr_pct.is_nan());
    assert!(bad.failure.as_deref().unwrap().contains("etc:0.1"));
    assert!(t.cell("etc:0.1", 200).unwrap().failure.is_none());
    assert!(t.cell("fixed_equal", 20).unwrap().mse.is_finite());
    assert_eq!(t.failures().len(), 1);
}

#[test]
fn config_validation() {
    assert!(matches!(config("iv", "oracle", &[10], 5).validate(), Ok(())));
    let mut cfg = config("iv", "oracle", &[10], 5);
    cfg.policies.clear();
    assert!(matches!(mse_curve(&cfg), Err(OmsError::Config(_))));
    assert!(config("iv", "oracle", &[20, 10], 5).validate().is_err());
    assert!(config("iv", "oracle", &[10, 10], 5).validate().is_err());
    assert!(config("iv", "oracle", &[10], 1).validate().is_err());
    assert!(config("iv", "oracle", &[], 5).validate().is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, r#"{"model": "iv", "policies": [], "horizons": [100]}"#).unwrap();
    let cfg = ExperimentConfig::from_json_file(&path).unwrap();
    assert!(cfg.validate().is_err());
    std::fs::write(&path, r#"{"model": "iv", "policies": ["etc:0.2", "fixed:0.3,0.7"], "horizons": [100], "bogus": 1}"#)
        .unwrap();
    assert!(ExperimentConfig::from_json_file(&path).is_err());
    std::fs::write(&path, r#"{"model": "iv", "policies": ["etc:0.2", "fixed:0.3,0.7"], "horizons": [100]}"#).unwrap();
    let cfg = ExperimentConfig::from_json_file(&path).unwrap();
    assert_eq!(cfg.policies.len(), 2);
    assert_eq!(cfg.runs, oms::harness::DEFAULT_RUNS);
}

#[test]
fn outputs_round_trip() {
    let mut cfg = config("confounder_mediator", "etc_cs:0.3,fixed_equal", &[300, 600], 6);
    cfg.mode = Mode::Budget;
    let t = mse_curve(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&t, dir.path()).unwrap();

    let text = std::fs::read_to_string(dir.path().join("regret.csv")).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER.join(","));
    let back = read_csv(&dir.path().join("regret.csv")).unwrap();
    assert_eq!(back.len(), t.rows.len());
    for (a, b) in back.iter().zip(&t.rows) {
        assert_eq!((a.policy.as_str(), a.horizon), (b.policy.as_str(), b.horizon));
        for (x, y) in [(a.mse, b.mse), (a.mse_se, b.mse_se), (a.rr_pct, b.rr_pct), (a.rr_lo, b.rr_lo), (a.rr_hi, b.rr_hi)] {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap()).unwrap();
    assert!(json["git_describe"].is_string());
    assert_eq!(json["config"]["runs"], 6);
    assert_eq!(json["ci"]["resamples"], 2000);
    assert_eq!(json["model"]["name"], "confounder_mediator");

    let svg = std::fs::read_to_string(dir.path().join("regret.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 3);
    assert_eq!(render_svg(&t), svg);
}

#[test]
fn unwritable_output_is_an_io_error() {
    let t = mse_curve(&config("iv", "fixed_equal", &[50], 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    assert!(matches!(emit_outputs(&t, &file.join("sub")), Err(OmsError::Io(_))));
}

/// etg:0.1 sits within sampling noise of zero regret at both horizons, so
/// its ordering is reported rather than asserted; etc:0.1 shows the decay.
#[test]
fn adaptive_regret_falls_with_the_horizon() {
    let t = mse_curve(&config("iv", "etg:0.1,etc:0.1", &[300, 5000], 2000)).unwrap();
    let mid = |p: &str, h: u64| {
        let r = t.cell(p, h).unwrap();
        (r.rr_lo + r.rr_hi) / 2.0
    };
    eprintln!("etg:0.1 CI midpoints: T=300 {:.2}, T=5000 {:.2}", mid("etg:0.1", 300), mid("etg:0.1", 5000));
    assert!(mid("etc:0.1", 5000) < mid("etc:0.1", 300));
    let late = t.cell("etg:0.1", 5000).unwrap();
    assert!(late.rr_lo < 10.0 && late.rr_hi > -10.0, "{late:?}");
}

#[test]
fn cm_fixed_equal_regret_at_b5000() {
    let mut cfg = config("confounder_mediator", "fixed_equal", &[5000], 2000);
    cfg.mode = Mode::Budget;
    let t = mse_curve(&cfg).unwrap();
    let rr = t.cell("fixed_equal", 5000).unwrap().rr_pct;
    assert!((10.0..=30.0).contains(&rr), "{rr}");
}
