//! The interpreter-free half of the bindings.

use xva_core::credit::FirstDefault;
use xva_core::pipeline::Stage;
use xva_py::{load_config, parse_first, parse_stage, run_report_json, Overrides};

const CONFIG: &str = include_str!("../../core/fixtures/complete_market.toml");

#[test]
fn stage_and_party_names() {
    assert_eq!(parse_stage("clean-value").unwrap(), Stage::CleanValue);
    assert_eq!(parse_stage("all").unwrap(), Stage::Xva);
    assert_eq!(parse_first("counterparty").unwrap(), FirstDefault::Counterparty);
    assert_eq!(parse_stage("price").unwrap_err().exit_code(), 2);
    assert!(parse_first("both").is_err());
}

#[test]
fn overrides_are_applied_before_validation() {
    let cfg = load_config(CONFIG, Overrides { seed: Some(3), paths: Some(123), steps: Some(7) }).unwrap();
    assert_eq!((cfg.mc.seed, cfg.mc.n_paths, cfg.grid.n_steps), (3, 123, 7));
    assert!(load_config(CONFIG, Overrides { steps: Some(0), ..Overrides::default() }).is_err());
}

#[test]
fn report_json_is_deterministic() {
    let ov = Overrides { paths: Some(500), steps: Some(5), ..Overrides::default() };
    let a = run_report_json(CONFIG, "xva", ov).unwrap();
    let b = run_report_json(CONFIG, "xva", ov).unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert!(v["metrics"].as_array().is_some_and(|m| !m.is_empty()));
}
