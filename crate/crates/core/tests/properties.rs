//! Invariants checked on random inputs.

mod common;

use std::sync::OnceLock;

use common::{flat_market, Setup};
use ndarray::Array2;
use proptest::prelude::*;
use xva_core::bsde::DriverSpec;
use xva_core::config::RunConfig;
use xva_core::contract::{recovery, CollateralMap, ContractSpec};
use xva_core::credit::FirstDefault;
use xva_core::grid::TimeGrid;
use xva_core::market::{density_process, simulate_assets, AffineLog, CoeffSpec, GainIncrements, Measure, SimSettings};
use xva_core::pipeline::{clean_stage, simulate_scenarios, CleanStage, Scenarios};
use xva_core::stats::expected_shortfall;
use xva_core::xva::{cva_dva, XvaConfig};

fn fixture() -> &'static (RunConfig, Scenarios, CleanStage) {
    static CELL: OnceLock<(RunConfig, Scenarios, CleanStage)> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = Setup { paths: 3_000, steps: 10, ..Setup::full_xva() }.config();
        let sc = simulate_scenarios(&cfg).unwrap();
        let cs = clean_stage(&cfg, &sc).unwrap();
        (cfg, sc, cs)
    })
}

fn adjustments(rb: f64, rc: f64) -> (f64, f64) {
    let (cfg, sc, cs) = fixture();
    let spec = ContractSpec { recovery_bank: rb, recovery_counterparty: rc, ..cfg.contract_spec() };
    let x = cva_dva(&sc.bundle, &sc.density, &sc.credit, &cs.state, &spec, &XvaConfig::default()).unwrap();
    (x.cva.value, x.dva.value)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn collateral_is_lipschitz_and_sign_preserving(
        alpha in 0.0..=1.0f64,
        thr in 0.0..50.0f64,
        a in -1e3..1e3f64,
        b in -1e3..1e3f64,
    ) {
        let g = CollateralMap { alpha, threshold: thr };
        prop_assert!((g.apply(a) - g.apply(b)).abs() <= alpha * (a - b).abs() + 1e-12);
        prop_assert!(g.apply(a) * a >= 0.0);
        prop_assert!(g.apply(a).abs() <= (alpha * a).abs());
    }

    #[test]
    fn recovery_is_monotone_and_bounded_by_exposure(
        rb in 0.0..=1.0f64,
        rc in 0.0..=1.0f64,
        y1 in -1e3..1e3f64,
        y2 in -1e3..1e3f64,
    ) {
        let (lo, hi) = if y1 <= y2 { (y1, y2) } else { (y2, y1) };
        for who in [FirstDefault::Bank, FirstDefault::Counterparty] {
            prop_assert!(recovery(lo, who, rb, rc) <= recovery(hi, who, rb, rc));
        }
        // The surviving party bears the loss.
        prop_assert!(recovery(y1, FirstDefault::Counterparty, rb, rc) <= y1);
        prop_assert!(recovery(y1, FirstDefault::Bank, rb, rc) >= y1);
        prop_assert_eq!(recovery(y1, FirstDefault::Counterparty, rb, 1.0), y1);
        prop_assert_eq!(recovery(y1, FirstDefault::Bank, 1.0, rc), y1);
        prop_assert_eq!(recovery(y1, FirstDefault::None, rb, rc), 0.0);
    }

    #[test]
    fn expected_shortfall_is_translation_equivariant_and_homogeneous(
        x in prop::collection::vec(-100.0..100.0f64, 40..400),
        c in -50.0..50.0f64,
        s in 0.01..10.0f64,
        alpha in 0.5..0.99f64,
    ) {
        prop_assume!(x.len() as f64 * (1.0 - alpha) >= 1.0);
        let es = expected_shortfall(&x, alpha).unwrap().value;
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
        let tol = 1e-9 * (1.0 + es.abs() + c.abs());
        prop_assert!((expected_shortfall(&shifted, alpha).unwrap().value - (es + c)).abs() < tol);
        prop_assert!((expected_shortfall(&scaled, alpha).unwrap().value - es * s).abs() < 1e-9 * (1.0 + (es * s).abs()));
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let max = x.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(es >= mean - 1e-9 && es <= max + 1e-9);
    }

    #[test]
    fn driver_respects_its_lipschitz_constants(
        th in prop::collection::vec(-1.0..=1.0f64, 2),
        lb in 0.0..0.5f64,
        lc in 0.0..0.5f64,
        y in (-100.0..100.0f64, -100.0..100.0f64),
        z in (prop::collection::vec(-100.0..100.0f64, 2), prop::collection::vec(-100.0..100.0f64, 2)),
        phi in (-100.0..100.0f64, -100.0..100.0f64),
    ) {
        let d = DriverSpec {
            theta: th.iter().map(|t| Array2::from_elem((1, 1), *t)).collect(),
            lambda_b: Array2::from_elem((1, 2), lb),
            lambda_c: Array2::from_elem((1, 2), lc),
            theta_bounds: vec![1.0, 1.0],
            lambda_sup: (lb, lc),
            stochastic_intensity: false,
            gains: GainIncrements { dm: vec![], vol: vec![] },
        };
        let (ly, lz) = d.lipschitz();
        let f1 = d.eval(0, 0, y.0, &z.0, phi.0, phi.1);
        let f2 = d.eval(0, 0, y.1, &z.1, phi.0, phi.1);
        let dz = z.0.iter().zip(&z.1).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!((f1 - f2).abs() <= ly * (y.0 - y.1).abs() + lz * dz + 1e-9);
    }

    #[test]
    fn tradeoff_is_bounded_by_the_price_of_risk_bound(
        a in -0.5..0.5f64,
        b in -0.1..0.1f64,
        sigma in 0.1..0.6f64,
        seed in 0u64..1000,
    ) {
        let mut params = flat_market(0.0, sigma, 0.02);
        let k = 1.0;
        // θ = (μ − r)/σ stays within [−k, k] thanks to the clamp on μ.
        params.assets[0].mu = CoeffSpec::AffineLog(AffineLog {
            intercept: a,
            slope: b,
            floor: 0.02 - 0.999 * k * sigma,
            cap: 0.02 + 0.999 * k * sigma,
        });
        params.assets[0].bound = k;
        let grid = TimeGrid::new(2.0, 8).unwrap();
        let bundle = simulate_assets(&params, &grid, &SimSettings { n_paths: 64, seed, substeps: 1 }, Measure::Historical).unwrap();
        let dens = density_process(&bundle, &params).unwrap();
        for p in 0..64 {
            let kt: f64 = dens.theta[0].row(p).iter().map(|t| t * t * grid.dt()).sum();
            prop_assert!(kt <= k * k * 2.0 + 1e-12);
            prop_assert!(dens.z.row(p).iter().all(|z| *z > 0.0 && z.is_finite()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn cva_and_dva_decrease_with_recovery(
        r in (0.0..=1.0f64, 0.0..=1.0f64),
        other in 0.0..=1.0f64,
    ) {
        let (lo, hi) = if r.0 <= r.1 { (r.0, r.1) } else { (r.1, r.0) };
        let (cva_lo, _) = adjustments(other, lo);
        let (cva_hi, _) = adjustments(other, hi);
        prop_assert!(cva_hi <= cva_lo && cva_hi >= 0.0);
        let (_, dva_lo) = adjustments(lo, other);
        let (_, dva_hi) = adjustments(hi, other);
        prop_assert!(dva_hi <= dva_lo && dva_hi >= 0.0);
    }
}
