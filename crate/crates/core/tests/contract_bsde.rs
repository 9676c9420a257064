//! Contract, cashflow and backward-solver oracles, including hand-built
//! fixtures recomputed step by step.

mod common;

use common::{black_scholes_call, flat_market, hand_bundle, Setup};
use ndarray::{array, Array2};
use xva_core::bsde::{assemble_g_solution, build_driver, solve_backward, terminal_identity_gap, DriverSpec, SolverSettings, TerminalData};
use xva_core::contract::{assemble_cashflows, close_out_state, recovery_and_closeout, CloseOutState, CollateralMap, ContractSpec, Flow, Payoff};
use xva_core::credit::{CreditScenario, FirstDefault};
use xva_core::grid::TimeGrid;
use xva_core::market::{density_process, gain_increments, simulate_assets, Measure, RateCurve, SimSettings};
use xva_core::pipeline::{clean_stage, simulate_scenarios, solve_stage};

/// A credit scenario with hand-placed defaults and zero intensities.
fn hand_credit(grid: TimeGrid, defaults: &[(f64, FirstDefault)]) -> CreditScenario {
    let n = defaults.len();
    let nodes = grid.n_nodes();
    let mut sc = CreditScenario {
        grid,
        lambda_b: Array2::zeros((n, nodes)),
        lambda_c: Array2::zeros((n, nodes)),
        gamma_b: Array2::zeros((n, nodes)),
        gamma_c: Array2::zeros((n, nodes)),
        tau_b: vec![f64::INFINITY; n],
        tau_c: vec![f64::INFINITY; n],
        tau: vec![f64::INFINITY; n],
        first: vec![FirstDefault::None; n],
        default_node: vec![grid.n_steps + 1; n],
        tie_paths: Vec::new(),
    };
    for (p, &(t, who)) in defaults.iter().enumerate() {
        if who == FirstDefault::None {
            continue;
        }
        sc.tau[p] = t;
        match who {
            FirstDefault::Bank => sc.tau_b[p] = t,
            _ => sc.tau_c[p] = t,
        }
        sc.first[p] = who;
        sc.default_node[p] = grid.ceil_node(t);
    }
    sc
}

fn spec(flows: Vec<Flow>, rb: f64, rc: f64, alpha: f64) -> ContractSpec {
    ContractSpec {
        flows,
        recovery_bank: rb,
        recovery_counterparty: rc,
        collateral: CollateralMap { alpha, threshold: 0.0 },
    }
}

#[test]
fn ledger_matches_step_by_step_recomputation() {
    // τ = 0.5 on a 4-step grid: default recognized at node 2.
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let mut params = flat_market(0.0, 0.2, 0.04);
    params.rates.coll_borrow = RateCurve::Flat(0.02);
    let bundle = hand_bundle(&params, grid, &[&[100.0, 101.0, 99.0, 98.0, 97.0]]);
    let credit = hand_credit(grid, &[(0.5, FirstDefault::Counterparty)]);
    let sp = spec(
        vec![
            Flow { time: 0.25, notional: 1.0, payoff: Payoff::Fixed { amount: 3.0 } },
            Flow { time: 0.5, notional: 1.0, payoff: Payoff::Fixed { amount: 1.5 } },
            Flow { time: 1.0, notional: 1.0, payoff: Payoff::Fixed { amount: 10.0 } },
        ],
        0.4,
        0.4,
        1.0,
    );
    let state = CloseOutState {
        v: array![[-1.0, -2.0, -4.0, -3.0, 0.0]],
        q: array![[1.0, 5.0, 7.0, 3.0, 10.0]],
        c: array![[1.0, 2.0, 4.0, 3.0, 0.0]],
        rbar: array![[0.01, 0.02, 0.01, 0.01, 0.01]],
    };
    let ledger = assemble_cashflows(&bundle, &credit, &state, &sp).unwrap();

    let dt = 0.25;
    let bf = |k: i32| (0.04 * dt * k as f64).exp();
    let inc1 = 3.0 + (2.0 - 1.0) - 0.01 * 1.0 * dt;
    // Default node: the scheduled flow goes through Q and collateral is frozen.
    let inc2 = -0.02 * 2.0 * dt;
    let y = 7.0 - 2.0;
    let rec = 0.4 * y;
    let f1 = inc1 / bf(1);
    let f2 = f1 + inc2 / bf(2);
    let close = ledger.closeouts[0].unwrap();
    assert_eq!(close.node, 2);
    assert_eq!(close.y, y);
    assert!((close.recovery - rec).abs() < 1e-15);
    assert!((close.theta - (rec + 2.0)).abs() < 1e-15);
    assert!((close.theta - close.theta_rewritten).abs() < 1e-14);
    assert_eq!(ledger.excluded_flows, 1);
    let tol = 1e-13;
    assert!((ledger.a[[0, 1]] - 3.0).abs() < tol);
    assert!((ledger.a[[0, 4]] - 3.0).abs() < tol);
    assert!((ledger.a_c[[0, 2]] - (1.0 + inc1 + inc2)).abs() < tol);
    assert!((ledger.a_rc[[0, 2]] - (1.0 + inc1 + inc2 + rec)).abs() < tol);
    assert!((ledger.l[[0, 0]] + 1.0).abs() < tol);
    assert!((ledger.l[[0, 1]] - (f1 - 2.0 / bf(1))).abs() < tol);
    assert!((ledger.l[[0, 2]] - (f2 + rec / bf(2))).abs() < tol);
    assert_eq!(ledger.l[[0, 4]], ledger.l[[0, 2]]);
    assert_eq!(ledger.terminal[0], ledger.l[[0, 2]]);
}

#[test]
fn empty_contract_without_collateral_has_zero_ledger() {
    let grid = TimeGrid::new(1.0, 4).unwrap();
    let params = flat_market(0.0, 0.2, 0.03);
    let bundle = hand_bundle(&params, grid, &[&[100.0; 5], &[100.0; 5]]);
    let credit = hand_credit(grid, &[(f64::INFINITY, FirstDefault::None), (0.3, FirstDefault::Bank)]);
    let sp = spec(vec![], 0.4, 0.4, 0.0);
    let state = close_out_state(Array2::zeros((2, 5)), &bundle, &sp);
    let ledger = assemble_cashflows(&bundle, &credit, &state, &sp).unwrap();
    assert!(ledger.l.iter().all(|x| *x == 0.0));
}

#[test]
fn surviving_scenario_has_no_closeout() {
    let grid = TimeGrid::new(1.0, 2).unwrap();
    let params = flat_market(0.0, 0.2, 0.0);
    let bundle = hand_bundle(&params, grid, &[&[100.0; 3]]);
    let credit = hand_credit(grid, &[(f64::INFINITY, FirstDefault::None)]);
    let sp = spec(vec![], 0.4, 0.4, 0.0);
    let state = close_out_state(Array2::zeros((1, 3)), &bundle, &sp);
    let err = recovery_and_closeout(&state, &credit, &sp, 0).unwrap_err();
    assert!(matches!(err, xva_core::error::XvaError::Usage(_)));
}

#[test]
fn close_out_identity_holds_to_rounding() {
    let cfg = Setup { paths: 2_000, steps: 10, ..Setup::full_xva() }.config();
    let sc = simulate_scenarios(&cfg).unwrap();
    let cs = clean_stage(&cfg, &sc).unwrap();
    let sp = cfg.contract_spec();
    let sched = sp.schedule(&sc.bundle.grid);
    for p in 0..sc.bundle.n_paths {
        for k in 0..=10 {
            let da = xva_core::contract::node_flow(&sched, &sc.bundle, p, k);
            let scale = 1.0 + da.abs() + cs.state.v[[p, k]].abs();
            assert!((cs.state.q[[p, k]] + cs.state.v[[p, k]] - da).abs() <= 4.0 * f64::EPSILON * scale);
        }
    }
}

/// Jump targets and terminal value on 3 nodes and 2 scenarios.
#[test]
fn jump_targets_match_hand_computation() {
    let grid = TimeGrid::new(1.0, 2).unwrap();
    let mut params = flat_market(0.0, 0.2, 0.04);
    params.rates.coll_lend = RateCurve::Flat(0.01);
    params.rates.coll_borrow = RateCurve::Flat(0.03);
    let bundle = hand_bundle(&params, grid, &[&[100.0, 104.0, 110.0], &[100.0, 95.0, 90.0]]);
    let credit = hand_credit(grid, &[(f64::INFINITY, FirstDefault::None), (0.7, FirstDefault::Counterparty)]);
    let sp = spec(
        vec![
            Flow { time: 0.5, notional: 1.0, payoff: Payoff::Fixed { amount: 2.0 } },
            Flow { time: 1.0, notional: 1.0, payoff: Payoff::Linear { asset: 0, intercept: -100.0, slope: 1.0 } },
        ],
        0.3,
        0.6,
        0.5,
    );
    let v = array![[-1.0, -4.0, 0.0], [-1.0, 3.0, 0.0]];
    let state = close_out_state(v.clone(), &bundle, &sp);
    let density = density_process(&bundle, &params).unwrap();
    let (_, term) = build_driver(&bundle, &density, &params, &credit, &state, &sp).unwrap();

    let dt = 0.5;
    let bf = [1.0, (0.04f64 * 0.5).exp(), (0.04f64).exp()];
    let flows = [[0.0, 2.0, 10.0], [0.0, 2.0, -10.0]];
    let rec = |y: f64, bank: bool| if bank { y.max(0.0) - 0.3 * (-y).max(0.0) } else { 0.6 * y.max(0.0) - (-y).max(0.0) };
    for p in 0..2 {
        let c: Vec<f64> = (0..3).map(|k| 0.5 * v[[p, k]]).collect();
        let rbar: Vec<f64> = c.iter().map(|x| if *x < 0.0 { 0.01 } else { 0.03 }).collect();
        let q: Vec<f64> = (0..3).map(|k| -v[[p, k]] + flows[p][k]).collect();
        let mut fc = 0.0;
        for k in 1..3 {
            let interest = -rbar[k - 1] * c[k - 1] * dt;
            let y = q[k] - c[k - 1];
            let excl = fc + interest / bf[k];
            let want_b = -excl - rec(y, true) / bf[k];
            let want_c = -excl - rec(y, false) / bf[k];
            assert!((term.phi_b[[p, k]] - want_b).abs() < 1e-13, "φ^B p{p} k{k}");
            assert!((term.phi_c[[p, k]] - want_c).abs() < 1e-13, "φ^C p{p} k{k}");
            fc += (flows[p][k] + c[k] - c[k - 1] + interest) / bf[k];
            assert!((term.fc[[p, k]] - fc).abs() < 1e-13);
        }
        assert!((term.terminal[p] - (-fc + c[2] / bf[2])).abs() < 1e-13);
    }
    let ledger = assemble_cashflows(&bundle, &credit, &state, &sp).unwrap();
    assert_eq!(terminal_identity_gap(&ledger, &term, &credit), 0.0);
}

#[test]
fn without_flows_or_collateral_jump_targets_are_discounted_recovery() {
    let grid = TimeGrid::new(1.0, 2).unwrap();
    let params = flat_market(0.0, 0.2, 0.05);
    let bundle = hand_bundle(&params, grid, &[&[100.0, 90.0, 80.0]]);
    let credit = hand_credit(grid, &[(f64::INFINITY, FirstDefault::None)]);
    let sp = spec(vec![], 0.2, 0.4, 0.0);
    // A nonzero clean value with no flows is artificial but isolates Q.
    let state = close_out_state(array![[-3.0, -5.0, 0.0]], &bundle, &sp);
    let density = density_process(&bundle, &params).unwrap();
    let (_, term) = build_driver(&bundle, &density, &params, &credit, &state, &sp).unwrap();
    let bf1 = (0.05f64 * 0.5).exp();
    // 𝒴 = Q = 5: counterparty recovery 0.4·5 enters with the jump-target sign.
    assert!((term.phi_c[[0, 1]] + 0.4 * 5.0 / bf1).abs() < 1e-14);
    assert!((term.phi_b[[0, 1]] + 5.0 / bf1).abs() < 1e-14);
}

fn zero_driver(bundle: &xva_core::market::MarketPathBundle, params: &xva_core::market::MarketParams) -> DriverSpec {
    let (n, steps) = (bundle.n_paths, bundle.grid.n_steps);
    DriverSpec {
        theta: vec![Array2::zeros((n, steps))],
        lambda_b: Array2::zeros((n, steps + 1)),
        lambda_c: Array2::zeros((n, steps + 1)),
        theta_bounds: vec![1.0],
        lambda_sup: (0.0, 0.0),
        stochastic_intensity: false,
        gains: gain_increments(bundle, params),
    }
}

fn plain_terminal(n: usize, nodes: usize, terminal: Vec<f64>) -> TerminalData {
    TerminalData {
        terminal,
        fc: Array2::zeros((n, nodes)),
        dfc: Array2::zeros((n, nodes)),
        phi_b: Array2::zeros((n, nodes)),
        phi_c: Array2::zeros((n, nodes)),
        second_moments: [0.0; 3],
    }
}

#[test]
fn constant_terminal_gives_constant_solution() {
    let params = flat_market(0.05, 0.2, 0.0);
    let grid = TimeGrid::new(1.0, 10).unwrap();
    let b = simulate_assets(&params, &grid, &SimSettings { n_paths: 5_000, seed: 2, substeps: 1 }, Measure::Historical).unwrap();
    let driver = zero_driver(&b, &params);
    let sol = solve_backward(&b, &driver, &plain_terminal(5_000, 11, vec![3.5; 5_000]), &SolverSettings::default()).unwrap();
    assert!(sol.y_bar.iter().all(|y| (y - 3.5).abs() < 1e-9));
    assert!(sol.z_bar[0].iter().all(|z| z.abs() < 1e-9));
    assert!((sol.y0.value - 3.5).abs() < 1e-9);
}

#[test]
fn driftless_asset_is_its_own_conditional_expectation() {
    // σ√T = 0.5: a cubic in the log-price represents the price to about 1%.
    let params = flat_market(0.0, 1.0, 0.0);
    let grid = TimeGrid::new(0.25, 50).unwrap();
    let n = 100_000;
    let b = simulate_assets(&params, &grid, &SimSettings { n_paths: n, seed: 6, substeps: 1 }, Measure::Historical).unwrap();
    let driver = zero_driver(&b, &params);
    let term = plain_terminal(n, 51, b.spots[0].column(50).to_vec());
    let sol = solve_backward(&b, &driver, &term, &SolverSettings::default()).unwrap();
    let (mut se, mut ss) = (0.0, 0.0);
    for k in 0..=50 {
        for p in 0..n {
            let s = b.spots[0][[p, k]];
            se += (sol.y_bar[[p, k]] - s).powi(2);
            ss += s * s;
        }
    }
    let rel = (se / ss).sqrt();
    assert!(rel < 0.02, "relative RMSE {rel}");
    // The hedge ratio of the asset on itself is one.
    let mean_z: f64 = sol.z_bar[0].column(10).iter().zip(b.spots[0].column(10)).map(|(z, s)| z / s).sum::<f64>() / n as f64;
    assert!((mean_z - 1.0).abs() < 0.02, "{mean_z}");
}

#[test]
fn call_solution_matches_black_scholes_and_density_weighting() {
    let s = Setup { paths: 50_000, steps: 25, ..Setup::default() };
    let cfg = s.config();
    let sc = simulate_scenarios(&cfg).unwrap();
    let cs = clean_stage(&cfg, &sc).unwrap();
    let ss = solve_stage(&cfg, &sc, &cs).unwrap();
    let (bs, _) = black_scholes_call(100.0, 100.0, 0.02, 0.2, 1.0);
    let y0 = ss.solution.y0;
    assert!((y0.value - bs).abs() <= (3.0 * y0.std_error).max(0.005 * bs), "{y0:?} vs {bs}");
    assert_eq!(ss.terminal_gap, 0.0);
    // Terminal exactness and the round trip to the defaultable solution.
    for p in 0..sc.bundle.n_paths {
        assert_eq!(ss.solution.y_bar[[p, 25]], ss.terminal.terminal[p]);
    }
    let w = xva_core::pipeline::weighted_terminal_estimate(&sc, &ss);
    let se = (w.std_error.powi(2) + y0.std_error.powi(2)).sqrt();
    assert!((w.value - y0.value).abs() <= 3.0 * se, "{w:?} vs {y0:?}");
}

#[test]
fn counterparty_default_node_carries_the_jump_target() {
    let s = Setup { paths: 4_000, steps: 10, ..Setup::full_xva() };
    let cfg = s.config();
    let sc = simulate_scenarios(&cfg).unwrap();
    let cs = clean_stage(&cfg, &sc).unwrap();
    let ss = solve_stage(&cfg, &sc, &cs).unwrap();
    let g = assemble_g_solution(&ss.solution, &ss.terminal, &sc.credit).unwrap();
    let mut seen = 0;
    for p in 0..sc.bundle.n_paths {
        let k = sc.credit.default_node[p];
        match sc.credit.first[p] {
            FirstDefault::Counterparty => {
                assert_eq!(g.y[[p, k]], ss.terminal.phi_c[[p, k]]);
                seen += 1;
            }
            FirstDefault::None => {
                for j in 0..10 {
                    assert_eq!(g.y[[p, j]], ss.solution.y_bar[[p, j]]);
                    assert_eq!(g.u_c[[p, j + 1]], ss.terminal.phi_c[[p, j + 1]] - ss.solution.y_bar[[p, j + 1]]);
                }
            }
            FirstDefault::Bank => assert_eq!(g.y[[p, k]], ss.terminal.phi_b[[p, k]]),
        }
    }
    assert!(seen > 0);
}

#[test]
fn grid_refinement_shrinks_the_value_change() {
    let y0 = |steps: usize| {
        let cfg = Setup { paths: 40_000, steps, ..Setup::default() }.config();
        let sc = simulate_scenarios(&cfg).unwrap();
        let cs = clean_stage(&cfg, &sc).unwrap();
        solve_stage(&cfg, &sc, &cs).unwrap().solution.y0.value
    };
    let (a, b, c) = (y0(5), y0(10), y0(20));
    assert!((b - c).abs() < (a - b).abs() + 0.02, "{a} {b} {c}");
}
