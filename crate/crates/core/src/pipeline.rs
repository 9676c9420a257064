//! Stage DAG: simulate → clean value → solve → hedge → xVA.
//!
//! Each stage consumes the immutable outputs of the previous ones. Scenario
//! simulation and the clean value are cached (keyed by hashes of exactly the
//! inputs they depend on); later stages are cheap enough to recompute.

use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bsde::{assemble_g_solution, build_driver, solve_backward, terminal_identity_gap, BsdeSolution, DriverSpec, GSolution, TerminalData};
use crate::cache::{stage_path, ColumnStore};
use crate::config::{CachePolicy, RunConfig};
use crate::contract::{assemble_cashflows, clean_value, close_out_state, CashflowLedger, CleanValue, CloseOutState};
use crate::credit::{hazard, simulate_credit, CreditScenario, FirstDefault};
use crate::error::{Result, XvaError};
use crate::hedging::{cost_process, extract_strategy, fs_residual_and_checks, CostAndFs, FsDiagnostics, StrategyPaths};
use crate::market::{build_accounts, density_process, simulate_assets, Density, MarketPathBundle, Measure};
use crate::regression::FitDiagnostics;
use crate::stats::{mean_se, Estimate};
use crate::xva::{colva, cva_dva, decomposition_check, fva_fixed_point, kva, two_step_cva, CvaDva, DecompositionCheck, EstimatorMode, FvaFixedPoint, Kva};

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    CleanValue,
    Solve,
    Hedge,
    Xva,
}

pub struct Scenarios {
    pub bundle: MarketPathBundle,
    pub density: Density,
    pub credit: CreditScenario,
}

pub struct CleanStage {
    pub clean: CleanValue,
    pub state: CloseOutState,
}

pub struct SolveStage {
    pub ledger: CashflowLedger,
    pub driver: DriverSpec,
    pub terminal: TerminalData,
    pub solution: BsdeSolution,
    pub g: GSolution,
    /// `max |−ℒ_{τ∧T} − terminal of the defaultable equation|`.
    pub terminal_gap: f64,
}

pub struct HedgeStage {
    pub strategy: StrategyPaths,
    pub costs: CostAndFs,
    pub checks: FsDiagnostics,
}

/// Valuation adjustments at `t = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XvaStage {
    pub clean_value: Estimate,
    pub cva_dva: CvaDva,
    /// CVA and DVA with the other estimator, as a cross-check.
    pub cva_dva_alt: CvaDva,
    pub colva: Estimate,
    pub fva: FvaFixedPoint,
    pub hedge_value: Estimate,
    pub decomposition: DecompositionCheck,
    pub two_step_cva: Option<Estimate>,
    pub kva: Kva,
    pub v_full: Estimate,
}

/// Outputs of a run up to some stage.
pub struct RunArtifacts {
    pub config: RunConfig,
    pub config_hash: String,
    pub scenarios: Scenarios,
    pub clean: Option<CleanStage>,
    pub solve: Option<SolveStage>,
    pub hedge: Option<HedgeStage>,
    pub xva: Option<XvaStage>,
    pub warnings: Vec<String>,
    /// Wall-clock seconds per stage (never part of the report).
    pub timings: Vec<(String, f64)>,
    /// SHA-256 of the cache files written or read, per stage.
    pub cache_hashes: Vec<(String, String)>,
}

fn first_code(f: FirstDefault) -> f64 {
    match f {
        FirstDefault::None => 0.0,
        FirstDefault::Bank => 1.0,
        FirstDefault::Counterparty => 2.0,
    }
}

fn first_from(x: f64) -> Result<FirstDefault> {
    match x as i64 {
        0 => Ok(FirstDefault::None),
        1 => Ok(FirstDefault::Bank),
        2 => Ok(FirstDefault::Counterparty),
        _ => Err(XvaError::Serde(format!("bad default code {x}"))),
    }
}

fn scenarios_to_store(key: &str, s: &Scenarios) -> ColumnStore {
    let mut st = ColumnStore::new(key);
    for i in 0..s.bundle.dim() {
        st.insert(format!("spot{i}"), s.bundle.spots[i].clone());
        st.insert(format!("dw{i}"), s.bundle.dw[i].clone());
    }
    let c = &s.credit;
    st.insert("lambda_b", c.lambda_b.clone());
    st.insert("lambda_c", c.lambda_c.clone());
    st.insert_vec("tau_b", &c.tau_b);
    st.insert_vec("tau_c", &c.tau_c);
    st.insert_vec("tau", &c.tau);
    st.insert_vec("first", &c.first.iter().map(|f| first_code(*f)).collect::<Vec<_>>());
    st.insert_vec("default_node", &c.default_node.iter().map(|k| *k as f64).collect::<Vec<_>>());
    st.insert_vec("tie_paths", &c.tie_paths.iter().map(|k| *k as f64).collect::<Vec<_>>());
    st
}

fn scenarios_from_store(cfg: &RunConfig, mut st: ColumnStore) -> Result<Scenarios> {
    let grid = cfg.time_grid()?;
    let d = cfg.market.dim();
    let mut spots = Vec::with_capacity(d);
    let mut dw = Vec::with_capacity(d);
    for i in 0..d {
        spots.push(st.take(&format!("spot{i}"))?);
        dw.push(st.take(&format!("dw{i}"))?);
    }
    let bundle = MarketPathBundle {
        grid,
        measure: Measure::Historical,
        n_paths: spots[0].nrows(),
        spots,
        dw,
        accounts: build_accounts(&cfg.market, &grid)?,
    };
    let density = density_process(&bundle, &cfg.market)?;
    let lambda_b = st.take("lambda_b")?;
    let lambda_c = st.take("lambda_c")?;
    let credit = CreditScenario {
        grid,
        gamma_b: hazard(&lambda_b, &grid),
        gamma_c: hazard(&lambda_c, &grid),
        lambda_b,
        lambda_c,
        tau_b: st.take_vec("tau_b")?,
        tau_c: st.take_vec("tau_c")?,
        tau: st.take_vec("tau")?,
        first: st.take_vec("first")?.into_iter().map(first_from).collect::<Result<_>>()?,
        default_node: st.take_vec("default_node")?.into_iter().map(|x| x as usize).collect(),
        tie_paths: st.take_vec("tie_paths")?.into_iter().map(|x| x as usize).collect(),
    };
    Ok(Scenarios { bundle, density, credit })
}

/// Simulates the historical scenarios, the density and the credit scenario.
pub fn simulate_scenarios(cfg: &RunConfig) -> Result<Scenarios> {
    let grid = cfg.time_grid()?;
    let sim = cfg.sim_settings();
    let bundle = simulate_assets(&cfg.market, &grid, &sim, Measure::Historical)?;
    let density = density_process(&bundle, &cfg.market)?;
    let credit = simulate_credit(&cfg.credit, &bundle, sim.seed, sim.substeps)?;
    Ok(Scenarios { bundle, density, credit })
}

/// Clean value (from an independent risk-neutral bundle) and close-out state.
pub fn clean_stage(cfg: &RunConfig, sc: &Scenarios) -> Result<CleanStage> {
    let grid = cfg.time_grid()?;
    let q_bundle = simulate_assets(&cfg.market, &grid, &cfg.clean_sim_settings(), Measure::RiskNeutral)?;
    let spec = cfg.contract_spec();
    let clean = clean_value(&q_bundle, &sc.bundle, &sc.density.z, &spec, &cfg.regression())?;
    drop(q_bundle);
    let state = close_out_state(clean.v.clone(), &sc.bundle, &spec);
    Ok(CleanStage { clean, state })
}

fn clean_key(cfg: &RunConfig) -> String {
    let s = format!(
        "{}|{}|{}|{}|{:?}",
        cfg.scenario_hash(),
        serde_json::to_string(&cfg.contract).expect("serializable"),
        cfg.solver.basis_degree,
        cfg.solver.ridge_lambda,
        cfg.mc.n_paths_clean
    );
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn clean_to_store(key: &str, c: &CleanStage) -> ColumnStore {
    let mut st = ColumnStore::new(key);
    st.insert("v", c.clean.v.clone());
    st.insert_vec("v0", &[c.clean.v0.value, c.clean.v0.std_error]);
    st.insert_vec("v0_weighted", &[c.clean.v0_weighted.value, c.clean.v0_weighted.std_error]);
    st.meta = serde_json::json!({
        "diagnostics": c.clean.diagnostics,
        "warnings": c.clean.warnings,
    });
    st
}

fn clean_from_store(cfg: &RunConfig, sc: &Scenarios, mut st: ColumnStore) -> Result<CleanStage> {
    let v = st.take("v")?;
    let v0 = st.take_vec("v0")?;
    let vw = st.take_vec("v0_weighted")?;
    let diagnostics: Vec<FitDiagnostics> = serde_json::from_value(st.meta["diagnostics"].clone())?;
    let warnings: Vec<String> = serde_json::from_value(st.meta["warnings"].clone())?;
    let state = close_out_state(v.clone(), &sc.bundle, &cfg.contract_spec());
    Ok(CleanStage {
        clean: CleanValue {
            v,
            v0: Estimate::new(v0[0], v0[1]),
            v0_weighted: Estimate::new(vw[0], vw[1]),
            diagnostics,
            warnings,
        },
        state,
    })
}

pub fn solve_stage(cfg: &RunConfig, sc: &Scenarios, cs: &CleanStage) -> Result<SolveStage> {
    let spec = cfg.contract_spec();
    let ledger = assemble_cashflows(&sc.bundle, &sc.credit, &cs.state, &spec)?;
    let (driver, terminal) = build_driver(&sc.bundle, &sc.density, &cfg.market, &sc.credit, &cs.state, &spec)?;
    let terminal_gap = terminal_identity_gap(&ledger, &terminal, &sc.credit);
    let solution = solve_backward(&sc.bundle, &driver, &terminal, &cfg.solver_settings())?;
    let g = assemble_g_solution(&solution, &terminal, &sc.credit)?;
    Ok(SolveStage {
        ledger,
        driver,
        terminal,
        solution,
        g,
        terminal_gap,
    })
}

pub fn hedge_stage(cfg: &RunConfig, sc: &Scenarios, cs: &CleanStage, ss: &SolveStage) -> Result<HedgeStage> {
    let strategy = extract_strategy(&ss.solution, &ss.g, &sc.bundle, &cfg.market, &ss.ledger)?;
    let costs = cost_process(&strategy, &ss.solution, &ss.g, &sc.bundle, &sc.density, &ss.ledger, &sc.credit)?;
    let checks = fs_residual_and_checks(&costs, &strategy, &ss.g, &sc.bundle, &cfg.market, &ss.ledger, &cs.state.c);
    Ok(HedgeStage { strategy, costs, checks })
}

pub fn xva_stage(cfg: &RunConfig, sc: &Scenarios, cs: &CleanStage, ss: &SolveStage, hs: &HedgeStage) -> Result<XvaStage> {
    let spec = cfg.contract_spec();
    let xcfg = cfg.xva_config();
    let cd = cva_dva(&sc.bundle, &sc.density, &sc.credit, &cs.state, &spec, &xcfg)?;
    let alt_mode = match cd.mode {
        EstimatorMode::Direct => EstimatorMode::Intensity,
        EstimatorMode::Intensity => EstimatorMode::Direct,
    };
    let alt_cfg = crate::xva::XvaConfig { mode: alt_mode, ..xcfg };
    let cd_alt = cva_dva(&sc.bundle, &sc.density, &sc.credit, &cs.state, &spec, &alt_cfg)?;
    let col = colva(&sc.bundle, &sc.density, &sc.credit, &cs.state);
    let with_intensity = match cfg.solver.covariates {
        crate::bsde::Covariates::Auto => ss.driver.stochastic_intensity,
        crate::bsde::Covariates::Spot => false,
        crate::bsde::Covariates::SpotAndIntensity => true,
    };
    let fva = fva_fixed_point(
        &sc.bundle,
        &sc.density,
        &sc.credit,
        &cs.state,
        &spec,
        &ss.solution,
        &xcfg,
        with_intensity,
        &cfg.regression(),
    )?;
    let c0 = cs.state.c[[0, 0]];
    let clean0 = cs.clean.v0;
    let c0_se = spec.collateral.slope(clean0.value).abs() * clean0.std_error;
    let hedge_value = Estimate::new(ss.solution.y0.value - c0, ss.solution.y0.std_error);
    let decomposition = decomposition_check(
        hedge_value.value,
        &[
            ss.solution.y0.std_error,
            clean0.std_error,
            c0_se,
            cd.cva.std_error,
            cd.dva.std_error,
            col.std_error,
            fva.fva.std_error,
        ],
        clean0.value,
        cd.cva.value,
        cd.dva.value,
        col.value,
        fva.fva.value,
        xcfg.decomposition_tol_abs,
    );
    let two_step = if xcfg.two_step {
        let (e, _) = two_step_cva(
            &sc.bundle,
            &sc.density,
            &cfg.credit,
            &cs.state,
            &spec,
            cfg.mc.seed,
            cfg.mc.brownian_substeps,
            xcfg.n_inner,
        )?;
        Some(e)
    } else {
        None
    };
    let k = kva(&hs.costs.cost, &hs.costs.stop, &sc.bundle, &sc.density, &xcfg)?;
    let v_full = Estimate::new(
        hedge_value.value + k.kva.value,
        (hedge_value.std_error.powi(2) + k.kva.std_error.powi(2)).sqrt(),
    );
    Ok(XvaStage {
        clean_value: clean0,
        cva_dva: cd,
        cva_dva_alt: cd_alt,
        colva: col,
        fva,
        hedge_value,
        decomposition,
        two_step_cva: two_step,
        kva: k,
        v_full,
    })
}

/// Runs every stage up to and including `until`.
///
/// With `cache_dir` set and a cache policy other than `off`, scenario and
/// clean-value stages are restored from or written to the cache.
pub fn run(cfg: &RunConfig, until: Stage, cache_dir: Option<&Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let policy = if cache_dir.is_some() { cfg.run.cache_policy } else { CachePolicy::Off };
    let mut timings = Vec::new();
    let mut warnings = Vec::new();
    let mut cache_hashes = Vec::new();

    let t = Instant::now();
    let skey = cfg.scenario_hash();
    let mut scenarios = None;
    if let (CachePolicy::Reuse, Some(dir)) = (policy, cache_dir) {
        if let Some((st, h)) = ColumnStore::read_if_matches(&stage_path(dir, "scenarios", &skey), &skey)? {
            scenarios = Some(scenarios_from_store(cfg, st)?);
            cache_hashes.push(("scenarios".to_string(), h));
        }
    }
    let scenarios = match scenarios {
        Some(s) => s,
        None => {
            let s = simulate_scenarios(cfg)?;
            if let (CachePolicy::Reuse | CachePolicy::Refresh, Some(dir)) = (policy, cache_dir) {
                let h = scenarios_to_store(&skey, &s).write(&stage_path(dir, "scenarios", &skey))?;
                cache_hashes.push(("scenarios".to_string(), h));
            }
            s
        }
    };
    if !scenarios.credit.tie_paths.is_empty() {
        warnings.push(format!(
            "{} scenarios had both defaults in the same grid step (order drawn at random)",
            scenarios.credit.tie_paths.len()
        ));
    }
    timings.push(("simulate".to_string(), t.elapsed().as_secs_f64()));

    let mut art = RunArtifacts {
        config: cfg.clone(),
        config_hash: cfg.hash(),
        scenarios,
        clean: None,
        solve: None,
        hedge: None,
        xva: None,
        warnings,
        timings,
        cache_hashes,
    };
    if until == Stage::Simulate {
        return Ok(art);
    }

    let t = Instant::now();
    let ckey = clean_key(cfg);
    let mut clean = None;
    if let (CachePolicy::Reuse, Some(dir)) = (policy, cache_dir) {
        if let Some((st, h)) = ColumnStore::read_if_matches(&stage_path(dir, "clean", &ckey), &ckey)? {
            clean = Some(clean_from_store(cfg, &art.scenarios, st)?);
            art.cache_hashes.push(("clean".to_string(), h));
        }
    }
    let clean = match clean {
        Some(c) => c,
        None => {
            let c = clean_stage(cfg, &art.scenarios)?;
            if let (CachePolicy::Reuse | CachePolicy::Refresh, Some(dir)) = (policy, cache_dir) {
                let h = clean_to_store(&ckey, &c).write(&stage_path(dir, "clean", &ckey))?;
                art.cache_hashes.push(("clean".to_string(), h));
            }
            c
        }
    };
    art.warnings.extend(clean.clean.warnings.iter().cloned());
    art.timings.push(("clean-value".to_string(), t.elapsed().as_secs_f64()));
    art.clean = Some(clean);
    if until == Stage::CleanValue {
        return Ok(art);
    }

    let t = Instant::now();
    let cs = art.clean.as_ref().expect("clean stage");
    let ss = solve_stage(cfg, &art.scenarios, cs)?;
    art.warnings.extend(ss.solution.warnings.iter().cloned());
    if ss.ledger.excluded_flows > 0 {
        art.warnings.push(format!(
            "{} scheduled flows fell on a default node and were settled through the close-out",
            ss.ledger.excluded_flows
        ));
    }
    art.timings.push(("solve".to_string(), t.elapsed().as_secs_f64()));
    art.solve = Some(ss);
    if until == Stage::Solve {
        return Ok(art);
    }

    let t = Instant::now();
    let hs = hedge_stage(cfg, &art.scenarios, cs, art.solve.as_ref().expect("solve stage"))?;
    art.timings.push(("hedge".to_string(), t.elapsed().as_secs_f64()));
    art.hedge = Some(hs);
    if until == Stage::Hedge {
        return Ok(art);
    }

    let t = Instant::now();
    let xs = xva_stage(
        cfg,
        &art.scenarios,
        cs,
        art.solve.as_ref().expect("solve stage"),
        art.hedge.as_ref().expect("hedge stage"),
    )?;
    art.warnings.extend(xs.cva_dva.warnings.iter().cloned());
    art.warnings.extend(xs.kva.warnings.iter().cloned());
    if !xs.fva.converged {
        art.warnings.push(format!("FVA fixed point did not converge in {} iterations", xs.fva.iterations));
    }
    art.timings.push(("xva".to_string(), t.elapsed().as_secs_f64()));
    art.xva = Some(xs);
    Ok(art)
}

/// Pathwise `𝒵`-weighted direct estimator of `E_Q[−ℒ_{τ∧T}]` discounted at
/// the funding rate; equals `Y_0` in the linear case (no default intensity).
pub fn weighted_terminal_estimate(sc: &Scenarios, ss: &SolveStage) -> Estimate {
    let n = sc.bundle.n_paths;
    let x: Vec<f64> = (0..n)
        .map(|p| sc.density.z[[p, sc.credit.stop_node(p)]] * -ss.ledger.terminal[p])
        .collect();
    mean_se(&x)
}

/// `V_k = B^f_k Ŷ_k − C_k`, the hedge value on every scenario.
pub fn hedge_value_paths(sc: &Scenarios, cs: &CleanStage, ss: &SolveStage) -> Array2<f64> {
    let bf = &sc.bundle.accounts.funding;
    let mut v = ss.solution.y_hat.clone();
    for ((p, k), x) in v.indexed_iter_mut() {
        *x = *x * bf[k] - cs.state.c[[p, k]];
    }
    v
}
