//! Valuation adjustments at `t = 0`, the decomposition check, the two-step
//! CVA and the capital adjustment.
//!
//! Expectations under the pricing measure are taken on the historical
//! scenarios with the density `𝒵` as weight.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::BsdeSolution;
use crate::contract::{CloseOutState, ContractSpec};
use crate::credit::{CreditModel, CreditScenario, FirstDefault};
use crate::error::{Result, XvaError};
use crate::grid::TimeGrid;
use crate::market::{brownian_row, Density, MarketPathBundle};
use crate::regression::{predict_with, Projector, RegressionSettings};
use crate::rng::{inner_stream, Purpose};
use crate::stats::{combined_se, expected_shortfall, mean_se, Estimate};

/// Estimator for CVA and DVA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMode {
    /// Average of the realized close-out losses.
    #[default]
    Direct,
    /// Time integral of the loss rate `e^{−Γ^B−Γ^C} λ (Q − C)^±`.
    Intensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct XvaConfig {
    pub mode: EstimatorMode,
    pub two_step: bool,
    pub n_inner: usize,
    /// `h`, per year.
    pub hurdle_rate: f64,
    /// `α` of the expected shortfall.
    pub confidence: f64,
    /// Capital horizon in years; one grid step when absent.
    pub capital_horizon: Option<f64>,
    /// DVA with the counterparty factor `(1 − R^C)` instead of `(1 − R^B)`.
    pub strict_paper: bool,
    pub decomposition_tol_abs: f64,
}

impl Default for XvaConfig {
    fn default() -> Self {
        Self {
            mode: EstimatorMode::Direct,
            two_step: false,
            n_inner: 64,
            hurdle_rate: 0.1,
            confidence: 0.975,
            capital_horizon: None,
            strict_paper: false,
            decomposition_tol_abs: 1e-6,
        }
    }
}

impl XvaConfig {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(XvaError::config("xva.confidence", "must lie in (0, 1)"));
        }
        if !(self.hurdle_rate >= 0.0 && self.hurdle_rate.is_finite()) {
            return Err(XvaError::config("xva.hurdle_rate", "must be finite and ≥ 0"));
        }
        if self.two_step && self.n_inner < 2 {
            return Err(XvaError::config("xva.n_inner", "two-step valuation needs at least 2 inner simulations"));
        }
        if !(self.decomposition_tol_abs >= 0.0) {
            return Err(XvaError::config("xva.decomposition_tol_abs", "must be ≥ 0"));
        }
        self.horizon_steps(grid).map(|_| ())
    }

    /// Capital horizon in grid steps.
    pub fn horizon_steps(&self, grid: &TimeGrid) -> Result<usize> {
        match self.capital_horizon {
            None => Ok(1),
            Some(h) => {
                let m = h / grid.dt();
                let r = m.round();
                if !(h > 0.0) || r < 1.0 || (m - r).abs() > 1e-9 * m.max(1.0) {
                    Err(XvaError::config("xva.capital_horizon", "must be a positive multiple of the grid step"))
                } else {
                    Ok(r as usize)
                }
            }
        }
    }

    /// Loss-given-default factor used in DVA.
    pub fn dva_lgd(&self, spec: &ContractSpec) -> f64 {
        if self.strict_paper {
            1.0 - spec.recovery_counterparty
        } else {
            1.0 - spec.recovery_bank
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvaDva {
    pub cva: Estimate,
    pub dva: Estimate,
    pub mode: EstimatorMode,
    pub warnings: Vec<String>,
}

/// Realized default loss at the close-out node of scenario `p`, split into
/// the CVA and DVA legs (both nonnegative).
fn default_losses(state: &CloseOutState, credit: &CreditScenario, spec: &ContractSpec, dva_lgd: f64, p: usize) -> (f64, f64) {
    let k = credit.default_node[p];
    match credit.first[p] {
        FirstDefault::None => (0.0, 0.0),
        first => {
            let y = state.q[[p, k]] - state.c[[p, k - 1]];
            match first {
                FirstDefault::Counterparty => ((1.0 - spec.recovery_counterparty) * y.max(0.0), 0.0),
                _ => (0.0, dva_lgd * (-y).max(0.0)),
            }
        }
    }
}

/// `Σ_{k<N} (𝒵_k/B^r_k) w_k (Q_k − C_k)^± Δt` per scenario for a weight
/// matrix `w` (`n × (N + 1)`); `positive` selects the sign of the exposure.
pub fn weighted_exposure(
    bundle: &MarketPathBundle,
    density: &Density,
    state: &CloseOutState,
    weight: &Array2<f64>,
    positive: bool,
) -> Vec<f64> {
    let grid = bundle.grid;
    let (dt, steps) = (grid.dt(), grid.n_steps);
    let br = &bundle.accounts.discount;
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..steps {
                let e = state.q[[p, k]] - state.c[[p, k]];
                let e = if positive { e.max(0.0) } else { (-e).max(0.0) };
                acc += density.z[[p, k]] / br[k] * weight[[p, k]] * e * dt;
            }
            acc
        })
        .collect()
}

/// `e^{−Γ^B−Γ^C} λ^j` on every scenario and node.
pub fn survival_weighted_intensity(credit: &CreditScenario, counterparty: bool) -> Array2<f64> {
    let lam = if counterparty { &credit.lambda_c } else { &credit.lambda_b };
    let mut w = lam.clone();
    for ((p, k), v) in w.indexed_iter_mut() {
        *v *= (-(credit.gamma_b[[p, k]] + credit.gamma_c[[p, k]])).exp();
    }
    w
}

/// CVA and DVA at `t = 0`.
pub fn cva_dva(
    bundle: &MarketPathBundle,
    density: &Density,
    credit: &CreditScenario,
    state: &CloseOutState,
    spec: &ContractSpec,
    cfg: &XvaConfig,
) -> Result<CvaDva> {
    let n = bundle.n_paths;
    if credit.n_paths() != n || state.n_paths() != n {
        return Err(XvaError::Usage("xVA inputs come from mismatched scenario sets".into()));
    }
    let lgd_b = cfg.dva_lgd(spec);
    let mut warnings = Vec::new();
    let mut mode = cfg.mode;
    if mode == EstimatorMode::Direct && !(0..n).any(|p| credit.defaulted(p)) {
        warnings.push("no defaulted scenarios; CVA/DVA fall back to the intensity estimator".to_string());
        mode = EstimatorMode::Intensity;
    }
    let (cva, dva) = match mode {
        EstimatorMode::Direct => {
            let br = &bundle.accounts.discount;
            let (c, d): (Vec<f64>, Vec<f64>) = (0..n)
                .map(|p| {
                    let (lc, lb) = default_losses(state, credit, spec, lgd_b, p);
                    if lc == 0.0 && lb == 0.0 {
                        return (0.0, 0.0);
                    }
                    let k = credit.default_node[p];
                    let w = density.z[[p, k]] / br[k];
                    (w * lc, w * lb)
                })
                .unzip();
            (mean_se(&c), mean_se(&d))
        }
        EstimatorMode::Intensity => {
            let wc = survival_weighted_intensity(credit, true);
            let wb = survival_weighted_intensity(credit, false);
            let c: Vec<f64> = weighted_exposure(bundle, density, state, &wc, true)
                .into_iter()
                .map(|x| (1.0 - spec.recovery_counterparty) * x)
                .collect();
            let d: Vec<f64> = weighted_exposure(bundle, density, state, &wb, false)
                .into_iter()
                .map(|x| lgd_b * x)
                .collect();
            (mean_se(&c), mean_se(&d))
        }
    };
    Ok(CvaDva { cva, dva, mode, warnings })
}

/// Collateral adjustment `Σ_{k<s} 𝒵_k (C_k/B^r_k)(r̄^c_k − r^f_k) Δt` per scenario.
fn colva_paths(bundle: &MarketPathBundle, density: &Density, credit: &CreditScenario, state: &CloseOutState) -> Vec<f64> {
    let acc = &bundle.accounts;
    let dt = bundle.grid.dt();
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            (0..credit.stop_node(p))
                .map(|k| {
                    let spread = state.rbar[[p, k]] - acc.funding_rate[k];
                    density.z[[p, k]] * state.c[[p, k]] / acc.discount[k] * spread * dt
                })
                .sum()
        })
        .collect()
}

pub fn colva(bundle: &MarketPathBundle, density: &Density, credit: &CreditScenario, state: &CloseOutState) -> Estimate {
    mean_se(&colva_paths(bundle, density, credit, state))
}

/// `Σ_{k<s} 𝒵_k (V_k/B^r_k)(r^f_k − r_k) Δt` per scenario for a value path `V`.
fn fva_paths(bundle: &MarketPathBundle, density: &Density, credit: &CreditScenario, v: &Array2<f64>) -> Vec<f64> {
    let acc = &bundle.accounts;
    let dt = bundle.grid.dt();
    (0..bundle.n_paths)
        .into_par_iter()
        .map(|p| {
            (0..credit.stop_node(p))
                .map(|k| {
                    let spread = acc.funding_rate[k] - acc.discount_rate[k];
                    density.z[[p, k]] * v[[p, k]] / acc.discount[k] * spread * dt
                })
                .sum()
        })
        .collect()
}

/// Conditional expectations at every node, estimated by regression on the
/// scenarios still alive at that node.
struct SurvivorRegression {
    projectors: Vec<Option<(Projector, Vec<usize>)>>,
    covariates: Vec<Vec<Vec<f64>>>,
}

impl SurvivorRegression {
    fn new(
        bundle: &MarketPathBundle,
        credit: &CreditScenario,
        with_intensity: bool,
        settings: &RegressionSettings,
    ) -> Result<Self> {
        let steps = bundle.grid.n_steps;
        let mut projectors = Vec::with_capacity(steps);
        let mut covariates = Vec::with_capacity(steps);
        for k in 0..steps {
            let alive: Vec<usize> = (0..bundle.n_paths).filter(|&p| k < credit.stop_node(p)).collect();
            let mut cols: Vec<Vec<f64>> = (0..bundle.dim())
                .map(|i| alive.iter().map(|&p| bundle.spots[i][[p, k]].ln()).collect())
                .collect();
            if with_intensity {
                cols.push(alive.iter().map(|&p| credit.lambda_b[[p, k]]).collect());
                cols.push(alive.iter().map(|&p| credit.lambda_c[[p, k]]).collect());
            }
            if alive.is_empty() {
                projectors.push(None);
            } else {
                let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
                projectors.push(Some((Projector::new(&refs, alive.len(), settings)?, alive)));
            }
            covariates.push(cols);
        }
        Ok(Self { projectors, covariates })
    }

    /// `E[w_k | state_k]` on the survivors at `k`, zero elsewhere.
    fn conditional(&self, w: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(w.raw_dim());
        for (k, entry) in self.projectors.iter().enumerate() {
            if let Some((proj, alive)) = entry {
                let refs: Vec<&[f64]> = self.covariates[k].iter().map(|c| c.as_slice()).collect();
                let target: Vec<f64> = alive.iter().map(|&p| w[[p, k]]).collect();
                let coef = proj.coefficients(&refs, &target);
                let fit = predict_with(&proj.basis, &coef, &refs);
                for (j, &p) in alive.iter().enumerate() {
                    out[[p, k]] = fit[j];
                }
            }
        }
        out
    }
}

/// Backward pathwise recursion `W_k = a_k + ρ_k W_{k+1}` for `k < s`,
/// `W_s = terminal`, with `ρ_k = (𝒵_{k+1}/𝒵_k)(B^r_k/B^r_{k+1})`.
fn discounted_recursion(
    bundle: &MarketPathBundle,
    density: &Density,
    credit: &CreditScenario,
    running: impl Fn(usize, usize) -> f64 + Sync,
    terminal: impl Fn(usize) -> f64 + Sync,
) -> Array2<f64> {
    let (n, nodes) = (bundle.n_paths, bundle.grid.n_nodes());
    let br = &bundle.accounts.discount;
    let mut w = Array2::<f64>::zeros((n, nodes));
    w.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let s = credit.stop_node(p);
            row[s] = terminal(p);
            for k in (0..s).rev() {
                let rho = density.z[[p, k + 1]] / density.z[[p, k]] * br[k] / br[k + 1];
                row[k] = running(p, k) + rho * row[k + 1];
            }
        });
    w
}

/// Result of the funding fixed point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FvaFixedPoint {
    pub fva: Estimate,
    /// `V_0` of the converged decomposition map.
    pub v0: f64,
    pub iterations: usize,
    pub converged: bool,
    /// FVA evaluated on the hedge value `V_k = B^f_k Ŷ_k − C_k` instead.
    pub fva_from_hedge: Estimate,
}

/// Resolves `V = 𝒱 + CVA − DVA + ColVA − FVA[V]` by iterating from `V = 𝒱`.
#[allow(clippy::too_many_arguments)]
pub fn fva_fixed_point(
    bundle: &MarketPathBundle,
    density: &Density,
    credit: &CreditScenario,
    state: &CloseOutState,
    spec: &ContractSpec,
    sol: &BsdeSolution,
    cfg: &XvaConfig,
    with_intensity: bool,
    settings: &RegressionSettings,
) -> Result<FvaFixedPoint> {
    let acc = &bundle.accounts;
    let dt = bundle.grid.dt();
    let lgd_b = cfg.dva_lgd(spec);
    let reg = SurvivorRegression::new(bundle, credit, with_intensity, settings)?;

    // Pathwise CVA − DVA + ColVA, discounted to each node.
    let x_path = discounted_recursion(
        bundle,
        density,
        credit,
        |p, k| state.c[[p, k]] * (state.rbar[[p, k]] - acc.funding_rate[k]) * dt,
        |p| {
            let (lc, lb) = default_losses(state, credit, spec, lgd_b, p);
            lc - lb
        },
    );
    let x = reg.conditional(&x_path);
    let scale = spec.notional_scale();
    let mut v = state.v.clone();
    let mut v0_prev = v[[0, 0]];
    let mut v0_last = v0_prev;
    let mut iterations = 0;
    let mut converged = false;
    let mut fva_est = Estimate::default();
    while iterations < 50 {
        iterations += 1;
        let spread = |k: usize| acc.funding_rate[k] - acc.discount_rate[k];
        let f_path = discounted_recursion(bundle, density, credit, |p, k| v[[p, k]] * spread(k) * dt, |_| 0.0);
        let f = reg.conditional(&f_path);
        fva_est = mean_se(&fva_paths(bundle, density, credit, &v));
        let mut next = state.v.clone();
        for ((p, k), val) in next.indexed_iter_mut() {
            if k < credit.stop_node(p) {
                *val += x[[p, k]] - f[[p, k]];
            }
        }
        // At the root every scenario shares the state; use the exact means.
        let x0 = crate::stats::mean(&x_path.column(0).to_vec());
        let v0 = state.v[[0, 0]] + x0 - fva_est.value;
        next.column_mut(0).fill(v0);
        v = next;
        v0_last = v0;
        if (v0 - v0_prev).abs() < 1e-8 * scale {
            converged = true;
            break;
        }
        v0_prev = v0;
    }
    let hedge_v = {
        let mut h = &sol.y_hat * &ndarray::Array1::from(acc.funding.clone()) - &state.c;
        h.column_mut(0).fill(sol.y_hat[[0, 0]] * acc.funding[0] - state.c[[0, 0]]);
        h
    };
    Ok(FvaFixedPoint {
        fva: fva_est,
        v0: v0_last,
        iterations,
        converged,
        fva_from_hedge: mean_se(&fva_paths(bundle, density, credit, &hedge_v)),
    })
}

/// Two-step CVA: the survival-weighted intensity is averaged over inner
/// resimulations of the orthogonal intensity drivers with the asset path held fixed.
#[allow(clippy::too_many_arguments)]
pub fn two_step_cva(
    bundle: &MarketPathBundle,
    density: &Density,
    model: &CreditModel,
    state: &CloseOutState,
    spec: &ContractSpec,
    seed: u64,
    substeps: usize,
    n_inner: usize,
) -> Result<(Estimate, Array2<f64>)> {
    if n_inner < 2 {
        return Err(XvaError::config("xva.n_inner", "two-step valuation needs at least 2 inner simulations"));
    }
    let grid = bundle.grid;
    let (n, steps, dt) = (bundle.n_paths, grid.n_steps, grid.dt());
    let mut lam = Array2::<f64>::zeros((n, steps + 1));
    lam.axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let dw_f: Vec<f64> = bundle.dw[0].row(p).to_vec();
            let mut perp = vec![0.0; steps];
            let mut lb = vec![0.0; steps + 1];
            let mut lc = vec![0.0; steps + 1];
            let mut sum = vec![0.0; steps + 1];
            for m in 0..n_inner {
                if model.bank.is_stochastic() {
                    let mut rng = inner_stream(seed, Purpose::InnerBank, p, m);
                    brownian_row(&mut rng, steps, 1, substeps, dt, &mut perp);
                }
                model.bank.path_into(dt, &dw_f, &perp, &mut lb);
                if model.counterparty.is_stochastic() {
                    let mut rng = inner_stream(seed, Purpose::InnerCounterparty, p, m);
                    brownian_row(&mut rng, steps, 1, substeps, dt, &mut perp);
                }
                model.counterparty.path_into(dt, &dw_f, &perp, &mut lc);
                let (mut gb, mut gc) = (0.0, 0.0);
                for k in 0..=steps {
                    if k > 0 {
                        gb += 0.5 * (lb[k - 1] + lb[k]) * dt;
                        gc += 0.5 * (lc[k - 1] + lc[k]) * dt;
                    }
                    sum[k] += (-(gb + gc)).exp() * lc[k];
                }
            }
            for k in 0..=steps {
                row[k] = sum[k] / n_inner as f64;
            }
        });
    let per_path: Vec<f64> = weighted_exposure(bundle, density, state, &lam, true)
        .into_iter()
        .map(|x| (1.0 - spec.recovery_counterparty) * x)
        .collect();
    Ok((mean_se(&per_path), lam))
}

/// Capital adjustment and the per-node expected shortfall profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kva {
    pub kva: Estimate,
    /// `ES_α` of the cost increment per node (`None` where skipped).
    pub es: Vec<Option<Estimate>>,
    pub horizon_steps: usize,
    pub warnings: Vec<String>,
}

/// `KVA_0 = E_Q[Σ_{k<s} h ES_k Δt / B^r_k]`, with `ES_k` the expected
/// shortfall of `𝒞_{k+m} − 𝒞_k` over the scenarios alive at `k`, floored at 0.
pub fn kva(
    cost: &Array2<f64>,
    stop: &[usize],
    bundle: &MarketPathBundle,
    density: &Density,
    cfg: &XvaConfig,
) -> Result<Kva> {
    let grid = bundle.grid;
    let (steps, dt) = (grid.n_steps, grid.dt());
    let m = cfg.horizon_steps(&grid)?;
    let mut es = Vec::with_capacity(steps);
    let mut warnings = Vec::new();
    for k in 0..steps {
        let j = (k + m).min(steps);
        let inc: Vec<f64> = (0..cost.nrows())
            .filter(|&p| k < stop[p])
            .map(|p| cost[[p, j]] - cost[[p, k]])
            .collect();
        match expected_shortfall(&inc, cfg.confidence) {
            Some(e) => es.push(Some(Estimate::new(e.value.max(0.0), e.std_error))),
            None => {
                warnings.push(format!("KVA node {k}: {} surviving scenarios, expected shortfall skipped", inc.len()));
                es.push(None);
            }
        }
    }
    let h = cfg.hurdle_rate;
    let br = &bundle.accounts.discount;
    let per_path: Vec<f64> = (0..cost.nrows())
        .into_par_iter()
        .map(|p| {
            (0..stop[p])
                .map(|k| es[k].map_or(0.0, |e| density.z[[p, k]] * h * e.value * dt / br[k]))
                .sum()
        })
        .collect();
    Ok(Kva {
        kva: mean_se(&per_path),
        es,
        horizon_steps: m,
        warnings,
    })
}

/// Gap `V_0 − (𝒱_0 + CVA − DVA + ColVA − FVA)` with the root-sum-of-squares SE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    pub gap: Estimate,
    pub tolerance: f64,
    pub pass: bool,
}

#[allow(clippy::too_many_arguments)]
pub fn decomposition_check(
    v0: f64,
    ses: &[f64],
    clean: f64,
    cva: f64,
    dva: f64,
    colva: f64,
    fva: f64,
    tol_abs: f64,
) -> DecompositionCheck {
    let gap = v0 - (clean + cva - dva + colva - fva);
    let se = combined_se(ses);
    let tolerance = (3.0 * se).max(tol_abs);
    DecompositionCheck {
        gap: Estimate::new(gap, se),
        tolerance,
        pass: gap.abs() <= tolerance,
    }
}
