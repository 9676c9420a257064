//! Promised cashflows, clean value, collateral and close-out.
//!
//! `A` accumulates flows *to the bank*: a derivative the bank sold shows up as a
//! negative increment, so the clean value `𝒱_t = E_Q[−∫_{]t,T]} (B^r_t/B^r_u) dA_u]`
//! of a sold call is positive.
//!
//! On the grid a default at `τ` is recognized at the first node `κ` with
//! `t_κ ≥ τ`. The close-out value `Q_κ = −𝒱_κ + ΔA_κ` carries the node flow,
//! the flow itself is not paid through `A^{R,C}`, and collateral stays frozen
//! at its last pre-default level `C_{κ−1}`.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::credit::{CreditScenario, FirstDefault};
use crate::error::{Result, XvaError};
use crate::grid::TimeGrid;
use crate::market::{MarketPathBundle, Measure};
use crate::regression::{predict_with, FitDiagnostics, Projector, RegressionSettings};
use crate::stats::{mean_se, Estimate};

/// Amount of a single scheduled flow as a function of the asset prices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Payoff {
    Fixed { amount: f64 },
    Linear { asset: usize, intercept: f64, slope: f64 },
    Call { asset: usize, strike: f64 },
    Put { asset: usize, strike: f64 },
}

impl Payoff {
    #[inline]
    pub fn eval(&self, spots: impl Fn(usize) -> f64) -> f64 {
        match *self {
            Payoff::Fixed { amount } => amount,
            Payoff::Linear { asset, intercept, slope } => intercept + slope * spots(asset),
            Payoff::Call { asset, strike } => (spots(asset) - strike).max(0.0),
            Payoff::Put { asset, strike } => (strike - spots(asset)).max(0.0),
        }
    }

    fn asset(&self) -> Option<usize> {
        match *self {
            Payoff::Fixed { .. } => None,
            Payoff::Linear { asset, .. } | Payoff::Call { asset, .. } | Payoff::Put { asset, .. } => Some(asset),
        }
    }
}

/// One scheduled flow `ΔA_t = notional · payoff(S_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flow {
    pub time: f64,
    pub notional: f64,
    pub payoff: Payoff,
}

/// `g(v) = sign(v) · max(|α v| − threshold, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollateralMap {
    pub alpha: f64,
    pub threshold: f64,
}

impl CollateralMap {
    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        let m = ((self.alpha * v).abs() - self.threshold).max(0.0);
        if v < 0.0 {
            -m
        } else {
            m
        }
    }

    /// Slope of `g` at `v` (used for error propagation only).
    pub fn slope(&self, v: f64) -> f64 {
        if (self.alpha * v).abs() > self.threshold {
            self.alpha
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContractSpec {
    pub flows: Vec<Flow>,
    pub recovery_bank: f64,
    pub recovery_counterparty: f64,
    pub collateral: CollateralMap,
}

impl ContractSpec {
    pub fn validate(&self, grid: &TimeGrid, n_assets: usize) -> Result<()> {
        for (i, f) in self.flows.iter().enumerate() {
            let field = format!("contract.flows[{i}]");
            if !(f.time > 0.0 && f.time <= grid.horizon * (1.0 + 1e-12)) {
                return Err(XvaError::config(format!("{field}.time"), "must lie in (0, T]"));
            }
            if grid.node_of(f.time).is_none() {
                return Err(XvaError::config(format!("{field}.time"), "must sit on a grid node"));
            }
            if !f.notional.is_finite() {
                return Err(XvaError::config(format!("{field}.notional"), "must be finite"));
            }
            if let Some(a) = f.payoff.asset() {
                if a >= n_assets {
                    return Err(XvaError::config(format!("{field}.payoff.asset"), "unknown asset index"));
                }
            }
        }
        for (name, r) in [
            ("contract.recovery_bank", self.recovery_bank),
            ("contract.recovery_counterparty", self.recovery_counterparty),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(XvaError::config(name, "recovery rate must lie in [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.collateral.alpha) {
            return Err(XvaError::config("contract.collateral.alpha", "must lie in [0, 1]"));
        }
        if !(self.collateral.threshold >= 0.0 && self.collateral.threshold.is_finite()) {
            return Err(XvaError::config("contract.collateral.threshold", "must be finite and ≥ 0"));
        }
        Ok(())
    }

    /// Sum of absolute notionals, used to scale absolute tolerances.
    pub fn notional_scale(&self) -> f64 {
        self.flows.iter().map(|f| f.notional.abs()).sum::<f64>().max(1.0)
    }

    /// Flows grouped by node index.
    pub fn schedule(&self, grid: &TimeGrid) -> Vec<Vec<Flow>> {
        let mut out = vec![Vec::new(); grid.n_nodes()];
        for f in &self.flows {
            if let Some(k) = grid.node_of(f.time) {
                out[k].push(*f);
            }
        }
        out
    }
}

/// `ΔA` at node `k` of scenario `p`.
#[inline]
pub fn node_flow(schedule: &[Vec<Flow>], bundle: &MarketPathBundle, p: usize, k: usize) -> f64 {
    schedule[k]
        .iter()
        .map(|f| f.notional * f.payoff.eval(|i| bundle.spots[i][[p, k]]))
        .sum()
}

/// Log-price columns at node `k`.
pub fn log_spot_columns(bundle: &MarketPathBundle, k: usize) -> Vec<Vec<f64>> {
    (0..bundle.dim())
        .map(|i| bundle.spots[i].column(k).iter().map(|s| s.ln()).collect())
        .collect()
}

/// Clean value on the scenarios of the historical bundle.
#[derive(Clone, Debug)]
pub struct CleanValue {
    /// `𝒱_{t_k}` on the historical scenarios, `n × (N + 1)`.
    pub v: Array2<f64>,
    /// `𝒱_0` from the risk-neutral bundle.
    pub v0: Estimate,
    /// `𝒱_0` by density weighting on the historical bundle (cross-check).
    pub v0_weighted: Estimate,
    pub diagnostics: Vec<FitDiagnostics>,
    pub warnings: Vec<String>,
}

/// Estimates the clean value by regressing discounted remaining flows of the
/// risk-neutral bundle on polynomials of the log-prices, then evaluates the
/// fitted functions on the historical scenarios.
pub fn clean_value(
    q_bundle: &MarketPathBundle,
    p_bundle: &MarketPathBundle,
    density_z: &Array2<f64>,
    spec: &ContractSpec,
    settings: &RegressionSettings,
) -> Result<CleanValue> {
    if q_bundle.measure != Measure::RiskNeutral || p_bundle.measure != Measure::Historical {
        return Err(XvaError::Usage("clean_value needs a risk-neutral and a historical bundle".into()));
    }
    if q_bundle.grid != p_bundle.grid {
        return Err(XvaError::Usage("bundles on different grids".into()));
    }
    let grid = p_bundle.grid;
    let schedule = spec.schedule(&grid);
    let disc = &q_bundle.accounts.discount;
    let nq = q_bundle.n_paths;
    let np = p_bundle.n_paths;
    let steps = grid.n_steps;

    // d_k = −Σ_{l>k} ΔA_l / B^r_l, accumulated backward.
    let mut future = vec![0.0; nq];
    let mut v = Array2::<f64>::zeros((np, steps + 1));
    let mut diagnostics = vec![FitDiagnostics::default(); steps + 1];
    let mut warnings = Vec::new();
    let mut v0 = Estimate::default();
    for k in (0..steps).rev() {
        future.par_iter_mut().enumerate().for_each(|(p, f)| {
            *f -= node_flow(&schedule, q_bundle, p, k + 1) / disc[k + 1];
        });
        let target: Vec<f64> = future.iter().map(|f| f * disc[k]).collect();
        let qcols = log_spot_columns(q_bundle, k);
        let qrefs: Vec<&[f64]> = qcols.iter().map(|c| c.as_slice()).collect();
        let proj = Projector::new(&qrefs, nq, settings)?;
        let coef = proj.coefficients(&qrefs, &target);
        if k > 0 && !proj.diagnostics.dropped_covariates.is_empty() {
            warnings.push(format!(
                "clean value node {k}: basis reduced, dropped covariates {:?}",
                proj.diagnostics.dropped_covariates
            ));
        }
        if let Some(l) = proj.diagnostics.ridge {
            warnings.push(format!("clean value node {k}: ridge fallback λ = {l:e}"));
        }
        if k == 0 {
            v0 = mean_se(&target);
        }
        let pcols = log_spot_columns(p_bundle, k);
        let prefs: Vec<&[f64]> = pcols.iter().map(|c| c.as_slice()).collect();
        let fitted = predict_with(&proj.basis, &coef, &prefs);
        v.column_mut(k).assign(&ndarray::Array1::from(fitted));
        let mut diag = proj.diagnostics.clone();
        let qfit = predict_with(&proj.basis, &coef, &qrefs);
        let ss: f64 = qfit.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
        diag.residual_rms = vec![(ss / nq as f64).sqrt()];
        diagnostics[k] = diag;
    }
    // At t = 0 all scenarios share the state; use the exact sample mean.
    v.column_mut(0).fill(v0.value);

    let pdisc = &p_bundle.accounts.discount;
    let weighted: Vec<f64> = (0..np)
        .into_par_iter()
        .map(|p| {
            (1..=steps)
                .map(|l| -density_z[[p, l]] * node_flow(&schedule, p_bundle, p, l) / pdisc[l])
                .sum()
        })
        .collect();
    Ok(CleanValue {
        v,
        v0,
        v0_weighted: mean_se(&weighted),
        diagnostics,
        warnings,
    })
}

/// Close-out inputs on the historical scenarios.
#[derive(Clone, Debug)]
pub struct CloseOutState {
    pub v: Array2<f64>,
    /// `Q = −𝒱 + ΔA`.
    pub q: Array2<f64>,
    /// `C = g(𝒱)`.
    pub c: Array2<f64>,
    /// `r̄^c`: `r^{c,l}` where `C < 0`, else `r^{c,b}`.
    pub rbar: Array2<f64>,
}

impl CloseOutState {
    pub fn n_paths(&self) -> usize {
        self.v.nrows()
    }
}

/// Collateral `C = g(𝒱)` and the effective collateral rate.
pub fn collateral_path(
    v: &Array2<f64>,
    spec: &ContractSpec,
    coll_lend_rate: &[f64],
    coll_borrow_rate: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let c = v.mapv(|x| spec.collateral.apply(x));
    let mut rbar = Array2::<f64>::zeros(v.raw_dim());
    for ((p, k), r) in rbar.indexed_iter_mut() {
        *r = if c[[p, k]] < 0.0 { coll_lend_rate[k] } else { coll_borrow_rate[k] };
    }
    (c, rbar)
}

/// Assembles `Q`, `C` and `r̄^c` from a clean value path.
pub fn close_out_state(clean: Array2<f64>, bundle: &MarketPathBundle, spec: &ContractSpec) -> CloseOutState {
    let grid = bundle.grid;
    let schedule = spec.schedule(&grid);
    let mut q = Array2::<f64>::zeros(clean.raw_dim());
    q.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            for k in 0..grid.n_nodes() {
                row[k] = -clean[[p, k]] + node_flow(&schedule, bundle, p, k);
            }
        });
    let (c, rbar) = collateral_path(&clean, spec, &bundle.accounts.coll_lend_rate, &bundle.accounts.coll_borrow_rate);
    CloseOutState { v: clean, q, c, rbar }
}

/// Recovery `R_τ` paid on the uncollateralized exposure `𝒴 = Q_τ − C_{τ−}`.
#[inline]
pub fn recovery(y: f64, first: FirstDefault, rb: f64, rc: f64) -> f64 {
    let (pos, neg) = (y.max(0.0), (-y).max(0.0));
    match first {
        FirstDefault::Counterparty => rc * pos - neg,
        FirstDefault::Bank => pos - rb * neg,
        FirstDefault::None => 0.0,
    }
}

/// Close-out at the first default of one scenario.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloseOut {
    pub node: usize,
    pub first: FirstDefault,
    pub q: f64,
    /// Frozen collateral `C_{τ−}`.
    pub c_frozen: f64,
    pub y: f64,
    pub recovery: f64,
    /// `ϑ_τ = R_τ + C_{τ−}`.
    pub theta: f64,
    /// `Q_τ − 1{C first}(1 − R^C)𝒴^+ + 1{B first}(1 − R^B)𝒴^−`.
    pub theta_rewritten: f64,
}

/// `R_τ` and `ϑ_τ` (direct and rewritten) for a defaulted scenario.
pub fn recovery_and_closeout(
    state: &CloseOutState,
    credit: &CreditScenario,
    spec: &ContractSpec,
    p: usize,
) -> Result<CloseOut> {
    let first = credit.first[p];
    if first == FirstDefault::None {
        return Err(XvaError::Usage(format!("scenario {p} survives to T; no close-out")));
    }
    let node = credit.default_node[p];
    let q = state.q[[p, node]];
    let c_frozen = state.c[[p, node - 1]];
    let y = q - c_frozen;
    let (rb, rc) = (spec.recovery_bank, spec.recovery_counterparty);
    let r = recovery(y, first, rb, rc);
    let (pos, neg) = (y.max(0.0), (-y).max(0.0));
    let theta_rewritten = match first {
        FirstDefault::Counterparty => q - (1.0 - rc) * pos,
        FirstDefault::Bank => q + (1.0 - rb) * neg,
        FirstDefault::None => q,
    };
    Ok(CloseOut {
        node,
        first,
        q,
        c_frozen,
        y,
        recovery: r,
        theta: r + c_frozen,
        theta_rewritten,
    })
}

/// Increment of `∫(1/B^f) dA^C` over `(t_{k−1}, t_k]` and of `A^C` itself.
///
/// With `default_here` the node flow is settled through the close-out instead
/// and collateral does not move.
#[inline]
pub(crate) fn collateral_flow_increment(
    state: &CloseOutState,
    node_flow_k: f64,
    p: usize,
    k: usize,
    dt: f64,
    default_here: bool,
) -> f64 {
    let c_prev = state.c[[p, k - 1]];
    let interest = -state.rbar[[p, k - 1]] * c_prev * dt;
    if default_here {
        interest
    } else {
        node_flow_k + (state.c[[p, k]] - c_prev) + interest
    }
}

/// Cashflow paths per scenario, stopped at the first default.
#[derive(Clone, Debug)]
pub struct CashflowLedger {
    pub a: Array2<f64>,
    pub a_c: Array2<f64>,
    pub a_rc: Array2<f64>,
    /// `ℒ_{t_k}`.
    pub l: Array2<f64>,
    /// `∫_0^{t_k} (1/B^f) dA^{R,C}` (recovery included from the default node on).
    pub disc_flows: Array2<f64>,
    /// `ℒ_{τ∧T}`.
    pub terminal: Vec<f64>,
    pub closeouts: Vec<Option<CloseOut>>,
    /// Scheduled flows that fell on a default node and were settled via `Q`.
    pub excluded_flows: usize,
}

/// Builds `A`, `A^C`, `A^{R,C}` and `ℒ` on every scenario.
///
/// `ℒ_t = ∫_0^t (1/B^f) dA^C − (C_t/B^f_t) 1{t<τ} + (R_τ/B^f_τ) 1{t≥τ}`; the
/// recovery leg is counted once (see the crate README for the convention).
pub fn assemble_cashflows(
    bundle: &MarketPathBundle,
    credit: &CreditScenario,
    state: &CloseOutState,
    spec: &ContractSpec,
) -> Result<CashflowLedger> {
    let n = bundle.n_paths;
    if credit.n_paths() != n || state.n_paths() != n {
        return Err(XvaError::Usage("scenario sets of different sizes".into()));
    }
    if credit.grid != bundle.grid {
        return Err(XvaError::Usage("credit scenario on a different grid".into()));
    }
    let grid = bundle.grid;
    let nodes = grid.n_nodes();
    let dt = grid.dt();
    let bf = &bundle.accounts.funding;
    let schedule = spec.schedule(&grid);

    let closeouts: Vec<Option<CloseOut>> = (0..n)
        .map(|p| {
            if credit.defaulted(p) {
                recovery_and_closeout(state, credit, spec, p).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect::<Result<_>>()?;

    let mut a = Array2::<f64>::zeros((n, nodes));
    let mut a_c = Array2::<f64>::zeros((n, nodes));
    let mut a_rc = Array2::<f64>::zeros((n, nodes));
    let mut l = Array2::<f64>::zeros((n, nodes));
    let mut disc = Array2::<f64>::zeros((n, nodes));
    let mut terminal = vec![0.0; n];
    let mut excluded = 0usize;
    for p in 0..n {
        let kappa = credit.default_node[p];
        let rec = closeouts[p].map_or(0.0, |c| c.recovery);
        let c0 = state.c[[p, 0]];
        let (mut a_cum, mut ac_cum, mut f_cum) = (0.0, c0, 0.0);
        a[[p, 0]] = 0.0;
        a_c[[p, 0]] = c0;
        a_rc[[p, 0]] = c0;
        l[[p, 0]] = -c0 / bf[0];
        for k in 1..nodes {
            if k > kappa {
                a[[p, k]] = a[[p, k - 1]];
                a_c[[p, k]] = a_c[[p, k - 1]];
                a_rc[[p, k]] = a_rc[[p, k - 1]];
                l[[p, k]] = l[[p, k - 1]];
                disc[[p, k]] = disc[[p, k - 1]];
                continue;
            }
            let flow = node_flow(&schedule, bundle, p, k);
            let at_default = k == kappa;
            if at_default && !schedule[k].is_empty() {
                excluded += 1;
            }
            let inc = collateral_flow_increment(state, flow, p, k, dt, at_default);
            if !at_default {
                a_cum += flow;
            }
            ac_cum += inc;
            f_cum += inc / bf[k];
            a[[p, k]] = a_cum;
            a_c[[p, k]] = ac_cum;
            if at_default {
                a_rc[[p, k]] = ac_cum + rec;
                disc[[p, k]] = f_cum + rec / bf[k];
                l[[p, k]] = f_cum + rec / bf[k];
            } else {
                a_rc[[p, k]] = ac_cum;
                disc[[p, k]] = f_cum;
                l[[p, k]] = f_cum - state.c[[p, k]] / bf[k];
            }
        }
        terminal[p] = l[[p, credit.stop_node(p)]];
    }
    Ok(CashflowLedger {
        a,
        a_c,
        a_rc,
        l,
        disc_flows: disc,
        terminal,
        closeouts,
        excluded_flows: excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collateral_map_examples() {
        let g = CollateralMap { alpha: 1.0, threshold: 2.0 };
        assert_eq!(g.apply(-5.0), -3.0);
        assert_eq!(g.apply(1.0), 0.0);
        let id = CollateralMap { alpha: 1.0, threshold: 0.0 };
        assert_eq!(id.apply(-7.5), -7.5);
        let none = CollateralMap { alpha: 0.0, threshold: 0.0 };
        assert_eq!(none.apply(12.0), 0.0);
    }

    #[test]
    fn recovery_examples() {
        assert_eq!(recovery(10.0, FirstDefault::Counterparty, 0.4, 0.4), 4.0);
        assert_eq!(recovery(-10.0, FirstDefault::Bank, 0.4, 0.4), -4.0);
        assert_eq!(recovery(10.0, FirstDefault::Bank, 0.4, 0.4), 10.0);
        assert_eq!(recovery(-10.0, FirstDefault::Counterparty, 0.4, 0.4), -10.0);
    }

    #[test]
    fn payoffs() {
        let s = |_| 110.0;
        assert_eq!(Payoff::Call { asset: 0, strike: 100.0 }.eval(s), 10.0);
        assert_eq!(Payoff::Put { asset: 0, strike: 100.0 }.eval(s), 0.0);
        assert_eq!(Payoff::Linear { asset: 0, intercept: -100.0, slope: 1.0 }.eval(s), 10.0);
        assert_eq!(Payoff::Fixed { amount: 3.0 }.eval(s), 3.0);
    }

    #[test]
    fn off_grid_flow_is_rejected() {
        let spec = ContractSpec {
            flows: vec![Flow { time: 0.33, notional: 1.0, payoff: Payoff::Fixed { amount: 1.0 } }],
            recovery_bank: 0.4,
            recovery_counterparty: 0.4,
            collateral: CollateralMap { alpha: 0.0, threshold: 0.0 },
        };
        let e = spec.validate(&TimeGrid::new(1.0, 10).unwrap(), 1).unwrap_err();
        assert!(e.to_string().contains("contract.flows[0].time"));
    }
}
