//! Backward least-squares solver for the pre-default value process.
//!
//! The jump-free reduced equation is solved for `Ȳ`; the defaultable solution
//! `(Y, Z, U^B, U^C)` is then assembled from `Ȳ`, `Z̄` and the jump targets.
//!
//! Internally the sweep runs on `Ŷ = Ȳ + Fc`, where `Fc_k` is the discounted
//! pre-default flow account `Σ_{l≤k} dA^C_l / B^f_l`. `Ŷ` is a function of the
//! state at `t_k` (the flow history cancels), which is what a regression can
//! represent; `Ȳ` itself is path dependent through `Fc`.
//!
//! Each step fits `Ŷ_{t_{k+1}}` jointly on functions of the state and on
//! state-dependent slopes times the martingale gain increments of the assets.
//! The slopes are the one-period hedge ratios (`Z̄ = ξ S σ / B^f`), and the
//! fitted gain is subtracted from the value target as a control variate. This
//! keeps the regression noise of `Ȳ` at the level of the unhedged residual,
//! so the cost process inherits the in-sample martingale property.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contract::{node_flow, recovery, CashflowLedger, CloseOutState, ContractSpec};
use crate::credit::{CreditScenario, FirstDefault};
use crate::error::{Result, XvaError};
use crate::market::{gain_increments, Density, GainIncrements, MarketParams, MarketPathBundle};
use crate::regression::{predict_with, AugmentedProjector, FitDiagnostics, Projector, RegressionSettings};
use crate::stats::{mean_se, Estimate};

/// Which state variables enter the regression basis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariates {
    /// Log-prices, plus both intensities when either is stochastic.
    #[default]
    Auto,
    /// Log-prices only.
    Spot,
    /// Log-prices and both intensities.
    SpotAndIntensity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub regression: RegressionSettings,
    /// Picard refinements of the `y` argument per step (0 = purely explicit).
    pub picard_iters: usize,
    pub covariates: Covariates,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            regression: RegressionSettings::default(),
            picard_iters: 1,
            covariates: Covariates::Auto,
        }
    }
}

/// Coefficients of the driver `f̄(y, z) = −Σ_i θ^i z^i + λ^C(φ^C − y) + λ^B(φ^B − y)`.
#[derive(Clone, Debug)]
pub struct DriverSpec {
    /// `θ^i` at the nodes `k < N`.
    pub theta: Vec<Array2<f64>>,
    pub lambda_b: Array2<f64>,
    pub lambda_c: Array2<f64>,
    /// Bounds `K_i` on `|θ^i|`.
    pub theta_bounds: Vec<f64>,
    /// Upper bounds of both intensity models.
    pub lambda_sup: (f64, f64),
    pub stochastic_intensity: bool,
    /// Martingale increments of the hedge instruments and the `ξ → Z` scale.
    pub gains: GainIncrements,
}

impl DriverSpec {
    /// `f̄` at scenario `p`, node `k`.
    #[inline]
    pub fn eval(&self, p: usize, k: usize, y: f64, z: &[f64], phi_b: f64, phi_c: f64) -> f64 {
        let mut f = 0.0;
        for (i, th) in self.theta.iter().enumerate() {
            f -= th[[p, k]] * z[i];
        }
        f + self.lambda_c[[p, k]] * (phi_c - y) + self.lambda_b[[p, k]] * (phi_b - y)
    }

    /// Lipschitz constants `(L_y, L_z)` of `f̄` with respect to `y` and the
    /// sup-norm of `z`.
    pub fn lipschitz(&self) -> (f64, f64) {
        let kmax = self.theta_bounds.iter().cloned().fold(0.0, f64::max);
        (
            2.0 * (self.lambda_sup.0 + self.lambda_sup.1),
            self.theta.len() as f64 * kmax,
        )
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }
}

/// Terminal condition and jump targets of the reduced equation.
#[derive(Clone, Debug)]
pub struct TerminalData {
    /// `ℒ̄_T = −Fc_N + C_N / B^f_N`.
    pub terminal: Vec<f64>,
    /// `Fc_k`, `n × (N + 1)`, ignoring default.
    pub fc: Array2<f64>,
    /// `dFc_k = Fc_k − Fc_{k−1}` (column 0 is zero).
    pub dfc: Array2<f64>,
    /// `φ^B_k`, `φ^C_k` for `k ≥ 1` (column 0 is zero).
    pub phi_b: Array2<f64>,
    pub phi_c: Array2<f64>,
    /// Sample second moments of `ℒ̄_T`, `φ^B`, `φ^C` (finite ⇔ usable).
    pub second_moments: [f64; 3],
}

impl TerminalData {
    pub fn phi(&self, first: FirstDefault) -> Option<&Array2<f64>> {
        match first {
            FirstDefault::Bank => Some(&self.phi_b),
            FirstDefault::Counterparty => Some(&self.phi_c),
            FirstDefault::None => None,
        }
    }

    /// Terminal value of the defaultable equation on scenario `p`:
    /// `ℒ̄_T 1{τ>T} + φ^C_κ 1{C first} + φ^B_κ 1{B first}`.
    pub fn g_terminal(&self, credit: &CreditScenario, p: usize) -> f64 {
        match self.phi(credit.first[p]) {
            Some(phi) => phi[[p, credit.default_node[p]]],
            None => self.terminal[p],
        }
    }
}

/// Builds the driver coefficients and the terminal data from matched scenario sets.
pub fn build_driver(
    bundle: &MarketPathBundle,
    density: &Density,
    params: &MarketParams,
    credit: &CreditScenario,
    state: &CloseOutState,
    spec: &ContractSpec,
) -> Result<(DriverSpec, TerminalData)> {
    let grid = bundle.grid;
    let n = bundle.n_paths;
    if credit.grid != grid || credit.n_paths() != n || state.n_paths() != n || density.z.nrows() != n {
        return Err(XvaError::Usage("driver inputs come from mismatched scenario sets".into()));
    }
    if state.v.ncols() != grid.n_nodes() || density.theta.len() != bundle.dim() {
        return Err(XvaError::Usage("driver inputs come from mismatched grids".into()));
    }
    let nodes = grid.n_nodes();
    let dt = grid.dt();
    let bf = &bundle.accounts.funding;
    let schedule = spec.schedule(&grid);
    let (rb, rc) = (spec.recovery_bank, spec.recovery_counterparty);

    let mut fc = Array2::<f64>::zeros((n, nodes));
    let mut dfc = Array2::<f64>::zeros((n, nodes));
    let mut phi_b = Array2::<f64>::zeros((n, nodes));
    let mut phi_c = Array2::<f64>::zeros((n, nodes));
    let mut terminal = vec![0.0; n];
    ndarray::Zip::indexed(fc.rows_mut())
        .and(dfc.rows_mut())
        .and(phi_b.rows_mut())
        .and(phi_c.rows_mut())
        .and(&mut terminal)
        .par_for_each(|p, mut fc, mut dfc, mut pb, mut pc, term| {
            let mut acc = 0.0;
            for k in 1..nodes {
                let flow = node_flow(&schedule, bundle, p, k);
                let c_prev = state.c[[p, k - 1]];
                let interest = -state.rbar[[p, k - 1]] * c_prev * dt;
                // Same accumulation order as the cashflow ledger, so the
                // terminal identity holds to the last bit.
                let excl = acc + interest / bf[k];
                let y = state.q[[p, k]] - c_prev;
                pb[k] = -excl - recovery(y, FirstDefault::Bank, rb, rc) / bf[k];
                pc[k] = -excl - recovery(y, FirstDefault::Counterparty, rb, rc) / bf[k];
                let inc = flow + (state.c[[p, k]] - c_prev) + interest;
                dfc[k] = inc / bf[k];
                acc += inc / bf[k];
                fc[k] = acc;
            }
            *term = -acc + state.c[[p, nodes - 1]] / bf[nodes - 1];
        });

    let m2 = |x: &mut dyn Iterator<Item = f64>| {
        let (s, c) = x.fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
        s / c.max(1) as f64
    };
    let second_moments = [
        m2(&mut terminal.iter().cloned()),
        m2(&mut phi_b.iter().cloned()),
        m2(&mut phi_c.iter().cloned()),
    ];

    let driver = DriverSpec {
        theta: density.theta.clone(),
        lambda_b: credit.lambda_b.clone(),
        lambda_c: credit.lambda_c.clone(),
        theta_bounds: params.assets.iter().map(|a| a.bound).collect(),
        lambda_sup: (
            credit.lambda_b.iter().cloned().fold(0.0, f64::max),
            credit.lambda_c.iter().cloned().fold(0.0, f64::max),
        ),
        stochastic_intensity: credit.lambda_b.axis_iter(Axis(1)).any(|c| varies(c.iter()))
            || credit.lambda_c.axis_iter(Axis(1)).any(|c| varies(c.iter())),
        gains: gain_increments(bundle, params),
    };
    Ok((
        driver,
        TerminalData {
            terminal,
            fc,
            dfc,
            phi_b,
            phi_c,
            second_moments,
        },
    ))
}

fn varies<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    match it.next() {
        Some(first) => it.any(|x| x != first),
        None => false,
    }
}

/// `max_p |−ℒ_{τ∧T} − G-terminal|`; zero when the cashflow ledger and the
/// terminal data agree.
pub fn terminal_identity_gap(ledger: &CashflowLedger, terminal: &TerminalData, credit: &CreditScenario) -> f64 {
    (0..credit.n_paths())
        .map(|p| (-ledger.terminal[p] - terminal.g_terminal(credit, p)).abs())
        .fold(0.0, f64::max)
}

/// Regression diagnostics of one backward step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub node: usize,
    #[serde(flatten)]
    pub fit: FitDiagnostics,
    /// Residual RMS of the joint value/hedge-ratio regression.
    pub z_residual_rms: Vec<f64>,
}

/// Solution of the reduced equation plus its defaultable counterpart.
#[derive(Clone, Debug)]
pub struct BsdeSolution {
    /// `Ŷ = Ȳ + Fc`, `n × (N + 1)`.
    pub y_hat: Array2<f64>,
    /// `Ȳ`, `n × (N + 1)`.
    pub y_bar: Array2<f64>,
    /// `Z̄^i` at nodes `k < N`, one `n × N` array per asset.
    pub z_bar: Vec<Array2<f64>>,
    /// `Ȳ_0` with the standard error of the pathwise accumulated target.
    pub y0: Estimate,
    /// `Z̄_0` is a cross-sectional slope (no state variation at `t_0`).
    /// Always set; kept so reports can flag it.
    pub z0_extrapolated: bool,
    pub diagnostics: Vec<StepDiagnostics>,
    pub lipschitz: (f64, f64),
    pub warnings: Vec<String>,
}

/// Covariate columns at node `k`.
fn covariates(
    bundle: &MarketPathBundle,
    driver: &DriverSpec,
    k: usize,
    mode: Covariates,
) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = (0..bundle.dim())
        .map(|i| bundle.spots[i].column(k).iter().map(|s| s.ln()).collect())
        .collect();
    let with_lambda = match mode {
        Covariates::Auto => driver.stochastic_intensity,
        Covariates::Spot => false,
        Covariates::SpotAndIntensity => true,
    };
    if with_lambda {
        cols.push(driver.lambda_b.column(k).to_vec());
        cols.push(driver.lambda_c.column(k).to_vec());
    }
    cols
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (s / a.len().max(1) as f64).sqrt()
}

/// Backward induction with an explicit driver and Picard refinement of `y`.
pub fn solve_backward(
    bundle: &MarketPathBundle,
    driver: &DriverSpec,
    terminal: &TerminalData,
    settings: &SolverSettings,
) -> Result<BsdeSolution> {
    let grid = bundle.grid;
    let (n, steps, d, dt) = (bundle.n_paths, grid.n_steps, bundle.dim(), grid.dt());
    if terminal.terminal.len() != n || driver.lambda_b.nrows() != n {
        return Err(XvaError::Usage("solver inputs come from mismatched scenario sets".into()));
    }
    let mut y_hat = Array2::<f64>::zeros((n, steps + 1));
    let mut z_bar = vec![Array2::<f64>::zeros((n, steps)); d];
    for p in 0..n {
        y_hat[[p, steps]] = terminal.terminal[p] + terminal.fc[[p, steps]];
    }
    // Pathwise accumulated target; its mean is `Ŷ_0`.
    let mut pi: Vec<f64> = y_hat.column(steps).to_vec();
    let mut diagnostics = Vec::with_capacity(steps);
    let mut warnings = Vec::new();
    let mut base = vec![0.0; n];
    let mut jb = vec![0.0; n];
    let mut jc = vec![0.0; n];
    let mut target = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut zk = vec![vec![0.0; n]; d];
    let mut control = vec![0.0; n];

    for k in (0..steps).rev() {
        for p in 0..n {
            base[p] = y_hat[[p, k + 1]] - terminal.dfc[[p, k + 1]];
            jb[p] = terminal.phi_b[[p, k + 1]] + terminal.fc[[p, k]];
            jc[p] = terminal.phi_c[[p, k + 1]] + terminal.fc[[p, k]];
            pi[p] -= terminal.dfc[[p, k + 1]];
        }
        let cols = covariates(bundle, driver, k, settings.covariates);
        let refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
        let proj = Projector::new(&refs, n, &settings.regression).map_err(|e| match e {
            XvaError::Numerical { message, .. } => {
                XvaError::numerical("solve", format!("node {k}"), message)
            }
            other => other,
        })?;
        if k > 0 && !proj.diagnostics.dropped_covariates.is_empty() {
            warnings.push(format!(
                "solve node {k}: dropped constant covariates {:?}",
                proj.diagnostics.dropped_covariates
            ));
        }
        if let Some(l) = proj.diagnostics.ridge {
            warnings.push(format!("solve node {k}: ridge fallback λ = {l:e}"));
        }

        // Joint fit of `base` on the state and on the state-dependent hedge
        // ratios times the martingale gain increments. The slopes are the
        // hedge ratios `ξ`; the fitted gain is then a zero-mean control that
        // is removed from the value regression.
        let dm_cols: Vec<Vec<f64>> = (0..d).map(|i| driver.gains.dm[i].column(k).to_vec()).collect();
        let dm: Vec<&[f64]> = dm_cols.iter().map(|c| c.as_slice()).collect();
        let aug = AugmentedProjector::new(&refs, &dm, n, &settings.regression).map_err(|e| match e {
            XvaError::Numerical { message, .. } => {
                XvaError::numerical("solve", format!("node {k}, hedge regression"), message)
            }
            other => other,
        })?;
        if let Some(l) = aug.diagnostics.ridge {
            warnings.push(format!("solve node {k}: hedge regression ridge fallback λ = {l:e}"));
        }
        let fit = aug.coefficients(&refs, &dm, &base);
        let level = predict_with(&aug.basis, &fit.level, &refs);
        control.iter_mut().for_each(|c| *c = 0.0);
        for i in 0..d {
            let xi = predict_with(&aug.basis, &fit.slopes[i], &refs);
            let vol = driver.gains.vol[i].column(k);
            for p in 0..n {
                control[p] += xi[p] * dm[i][p];
                zk[i][p] = xi[p] * vol[p];
            }
            z_bar[i].column_mut(k).assign(&Array1::from(zk[i].clone()));
        }
        let resid: Vec<f64> = (0..n).map(|p| level[p] + control[p]).collect();
        let z_rms = vec![rms_diff(&resid, &base)];

        let driver_at = |y: &[f64], out: &mut [f64]| {
            out.par_iter_mut().enumerate().for_each(|(p, o)| {
                let mut zp = [0.0f64; 8];
                let zv: Vec<f64>;
                let z: &[f64] = if d <= 8 {
                    for i in 0..d {
                        zp[i] = zk[i][p];
                    }
                    &zp[..d]
                } else {
                    zv = (0..d).map(|i| zk[i][p]).collect();
                    &zv
                };
                *o = driver.eval(p, k, y[p], z, jb[p], jc[p]);
            });
        };
        driver_at(&base, &mut f);
        for p in 0..n {
            target[p] = base[p] - control[p] + f[p] * dt;
        }
        let mut yk = proj.project(&refs, &target);
        for _ in 0..settings.picard_iters {
            driver_at(&yk, &mut f);
            for p in 0..n {
                target[p] = base[p] - control[p] + f[p] * dt;
            }
            yk = proj.project(&refs, &target);
        }
        for p in 0..n {
            pi[p] += f[p] * dt - control[p];
        }
        let mut fit = proj.diagnostics.clone();
        fit.residual_rms = vec![rms_diff(&yk, &target)];
        diagnostics.push(StepDiagnostics {
            node: k,
            fit,
            z_residual_rms: z_rms,
        });
        if let Some(p) = yk.iter().position(|v| !v.is_finite()) {
            return Err(XvaError::numerical("solve", format!("path {p}, node {k}"), "non-finite value"));
        }
        y_hat.column_mut(k).assign(&Array1::from(yk));
    }
    diagnostics.reverse();

    let y_bar = &y_hat - &terminal.fc;
    let pathwise = mean_se(&pi);
    let y0 = Estimate::new(y_bar[[0, 0]], pathwise.std_error);
    Ok(BsdeSolution {
        y_hat,
        y_bar,
        z_bar,
        y0,
        z0_extrapolated: true,
        diagnostics,
        lipschitz: driver.lipschitz(),
        warnings,
    })
}

/// Defaultable solution `(Y, Z, U^B, U^C)` on every scenario.
#[derive(Clone, Debug)]
pub struct GSolution {
    /// `Y`, frozen after the stop node `min(κ, N)`.
    pub y: Array2<f64>,
    /// `U^j_k = (φ^j_k − Ȳ_k) 1{1 ≤ k ≤ min(κ, N)}`: the jump `Y` would take if
    /// `j` defaulted first in `(t_{k−1}, t_k]`.
    pub u_b: Array2<f64>,
    pub u_c: Array2<f64>,
    stop: Vec<usize>,
}

impl GSolution {
    /// `Z^i_k = Z̄^i_k 1{k < min(κ, N)}`.
    #[inline]
    pub fn z(&self, sol: &BsdeSolution, i: usize, p: usize, k: usize) -> f64 {
        if k < self.stop[p] {
            sol.z_bar[i][[p, k]]
        } else {
            0.0
        }
    }

    pub fn stop_node(&self, p: usize) -> usize {
        self.stop[p]
    }
}

/// Assembles the defaultable solution and checks `Ȳ_k = Y_k` before the stop node.
pub fn assemble_g_solution(
    sol: &BsdeSolution,
    terminal: &TerminalData,
    credit: &CreditScenario,
) -> Result<GSolution> {
    let (n, nodes) = sol.y_bar.dim();
    if credit.n_paths() != n {
        return Err(XvaError::Usage("credit scenario does not match the solution".into()));
    }
    let mut y = Array2::<f64>::zeros((n, nodes));
    let mut u_b = Array2::<f64>::zeros((n, nodes));
    let mut u_c = Array2::<f64>::zeros((n, nodes));
    let stop: Vec<usize> = (0..n).map(|p| credit.stop_node(p)).collect();
    for p in 0..n {
        let s = stop[p];
        for k in 0..s {
            y[[p, k]] = sol.y_bar[[p, k]];
        }
        let ys = terminal.g_terminal(credit, p);
        for k in s..nodes {
            y[[p, k]] = ys;
        }
        for k in 1..=s {
            u_b[[p, k]] = terminal.phi_b[[p, k]] - sol.y_bar[[p, k]];
            u_c[[p, k]] = terminal.phi_c[[p, k]] - sol.y_bar[[p, k]];
        }
        if (0..s).any(|k| y[[p, k]] != sol.y_bar[[p, k]]) {
            return Err(XvaError::numerical("assemble", format!("path {p}"), "pre-default round trip failed"));
        }
    }
    Ok(GSolution { y, u_b, u_c, stop })
}

/// Per-node cross-sectional means of `Y`, `Z^i`, `U^B`, `U^C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeMeans {
    pub node: usize,
    pub time: f64,
    pub y: f64,
    pub z: Vec<f64>,
    pub u_b: f64,
    pub u_c: f64,
}

pub fn node_means(sol: &BsdeSolution, g: &GSolution, bundle: &MarketPathBundle) -> Vec<NodeMeans> {
    let (n, nodes) = g.y.dim();
    let d = sol.z_bar.len();
    let nf = n.max(1) as f64;
    (0..nodes)
        .map(|k| NodeMeans {
            node: k,
            time: bundle.grid.time(k),
            y: g.y.column(k).sum() / nf,
            z: (0..d)
                .map(|i| {
                    if k < nodes - 1 {
                        (0..n).map(|p| g.z(sol, i, p, k)).sum::<f64>() / nf
                    } else {
                        0.0
                    }
                })
                .collect(),
            u_b: g.u_b.column(k).sum() / nf,
            u_c: g.u_c.column(k).sum() / nf,
        })
        .collect()
}
