//! Default intensities, default times and compensated default martingales.
//!
//! Default times follow the Cox construction: with independent unit
//! exponentials `E^j`, `τ^j` is the first time the hazard `Γ^j = ∫ λ^j`
//! reaches `E^j`. The triggers are independent of every Brownian driver.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::grid::TimeGrid;
use crate::market::{brownian_row, MarketPathBundle};
use crate::rng::{path_stream, Purpose};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Party {
    Bank,
    Counterparty,
}

/// Intensity of one party.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntensityModel {
    Constant {
        lambda: f64,
    },
    /// `dλ = κ(θ − λ)dt + √((λ_max − λ)(λ − λ_min)) (ρ dW^{f,1} + √(1 − ρ²) dW^⊥)`.
    Jacobi {
        kappa: f64,
        theta: f64,
        lambda_min: f64,
        lambda_max: f64,
        rho: f64,
        lambda0: f64,
    },
}

impl IntensityModel {
    pub fn is_stochastic(&self) -> bool {
        match *self {
            IntensityModel::Constant { .. } => false,
            IntensityModel::Jacobi {
                lambda_min, lambda_max, ..
            } => lambda_max > lambda_min,
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match *self {
            IntensityModel::Constant { lambda } => lambda,
            IntensityModel::Jacobi { lambda_max, .. } => lambda_max,
        }
    }

    pub fn validate(&self, field: &str) -> Result<()> {
        match *self {
            IntensityModel::Constant { lambda } => {
                if !(lambda.is_finite() && lambda >= 0.0) {
                    return Err(XvaError::config(format!("{field}.lambda"), "must be finite and ≥ 0"));
                }
            }
            IntensityModel::Jacobi {
                kappa,
                theta,
                lambda_min,
                lambda_max,
                rho,
                lambda0,
            } => {
                let bad = |k: &str, m: &str| Err(XvaError::config(format!("{field}.{k}"), m.to_string()));
                if !(lambda_min >= 0.0 && lambda_min.is_finite()) {
                    return bad("lambda_min", "must be finite and ≥ 0");
                }
                if !(lambda_max >= lambda_min && lambda_max.is_finite()) {
                    return bad("lambda_max", "must be finite and ≥ lambda_min");
                }
                if !(kappa > 0.0 && kappa.is_finite()) {
                    return bad("kappa", "must be positive");
                }
                if !(theta > 0.0 && theta.is_finite()) {
                    return bad("theta", "must be positive");
                }
                if !(rho > -1.0 && rho < 1.0) {
                    return bad("rho", "must lie in (-1, 1)");
                }
                if !(lambda0 >= lambda_min && lambda0 <= lambda_max) {
                    return bad("lambda0", "must lie in [lambda_min, lambda_max]");
                }
            }
        }
        Ok(())
    }

    /// Fills `out` (length `N + 1`) with one intensity path driven by the
    /// first-asset increments `dw_f` and orthogonal increments `dw_perp`.
    pub fn path_into(&self, dt: f64, dw_f: &[f64], dw_perp: &[f64], out: &mut [f64]) {
        match *self {
            IntensityModel::Constant { lambda } => out.iter_mut().for_each(|x| *x = lambda),
            IntensityModel::Jacobi {
                kappa,
                theta,
                lambda_min,
                lambda_max,
                rho,
                lambda0,
            } => {
                let rho_perp = (1.0 - rho * rho).sqrt();
                out[0] = lambda0;
                for k in 0..dw_f.len() {
                    let l = out[k];
                    let var = ((lambda_max - l) * (l - lambda_min)).max(0.0);
                    let shock = rho * dw_f[k] + rho_perp * dw_perp[k];
                    let next = l + kappa * (theta - l) * dt + var.sqrt() * shock;
                    out[k + 1] = next.clamp(lambda_min, lambda_max);
                }
            }
        }
    }
}

/// Intensities of both parties.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditModel {
    pub bank: IntensityModel,
    pub counterparty: IntensityModel,
}

impl CreditModel {
    pub fn validate(&self) -> Result<()> {
        self.bank.validate("credit.bank")?;
        self.counterparty.validate("credit.counterparty")
    }

    pub fn model(&self, party: Party) -> &IntensityModel {
        match party {
            Party::Bank => &self.bank,
            Party::Counterparty => &self.counterparty,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.bank.is_stochastic() || self.counterparty.is_stochastic()
    }
}

/// Who defaulted first, if anyone did before `T`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FirstDefault {
    None,
    Bank,
    Counterparty,
}

/// Simulated default information per scenario.
#[derive(Clone, Debug)]
pub struct CreditScenario {
    pub grid: TimeGrid,
    pub lambda_b: Array2<f64>,
    pub lambda_c: Array2<f64>,
    /// Trapezoid hazard `Γ^j` at the nodes.
    pub gamma_b: Array2<f64>,
    pub gamma_c: Array2<f64>,
    /// Default times; `f64::INFINITY` means "after `T`".
    pub tau_b: Vec<f64>,
    pub tau_c: Vec<f64>,
    pub tau: Vec<f64>,
    pub first: Vec<FirstDefault>,
    /// First node `κ` with `t_κ ≥ τ`; `N + 1` when `τ > T`.
    pub default_node: Vec<usize>,
    /// Scenarios whose two defaults fell in the same grid step.
    pub tie_paths: Vec<usize>,
}

impl CreditScenario {
    pub fn n_paths(&self) -> usize {
        self.tau.len()
    }

    pub fn lambda(&self, party: Party) -> &Array2<f64> {
        match party {
            Party::Bank => &self.lambda_b,
            Party::Counterparty => &self.lambda_c,
        }
    }

    pub fn tau_of(&self, party: Party) -> &[f64] {
        match party {
            Party::Bank => &self.tau_b,
            Party::Counterparty => &self.tau_c,
        }
    }

    /// Last node on which the scenario is alive and not past `T`: `min(κ, N)`.
    #[inline]
    pub fn stop_node(&self, p: usize) -> usize {
        self.default_node[p].min(self.grid.n_steps)
    }

    pub fn defaulted(&self, p: usize) -> bool {
        self.first[p] != FirstDefault::None
    }
}

/// Simulates the intensity of `party` on every scenario of `bundle`.
pub fn simulate_intensities(
    model: &IntensityModel,
    party: Party,
    bundle: &MarketPathBundle,
    seed: u64,
    substeps: usize,
) -> Result<Array2<f64>> {
    let field = match party {
        Party::Bank => "credit.bank",
        Party::Counterparty => "credit.counterparty",
    };
    model.validate(field)?;
    let grid = bundle.grid;
    let (n, steps, dt) = (bundle.n_paths, grid.n_steps, grid.dt());
    let purpose = match party {
        Party::Bank => Purpose::IntensityBank,
        Party::Counterparty => Purpose::IntensityCounterparty,
    };
    let mut out = Array2::<f64>::zeros((n, steps + 1));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let row = row.as_slice_mut().expect("contiguous row");
            let mut perp = vec![0.0; steps];
            if model.is_stochastic() {
                let mut rng = path_stream(seed, purpose, p);
                brownian_row(&mut rng, steps, 1, substeps, dt, &mut perp);
            }
            let dw_f: Vec<f64> = bundle.dw[0].row(p).to_vec();
            model.path_into(dt, &dw_f, &perp, row);
        });
    Ok(out)
}

/// Trapezoid hazard `Γ_{t_k} = Σ_{j<k} ½(λ_j + λ_{j+1})Δt`.
pub fn hazard(lambda: &Array2<f64>, grid: &TimeGrid) -> Array2<f64> {
    let dt = grid.dt();
    let mut g = Array2::<f64>::zeros(lambda.raw_dim());
    for (mut gr, lr) in g.axis_iter_mut(Axis(0)).zip(lambda.axis_iter(Axis(0))) {
        let mut acc = 0.0;
        for k in 1..lr.len() {
            acc += 0.5 * (lr[k - 1] + lr[k]) * dt;
            gr[k] = acc;
        }
    }
    g
}

/// Inverse-hazard time: the node-linear interpolation of `Γ` crossing `e`.
fn crossing(gamma: ndarray::ArrayView1<f64>, e: f64, grid: &TimeGrid) -> f64 {
    let n = gamma.len();
    if gamma[n - 1] < e {
        return f64::INFINITY;
    }
    let mut k = 1;
    while gamma[k] < e {
        k += 1;
    }
    let (g0, g1) = (gamma[k - 1], gamma[k]);
    let frac = if g1 > g0 { (e - g0) / (g1 - g0) } else { 1.0 };
    grid.time(k - 1) + frac * grid.dt()
}

/// Samples default times of both parties from the given intensity paths.
pub fn sample_default_times(
    lambda_b: Array2<f64>,
    lambda_c: Array2<f64>,
    grid: &TimeGrid,
    seed: u64,
) -> Result<CreditScenario> {
    if lambda_b.dim() != lambda_c.dim() || lambda_b.ncols() != grid.n_nodes() {
        return Err(XvaError::Usage("intensity paths do not match the grid".into()));
    }
    if lambda_b.iter().chain(lambda_c.iter()).any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(XvaError::Usage("intensities must be finite and nonnegative".into()));
    }
    let n = lambda_b.nrows();
    let gamma_b = hazard(&lambda_b, grid);
    let gamma_c = hazard(&lambda_c, grid);
    let draws: Vec<(f64, f64, f64, FirstDefault, usize, bool)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_stream(seed, Purpose::DefaultTriggers, p);
            let e_b: f64 = Exp1.sample(&mut rng);
            let e_c: f64 = Exp1.sample(&mut rng);
            let tb = crossing(gamma_b.row(p), e_b, grid);
            let tc = crossing(gamma_c.row(p), e_c, grid);
            let (kb, kc) = (grid.ceil_node(tb), grid.ceil_node(tc));
            let tau = tb.min(tc);
            let node = kb.min(kc);
            if tau.is_infinite() {
                return (tb, tc, tau, FirstDefault::None, grid.n_steps + 1, false);
            }
            let tie = kb == kc;
            let first = if tie {
                let mut coin = path_stream(seed, Purpose::TieBreak, p);
                if coin.random::<bool>() {
                    FirstDefault::Bank
                } else {
                    FirstDefault::Counterparty
                }
            } else if tb < tc {
                FirstDefault::Bank
            } else {
                FirstDefault::Counterparty
            };
            (tb, tc, tau, first, node, tie)
        })
        .collect();
    let mut sc = CreditScenario {
        grid: *grid,
        lambda_b,
        lambda_c,
        gamma_b,
        gamma_c,
        tau_b: Vec::with_capacity(n),
        tau_c: Vec::with_capacity(n),
        tau: Vec::with_capacity(n),
        first: Vec::with_capacity(n),
        default_node: Vec::with_capacity(n),
        tie_paths: Vec::new(),
    };
    for (p, (tb, tc, tau, first, node, tie)) in draws.into_iter().enumerate() {
        sc.tau_b.push(tb);
        sc.tau_c.push(tc);
        sc.tau.push(tau);
        sc.first.push(first);
        sc.default_node.push(node);
        if tie {
            sc.tie_paths.push(p);
        }
    }
    Ok(sc)
}

/// Runs intensity simulation and default sampling for both parties.
pub fn simulate_credit(
    model: &CreditModel,
    bundle: &MarketPathBundle,
    seed: u64,
    substeps: usize,
) -> Result<CreditScenario> {
    model.validate()?;
    let lb = simulate_intensities(&model.bank, Party::Bank, bundle, seed, substeps)?;
    let lc = simulate_intensities(&model.counterparty, Party::Counterparty, bundle, seed, substeps)?;
    sample_default_times(lb, lc, &bundle.grid, seed)
}

/// `M^j_{t_k} = 1{τ^j ≤ t_k} − ∫_0^{t_k ∧ τ^j} λ^j du`, with `λ` held at its
/// left node value on each step.
pub fn compensated_martingale(sc: &CreditScenario, party: Party) -> Array2<f64> {
    let grid = sc.grid;
    let lambda = sc.lambda(party);
    let tau = sc.tau_of(party);
    let mut m = Array2::<f64>::zeros(lambda.raw_dim());
    for (p, mut row) in m.axis_iter_mut(Axis(0)).enumerate() {
        let mut comp = 0.0;
        for k in 1..grid.n_nodes() {
            let (t0, t1) = (grid.time(k - 1), grid.time(k));
            if t0 < tau[p] {
                comp += lambda[[p, k - 1]] * (t1.min(tau[p]) - t0);
            }
            let jump = if tau[p] <= t1 { 1.0 } else { 0.0 };
            row[k] = jump - comp;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_scenario(lb: f64, lc: f64, n: usize, grid: TimeGrid, seed: u64) -> CreditScenario {
        let b = Array2::from_elem((n, grid.n_nodes()), lb);
        let c = Array2::from_elem((n, grid.n_nodes()), lc);
        sample_default_times(b, c, &grid, seed).unwrap()
    }

    #[test]
    fn degenerate_jacobi_is_constant() {
        let m = IntensityModel::Jacobi {
            kappa: 1.0,
            theta: 0.03,
            lambda_min: 0.03,
            lambda_max: 0.03,
            rho: 0.5,
            lambda0: 0.03,
        };
        let mut out = vec![0.0; 5];
        m.path_into(0.1, &[0.3, -0.2, 0.1, 0.5], &[1.0, 1.0, -1.0, 0.0], &mut out);
        assert!(out.iter().all(|l| *l == 0.03));
        assert!(!m.is_stochastic());
    }

    #[test]
    fn zero_intensity_never_defaults() {
        let sc = const_scenario(0.0, 0.0, 100, TimeGrid::new(1.0, 10).unwrap(), 1);
        assert!(sc.tau_c.iter().all(|t| t.is_infinite()));
        assert!(sc.first.iter().all(|f| *f == FirstDefault::None));
        let m = compensated_martingale(&sc, Party::Counterparty);
        assert!(m.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn martingale_on_a_known_default() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let mut sc = const_scenario(0.0, 0.1, 1, grid, 1);
        sc.tau_c[0] = 0.4;
        let m = compensated_martingale(&sc, Party::Counterparty);
        assert!((m[[0, 10]] - (1.0 - 0.04)).abs() < 1e-15);
        assert!((m[[0, 3]] + 0.03).abs() < 1e-15);
    }

    #[test]
    fn invalid_jacobi_is_a_config_error() {
        let m = IntensityModel::Jacobi {
            kappa: 1.0,
            theta: 0.03,
            lambda_min: 0.0,
            lambda_max: 0.1,
            rho: 1.0,
            lambda0: 0.03,
        };
        let e = m.validate("credit.bank").unwrap_err();
        assert!(e.to_string().contains("credit.bank.rho"));
    }

    #[test]
    fn crossing_interpolates_inside_step() {
        let grid = TimeGrid::new(1.0, 4).unwrap();
        let g = ndarray::arr1(&[0.0, 0.1, 0.2, 0.3, 0.4]);
        assert!((crossing(g.view(), 0.15, &grid) - 0.375).abs() < 1e-15);
        assert!(crossing(g.view(), 0.5, &grid).is_infinite());
    }
}
