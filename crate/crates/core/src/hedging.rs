//! Locally risk-minimizing strategy, cost process and Föllmer–Schweizer checks.
//!
//! All stochastic integrals are left-point sums on the grid, stopped at
//! `min(κ, N)`; integrands are zero from the stop node on.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::bsde::{BsdeSolution, GSolution};
use crate::contract::CashflowLedger;
use crate::credit::{CreditScenario, FirstDefault};
use crate::error::{Result, XvaError};
use crate::market::{gain_increments, Density, MarketParams, MarketPathBundle};
use crate::stats::{covariance_se, mean_se, Estimate};

/// Volatility below which `ξ = Z B^f / (S σ)` is treated as singular.
pub const SIGMA_FLOOR: f64 = 1e-8;

/// Hedge positions on every scenario and node.
#[derive(Clone, Debug)]
pub struct StrategyPaths {
    /// Units of asset `i`, one `n × (N + 1)` array per asset.
    pub xi: Vec<Array2<f64>>,
    /// Units of repo account `i`: `ψ^i = −ξ^i S^i / B^i`.
    pub psi: Vec<Array2<f64>>,
    /// Units of the funding account: `ψ^f = Y + ∫ (1/B^f) dA^{R,C}`.
    pub psi_f: Array2<f64>,
}

impl StrategyPaths {
    /// `max |ξ^i S^i + ψ^i B^i|` over all scenarios, nodes and assets.
    pub fn repo_constraint_gap(&self, bundle: &MarketPathBundle) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.xi.len() {
            for ((p, k), x) in self.xi[i].indexed_iter() {
                let g = x * bundle.spots[i][[p, k]] + self.psi[i][[p, k]] * bundle.accounts.repo[i][k];
                worst = worst.max(g.abs());
            }
        }
        worst
    }
}

/// Builds `ξ`, `ψ`, `ψ^f` from the defaultable solution.
pub fn extract_strategy(
    sol: &BsdeSolution,
    g: &GSolution,
    bundle: &MarketPathBundle,
    params: &MarketParams,
    ledger: &CashflowLedger,
) -> Result<StrategyPaths> {
    let grid = bundle.grid;
    let (n, nodes, d) = (bundle.n_paths, grid.n_nodes(), bundle.dim());
    let acc = &bundle.accounts;
    let mut xi = Vec::with_capacity(d);
    let mut psi = Vec::with_capacity(d);
    for i in 0..d {
        let sigma = &params.assets[i].sigma;
        let mut x = Array2::<f64>::zeros((n, nodes));
        let mut bad: Option<(usize, usize, f64)> = None;
        for p in 0..n {
            for k in 0..g.stop_node(p) {
                let s = bundle.spots[i][[p, k]];
                let sig = sigma.eval(s);
                if !(sig >= SIGMA_FLOOR) {
                    bad = Some((p, k, sig));
                    break;
                }
                x[[p, k]] = g.z(sol, i, p, k) * acc.funding[k] / (s * sig);
            }
            if bad.is_some() {
                break;
            }
        }
        if let Some((p, k, sig)) = bad {
            return Err(XvaError::numerical(
                "hedge",
                format!("path {p}, node {k}, asset {i}"),
                format!("σ = {sig:e} below the floor {SIGMA_FLOOR:e}"),
            ));
        }
        let mut y = Array2::<f64>::zeros((n, nodes));
        for ((p, k), v) in y.indexed_iter_mut() {
            *v = -x[[p, k]] * bundle.spots[i][[p, k]] / acc.repo[i][k];
        }
        xi.push(x);
        psi.push(y);
    }
    let psi_f = &g.y + &ledger.disc_flows;
    Ok(StrategyPaths { xi, psi, psi_f })
}

/// Cost process and the pieces of the stopped Föllmer–Schweizer decomposition.
#[derive(Clone, Debug)]
pub struct CostAndFs {
    /// `Σ_i ∫ ξ^i (B^i/B^f) dS̃^i`, `n × (N + 1)`.
    pub gains: Array2<f64>,
    /// `𝒞 = −∫(1/B^f) dA^{R,C} + ψ^f − gains`.
    pub cost: Array2<f64>,
    /// `H^ℒ = Σ_j ∫ U^j dM^j`.
    pub orthogonal: Array2<f64>,
    /// `h_0 = Y_0`.
    pub h0: f64,
    /// `ρ_FS = −ℒ_{τ∧T} − (h_0 + gains + H^ℒ)` at the stop node.
    pub residual: Vec<f64>,
    /// `−ℒ_{τ∧T}`.
    pub target: Vec<f64>,
    /// `K_{τ∧T} = Σ_i ∫ θ_i² du` up to the stop node.
    pub tradeoff: Vec<f64>,
    pub stop: Vec<usize>,
}

/// Increment of the jump martingale of party `j` over `(t_{k−1}, t_k]`, with
/// the jump counted only for the first defaulter.
fn jump_increment(credit: &CreditScenario, p: usize, k: usize, bank: bool) -> f64 {
    let grid = credit.grid;
    let (t0, t1) = (grid.time(k - 1), grid.time(k));
    let tau = credit.tau[p];
    let lam = if bank { credit.lambda_b[[p, k - 1]] } else { credit.lambda_c[[p, k - 1]] };
    let comp = if t0 < tau { lam * (t1.min(tau) - t0) } else { 0.0 };
    let who = if bank { FirstDefault::Bank } else { FirstDefault::Counterparty };
    let jump = if credit.default_node[p] == k && credit.first[p] == who { 1.0 } else { 0.0 };
    jump - comp
}

pub fn cost_process(
    strategy: &StrategyPaths,
    sol: &BsdeSolution,
    g: &GSolution,
    bundle: &MarketPathBundle,
    density: &Density,
    ledger: &CashflowLedger,
    credit: &CreditScenario,
) -> Result<CostAndFs> {
    let grid = bundle.grid;
    let (n, nodes, d, dt) = (bundle.n_paths, grid.n_nodes(), bundle.dim(), grid.dt());
    if ledger.l.nrows() != n || credit.n_paths() != n {
        return Err(XvaError::Usage("cost inputs come from mismatched scenario sets".into()));
    }
    let acc = &bundle.accounts;
    let h0 = sol.y0.value;
    let mut gains = Array2::<f64>::zeros((n, nodes));
    let mut orth = Array2::<f64>::zeros((n, nodes));
    let mut tradeoff = vec![0.0; n];
    ndarray::Zip::indexed(gains.axis_iter_mut(Axis(0)))
        .and(orth.axis_iter_mut(Axis(0)))
        .and(&mut tradeoff)
        .par_for_each(|p, mut gr, mut hr, kt| {
            let s = g.stop_node(p);
            let (mut gsum, mut hsum, mut ksum) = (0.0, 0.0, 0.0);
            for k in 1..nodes {
                if k <= s {
                    let l = k - 1;
                    for i in 0..d {
                        let ds = bundle.discounted(i, p, k) - bundle.discounted(i, p, l);
                        gsum += strategy.xi[i][[p, l]] * acc.repo[i][l] / acc.funding[l] * ds;
                        let th = density.theta[i][[p, l]];
                        ksum += th * th * dt;
                    }
                    hsum += g.u_b[[p, k]] * jump_increment(credit, p, k, true)
                        + g.u_c[[p, k]] * jump_increment(credit, p, k, false);
                }
                gr[k] = gsum;
                hr[k] = hsum;
            }
            *kt = ksum;
        });
    let cost = &strategy.psi_f - &ledger.disc_flows - &gains;
    let stop: Vec<usize> = (0..n).map(|p| g.stop_node(p)).collect();
    let target: Vec<f64> = ledger.terminal.iter().map(|l| -l).collect();
    let residual: Vec<f64> = (0..n)
        .map(|p| target[p] - (h0 + gains[[p, stop[p]]] + orth[[p, stop[p]]]))
        .collect();
    Ok(CostAndFs {
        gains,
        cost,
        orthogonal: orth,
        h0,
        residual,
        target,
        tradeoff,
        stop,
    })
}

/// One statistical test at a node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeTest {
    pub node: usize,
    pub asset: Option<usize>,
    pub estimate: Estimate,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub mean: f64,
    pub rms: f64,
    /// `rms(ρ_FS) / rms(ℒ_{τ∧T})`.
    pub relative_l2: f64,
}

/// Report of the hedging checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FsDiagnostics {
    pub residual: ResidualStats,
    pub martingale: Vec<NodeTest>,
    pub martingale_pass: bool,
    pub orthogonality: Vec<NodeTest>,
    pub orthogonality_pass: bool,
    /// `max |B^f ψ^f − C 1{τ>T}|` at the stop node.
    pub zero_achieving_max: f64,
    /// `max |ψ^f − Y − ∫(1/B^f) dA^{R,C}|`.
    pub psi_f_reconstruction_max: f64,
    pub repo_constraint_max: f64,
    pub tradeoff_max: f64,
    pub tradeoff_bound: f64,
    pub tradeoff_violations: usize,
}

/// Multiple of the standard error used by the statistical tests.
pub const TEST_SIGMAS: f64 = 3.0;

#[allow(clippy::too_many_arguments)]
pub fn fs_residual_and_checks(
    cf: &CostAndFs,
    strategy: &StrategyPaths,
    g: &GSolution,
    bundle: &MarketPathBundle,
    params: &MarketParams,
    ledger: &CashflowLedger,
    state_c: &Array2<f64>,
) -> FsDiagnostics {
    let grid = bundle.grid;
    let (n, nodes, d) = (bundle.n_paths, grid.n_nodes(), bundle.dim());
    let acc = &bundle.accounts;
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let r_rms = rms(&cf.residual);
    let residual = ResidualStats {
        mean: crate::stats::mean(&cf.residual),
        rms: r_rms,
        relative_l2: r_rms / rms(&cf.target).max(f64::MIN_POSITIVE),
    };

    let mut martingale = Vec::with_capacity(nodes - 1);
    let mut orthogonality = Vec::with_capacity((nodes - 1) * d);
    let inc = gain_increments(bundle, params);
    let mut dc = vec![0.0; n];
    let mut dx = vec![0.0; n];
    for k in 1..nodes {
        for p in 0..n {
            dc[p] = cf.cost[[p, k]] - cf.cost[[p, k - 1]];
        }
        let est = mean_se(&dc);
        martingale.push(NodeTest {
            node: k,
            asset: None,
            estimate: est,
            pass: est.within(0.0, TEST_SIGMAS, 1e-12),
        });
        for i in 0..d {
            for p in 0..n {
                dx[p] = if k - 1 < cf.stop[p] { inc.dm[i][[p, k - 1]] } else { 0.0 };
            }
            let est = covariance_se(&dc, &dx);
            orthogonality.push(NodeTest {
                node: k,
                asset: Some(i),
                estimate: est,
                pass: est.within(0.0, TEST_SIGMAS, 1e-12),
            });
        }
    }

    let mut zero_max = 0.0f64;
    let mut recon_max = 0.0f64;
    for p in 0..n {
        let s = cf.stop[p];
        let alive_at_t = ledger.closeouts[p].is_none();
        let c = if alive_at_t { state_c[[p, s]] } else { 0.0 };
        zero_max = zero_max.max((acc.funding[s] * strategy.psi_f[[p, s]] - c).abs());
        for k in 0..nodes {
            let r = strategy.psi_f[[p, k]] - g.y[[p, k]] - ledger.disc_flows[[p, k]];
            recon_max = recon_max.max(r.abs());
        }
    }
    let kmax = params.assets.iter().map(|a| a.bound).fold(0.0, f64::max);
    let bound = d as f64 * kmax * kmax * grid.horizon;
    let tmax = cf.tradeoff.iter().cloned().fold(0.0, f64::max);
    // A relative slack of a few ulps absorbs the rounding of the sum itself.
    let violations = cf.tradeoff.iter().filter(|t| **t > bound * (1.0 + 1e-12)).count();
    FsDiagnostics {
        residual,
        martingale_pass: martingale.iter().all(|t| t.pass),
        martingale,
        orthogonality_pass: orthogonality.iter().all(|t| t.pass),
        orthogonality,
        zero_achieving_max: zero_max,
        psi_f_reconstruction_max: recon_max,
        repo_constraint_max: strategy.repo_constraint_gap(bundle),
        tradeoff_max: tmax,
        tradeoff_bound: bound,
        tradeoff_violations: violations,
    }
}
