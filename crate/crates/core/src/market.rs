//! Multi-curve market: asset paths, cash accounts and the density of the
//! minimal martingale measure.
//!
//! Assets follow `dS = μ S dt + σ S dW` and are simulated with a log-Euler
//! step, exact when `μ` and `σ` are constant. Every account is
//! `B_{t_k} = exp(Σ_{j<k} r_{t_j} Δt)`.

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};
use crate::grid::TimeGrid;
use crate::rng::{path_stream, Purpose};

/// A drift or volatility coefficient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CoeffSpec {
    Constant(f64),
    AffineLog(AffineLog),
}

/// `clamp(intercept + slope · ln S, floor, cap)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineLog {
    pub intercept: f64,
    pub slope: f64,
    pub floor: f64,
    pub cap: f64,
}

impl CoeffSpec {
    #[inline]
    pub fn eval(&self, spot: f64) -> f64 {
        match *self {
            CoeffSpec::Constant(c) => c,
            CoeffSpec::AffineLog(AffineLog {
                intercept,
                slope,
                floor,
                cap,
            }) => (intercept + slope * spot.ln()).clamp(floor, cap),
        }
    }

    /// Value as a function of `x = ln S`.
    fn eval_log(&self, x: f64) -> f64 {
        match *self {
            CoeffSpec::Constant(c) => c,
            CoeffSpec::AffineLog(AffineLog {
                intercept,
                slope,
                floor,
                cap,
            }) => (intercept + slope * x).clamp(floor, cap),
        }
    }

    /// Log-prices where the coefficient has a kink.
    fn kinks(&self) -> Vec<f64> {
        match *self {
            CoeffSpec::AffineLog(AffineLog {
                intercept,
                slope,
                floor,
                cap,
            }) if slope != 0.0 => [floor, cap]
                .iter()
                .filter(|v| v.is_finite())
                .map(|v| (v - intercept) / slope)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Infimum over all prices.
    fn infimum(&self) -> f64 {
        match *self {
            CoeffSpec::Constant(c) => c,
            CoeffSpec::AffineLog(AffineLog {
                intercept,
                slope,
                floor,
                cap,
            }) => {
                if slope == 0.0 {
                    intercept.clamp(floor, cap)
                } else {
                    floor
                }
            }
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        match *self {
            CoeffSpec::Constant(c) if !c.is_finite() => Err(XvaError::config(field, "must be finite")),
            CoeffSpec::AffineLog(AffineLog {
                intercept,
                slope,
                floor,
                cap,
            }) => {
                if !(intercept.is_finite() && slope.is_finite()) || floor.is_nan() || cap.is_nan() || floor > cap {
                    Err(XvaError::config(field, "affine spec needs finite intercept/slope and floor ≤ cap"))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Deterministic piecewise-constant rate, right-continuous at the breaks:
/// `values[j]` applies on `[breaks[j-1], breaks[j])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateCurve {
    Flat(f64),
    Piecewise(Piecewise),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piecewise {
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl RateCurve {
    pub fn at(&self, t: f64) -> f64 {
        match self {
            RateCurve::Flat(r) => *r,
            RateCurve::Piecewise(Piecewise { breaks, values }) => {
                let j = breaks.iter().take_while(|b| **b <= t).count();
                values[j]
            }
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            RateCurve::Flat(r) => vec![*r],
            RateCurve::Piecewise(Piecewise { values, .. }) => values.clone(),
        }
    }

    fn check(&self, field: &str) -> Result<()> {
        if let RateCurve::Piecewise(Piecewise { breaks, values }) = self {
            if values.len() != breaks.len() + 1 {
                return Err(XvaError::config(field, "piecewise curve needs one more value than breaks"));
            }
            if breaks.windows(2).any(|w| w[1] <= w[0]) {
                return Err(XvaError::config(field, "breaks must be strictly increasing"));
            }
        }
        if self.values().iter().any(|v| !v.is_finite()) {
            return Err(XvaError::config(field, "rates must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssetSpec {
    pub s0: f64,
    pub mu: CoeffSpec,
    pub sigma: CoeffSpec,
    pub repo_rate: RateCurve,
    /// Bound `K_i` on the market price of risk of this asset.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rates {
    /// Treasury rate `r^f`.
    pub funding: RateCurve,
    /// Reference discount rate `r`.
    pub discount: RateCurve,
    /// Rate paid when the bank posts collateral, `r^{c,l}`.
    pub coll_lend: RateCurve,
    /// Rate paid when the bank receives collateral, `r^{c,b}`.
    pub coll_borrow: RateCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    pub assets: Vec<AssetSpec>,
    pub rates: Rates,
    /// Bound `K_r` on every rate.
    pub k_r: f64,
}

impl MarketParams {
    pub fn dim(&self) -> usize {
        self.assets.len()
    }

    /// Every rate curve with the config path that names it.
    pub fn named_rates(&self) -> Vec<(String, &RateCurve)> {
        let mut v: Vec<(String, &RateCurve)> = vec![
            ("market.rates.funding".into(), &self.rates.funding),
            ("market.rates.discount".into(), &self.rates.discount),
            ("market.rates.coll_lend".into(), &self.rates.coll_lend),
            ("market.rates.coll_borrow".into(), &self.rates.coll_borrow),
        ];
        for (i, a) in self.assets.iter().enumerate() {
            v.push((format!("market.assets[{i}].repo_rate"), &a.repo_rate));
        }
        v
    }

    /// Market price of risk of asset `i` at time `t` and price `s`.
    #[inline]
    pub fn theta(&self, i: usize, t: f64, s: f64) -> f64 {
        let a = &self.assets[i];
        (a.mu.eval(s) - a.repo_rate.at(t)) / a.sigma.eval(s)
    }

    /// Structural checks that do not depend on the bounds.
    pub fn check_schema(&self) -> Result<()> {
        if self.assets.is_empty() {
            return Err(XvaError::config("market.assets", "at least one asset is required"));
        }
        if !(self.k_r.is_finite() && self.k_r > 0.0) {
            return Err(XvaError::config("market.k_r", "must be positive"));
        }
        for (i, a) in self.assets.iter().enumerate() {
            if !(a.s0.is_finite() && a.s0 > 0.0) {
                return Err(XvaError::config(format!("market.assets[{i}].s0"), "must be positive"));
            }
            if !(a.bound.is_finite() && a.bound > 0.0) {
                return Err(XvaError::config(format!("market.assets[{i}].bound"), "K_i must be positive"));
            }
            a.mu.check(&format!("market.assets[{i}].mu"))?;
            a.sigma.check(&format!("market.assets[{i}].sigma"))?;
        }
        for (name, c) in self.named_rates() {
            c.check(&name)?;
        }
        Ok(())
    }
}

/// One finding of [`validate_market`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketIssue {
    pub field: String,
    pub message: String,
}

/// Report of [`validate_market`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketValidation {
    pub ok: bool,
    pub issues: Vec<MarketIssue>,
    /// `sup |θ^i|` over prices and times, per asset.
    pub theta_bounds: Vec<f64>,
    /// `sup |r|` over all rate curves.
    pub rate_bound: f64,
    /// `inf σ^i` over prices, per asset.
    pub sigma_min: Vec<f64>,
}

impl MarketValidation {
    /// First issue as a configuration error.
    pub fn into_result(self) -> Result<Self> {
        match self.issues.first() {
            Some(i) => Err(XvaError::config(i.field.clone(), i.message.clone())),
            None => Ok(self),
        }
    }
}

/// Checks whether the bounds `K_r`, `K_i` and `σ > 0` hold for the parametric
/// specs and reports the tightest achieved bounds.
///
/// For the parametric forms `μ` and `σ` are piecewise affine in `ln S`, so
/// `θ = (μ − r)/σ` is monotone between kinks and its supremum is attained at a
/// kink or in the limits `ln S → ±∞`.
pub fn validate_market(params: &MarketParams) -> MarketValidation {
    let mut issues = Vec::new();
    let mut rate_bound: f64 = 0.0;
    for (name, curve) in params.named_rates() {
        let m = curve.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        rate_bound = rate_bound.max(m);
        if m > params.k_r {
            issues.push(MarketIssue {
                field: name,
                message: format!("|rate| = {m} exceeds K_r = {}", params.k_r),
            });
        }
    }
    let mut theta_bounds = Vec::new();
    let mut sigma_min = Vec::new();
    for (i, a) in params.assets.iter().enumerate() {
        let smin = a.sigma.infimum();
        sigma_min.push(smin);
        if !(smin > 0.0) {
            issues.push(MarketIssue {
                field: format!("market.assets[{i}].sigma"),
                message: format!("volatility can reach {smin} ≤ 0"),
            });
            theta_bounds.push(f64::INFINITY);
            continue;
        }
        const FAR: f64 = 1e6;
        let mut xs = vec![-FAR, FAR];
        xs.extend(a.mu.kinks());
        xs.extend(a.sigma.kinks());
        let mut sup: f64 = 0.0;
        for r in a.repo_rate.values() {
            for &x in &xs {
                let th = (a.mu.eval_log(x) - r) / a.sigma.eval_log(x);
                sup = sup.max(th.abs());
            }
        }
        // An unclamped drift against a clamped volatility is unbounded.
        if let CoeffSpec::AffineLog(AffineLog { slope, floor, cap, .. }) = a.mu {
            if slope != 0.0 && (floor.is_infinite() || cap.is_infinite()) {
                sup = f64::INFINITY;
            }
        }
        theta_bounds.push(sup);
        if sup > a.bound {
            issues.push(MarketIssue {
                field: format!("market.assets[{i}].bound"),
                message: format!("market price of risk reaches {sup}, above K_{i} = {}", a.bound),
            });
        }
    }
    MarketValidation {
        ok: issues.is_empty(),
        issues,
        theta_bounds,
        rate_bound,
        sigma_min,
    }
}

/// Deterministic account values at the nodes; every scenario shares them.
#[derive(Clone, Debug, PartialEq)]
pub struct Accounts {
    /// `B^i` per asset.
    pub repo: Vec<Vec<f64>>,
    pub funding: Vec<f64>,
    pub discount: Vec<f64>,
    /// Collateral rates at the nodes (resolved against the collateral sign later).
    pub coll_lend_rate: Vec<f64>,
    pub coll_borrow_rate: Vec<f64>,
    pub funding_rate: Vec<f64>,
    pub discount_rate: Vec<f64>,
}

fn account(curve: &RateCurve, grid: &TimeGrid) -> Vec<f64> {
    let dt = grid.dt();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(grid.n_nodes());
    out.push(1.0);
    for k in 0..grid.n_steps {
        acc += curve.at(grid.time(k)) * dt;
        out.push(acc.exp());
    }
    out
}

fn node_rates(curve: &RateCurve, grid: &TimeGrid) -> Vec<f64> {
    (0..grid.n_nodes()).map(|k| curve.at(grid.time(k))).collect()
}

/// Builds every account with a left-point quadrature of `∫ r ds`.
pub fn build_accounts(params: &MarketParams, grid: &TimeGrid) -> Result<Accounts> {
    for (name, curve) in params.named_rates() {
        curve.check(&name)?;
        let m = curve.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > params.k_r {
            return Err(XvaError::config(name, format!("|rate| = {m} exceeds K_r = {}", params.k_r)));
        }
    }
    Ok(Accounts {
        repo: params.assets.iter().map(|a| account(&a.repo_rate, grid)).collect(),
        funding: account(&params.rates.funding, grid),
        discount: account(&params.rates.discount, grid),
        coll_lend_rate: node_rates(&params.rates.coll_lend, grid),
        coll_borrow_rate: node_rates(&params.rates.coll_borrow, grid),
        funding_rate: node_rates(&params.rates.funding, grid),
        discount_rate: node_rates(&params.rates.discount, grid),
    })
}

/// Probability measure a bundle was simulated under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Measure {
    /// Historical drift `μ^i`.
    Historical,
    /// Drift replaced by the repo rate `r^i` (minimal martingale measure).
    RiskNeutral,
}

/// Simulated scenarios on a grid.
#[derive(Clone, Debug)]
pub struct MarketPathBundle {
    pub grid: TimeGrid,
    pub measure: Measure,
    pub n_paths: usize,
    /// `S^i`, one `n_paths × (N + 1)` array per asset.
    pub spots: Vec<Array2<f64>>,
    /// `ΔW^{f,i}_{t_k}`, one `n_paths × N` array per asset.
    pub dw: Vec<Array2<f64>>,
    pub accounts: Accounts,
}

impl MarketPathBundle {
    pub fn dim(&self) -> usize {
        self.spots.len()
    }

    /// Discounted price `S̃^i = S^i / B^i`.
    #[inline]
    pub fn discounted(&self, i: usize, p: usize, k: usize) -> f64 {
        self.spots[i][[p, k]] / self.accounts.repo[i][k]
    }

    /// Column `k` of asset `i` as a contiguous vector.
    pub fn spot_column(&self, i: usize, k: usize) -> Vec<f64> {
        self.spots[i].column(k).to_vec()
    }
}

/// Brownian resolution: each grid step is the sum of `substeps` finer normal
/// increments, so a run with `(N, 2)` sees the same Brownian path as `(2N, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSettings {
    pub n_paths: usize,
    pub seed: u64,
    pub substeps: usize,
}

/// Draws `n_steps × dim` Brownian increments for one path.
pub(crate) fn brownian_row(
    rng: &mut impl rand::Rng,
    n_steps: usize,
    dim: usize,
    substeps: usize,
    dt: f64,
    out: &mut [f64],
) {
    let h = (dt / substeps as f64).sqrt();
    out.iter_mut().for_each(|x| *x = 0.0);
    for k in 0..n_steps {
        for _ in 0..substeps {
            for i in 0..dim {
                let z: f64 = StandardNormal.sample(rng);
                out[k * dim + i] += h * z;
            }
        }
    }
}

/// Simulates the assets with the log-Euler scheme under `measure`.
pub fn simulate_assets(
    params: &MarketParams,
    grid: &TimeGrid,
    sim: &SimSettings,
    measure: Measure,
) -> Result<MarketPathBundle> {
    if sim.n_paths == 0 {
        return Err(XvaError::config("mc.n_paths", "must be at least 1"));
    }
    if sim.substeps == 0 {
        return Err(XvaError::config("mc.brownian_substeps", "must be at least 1"));
    }
    params.check_schema()?;
    let accounts = build_accounts(params, grid)?;
    let d = params.dim();
    let n = sim.n_paths;
    let steps = grid.n_steps;
    let dt = grid.dt();
    let purpose = match measure {
        Measure::Historical => Purpose::Assets,
        Measure::RiskNeutral => Purpose::RiskNeutralAssets,
    };
    let times = grid.times();
    let repo: Vec<Vec<f64>> = params
        .assets
        .iter()
        .map(|a| times.iter().map(|t| a.repo_rate.at(*t)).collect())
        .collect();

    // Row-major per path: [dw (steps × d) | log-spot (nodes × d)].
    let width = steps * d + (steps + 1) * d;
    let mut buf = Array2::<f64>::zeros((n, width));
    let failures: Vec<Option<String>> = buf
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map(|(p, mut row)| {
            let row = row.as_slice_mut().expect("contiguous row");
            let (dw, spots) = row.split_at_mut(steps * d);
            let mut rng = path_stream(sim.seed, purpose, p);
            brownian_row(&mut rng, steps, d, sim.substeps, dt, dw);
            for i in 0..d {
                spots[i] = params.assets[i].s0;
            }
            for k in 0..steps {
                for i in 0..d {
                    let a = &params.assets[i];
                    let s = spots[k * d + i];
                    let sig = a.sigma.eval(s);
                    if sig < 0.0 || !sig.is_finite() {
                        return Some(format!("path {p}, node {k}, asset {i}: σ = {sig}"));
                    }
                    let drift = match measure {
                        Measure::Historical => a.mu.eval(s),
                        Measure::RiskNeutral => repo[i][k],
                    };
                    let next = s * ((drift - 0.5 * sig * sig) * dt + sig * dw[k * d + i]).exp();
                    if !(next > 0.0 && next.is_finite()) {
                        return Some(format!("path {p}, node {}, asset {i}: S = {next}", k + 1));
                    }
                    spots[(k + 1) * d + i] = next;
                }
            }
            None
        })
        .collect();
    if let Some(msg) = failures.into_iter().flatten().next() {
        return Err(XvaError::numerical("simulate_assets", msg, "non-positive volatility or price"));
    }
    let mut spots_out = vec![Array2::<f64>::zeros((n, steps + 1)); d];
    let mut dw_out = vec![Array2::<f64>::zeros((n, steps)); d];
    for p in 0..n {
        let row = buf.row(p);
        for i in 0..d {
            for k in 0..steps {
                dw_out[i][[p, k]] = row[k * d + i];
            }
            for k in 0..=steps {
                spots_out[i][[p, k]] = row[steps * d + k * d + i];
            }
        }
    }
    Ok(MarketPathBundle {
        grid: *grid,
        measure,
        n_paths: n,
        spots: spots_out,
        dw: dw_out,
        accounts,
    })
}

/// Density `𝒵` of the minimal martingale measure together with the market
/// price of risk used to build it.
#[derive(Clone, Debug)]
pub struct Density {
    /// `𝒵_{t_k}`, `n_paths × (N + 1)`.
    pub z: Array2<f64>,
    /// `θ^i_{t_k}` for `k < N`, one `n_paths × N` array per asset.
    pub theta: Vec<Array2<f64>>,
}

/// `𝒵_{t_k} = exp(−Σ_i Σ_{j<k} θ^i ΔW^i − ½ Σ_i Σ_{j<k} (θ^i)² Δt)`, so that
/// `𝒵 S̃^i` is a martingale under the historical measure.
pub fn density_process(bundle: &MarketPathBundle, params: &MarketParams) -> Result<Density> {
    let grid = bundle.grid;
    let (n, steps, d, dt) = (bundle.n_paths, grid.n_steps, bundle.dim(), grid.dt());
    let mut theta = vec![Array2::<f64>::zeros((n, steps)); d];
    let mut err = None;
    'outer: for i in 0..d {
        let a = &params.assets[i];
        for k in 0..steps {
            let t = grid.time(k);
            let r = a.repo_rate.at(t);
            for p in 0..n {
                let s = bundle.spots[i][[p, k]];
                let sig = a.sigma.eval(s);
                let th = (a.mu.eval(s) - r) / sig;
                if !(th.abs() <= a.bound) {
                    err = Some(XvaError::config(
                        format!("market.assets[{i}].bound"),
                        format!("|θ| = {} exceeds K_{i} = {} on path {p}, node {k}", th.abs(), a.bound),
                    ));
                    break 'outer;
                }
                theta[i][[p, k]] = th;
            }
        }
    }
    if let Some(e) = err {
        return Err(e);
    }
    let mut z = Array2::<f64>::zeros((n, steps + 1));
    z.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(p, mut row)| {
            let mut log_z = 0.0;
            row[0] = 1.0;
            for k in 0..steps {
                for i in 0..d {
                    let th = theta[i][[p, k]];
                    log_z += -th * bundle.dw[i][[p, k]] - 0.5 * th * th * dt;
                }
                row[k + 1] = log_z.exp();
            }
        });
    Ok(Density { z, theta })
}

/// Per-step increments of the traded gains, in funding-discounted units.
#[derive(Clone, Debug)]
pub struct GainIncrements {
    /// `(B^i_k/B^f_k)(S̃^i_{k+1} − E_k[S̃^i_{k+1}])`: the martingale part of the
    /// gain from holding one unit of asset `i` over `(t_k, t_{k+1}]`, `n × N`.
    pub dm: Vec<Array2<f64>>,
    /// `S^i_k σ^i(S^i_k) / B^f_k`, `n × N`; maps units of asset into `Z^i`.
    pub vol: Vec<Array2<f64>>,
}

/// Exact one-step conditional means are available because the log-Euler step
/// freezes the coefficients over the step.
pub fn gain_increments(bundle: &MarketPathBundle, params: &MarketParams) -> GainIncrements {
    let grid = bundle.grid;
    let (n, steps, dt) = (bundle.n_paths, grid.n_steps, grid.dt());
    let acc = &bundle.accounts;
    let mut dm = Vec::with_capacity(bundle.dim());
    let mut vol = Vec::with_capacity(bundle.dim());
    for (i, a) in params.assets.iter().enumerate() {
        let mut m = Array2::<f64>::zeros((n, steps));
        let mut v = Array2::<f64>::zeros((n, steps));
        for k in 0..steps {
            let r = a.repo_rate.at(grid.time(k));
            let w = acc.repo[i][k] / acc.funding[k];
            for p in 0..n {
                let s = bundle.spots[i][[p, k]];
                let drift = match bundle.measure {
                    Measure::Historical => a.mu.eval(s),
                    Measure::RiskNeutral => r,
                };
                let mean = bundle.discounted(i, p, k) * ((drift - r) * dt).exp();
                m[[p, k]] = w * (bundle.discounted(i, p, k + 1) - mean);
                v[[p, k]] = s * a.sigma.eval(s) / acc.funding[k];
            }
        }
        dm.push(m);
        vol.push(v);
    }
    GainIncrements { dm, vol }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn bs_params(mu: f64, sigma: f64, r: f64) -> MarketParams {
        MarketParams {
            assets: vec![AssetSpec {
                s0: 100.0,
                mu: CoeffSpec::Constant(mu),
                sigma: CoeffSpec::Constant(sigma),
                repo_rate: RateCurve::Flat(r),
                bound: 1.0,
            }],
            rates: Rates {
                funding: RateCurve::Flat(r),
                discount: RateCurve::Flat(r),
                coll_lend: RateCurve::Flat(r),
                coll_borrow: RateCurve::Flat(r),
            },
            k_r: 0.5,
        }
    }

    #[test]
    fn zero_rate_account_is_one() {
        let p = bs_params(0.05, 0.2, 0.0);
        let acc = build_accounts(&p, &TimeGrid::new(1.0, 10).unwrap()).unwrap();
        assert!(acc.funding.iter().all(|b| *b == 1.0));
    }

    #[test]
    fn flat_rate_account_matches_exponential() {
        let p = bs_params(0.05, 0.2, 0.02);
        let acc = build_accounts(&p, &TimeGrid::new(1.0, 50).unwrap()).unwrap();
        assert!((acc.discount[50] - 0.02f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn piecewise_account_matches_fine_quadrature() {
        let mut p = bs_params(0.05, 0.2, 0.0);
        p.rates.funding = RateCurve::Piecewise(Piecewise {
            breaks: vec![0.5],
            values: vec![0.01, 0.03],
        });
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let acc = build_accounts(&p, &grid).unwrap();
        // Independent oracle: midpoint rule on a 10x finer grid.
        let m = 200;
        let h = 1.0 / m as f64;
        let integral: f64 = (0..m)
            .map(|j| {
                let t = (j as f64 + 0.5) * h;
                if t < 0.5 { 0.01 } else { 0.03 }
            })
            .sum::<f64>()
            * h;
        assert!((acc.funding[20] - integral.exp()).abs() < 1e-14);
        assert!((acc.funding[20] - 0.02f64.exp()).abs() < 1e-14);
    }

    #[test]
    fn rate_bound_violation_names_rate() {
        let mut p = bs_params(0.05, 0.2, 0.0);
        p.rates.discount = RateCurve::Flat(0.9);
        let e = build_accounts(&p, &TimeGrid::new(1.0, 4).unwrap()).unwrap_err();
        assert!(e.to_string().contains("market.rates.discount"));
    }

    #[test]
    fn zero_volatility_is_the_ode_limit() {
        let p = bs_params(0.05, 0.0, 0.0);
        let g = TimeGrid::new(1.0, 8).unwrap();
        let sim = SimSettings { n_paths: 5, seed: 1, substeps: 1 };
        let b = simulate_assets(&p, &g, &sim, Measure::Historical).unwrap();
        for p in 0..5 {
            assert!((b.spots[0][[p, 8]] - 100.0 * 0.05f64.exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn negative_volatility_aborts_with_location() {
        let p = bs_params(0.05, -0.1, 0.0);
        let g = TimeGrid::new(1.0, 4).unwrap();
        let sim = SimSettings { n_paths: 3, seed: 1, substeps: 1 };
        let e = simulate_assets(&p, &g, &sim, Measure::Historical).unwrap_err();
        assert!(e.to_string().contains("path 0, node 0"));
    }

    #[test]
    fn validation_reports_theta_bound() {
        let mut p = bs_params(0.05, 0.2, 0.01);
        let v = validate_market(&p);
        assert!(v.ok);
        assert!((v.theta_bounds[0] - 0.2).abs() < 1e-15);
        p.assets[0].mu = CoeffSpec::Constant(0.01);
        assert_eq!(validate_market(&p).theta_bounds[0], 0.0);
    }

    #[test]
    fn validation_names_sigma_that_reaches_zero() {
        let mut p = bs_params(0.05, 0.2, 0.01);
        p.assets[0].sigma = CoeffSpec::AffineLog(AffineLog {
            intercept: 0.2,
            slope: 0.1,
            floor: 0.0,
            cap: 1.0,
        });
        let v = validate_market(&p);
        assert!(!v.ok);
        assert_eq!(v.issues[0].field, "market.assets[0].sigma");
    }

    #[test]
    fn validation_finds_sup_at_kink() {
        let mut p = bs_params(0.05, 0.2, 0.0);
        p.assets[0].sigma = CoeffSpec::AffineLog(AffineLog {
            intercept: 0.2,
            slope: 0.1,
            floor: 0.1,
            cap: 0.5,
        });
        let v = validate_market(&p);
        assert!((v.theta_bounds[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_market_price_of_risk_gives_unit_density() {
        let p = bs_params(0.02, 0.2, 0.02);
        let g = TimeGrid::new(1.0, 10).unwrap();
        let sim = SimSettings { n_paths: 20, seed: 3, substeps: 1 };
        let b = simulate_assets(&p, &g, &sim, Measure::Historical).unwrap();
        let d = density_process(&b, &p).unwrap();
        assert!(d.z.iter().all(|z| *z == 1.0));
    }

    #[test]
    fn theta_bound_is_enforced_pathwise() {
        let mut p = bs_params(0.3, 0.2, 0.0);
        p.assets[0].bound = 1.0;
        let g = TimeGrid::new(1.0, 4).unwrap();
        let sim = SimSettings { n_paths: 2, seed: 3, substeps: 1 };
        let b = simulate_assets(&p, &g, &sim, Measure::Historical).unwrap();
        let e = density_process(&b, &p).unwrap_err();
        assert!(e.to_string().contains("market.assets[0].bound"));
    }

    #[test]
    fn substeps_match_a_finer_grid() {
        let p = bs_params(0.05, 0.2, 0.0);
        let coarse = simulate_assets(
            &p,
            &TimeGrid::new(1.0, 5).unwrap(),
            &SimSettings { n_paths: 4, seed: 9, substeps: 2 },
            Measure::Historical,
        )
        .unwrap();
        let fine = simulate_assets(
            &p,
            &TimeGrid::new(1.0, 10).unwrap(),
            &SimSettings { n_paths: 4, seed: 9, substeps: 1 },
            Measure::Historical,
        )
        .unwrap();
        for q in 0..4 {
            for k in 0..=5 {
                let a = coarse.spots[0][[q, k]];
                let b = fine.spots[0][[q, 2 * k]];
                assert!((a - b).abs() < 1e-10 * a, "{a} vs {b}");
            }
        }
    }
}
