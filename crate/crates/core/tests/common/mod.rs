//! Shared builders for the integration tests.
#![allow(dead_code)]

use ndarray::Array2;
use xva_core::config::RunConfig;
use xva_core::grid::TimeGrid;
use xva_core::market::{build_accounts, AssetSpec, CoeffSpec, MarketParams, MarketPathBundle, Measure, RateCurve, Rates};

/// Knobs of a one-asset run; `toml()` renders a complete configuration.
#[derive(Clone, Debug)]
pub struct Setup {
    pub paths: usize,
    pub steps: usize,
    pub horizon: f64,
    pub seed: u64,
    pub mu: f64,
    pub sigma: f64,
    pub repo: f64,
    pub funding: f64,
    pub discount: f64,
    pub coll_lend: f64,
    pub coll_borrow: f64,
    pub bank: String,
    pub counterparty: String,
    pub recovery_bank: f64,
    pub recovery_counterparty: f64,
    pub alpha: f64,
    pub threshold: f64,
    pub flows: String,
    pub solver: String,
    pub xva: String,
}

pub fn constant(lambda: f64) -> String {
    format!("model = \"constant\"\nlambda = {lambda:?}\n")
}

pub fn jacobi(kappa: f64, theta: f64, lmax: f64, rho: f64, l0: f64) -> String {
    format!(
        "model = \"jacobi\"\nkappa = {kappa:?}\ntheta = {theta:?}\nlambda_min = 0.0\nlambda_max = {lmax:?}\nrho = {rho:?}\nlambda0 = {l0:?}\n"
    )
}

pub fn call_flow(notional: f64, strike: f64, time: f64) -> String {
    format!(
        "[[contract.flows]]\ntime = {time:?}\nnotional = {notional:?}\npayoff = {{ type = \"call\", asset = 0, strike = {strike:?} }}\n"
    )
}

pub fn fixed_flow(amount: f64, time: f64) -> String {
    format!("[[contract.flows]]\ntime = {time:?}\nnotional = 1.0\npayoff = {{ type = \"fixed\", amount = {amount:?} }}\n")
}

pub fn forward_flow(strike: f64, time: f64) -> String {
    format!(
        "[[contract.flows]]\ntime = {time:?}\nnotional = 1.0\npayoff = {{ type = \"linear\", asset = 0, intercept = {:?}, slope = 1.0 }}\n",
        -strike
    )
}

impl Default for Setup {
    /// Sold at-the-money call in a complete market.
    fn default() -> Self {
        Self {
            paths: 20_000,
            steps: 20,
            horizon: 1.0,
            seed: 7,
            mu: 0.05,
            sigma: 0.2,
            repo: 0.02,
            funding: 0.02,
            discount: 0.02,
            coll_lend: 0.02,
            coll_borrow: 0.02,
            bank: constant(0.0),
            counterparty: constant(0.0),
            recovery_bank: 0.4,
            recovery_counterparty: 0.4,
            alpha: 0.0,
            threshold: 0.0,
            flows: call_flow(-1.0, 100.0, 1.0),
            solver: String::new(),
            xva: String::new(),
        }
    }
}

impl Setup {
    /// The full xVA configuration: long forward, Jacobi intensities, split rates.
    pub fn full_xva() -> Self {
        Self {
            repo: 0.01,
            funding: 0.03,
            discount: 0.02,
            coll_lend: 0.015,
            coll_borrow: 0.025,
            bank: jacobi(1.0, 0.01, 0.05, 0.3, 0.01),
            counterparty: jacobi(1.0, 0.03, 0.1, 0.5, 0.03),
            alpha: 0.8,
            flows: forward_flow(100.0, 1.0),
            ..Self::default()
        }
    }

    pub fn toml(&self) -> String {
        format!(
            r#"schema_version = 1
[grid]
horizon = {horizon:?}
n_steps = {steps}
[mc]
n_paths = {paths}
seed = {seed}
[market]
k_r = 0.5
[[market.assets]]
s0 = 100.0
mu = {mu:?}
sigma = {sigma:?}
repo_rate = {repo:?}
bound = 1.0
[market.rates]
funding = {funding:?}
discount = {discount:?}
coll_lend = {cl:?}
coll_borrow = {cb:?}
[credit.bank]
{bank}[credit.counterparty]
{cpty}[contract]
recovery_bank = {rb:?}
recovery_counterparty = {rc:?}
collateral = {{ alpha = {alpha:?}, threshold = {thr:?} }}
{flows}[solver]
{solver}[xva]
{xva}"#,
            horizon = self.horizon,
            steps = self.steps,
            paths = self.paths,
            seed = self.seed,
            mu = self.mu,
            sigma = self.sigma,
            repo = self.repo,
            funding = self.funding,
            discount = self.discount,
            cl = self.coll_lend,
            cb = self.coll_borrow,
            bank = self.bank,
            cpty = self.counterparty,
            rb = self.recovery_bank,
            rc = self.recovery_counterparty,
            alpha = self.alpha,
            thr = self.threshold,
            flows = self.flows,
            solver = self.solver,
            xva = self.xva,
        )
    }

    pub fn config(&self) -> RunConfig {
        RunConfig::from_toml_str(&self.toml()).expect("test configuration parses")
    }
}

pub fn flat_market(mu: f64, sigma: f64, r: f64) -> MarketParams {
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

/// A bundle with hand-set spot paths (one asset) and zero Brownian increments.
pub fn hand_bundle(params: &MarketParams, grid: TimeGrid, spots: &[&[f64]]) -> MarketPathBundle {
    let n = spots.len();
    let nodes = grid.n_nodes();
    let mut s = Array2::<f64>::zeros((n, nodes));
    for (p, row) in spots.iter().enumerate() {
        assert_eq!(row.len(), nodes);
        for k in 0..nodes {
            s[[p, k]] = row[k];
        }
    }
    MarketPathBundle {
        grid,
        measure: Measure::Historical,
        n_paths: n,
        spots: vec![s],
        dw: vec![Array2::<f64>::zeros((n, grid.n_steps))],
        accounts: build_accounts(params, &grid).expect("accounts"),
    }
}

/// Black–Scholes call price and delta.
pub fn black_scholes_call(s: f64, k: f64, r: f64, sigma: f64, t: f64) -> (f64, f64) {
    use statrs::distribution::{ContinuousCDF, Normal};
    let n = Normal::new(0.0, 1.0).unwrap();
    let d1 = ((s / k).ln() + (r + 0.5 * sigma * sigma) * t) / (sigma * t.sqrt());
    let d2 = d1 - sigma * t.sqrt();
    (s * n.cdf(d1) - k * (-r * t).exp() * n.cdf(d2), n.cdf(d1))
}
