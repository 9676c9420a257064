//! Monte Carlo engine for valuation adjustments under local risk-minimization.
//!
//! The pipeline runs in stages, each of which lives in its own module:
//!
//! 1. [`market`]: multi-curve asset and account paths plus the minimal
//!    martingale density on a fixed time grid;
//! 2. [`credit`]: intensities, default times and compensated default martingales;
//! 3. [`contract`]: clean value, collateral, close-out and the cashflow ledger;
//! 4. [`bsde`]: backward least-squares solution of the pre-default BSDE and
//!    assembly of the full solution `(Y, Z, U^B, U^C)`;
//! 5. [`hedging`]: hedge ratios, cost process and Föllmer–Schweizer residuals;
//! 6. [`xva`]: CVA, DVA, ColVA, FVA, two-step CVA and KVA.
//!
//! [`pipeline`] wires the stages together for the `xva` command-line tool and
//! the Python bindings.

pub mod bsde;
pub mod cache;
pub mod config;
pub mod contract;
pub mod credit;
pub mod error;
pub mod grid;
pub mod hedging;
pub mod market;
pub mod pipeline;
pub mod regression;
pub mod report;
pub mod rng;
pub mod stats;
pub mod xva;

pub use error::{Result, XvaError};
pub use grid::TimeGrid;
