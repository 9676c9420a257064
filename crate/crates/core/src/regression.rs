//! Least-squares projection onto polynomial bases.
//!
//! Every conditional expectation in the engine is estimated by regressing a
//! pathwise quantity on all monomials of total degree `≤ p` in standardized
//! covariates. Covariates that are (numerically) constant across scenarios are
//! dropped, which is what happens at `t = 0` where every scenario shares the
//! same state. Normal equations whose condition number exceeds the configured
//! threshold are solved with a ridge penalty instead, and the penalty is
//! recorded.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XvaError};

/// Fixed chunk length for reductions; independent of the worker count.
const CHUNK: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSettings {
    pub degree: usize,
    /// Relative ridge strength (multiplies the largest eigenvalue of `XᵀX`).
    pub ridge_lambda: f64,
    /// Condition number of `XᵀX` above which the ridge fallback is used.
    pub max_condition: f64,
}

impl Default for RegressionSettings {
    fn default() -> Self {
        Self {
            degree: 3,
            ridge_lambda: 1e-8,
            max_condition: 1e8,
        }
    }
}

/// Monomial basis over standardized covariates.
#[derive(Clone, Debug)]
pub struct Basis {
    degree: usize,
    /// Indices of the covariates that survived the variance screen.
    active: Vec<usize>,
    center: Vec<f64>,
    scale: Vec<f64>,
    /// Exponent tuples over the active covariates, graded by total degree.
    exponents: Vec<Vec<usize>>,
}

impl Basis {
    /// Builds the basis from the covariate columns, dropping constant ones.
    pub fn from_columns(cols: &[&[f64]], degree: usize) -> (Self, Vec<usize>) {
        let mut active = Vec::new();
        let mut center = Vec::new();
        let mut scale = Vec::new();
        let mut dropped = Vec::new();
        for (j, col) in cols.iter().enumerate() {
            let n = col.len().max(1) as f64;
            let m = col.iter().sum::<f64>() / n;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
            let sd = v.sqrt();
            if sd > 1e-10 * m.abs().max(1.0) && degree > 0 {
                active.push(j);
                center.push(m);
                scale.push(sd);
            } else {
                dropped.push(j);
            }
        }
        let exponents = monomials(active.len(), degree);
        (
            Self {
                degree,
                active,
                center,
                scale,
                exponents,
            },
            dropped,
        )
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    /// Evaluates all basis functions at the point returned by `x(j)` for the
    /// original covariate index `j`.
    pub fn fill(&self, x: impl Fn(usize) -> f64, out: &mut [f64], pow: &mut Vec<f64>) {
        let p1 = self.degree + 1;
        pow.clear();
        pow.resize(self.active.len() * p1, 1.0);
        for (a, &j) in self.active.iter().enumerate() {
            let z = (x(j) - self.center[a]) / self.scale[a];
            for e in 1..p1 {
                pow[a * p1 + e] = pow[a * p1 + e - 1] * z;
            }
        }
        for (slot, exps) in out.iter_mut().zip(&self.exponents) {
            let mut v = 1.0;
            for (a, &e) in exps.iter().enumerate() {
                if e > 0 {
                    v *= pow[a * p1 + e];
                }
            }
            *slot = v;
        }
    }
}

/// All exponent tuples in `m` variables with total degree `≤ p`, constant first.
fn monomials(m: usize, p: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![0; m]];
    for total in 1..=p {
        let mut cur = vec![0; m];
        push_degree(&mut out, &mut cur, 0, total);
    }
    out
}

fn push_degree(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, left: usize) {
    if pos + 1 == cur.len() {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    if cur.is_empty() {
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        push_degree(out, cur, pos + 1, left - e);
    }
    cur[pos] = 0;
}

/// Diagnostics of one least-squares solve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_basis: usize,
    pub dropped_covariates: Vec<usize>,
    pub condition_number: f64,
    /// Absolute ridge penalty when the fallback was used.
    pub ridge: Option<f64>,
    /// Root mean squared in-sample residual per target.
    pub residual_rms: Vec<f64>,
}

/// Factorized normal equations over one design; projects any number of
/// targets observed on the same scenarios.
#[derive(Clone, Debug)]
pub struct Projector {
    pub basis: Basis,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub diagnostics: FitDiagnostics,
    n: usize,
}

type RowFill<'a> = dyn Fn(usize, &mut [f64], &mut Vec<f64>) + Sync + 'a;

/// `XᵀX` for a design whose row `i` is produced by `fill`.
fn gram(n: usize, q: usize, fill: &RowFill<'_>) -> DMatrix<f64> {
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut xtx = vec![0.0; q * q];
            let mut row = vec![0.0; q];
            let mut pow = Vec::new();
            for i in lo..hi {
                fill(i, &mut row, &mut pow);
                for a in 0..q {
                    let ra = row[a];
                    for b in a..q {
                        xtx[a * q + b] += ra * row[b];
                    }
                }
            }
            xtx
        })
        .collect();
    let mut m = DMatrix::<f64>::zeros(q, q);
    for part in &partials {
        for a in 0..q {
            for b in a..q {
                m[(a, b)] += part[a * q + b];
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// `Xᵀy` for the same design.
fn cross(n: usize, q: usize, fill: &RowFill<'_>, target: &[f64]) -> DVector<f64> {
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut xty = vec![0.0; q];
            let mut row = vec![0.0; q];
            let mut pow = Vec::new();
            for i in lo..hi {
                fill(i, &mut row, &mut pow);
                let y = target[i];
                for a in 0..q {
                    xty[a] += row[a] * y;
                }
            }
            xty
        })
        .collect();
    let mut rhs = DVector::<f64>::zeros(q);
    for part in &partials {
        for a in 0..q {
            rhs[a] += part[a];
        }
    }
    rhs
}

type Factor = (nalgebra::Cholesky<f64, nalgebra::Dyn>, f64, Option<f64>);

/// Cholesky of the normal matrix, with the ridge fallback when it is
/// ill-conditioned. Returns the factor, the condition number and the penalty.
fn factor(mut m: DMatrix<f64>, settings: &RegressionSettings) -> Result<Factor> {
    let q = m.nrows();
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let lmax = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lmin = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let cond = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    let mut ridge = None;
    if !(cond <= settings.max_condition) {
        let lam = settings.ridge_lambda.max(f64::EPSILON) * lmax.max(f64::MIN_POSITIVE);
        for a in 0..q {
            m[(a, a)] += lam;
        }
        ridge = Some(lam);
    }
    let chol = m.cholesky().ok_or_else(|| {
        XvaError::numerical("regression", format!("{q} basis functions"), "normal equations not positive definite")
    })?;
    Ok((chol, cond, ridge))
}

fn check_shape(cols: &[&[f64]], n: usize) -> Result<()> {
    if n == 0 {
        return Err(XvaError::Usage("regression on an empty sample".into()));
    }
    if cols.iter().any(|c| c.len() != n) {
        return Err(XvaError::Usage("regression columns of unequal length".into()));
    }
    Ok(())
}

impl Projector {
    /// Builds and factorizes `XᵀX` for the covariate columns `cols`.
    pub fn new(cols: &[&[f64]], n: usize, settings: &RegressionSettings) -> Result<Self> {
        check_shape(cols, n)?;
        let (basis, dropped) = Basis::from_columns(cols, settings.degree);
        let p = basis.len();
        let fill = |i: usize, row: &mut [f64], pow: &mut Vec<f64>| basis.fill(|j| cols[j][i], row, pow);
        let (chol, cond, ridge) = factor(gram(n, p, &fill), settings)?;
        Ok(Self {
            basis,
            chol,
            diagnostics: FitDiagnostics {
                n_basis: p,
                dropped_covariates: dropped,
                condition_number: cond,
                ridge,
                residual_rms: Vec::new(),
            },
            n,
        })
    }

    /// Least-squares coefficients of `target` on the basis.
    pub fn coefficients(&self, cols: &[&[f64]], target: &[f64]) -> Vec<f64> {
        assert_eq!(target.len(), self.n, "target length");
        let basis = &self.basis;
        let fill = |i: usize, row: &mut [f64], pow: &mut Vec<f64>| basis.fill(|j| cols[j][i], row, pow);
        let rhs = cross(self.n, basis.len(), &fill, target);
        self.chol.solve(&rhs).iter().cloned().collect()
    }

    /// Fitted values of `target` at the design points.
    pub fn project(&self, cols: &[&[f64]], target: &[f64]) -> Vec<f64> {
        let coef = self.coefficients(cols, target);
        predict_with(&self.basis, &coef, cols)
    }
}

/// Least squares on the design `[φ(x), φ(x)·u_1, …, φ(x)·u_m]`: a function of
/// the state plus state-dependent slopes on the multipliers `u`.
///
/// With `u` the increment of a traded gain, the slopes are the one-period
/// variance-minimizing hedge ratios and the residual is orthogonal, in
/// sample, to every `φ_a(x)·u_i`.
#[derive(Clone, Debug)]
pub struct AugmentedProjector {
    pub basis: Basis,
    /// Multiplier indices with non-zero spread, and their RMS scale.
    active: Vec<(usize, f64)>,
    n_mult: usize,
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub diagnostics: FitDiagnostics,
    n: usize,
}

/// Coefficients of an augmented fit.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFit {
    /// Coefficients of the state function.
    pub level: Vec<f64>,
    /// Coefficients of the slope on each multiplier (zero for inactive ones).
    pub slopes: Vec<Vec<f64>>,
}

impl AugmentedProjector {
    pub fn new(cols: &[&[f64]], mult: &[&[f64]], n: usize, settings: &RegressionSettings) -> Result<Self> {
        check_shape(cols, n)?;
        check_shape(mult, n)?;
        let (basis, dropped) = Basis::from_columns(cols, settings.degree);
        let active: Vec<(usize, f64)> = mult
            .iter()
            .enumerate()
            .filter_map(|(j, u)| {
                let s = (u.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
                (s > 0.0 && s.is_finite()).then_some((j, s))
            })
            .collect();
        let q = basis.len() * (1 + active.len());
        let mut me = Self {
            basis,
            active,
            n_mult: mult.len(),
            chol: DMatrix::<f64>::identity(1, 1).cholesky().expect("identity"),
            diagnostics: FitDiagnostics::default(),
            n,
        };
        let (chol, cond, ridge) = factor(gram(n, q, &me.row_fill(cols, mult)), settings)?;
        me.chol = chol;
        me.diagnostics = FitDiagnostics {
            n_basis: q,
            dropped_covariates: dropped,
            condition_number: cond,
            ridge,
            residual_rms: Vec::new(),
        };
        Ok(me)
    }

    fn row_fill<'a>(&'a self, cols: &'a [&'a [f64]], mult: &'a [&'a [f64]]) -> impl Fn(usize, &mut [f64], &mut Vec<f64>) + Sync + 'a {
        let p = self.basis.len();
        move |i, row, pow| {
            let (head, tail) = row.split_at_mut(p);
            self.basis.fill(|j| cols[j][i], head, pow);
            for (b, &(j, s)) in self.active.iter().enumerate() {
                let u = mult[j][i] / s;
                for a in 0..p {
                    tail[b * p + a] = head[a] * u;
                }
            }
        }
    }

    pub fn coefficients(&self, cols: &[&[f64]], mult: &[&[f64]], target: &[f64]) -> AugmentedFit {
        assert_eq!(target.len(), self.n, "target length");
        let p = self.basis.len();
        let q = p * (1 + self.active.len());
        let rhs = cross(self.n, q, &self.row_fill(cols, mult), target);
        let c: Vec<f64> = self.chol.solve(&rhs).iter().cloned().collect();
        let mut slopes = vec![vec![0.0; p]; self.n_mult];
        for (b, &(j, s)) in self.active.iter().enumerate() {
            slopes[j] = c[(b + 1) * p..(b + 2) * p].iter().map(|v| v / s).collect();
        }
        AugmentedFit {
            level: c[..p].to_vec(),
            slopes,
        }
    }
}

/// Evaluates `Σ_a coef_a · basis_a` at the points given by `cols`.
pub fn predict_with(basis: &Basis, coef: &[f64], cols: &[&[f64]]) -> Vec<f64> {
    let n = cols.first().map_or(0, |c| c.len());
    let p = basis.len();
    if cols.is_empty() {
        return Vec::new();
    }
    (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut row = vec![0.0; p];
            let mut pow = Vec::new();
            (lo..hi)
                .map(|i| {
                    basis.fill(|j| cols[j][i], &mut row, &mut pow);
                    row.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Coefficients for several targets over one basis.
#[derive(Clone, Debug)]
pub struct LsqFit {
    pub basis: Basis,
    pub coefs: Vec<Vec<f64>>,
    pub diagnostics: FitDiagnostics,
}

impl LsqFit {
    /// Fits each target column on the basis built from `cols`.
    pub fn fit(cols: &[&[f64]], targets: &[&[f64]], settings: &RegressionSettings) -> Result<Self> {
        let n = targets.first().map_or(0, |t| t.len());
        if targets.iter().any(|t| t.len() != n) {
            return Err(XvaError::Usage("regression targets of unequal length".into()));
        }
        let proj = Projector::new(cols, n, settings)?;
        let coefs: Vec<Vec<f64>> = targets.iter().map(|t| proj.coefficients(cols, t)).collect();
        let mut diagnostics = proj.diagnostics.clone();
        diagnostics.residual_rms = targets
            .iter()
            .zip(&coefs)
            .map(|(t, c)| {
                let pred = predict_with(&proj.basis, c, cols);
                let ss: f64 = pred.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (ss / n as f64).sqrt()
            })
            .collect();
        Ok(Self {
            basis: proj.basis,
            coefs,
            diagnostics,
        })
    }

    /// Fitted function of target `t` evaluated at the points given by `cols`.
    pub fn predict(&self, t: usize, cols: &[&[f64]]) -> Vec<f64> {
        predict_with(&self.basis, &self.coefs[t], cols)
    }

    /// Fitted function of target `t` at a single point.
    pub fn eval(&self, t: usize, x: &[f64]) -> f64 {
        let mut row = vec![0.0; self.basis.len()];
        let mut pow = Vec::new();
        self.basis.fill(|j| x[j], &mut row, &mut pow);
        row.iter().zip(&self.coefs[t]).map(|(a, b)| a * b).sum()
    }
}
