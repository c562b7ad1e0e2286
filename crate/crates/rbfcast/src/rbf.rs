//! Gaussian radial basis evaluation, interpolation-matrix assembly,
//! regularized coefficient solves, and interpolant evaluation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, Point};

/// Gaussian radial kernel with shape parameter sigma:
/// `phi(r) = exp(-r^2 / (2 sigma^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub sigma: f64,
}

impl RbfKernel {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::Invalid(format!(
                "kernel shape parameter must be positive and finite, got {sigma}"
            )));
        }
        Ok(RbfKernel { sigma })
    }

    pub fn value(&self, r: f64) -> f64 {
        debug_assert!(r >= 0.0);
        (-r * r / (2.0 * self.sigma * self.sigma)).exp()
    }

    /// d phi / d sigma at radius r: `phi(r) * r^2 / sigma^3`.
    pub fn value_dsigma(&self, r: f64) -> f64 {
        self.value(r) * r * r / (self.sigma * self.sigma * self.sigma)
    }

    /// Closed-form Laplacian of the kernel in dimension d:
    /// `lap phi(r) = phi(r) * (r^2 - d sigma^2) / sigma^4`.
    pub fn laplacian(&self, r: f64, dim: usize) -> f64 {
        let s2 = self.sigma * self.sigma;
        self.value(r) * (r * r - dim as f64 * s2) / (s2 * s2)
    }
}

/// Default shape parameter: twice the mean nearest-neighbor distance of the
/// given sites.
pub fn default_sigma(points: &[Point]) -> f64 {
    assert!(points.len() >= 2, "need at least two sites");
    let mut total = 0.0;
    for (i, p) in points.iter().enumerate() {
        let nn = points
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, q)| dist(p, q))
            .fold(f64::INFINITY, f64::min);
        total += nn;
    }
    2.0 * total / points.len() as f64
}

/// Interpolation matrix: entry (i, j) = phi(|eval_i - center_j|).
pub fn assemble_phi(
    kernel: &RbfKernel,
    eval_points: &[Point],
    centers: &[Point],
) -> Result<DMatrix<f64>> {
    let d = centers.first().map(|c| c.len()).unwrap_or(0);
    if eval_points.iter().chain(centers).any(|p| p.len() != d) {
        return Err(Error::Dimension(
            "eval points and centers must share one dimension".into(),
        ));
    }
    Ok(DMatrix::from_fn(eval_points.len(), centers.len(), |i, j| {
        kernel.value(dist(&eval_points[i], &centers[j]))
    }))
}

/// Pairwise distance matrix (i, j) = |a_i - b_j|.
pub fn pairwise_distances(a: &[Point], b: &[Point]) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| dist(&a[i], &b[j]))
}

/// Reusable factorization for the ridge problem
/// `min |Phi c - u|^2 + lambda |c|^2`.
///
/// With `lambda > 0` the normal equations `(Phi^T Phi + lambda I)` are SPD
/// and solved by Cholesky (column-pivoted QR of the stacked system as a
/// fallback). With `lambda = 0` a column-pivoted QR of `Phi` itself is used,
/// which avoids squaring the condition number and gives a reliable rank
/// test; rank-deficient systems are reported as solver failures.
pub struct RidgeSolver {
    phi: DMatrix<f64>,
    lambda: f64,
    factor: Factor,
}

enum Factor {
    Chol(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    /// Column-pivoted QR of either `Phi` (lambda = 0) or `[Phi; sqrt(lambda) I]`;
    /// `rows` is the factored row count for right-hand-side padding.
    Qr {
        qr: nalgebra::ColPivQR<f64, nalgebra::Dyn, nalgebra::Dyn>,
        rows: usize,
    },
    /// Rectangular lambda = 0 systems.
    Svd(nalgebra::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

/// Relative rank cutoff for the orthogonal-factorization paths.
const RANK_TOL: f64 = 1e-13;

impl RidgeSolver {
    pub fn new(phi: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "ridge parameter must be nonnegative, got {lambda}"
            )));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite entries in Phi".into()));
        }
        let factor = if lambda > 0.0 {
            let mut normal = phi.transpose() * phi;
            for i in 0..normal.nrows() {
                normal[(i, i)] += lambda;
            }
            match normal.cholesky() {
                Some(chol) => {
                    warn_if_ill_conditioned(&chol);
                    Factor::Chol(chol)
                }
                None => {
                    // Stack sqrt(lambda) I below Phi so the QR solves the
                    // same regularized least-squares problem.
                    let m = phi.ncols();
                    let mut s = DMatrix::zeros(phi.nrows() + m, m);
                    s.rows_mut(0, phi.nrows()).copy_from(phi);
                    for i in 0..m {
                        s[(phi.nrows() + i, i)] = lambda.sqrt();
                    }
                    let rows = s.nrows();
                    Factor::Qr {
                        qr: s.col_piv_qr(),
                        rows,
                    }
                }
            }
        } else if phi.is_square() {
            let qr = phi.clone().col_piv_qr();
            if rank_deficient(&qr.r()) {
                return Err(Error::Solver(
                    "singular interpolation system (lambda = 0)".into(),
                ));
            }
            Factor::Qr {
                qr,
                rows: phi.nrows(),
            }
        } else {
            let svd = phi.clone().svd(true, true);
            let smax = svd.singular_values.max();
            if svd.singular_values.iter().any(|&s| s <= RANK_TOL * smax) {
                return Err(Error::Solver(
                    "rank-deficient least-squares system (lambda = 0)".into(),
                ));
            }
            Factor::Svd(svd)
        };
        Ok(RidgeSolver {
            phi: phi.clone(),
            lambda,
            factor,
        })
    }

    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Coefficients for one or more right-hand sides (columns of `values`).
    pub fn solve(&self, values: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if values.nrows() != self.phi.nrows() {
            return Err(Error::Dimension(format!(
                "value rows {} do not match Phi rows {}",
                values.nrows(),
                self.phi.nrows()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite entries in values".into()));
        }
        match &self.factor {
            Factor::Chol(chol) => Ok(chol.solve(&(self.phi.transpose() * values))),
            Factor::Qr { qr, rows } => {
                let mut rhs = DMatrix::zeros(*rows, values.ncols());
                rhs.rows_mut(0, values.nrows()).copy_from(values);
                qr.solve(&rhs)
                    .ok_or_else(|| Error::Solver("QR solve failed".into()))
            }
            Factor::Svd(svd) => svd
                .solve(values, 1e-300)
                .map_err(|e| Error::Solver(e.to_string())),
        }
    }

    /// Solve `(Phi^T Phi + lambda I) w = rhs`, the adjoint system used when
    /// differentiating through the ridge solution.
    pub fn solve_normal(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match &self.factor {
            Factor::Chol(chol) => Ok(chol.solve(rhs)),
            _ => {
                let mut normal = self.phi.transpose() * &self.phi;
                for i in 0..normal.nrows() {
                    normal[(i, i)] += self.lambda;
                }
                normal
                    .svd(true, true)
                    .solve(rhs, 1e-300)
                    .map_err(|e| Error::Solver(e.to_string()))
            }
        }
    }
}

fn rank_deficient(r: &DMatrix<f64>) -> bool {
    let k = r.nrows().min(r.ncols());
    let rmax = (0..k).map(|i| r[(i, i)].abs()).fold(0.0f64, f64::max);
    r.nrows() < r.ncols() || (0..k).any(|i| r[(i, i)].abs() <= RANK_TOL * rmax)
}

fn warn_if_ill_conditioned(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) {
    let l = chol.l_dirty();
    let diag: Vec<f64> = (0..l.nrows()).map(|i| l[(i, i)]).collect();
    let dmax = diag.iter().fold(0.0f64, |m, &v| m.max(v));
    let dmin = diag.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if dmin <= 0.0 || dmax / dmin > 1e6 {
        // diag ratio of L approximates sqrt of the normal-matrix condition,
        // i.e. roughly the condition of Phi itself.
        log::warn!(
            "interpolation matrix looks severely ill-conditioned (estimate {:.2e})",
            (dmax / dmin).powi(2)
        );
    }
}

/// One-shot ridge solve: minimizer of `|Phi c - u|^2 + lambda |c|^2`.
pub fn solve_coefficients(
    phi: &DMatrix<f64>,
    values: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    RidgeSolver::new(phi, lambda)?.solve(values)
}

/// Evaluate the interpolant `sum_j c_j phi(|x - x_j|)` at a single point.
pub fn eval_interpolant(
    kernel: &RbfKernel,
    centers: &[Point],
    coefficients: &DVector<f64>,
    x: &[f64],
) -> Result<f64> {
    if centers.len() != coefficients.len() {
        return Err(Error::Dimension(format!(
            "{} centers vs {} coefficients",
            centers.len(),
            coefficients.len()
        )));
    }
    if centers.iter().any(|c| c.len() != x.len()) {
        return Err(Error::Dimension(
            "query point dimension does not match centers".into(),
        ));
    }
    Ok(centers
        .iter()
        .zip(coefficients.iter())
        .map(|(c, &w)| w * kernel.value(dist(c, x)))
        .sum())
}
