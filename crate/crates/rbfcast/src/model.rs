//! The learned PDE stepper: derivative-feature extraction, D-tensor assembly,
//! one-step updates, boundary handling, stability analysis, and multi-step
//! forecasting at sites and off-site query points.
//!
//! One step of the scheme: solve the RBF system for coefficients of the
//! current field, contract them with the h learned derivative matrices,
//! map the per-site features through the output network, and advance in
//! time with the binomial finite-difference stencil of order p. Boundary
//! sites are overwritten with the prescribed Dirichlet values each step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Point, SiteSet};
use crate::nn::MlpParams;
use crate::rbf::{assemble_phi, RbfKernel, RidgeSolver};

/// The learned pair (L-net, F-net) plus kernel shape, temporal order and
/// variable count. The pure-linear variant has `f_net = None`, `h = 1`,
/// `m_vars = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorModel {
    pub l_net: MlpParams,
    pub f_net: Option<MlpParams>,
    pub kernel: RbfKernel,
    /// Temporal order of the underlying PDE.
    pub p: usize,
    /// Number of coupled field variables.
    pub m_vars: usize,
    /// Width of the derivative-feature vector.
    pub h: usize,
    /// Spatial dimension.
    pub dim: usize,
    /// Default ridge parameter for coefficient solves.
    pub lambda: f64,
}

impl OperatorModel {
    pub fn new(
        l_net: MlpParams,
        f_net: Option<MlpParams>,
        kernel: RbfKernel,
        p: usize,
        m_vars: usize,
        h: usize,
        dim: usize,
        lambda: f64,
    ) -> Result<Self> {
        let model = OperatorModel {
            l_net,
            f_net,
            kernel,
            p,
            m_vars,
            h,
            dim,
            lambda,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.h == 0 || self.m_vars == 0 || self.dim == 0 {
            return Err(Error::Schema(
                "p, h, M and dim must all be positive".into(),
            ));
        }
        self.l_net.validate()?;
        if self.l_net.input_width() != 2 * self.dim + 1 {
            return Err(Error::Schema(format!(
                "L-net input width {} != 2d+1 = {}",
                self.l_net.input_width(),
                2 * self.dim + 1
            )));
        }
        if self.l_net.output_width() != self.h {
            return Err(Error::Schema(format!(
                "L-net output width {} != h = {}",
                self.l_net.output_width(),
                self.h
            )));
        }
        match &self.f_net {
            Some(f) => {
                f.validate()?;
                if f.input_width() != self.m_vars * self.h {
                    return Err(Error::Schema(format!(
                        "F-net input width {} != M*h = {}",
                        f.input_width(),
                        self.m_vars * self.h
                    )));
                }
                if f.output_width() != self.m_vars {
                    return Err(Error::Schema(format!(
                        "F-net output width {} != M = {}",
                        f.output_width(),
                        self.m_vars
                    )));
                }
            }
            None => {
                if self.h != 1 || self.m_vars != 1 {
                    return Err(Error::Schema(
                        "the pure-linear variant requires h = 1 and M = 1".into(),
                    ));
                }
            }
        }
        if !(self.kernel.sigma > 0.0) || !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Schema("invalid kernel or ridge parameter".into()));
        }
        Ok(())
    }

    pub fn is_linear(&self) -> bool {
        self.f_net.is_none()
    }
}

/// Stack of h derivative matrices; slice r holds
/// `L^r phi(|x - x_j|)` evaluated at `x = x_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeTensor {
    pub mats: Vec<DMatrix<f64>>,
}

impl DerivativeTensor {
    pub fn n_features(&self) -> usize {
        self.mats.len()
    }

    pub fn nrows(&self) -> usize {
        self.mats.first().map_or(0, |m| m.nrows())
    }

    pub fn ncols(&self) -> usize {
        self.mats.first().map_or(0, |m| m.ncols())
    }
}

/// Input row for the derivative-feature network:
/// `[x_i, x_j, phi(|x_i - x_j|)]`, width 2d+1.
pub fn pair_input(kernel: &RbfKernel, xi: &[f64], xj: &[f64]) -> Vec<f64> {
    let mut row = Vec::with_capacity(2 * xi.len() + 1);
    row.extend_from_slice(xi);
    row.extend_from_slice(xj);
    row.push(kernel.value(crate::geometry::dist(xi, xj)));
    row
}

/// Batched pair inputs for all (eval, center) combinations; row `i*m + j`
/// corresponds to the pair (eval_i, center_j).
pub fn pair_inputs(kernel: &RbfKernel, eval: &[Point], centers: &[Point]) -> DMatrix<f64> {
    let d = eval.first().map_or(0, |p| p.len());
    let m = centers.len();
    DMatrix::from_fn(eval.len() * m, 2 * d + 1, |row, col| {
        let (i, j) = (row / m, row % m);
        if col < d {
            eval[i][col]
        } else if col < 2 * d {
            centers[j][col - d]
        } else {
            kernel.value(crate::geometry::dist(&eval[i], &centers[j]))
        }
    })
}

/// Derivative features of the kernel for one site pair.
pub fn derivative_features(model: &OperatorModel, xi: &[f64], xj: &[f64]) -> Result<DVector<f64>> {
    if xi.len() != model.dim || xj.len() != model.dim {
        return Err(Error::Dimension(format!(
            "expected dimension {}, got {} and {}",
            model.dim,
            xi.len(),
            xj.len()
        )));
    }
    let input = DMatrix::from_row_slice(1, 2 * model.dim + 1, &pair_input(&model.kernel, xi, xj));
    let (out, _) = model.l_net.forward(&input)?;
    Ok(out.row(0).transpose())
}

/// Assemble the derivative tensor for all (eval, center) pairs. Leave-one-out
/// training passes the center list with the held-out site removed, producing
/// the h x N x (N-1) shape.
pub fn assemble_d_tensor(
    model: &OperatorModel,
    eval_sites: &[Point],
    centers: &[Point],
) -> Result<DerivativeTensor> {
    if eval_sites
        .iter()
        .chain(centers)
        .any(|p| p.len() != model.dim)
    {
        return Err(Error::Dimension(
            "site dimension does not match model".into(),
        ));
    }
    let inputs = pair_inputs(&model.kernel, eval_sites, centers);
    let (out, _) = model.l_net.forward(&inputs)?;
    Ok(tensor_from_rows(&out, eval_sites.len(), centers.len()))
}

/// Reshape a (n*m) x h network output into h matrices of shape n x m.
pub fn tensor_from_rows(out: &DMatrix<f64>, n: usize, m: usize) -> DerivativeTensor {
    let mats = (0..out.ncols())
        .map(|r| DMatrix::from_fn(n, m, |i, j| out[(i * m + j, r)]))
        .collect();
    DerivativeTensor { mats }
}

/// Per-site feature matrix fed to the output network: column `v*h + r` holds
/// feature r of variable v (variable-major concatenation).
pub fn feature_matrix(d: &DerivativeTensor, coeffs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let h = d.n_features();
    let m_vars = coeffs.ncols();
    let per_feature: Vec<DMatrix<f64>> = d.mats.iter().map(|dr| dr * coeffs).collect();
    DMatrix::from_fn(n, m_vars * h, |i, col| {
        let (v, r) = (col / h, col % h);
        per_feature[r][(i, v)]
    })
}

/// Right-hand-side features from already-solved coefficients.
pub fn rhs_from_coeffs(
    model: &OperatorModel,
    d: &DerivativeTensor,
    coeffs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if d.n_features() != model.h {
        return Err(Error::Dimension(format!(
            "tensor has {} feature slices, model expects {}",
            d.n_features(),
            model.h
        )));
    }
    if d.ncols() != coeffs.nrows() || coeffs.ncols() != model.m_vars {
        return Err(Error::Dimension(format!(
            "coefficients are {}x{}, expected {}x{}",
            coeffs.nrows(),
            coeffs.ncols(),
            d.ncols(),
            model.m_vars
        )));
    }
    match &model.f_net {
        None => Ok(&d.mats[0] * coeffs),
        Some(f) => {
            let feats = feature_matrix(d, coeffs);
            let (out, _) = f.forward(&feats)?;
            Ok(out)
        }
    }
}

/// The learned time-derivative estimate at every evaluation site:
/// solve for coefficients of `u`, contract with the derivative tensor, and
/// apply the output network (or return the contraction directly for the
/// pure-linear variant).
pub fn rhs_features(
    model: &OperatorModel,
    d: &DerivativeTensor,
    phi: &DMatrix<f64>,
    u: &DMatrix<f64>,
    lambda: f64,
) -> Result<DMatrix<f64>> {
    if phi.ncols() != d.ncols() {
        return Err(Error::Dimension(format!(
            "Phi has {} centers, tensor has {}",
            phi.ncols(),
            d.ncols()
        )));
    }
    let coeffs = RidgeSolver::new(phi, lambda)?.solve(u)?;
    rhs_from_coeffs(model, d, &coeffs)
}

/// Signed binomial weights of the order-p time stencil:
/// entry q-1 holds `C(p, q) (-1)^{q+1}` for q = 1..p.
pub fn binomial_weights(p: usize) -> Vec<f64> {
    assert!(p >= 1);
    // Pascal recurrence keeps everything exact in f64 for small p.
    let mut c = 1.0f64; // C(p, 0)
    (1..=p)
        .map(|q| {
            c = c * (p - q + 1) as f64 / q as f64;
            let sign = if q % 2 == 1 { 1.0 } else { -1.0 };
            sign * c
        })
        .collect()
}

/// One step of the order-p temporal scheme:
/// `u_next = sum_q C(p,q)(-1)^{q+1} u_{t-(q-1)dt} + dt * rhs`.
///
/// `history` holds exactly p frames, newest first.
pub fn temporal_update(
    history: &[DMatrix<f64>],
    rhs: &DMatrix<f64>,
    p: usize,
    dt: f64,
) -> Result<DMatrix<f64>> {
    if history.len() != p {
        return Err(Error::Invalid(format!(
            "temporal update of order {p} needs exactly {p} history frames, got {}",
            history.len()
        )));
    }
    if history.iter().any(|f| f.shape() != rhs.shape()) {
        return Err(Error::Dimension(
            "history frames and rhs must share one shape".into(),
        ));
    }
    let weights = binomial_weights(p);
    let mut next = rhs * dt;
    for (frame, w) in history.iter().zip(&weights) {
        next += frame * *w;
    }
    Ok(next)
}

/// Dirichlet boundary-value presets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum BoundarySpec {
    /// g = 0 everywhere.
    Zero,
    /// g(x) = 0.2 sin(atan2(x2, x1)), time-independent.
    Angular,
    /// g = value everywhere.
    Constant { value: f64 },
}

impl BoundarySpec {
    /// Boundary value at time t and location x, applied to every variable.
    pub fn value(&self, _t: f64, x: &[f64]) -> f64 {
        match *self {
            BoundarySpec::Zero => 0.0,
            BoundarySpec::Angular => 0.2 * x[1].atan2(x[0]).sin(),
            BoundarySpec::Constant { value } => value,
        }
    }
}

/// One-step transition matrix of the linear variant with boundary rows
/// zeroed; the full step is `u <- H u + g`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMatrices {
    pub h: DMatrix<f64>,
    pub n_boundary: usize,
    pub dt: f64,
}

impl StepMatrices {
    pub fn boundary_rows(&self) -> std::ops::Range<usize> {
        (self.h.nrows() - self.n_boundary)..self.h.nrows()
    }

    /// Boundary-condition vector at time t (zero on interior rows).
    pub fn boundary_vector(&self, boundary: &BoundarySpec, t: f64, sites: &SiteSet) -> DVector<f64> {
        let mut g = DVector::zeros(self.h.nrows());
        for i in self.boundary_rows() {
            g[i] = boundary.value(t, &sites.points[i]);
        }
        g
    }
}

/// Spatial operator used when building the one-step matrix: either the
/// learned linear model or the closed-form Laplacian of the Gaussian kernel
/// (the classical collocation scheme, used for validation).
pub enum SpatialOperator<'a> {
    Learned(&'a OperatorModel),
    GaussianLaplacian { kernel: RbfKernel, dim: usize },
}

impl SpatialOperator<'_> {
    fn kernel(&self) -> RbfKernel {
        match self {
            SpatialOperator::Learned(m) => m.kernel,
            SpatialOperator::GaussianLaplacian { kernel, .. } => *kernel,
        }
    }

    /// The single derivative matrix D over all (site, site) pairs.
    fn derivative_matrix(&self, points: &[Point]) -> Result<DMatrix<f64>> {
        match self {
            SpatialOperator::Learned(model) => {
                if !model.is_linear() || model.p != 1 {
                    return Err(Error::Invalid(
                        "step-matrix assembly requires the pure-linear variant (h=1, M=1, p=1)"
                            .into(),
                    ));
                }
                Ok(assemble_d_tensor(model, points, points)?.mats.remove(0))
            }
            SpatialOperator::GaussianLaplacian { kernel, dim } => {
                Ok(DMatrix::from_fn(points.len(), points.len(), |i, j| {
                    kernel.laplacian(crate::geometry::dist(&points[i], &points[j]), *dim)
                }))
            }
        }
    }
}

/// Assemble `H`: interior rows of `I + dt D Phi^{-1}` (the inverse realized
/// through the ridge solve), boundary rows zero.
pub fn build_h_matrix(
    op: &SpatialOperator,
    sites: &SiteSet,
    dt: f64,
    lambda: f64,
) -> Result<StepMatrices> {
    let n = sites.n_total();
    let phi = assemble_phi(&op.kernel(), &sites.points, &sites.points)?;
    let d = op.derivative_matrix(&sites.points)?;
    // Regularized inverse of Phi, column by column.
    let w = RidgeSolver::new(&phi, lambda)?.solve(&DMatrix::identity(n, n))?;
    let mut h = DMatrix::identity(n, n) + (d * w) * dt;
    for i in (n - sites.boundary_count)..n {
        h.row_mut(i).fill(0.0);
    }
    Ok(StepMatrices {
        h,
        n_boundary: sites.boundary_count,
        dt,
    })
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(h: &DMatrix<f64>) -> Result<f64> {
    if !h.is_square() {
        return Err(Error::Dimension(format!(
            "spectral radius needs a square matrix, got {}x{}",
            h.nrows(),
            h.ncols()
        )));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite matrix entries".into()));
    }
    Ok(h.complex_eigenvalues().iter().map(|e| e.norm()).fold(0.0, f64::max))
}

/// Rolled-out predictions at the sites and (optionally) at query points.
/// Frame s holds the state at `t0 + (s+1) dt`.
#[derive(Debug, Clone)]
pub struct ForecastTrajectory {
    pub site_frames: Vec<DMatrix<f64>>,
    pub query_frames: Vec<DMatrix<f64>>,
    pub dt: f64,
    pub t0: f64,
}

/// Roll the model forward `steps` steps from `initial_frames` (chronological
/// order, exactly p frames). Boundary sites are overwritten with the
/// prescribed values after every update; query points are evaluated through
/// the RBF expansion of the current full-site state.
#[allow(clippy::too_many_arguments)]
pub fn forecast(
    model: &OperatorModel,
    sites: &SiteSet,
    initial_frames: &[DMatrix<f64>],
    boundary: &BoundarySpec,
    steps: usize,
    queries: Option<&[Point]>,
    lambda: f64,
    dt: f64,
    t0: f64,
) -> Result<ForecastTrajectory> {
    model.validate()?;
    let n = sites.n_total();
    if initial_frames.len() != model.p {
        return Err(Error::Invalid(format!(
            "forecast needs exactly p = {} seed frames, got {}",
            model.p,
            initial_frames.len()
        )));
    }
    for f in initial_frames {
        if f.shape() != (n, model.m_vars) {
            return Err(Error::Dimension(format!(
                "seed frame is {:?}, expected ({n}, {})",
                f.shape(),
                model.m_vars
            )));
        }
    }
    if !(dt > 0.0) {
        return Err(Error::Invalid(format!("time step must be positive: {dt}")));
    }

    let phi = assemble_phi(&model.kernel, &sites.points, &sites.points)?;
    let solver = RidgeSolver::new(&phi, lambda)?;
    let d = assemble_d_tensor(model, &sites.points, &sites.points)?;
    let phi_q = match queries {
        Some(q) if !q.is_empty() => Some(assemble_phi(&model.kernel, q, &sites.points)?),
        _ => None,
    };

    // Newest first.
    let mut history: Vec<DMatrix<f64>> = initial_frames.iter().rev().cloned().collect();
    let mut site_frames = Vec::with_capacity(steps);
    let mut query_frames = Vec::new();

    for s in 1..=steps {
        let t_next = t0 + s as f64 * dt;
        let coeffs = solver
            .solve(&history[0])
            .map_err(|e| step_error(s, e))?;
        let rhs = rhs_from_coeffs(model, &d, &coeffs)?;
        let mut u_next = temporal_update(&history, &rhs, model.p, dt)?;
        for i in sites.n_interior()..n {
            let g = boundary.value(t_next, &sites.points[i]);
            for v in 0..model.m_vars {
                u_next[(i, v)] = g;
            }
        }
        if u_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: s,
                msg: "forecast state became non-finite".into(),
            });
        }
        if let Some(pq) = &phi_q {
            let c_next = solver.solve(&u_next).map_err(|e| step_error(s, e))?;
            query_frames.push(pq * &c_next);
        }
        history.rotate_right(1);
        history[0] = u_next.clone();
        site_frames.push(u_next);
    }
    Ok(ForecastTrajectory {
        site_frames,
        query_frames,
        dt,
        t0,
    })
}

fn step_error(step: usize, e: Error) -> Error {
    match e {
        Error::Solver(msg) => Error::Numerical {
            step,
            msg: format!("solver failure: {msg}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::MlpParams;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model(h: usize, m_vars: usize, p: usize, seed: u64) -> OperatorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l_net = MlpParams::init(&[5, 8, h], &mut rng).unwrap();
        let f_net = if h == 1 && m_vars == 1 && seed % 2 == 0 {
            None
        } else {
            Some(MlpParams::init(&[m_vars * h, 10, m_vars], &mut rng).unwrap())
        };
        OperatorModel::new(
            l_net,
            f_net,
            RbfKernel::new(0.5).unwrap(),
            p,
            m_vars,
            h,
            2,
            1e-4,
        )
        .unwrap()
    }

    fn linear_model(seed: u64) -> OperatorModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l_net = MlpParams::init(&[5, 6, 1], &mut rng).unwrap();
        OperatorModel::new(
            l_net,
            None,
            RbfKernel::new(0.5).unwrap(),
            1,
            1,
            1,
            2,
            1e-4,
        )
        .unwrap()
    }

    fn random_points(n: usize, seed: u64) -> Vec<Point> {
        // Rejection with a minimum separation keeps Phi comfortably conditioned.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts: Vec<Point> = Vec::new();
        while pts.len() < n {
            let cand = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            if pts.iter().all(|p| crate::geometry::dist(p, &cand) > 0.35) {
                pts.push(cand);
            }
        }
        pts
    }

    #[test]
    fn model_validation_catches_width_errors() {
        let l_net = MlpParams::zeros(&[5, 4, 2]).unwrap();
        // h says 3 but the net emits 2.
        assert!(OperatorModel::new(
            l_net.clone(),
            Some(MlpParams::zeros(&[3, 1]).unwrap()),
            RbfKernel::new(0.5).unwrap(),
            1,
            1,
            3,
            2,
            1e-4
        )
        .is_err());
        // Linear variant with h = 2 is rejected.
        assert!(OperatorModel::new(
            MlpParams::zeros(&[5, 2]).unwrap(),
            None,
            RbfKernel::new(0.5).unwrap(),
            1,
            1,
            2,
            2,
            1e-4
        )
        .is_err());
    }

    #[test]
    fn derivative_features_zero_net() {
        let model = OperatorModel::new(
            MlpParams::zeros(&[5, 4, 3]).unwrap(),
            Some(MlpParams::zeros(&[3, 1]).unwrap()),
            RbfKernel::new(0.5).unwrap(),
            1,
            1,
            3,
            2,
            1e-4,
        )
        .unwrap();
        let f = derivative_features(&model, &[0.1, 0.2], &[0.5, -0.5]).unwrap();
        assert_eq!(f, DVector::zeros(3));
    }

    #[test]
    fn derivative_features_definitional() {
        let model = toy_model(3, 1, 1, 10);
        let xi = [0.3, -0.7];
        let xj = [-0.2, 0.4];
        let input_vec = pair_input(&model.kernel, &xi, &xj);
        assert_eq!(input_vec.len(), 5);
        let r = crate::geometry::dist(&xi, &xj);
        assert_eq!(input_vec[4], model.kernel.value(r));
        let input = DMatrix::from_row_slice(1, 5, &input_vec);
        let (expected, _) = model.l_net.forward(&input).unwrap();
        let got = derivative_features(&model, &xi, &xj).unwrap();
        assert_eq!(got, expected.row(0).transpose());
    }

    #[test]
    fn d_tensor_shapes_and_entries() {
        let model = toy_model(4, 1, 1, 21);
        let pts = random_points(6, 3);
        let full = assemble_d_tensor(&model, &pts, &pts).unwrap();
        assert_eq!(full.n_features(), 4);
        assert_eq!((full.nrows(), full.ncols()), (6, 6));

        // Leave-one-out: drop center 2.
        let loo_centers: Vec<Point> = pts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != 2)
            .map(|(_, p)| p.clone())
            .collect();
        let loo = assemble_d_tensor(&model, &pts, &loo_centers).unwrap();
        assert_eq!((loo.nrows(), loo.ncols()), (6, 5));

        for (i, xi) in pts.iter().enumerate() {
            for (j, xj) in pts.iter().enumerate() {
                let f = derivative_features(&model, xi, xj).unwrap();
                for r in 0..4 {
                    assert_eq!(full.mats[r][(i, j)], f[r]);
                }
            }
        }
    }

    #[test]
    fn rhs_features_zero_field() {
        let pts = random_points(5, 4);
        let lin = linear_model(2);
        let phi = assemble_phi(&lin.kernel, &pts, &pts).unwrap();
        let d = assemble_d_tensor(&lin, &pts, &pts).unwrap();
        let u = DMatrix::zeros(5, 1);
        let out = rhs_features(&lin, &d, &phi, &u, 0.0).unwrap();
        assert_relative_eq!(out, DMatrix::zeros(5, 1), epsilon = 1e-12);

        let nonlin = toy_model(3, 1, 1, 31);
        let phi = assemble_phi(&nonlin.kernel, &pts, &pts).unwrap();
        let d = assemble_d_tensor(&nonlin, &pts, &pts).unwrap();
        let out = rhs_features(&nonlin, &d, &phi, &u, 0.0).unwrap();
        let (f0, _) = nonlin
            .f_net
            .as_ref()
            .unwrap()
            .forward(&DMatrix::zeros(1, 3))
            .unwrap();
        for i in 0..5 {
            assert_relative_eq!(out[(i, 0)], f0[(0, 0)], epsilon = 1e-12);
        }
    }

    #[test]
    fn rhs_features_identity_when_d_equals_phi() {
        let pts = random_points(5, 7);
        let model = linear_model(4);
        let phi = assemble_phi(&model.kernel, &pts, &pts).unwrap();
        let d = DerivativeTensor {
            mats: vec![phi.clone()],
        };
        let u = DMatrix::from_fn(5, 1, |i, _| (i as f64 * 0.71).sin());
        let out = rhs_features(&model, &d, &phi, &u, 0.0).unwrap();
        assert_relative_eq!(out, u, max_relative = 1e-9);
    }

    #[test]
    fn rhs_features_variable_major_blocks() {
        // Permuting the two variables permutes the feature blocks fed to F.
        let model = toy_model(3, 2, 1, 8);
        let pts = random_points(5, 9);
        let phi = assemble_phi(&model.kernel, &pts, &pts).unwrap();
        let d = assemble_d_tensor(&model, &pts, &pts).unwrap();
        let solver = RidgeSolver::new(&phi, 1e-4).unwrap();
        let u = DMatrix::from_fn(5, 2, |i, v| ((i + v) as f64 * 0.43).cos());
        let mut u_swapped = u.clone();
        u_swapped.swap_columns(0, 1);
        let feats = feature_matrix(&d, &solver.solve(&u).unwrap());
        let feats_swapped = feature_matrix(&d, &solver.solve(&u_swapped).unwrap());
        for i in 0..5 {
            for r in 0..3 {
                assert_relative_eq!(feats[(i, r)], feats_swapped[(i, 3 + r)], epsilon = 1e-12);
                assert_relative_eq!(feats[(i, 3 + r)], feats_swapped[(i, r)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn temporal_update_binomial_cases() {
        let u2 = DMatrix::from_row_slice(2, 1, &[1.0, -3.0]);
        let u1 = DMatrix::from_row_slice(2, 1, &[0.5, 2.0]);
        let u0 = DMatrix::from_row_slice(2, 1, &[4.0, 1.0]);
        let rhs = DMatrix::from_row_slice(2, 1, &[10.0, -20.0]);
        let dt = 0.1;

        let next = temporal_update(&[u2.clone()], &rhs, 1, dt).unwrap();
        assert_relative_eq!(next, &u2 + &rhs * dt, epsilon = 1e-15);

        let zero = DMatrix::zeros(2, 1);
        let next = temporal_update(&[u2.clone(), u1.clone()], &zero, 2, dt).unwrap();
        assert_relative_eq!(next, &u2 * 2.0 - &u1, epsilon = 1e-15);

        let next = temporal_update(&[u2.clone(), u1.clone(), u0.clone()], &zero, 3, dt).unwrap();
        assert_relative_eq!(next, &u2 * 3.0 - &u1 * 3.0 + &u0, epsilon = 1e-15);

        assert!(temporal_update(&[u2.clone()], &rhs, 2, dt).is_err());
    }

    #[test]
    fn binomial_weights_match_pascal() {
        assert_eq!(binomial_weights(1), vec![1.0]);
        assert_eq!(binomial_weights(2), vec![2.0, -1.0]);
        assert_eq!(binomial_weights(3), vec![3.0, -3.0, 1.0]);
        assert_eq!(binomial_weights(4), vec![4.0, -6.0, 4.0, -1.0]);
    }

    fn site_set(points: Vec<Point>, boundary_count: usize) -> SiteSet {
        SiteSet {
            points,
            boundary_count,
        }
    }

    #[test]
    fn h_matrix_zero_operator_masks_identity() {
        let model = OperatorModel::new(
            MlpParams::zeros(&[5, 4, 1]).unwrap(),
            None,
            RbfKernel::new(0.5).unwrap(),
            1,
            1,
            1,
            2,
            1e-4,
        )
        .unwrap();
        let sites = site_set(random_points(6, 11), 2);
        let sm = build_h_matrix(&SpatialOperator::Learned(&model), &sites, 0.05, 1e-4).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i < 4 && i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(sm.h[(i, j)], expected, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn h_matrix_no_boundary_is_unmasked() {
        let kernel = RbfKernel::new(0.6).unwrap();
        let pts = random_points(5, 13);
        let sites = site_set(pts.clone(), 0);
        let op = SpatialOperator::GaussianLaplacian { kernel, dim: 2 };
        let dt = 0.02;
        let sm = build_h_matrix(&op, &sites, dt, 0.0).unwrap();

        let phi = assemble_phi(&kernel, &pts, &pts).unwrap();
        let d = DMatrix::from_fn(5, 5, |i, j| {
            kernel.laplacian(crate::geometry::dist(&pts[i], &pts[j]), 2)
        });
        let expected = DMatrix::identity(5, 5)
            + (&d * phi.lu().solve(&DMatrix::identity(5, 5)).unwrap()) * dt;
        assert_relative_eq!(sm.h, expected, epsilon = 1e-9);
    }

    #[test]
    fn analytic_mode_reproduces_classical_assembly() {
        // Direct assembly of the classical one-step matrix: interior rows of
        // A hold phi + dt L phi, boundary rows are zero, and the update is
        // u <- A Phi^{-1} u + g.
        let kernel = RbfKernel::new(0.5).unwrap();
        let dt = 0.01;
        for seed in 0..3 {
            let pts = random_points(5, 40 + seed);
            let sites = site_set(pts.clone(), 2);
            let op = SpatialOperator::GaussianLaplacian { kernel, dim: 2 };
            let sm = build_h_matrix(&op, &sites, dt, 0.0).unwrap();

            let phi = assemble_phi(&kernel, &pts, &pts).unwrap();
            let mut a = DMatrix::zeros(5, 5);
            for i in 0..3 {
                for j in 0..5 {
                    let r = crate::geometry::dist(&pts[i], &pts[j]);
                    a[(i, j)] = kernel.value(r) + dt * kernel.laplacian(r, 2);
                }
            }
            // Independent route: LU solve (Phi is symmetric).
            let h_oracle = (phi.lu().solve(&a.transpose()).unwrap()).transpose();
            for i in 0..5 {
                for j in 0..5 {
                    assert!(
                        (sm.h[(i, j)] - h_oracle[(i, j)]).abs() <= 1e-9,
                        "seed {seed} entry ({i},{j}): {} vs {}",
                        sm.h[(i, j)],
                        h_oracle[(i, j)]
                    );
                }
            }
        }
    }

    #[test]
    fn spectral_radius_cases() {
        let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -0.2]);
        assert_relative_eq!(spectral_radius(&d).unwrap(), 0.5, max_relative = 1e-9);
        let n = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(spectral_radius(&n).unwrap() < 1e-9);
        let r = DMatrix::from_row_slice(2, 2, &[0.0, 2.0, -2.0, 0.0]);
        assert_relative_eq!(spectral_radius(&r).unwrap(), 2.0, max_relative = 1e-9);
        assert!(spectral_radius(&DMatrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn forecast_zero_fixed_point() {
        let model = linear_model(6);
        let sites = site_set(random_points(6, 17), 2);
        let zero = DMatrix::zeros(6, 1);
        let out = forecast(
            &model,
            &sites,
            &[zero.clone()],
            &BoundarySpec::Zero,
            5,
            None,
            1e-4,
            0.05,
            0.0,
        )
        .unwrap();
        for f in &out.site_frames {
            assert_relative_eq!(f, &zero, epsilon = 1e-13);
        }
    }

    #[test]
    fn forecast_single_step_is_update_plus_overwrite() {
        let model = toy_model(3, 1, 1, 50);
        let pts = random_points(6, 19);
        let sites = site_set(pts.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let u0 = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
        let dt = 0.04;
        let lam = 1e-4;
        let out = forecast(
            &model,
            &sites,
            &[u0.clone()],
            &BoundarySpec::Angular,
            1,
            None,
            lam,
            dt,
            0.0,
        )
        .unwrap();

        let phi = assemble_phi(&model.kernel, &pts, &pts).unwrap();
        let d = assemble_d_tensor(&model, &pts, &pts).unwrap();
        let rhs = rhs_features(&model, &d, &phi, &u0, lam).unwrap();
        let mut expected = temporal_update(&[u0], &rhs, 1, dt).unwrap();
        for i in 4..6 {
            expected[(i, 0)] = BoundarySpec::Angular.value(dt, &pts[i]);
        }
        assert_relative_eq!(out.site_frames[0], expected, epsilon = 1e-12);
    }

    #[test]
    fn forecast_matches_explicit_matrix_iteration() {
        let model = linear_model(8);
        let pts = random_points(6, 29);
        let sites = site_set(pts.clone(), 2);
        let dt = 0.03;
        let lam = 1e-4;
        let sm = build_h_matrix(&SpatialOperator::Learned(&model), &sites, dt, lam).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u0 = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
        let steps = 12;
        let out = forecast(
            &model,
            &sites,
            &[u0.clone()],
            &BoundarySpec::Angular,
            steps,
            None,
            lam,
            dt,
            0.0,
        )
        .unwrap();

        let mut u = u0.column(0).into_owned();
        for s in 0..steps {
            let g = sm.boundary_vector(&BoundarySpec::Angular, (s + 1) as f64 * dt, &sites);
            u = &sm.h * &u + g;
            for i in 0..6 {
                assert!(
                    (out.site_frames[s][(i, 0)] - u[i]).abs() < 1e-10,
                    "step {s} site {i}"
                );
            }
        }
    }

    #[test]
    fn forecast_boundary_values_exact_every_step() {
        let model = toy_model(2, 2, 2, 60);
        let pts = random_points(7, 37);
        let sites = site_set(pts.clone(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f0 = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-0.5..0.5));
        let f1 = DMatrix::from_fn(7, 2, |_, _| rng.random_range(-0.5..0.5));
        let out = forecast(
            &model,
            &sites,
            &[f0, f1],
            &BoundarySpec::Angular,
            6,
            None,
            1e-4,
            0.05,
            0.0,
        )
        .unwrap();
        for frame in &out.site_frames {
            for i in 4..7 {
                let g = BoundarySpec::Angular.value(0.0, &pts[i]);
                for v in 0..2 {
                    assert_eq!(frame[(i, v)], g);
                }
            }
        }
    }

    #[test]
    fn forecast_queries_match_interpolant() {
        let model = linear_model(12);
        let pts = random_points(6, 43);
        let sites = site_set(pts.clone(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let u0 = DMatrix::from_fn(6, 1, |_, _| rng.random_range(-1.0..1.0));
        let queries = vec![vec![0.05, 0.1], vec![-0.4, 0.3]];
        let lam = 1e-4;
        let out = forecast(
            &model,
            &sites,
            &[u0],
            &BoundarySpec::Zero,
            3,
            Some(&queries),
            lam,
            0.05,
            0.0,
        )
        .unwrap();
        assert_eq!(out.query_frames.len(), 3);
        // The query values are the RBF expansion of the current site state.
        let phi = assemble_phi(&model.kernel, &pts, &pts).unwrap();
        let c = RidgeSolver::new(&phi, lam)
            .unwrap()
            .solve(&out.site_frames[2])
            .unwrap();
        let cv = c.column(0).into_owned();
        for (qi, q) in queries.iter().enumerate() {
            let expected =
                crate::rbf::eval_interpolant(&model.kernel, &pts, &cv, q).unwrap();
            assert_relative_eq!(out.query_frames[2][(qi, 0)], expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn boundary_presets() {
        assert_eq!(BoundarySpec::Zero.value(3.0, &[0.4, -0.9]), 0.0);
        assert_relative_eq!(
            BoundarySpec::Angular.value(0.0, &[1.0, 0.0]),
            0.0,
            epsilon = 1e-15
        );
        assert_relative_eq!(
            BoundarySpec::Angular.value(0.0, &[0.0, 1.0]),
            0.2,
            epsilon = 1e-15
        );
        assert_eq!(BoundarySpec::Constant { value: 1.0 }.value(0.0, &[2.0, 2.0]), 1.0);
    }
}
