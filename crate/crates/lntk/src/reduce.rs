//! Constructive rank reduction of a regularized-risk minimizer.
//!
//! A minimizer `delta*` is lifted to a PSD matrix `Z` whose off-diagonal
//! block is `delta*`. Feasible null directions of the data operator are
//! followed to the PSD boundary, dropping the rank by at least one each
//! step while the objective value is preserved, until the dimension
//! count `r(r+1)/2 <= KN` is reached.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{self, LinearizedDataset, UpdateMatrix};

/// PSD lift of an update matrix with a cached orthonormal range basis.
#[derive(Debug, Clone)]
pub struct PsdLift {
    z: DMatrix<f64>,
    basis: DMatrix<f64>,
    rank_tol: f64,
}

impl PsdLift {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn range_basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    pub fn rank_tol(&self) -> f64 {
        self.rank_tol
    }

    /// Rebuild a lift from a symmetric matrix, truncating eigenvalues
    /// below `rank_tol * lambda_max` to keep the representation PSD.
    fn from_symmetric(z: &DMatrix<f64>, rank_tol: f64) -> Self {
        let eig = z.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        let dim = z.nrows();
        let kept: Vec<usize> = (0..dim)
            .filter(|&i| eig.eigenvalues[i] > rank_tol * lmax && eig.eigenvalues[i] > 0.0)
            .collect();
        let mut basis = DMatrix::zeros(dim, kept.len());
        let mut rebuilt = DMatrix::zeros(dim, dim);
        for (c, &i) in kept.iter().enumerate() {
            let q = eig.eigenvectors.column(i);
            basis.set_column(c, &q);
            rebuilt += q * q.transpose() * eig.eigenvalues[i];
        }
        Self { z: rebuilt, basis, rank_tol }
    }
}

/// The linear map `A: S^(m+n) -> R^(KN)`, `A(Z)_{ij} = <G^(j)(X_i), Zbar>`,
/// represented implicitly by the dataset.
pub struct FeatureOperator<'a> {
    data: &'a LinearizedDataset,
}

impl<'a> FeatureOperator<'a> {
    pub fn new(data: &'a LinearizedDataset) -> Self {
        Self { data }
    }

    pub fn output_len(&self) -> usize {
        self.data.len() * self.data.output_dim()
    }

    /// Apply to a symmetric (m+n) x (m+n) matrix.
    pub fn apply(&self, z: &DMatrix<f64>) -> DVector<f64> {
        let m = self.data.shape().rows();
        let n = self.data.shape().cols();
        let zbar = z.view((0, m), (m, n)).into_owned();
        let k = self.data.output_dim();
        let mut out = DVector::zeros(self.output_len());
        for (i, s) in self.data.samples().iter().enumerate() {
            for j in 0..k {
                out[i * k + j] = s.features.block_inner(j, &zbar);
            }
        }
        out
    }
}

pub const DEFAULT_RANK_TOL: f64 = 1e-8;
pub const DEFAULT_NULL_TOL: f64 = 1e-8;
pub const DEFAULT_TRACE_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ReduceConfig {
    /// Numerical-rank threshold: sigma_i > rank_tol * sigma_1 counts.
    pub rank_tol: f64,
    /// Null-space threshold relative to the largest singular value of
    /// the assembled constraint matrix.
    pub null_tol: f64,
    /// |tr(D)| <= trace_tol * ||D||_F must hold at a minimizer when
    /// lambda > 0.
    pub trace_tol: f64,
}

impl Default for ReduceConfig {
    fn default() -> Self {
        Self {
            rank_tol: DEFAULT_RANK_TOL,
            null_tol: DEFAULT_NULL_TOL,
            trace_tol: DEFAULT_TRACE_TOL,
        }
    }
}

/// Balanced SVD lift: `Z = [u; v][u; v]^T` with `u = U sqrt(S)`,
/// `v = V sqrt(S)`. Guarantees `tr(Z) = 2 ||delta||_*` and
/// `rank(Z) = rank(delta)`.
pub fn lift_to_psd(delta: &UpdateMatrix, rank_tol: f64) -> Result<PsdLift> {
    let svd = delta.clone().svd(true, true);
    let u_full = svd.u.as_ref().ok_or(Error::SvdFailure)?;
    let vt = svd.v_t.as_ref().ok_or(Error::SvdFailure)?;
    let smax = svd.singular_values.max().max(0.0);
    let (m, n) = (delta.nrows(), delta.ncols());
    let kept: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > rank_tol * smax && svd.singular_values[i] > 0.0)
        .collect();
    let r = kept.len();
    let mut q = DMatrix::zeros(m + n, r);
    let mut basis = DMatrix::zeros(m + n, r);
    for (c, &i) in kept.iter().enumerate() {
        let s = svd.singular_values[i].sqrt();
        for row in 0..m {
            q[(row, c)] = u_full[(row, i)] * s;
        }
        for row in 0..n {
            q[(m + row, c)] = vt[(i, row)] * s;
        }
        // Columns of Q are orthogonal with norm sqrt(2 sigma); normalize.
        let norm = (2.0 * svd.singular_values[i]).sqrt();
        for row in 0..m + n {
            basis[(row, c)] = q[(row, c)] / norm;
        }
    }
    let z = &q * q.transpose();
    Ok(PsdLift { z, basis, rank_tol })
}

/// Off-diagonal block `Zbar` of the lift.
pub fn extract_offdiag(lift: &PsdLift, m: usize, n: usize) -> UpdateMatrix {
    lift.matrix().view((0, m), (m, n)).into_owned()
}

/// Orthonormal basis of symmetric r x r matrices under the Frobenius
/// inner product: `{e_i e_i^T} U {(e_i e_j^T + e_j e_i^T)/sqrt(2)}`.
fn sym_basis_element(r: usize, idx: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(r, r);
    let mut k = 0;
    for i in 0..r {
        for j in i..r {
            if k == idx {
                if i == j {
                    w[(i, i)] = 1.0;
                } else {
                    let x = std::f64::consts::FRAC_1_SQRT_2;
                    w[(i, j)] = x;
                    w[(j, i)] = x;
                }
                return w;
            }
            k += 1;
        }
    }
    panic!("symmetric basis index out of range");
}

fn sym_from_coords(r: usize, w: &DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(r, r);
    let mut k = 0;
    for i in 0..r {
        for j in i..r {
            if i == j {
                out[(i, i)] = w[k];
            } else {
                let x = w[k] * std::f64::consts::FRAC_1_SQRT_2;
                out[(i, j)] = x;
                out[(j, i)] = x;
            }
            k += 1;
        }
    }
    out
}

/// Generalized eigenvalues of `W x = mu R x` with R positive definite,
/// via the Cholesky congruence `L^-1 W L^-T`.
fn generalized_eigenvalues(w: &DMatrix<f64>, r_mat: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = r_mat
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidArgument("restricted lift is not positive definite".into()))?;
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidArgument("Cholesky factor not invertible".into()))?;
    let mid = &linv * w * linv.transpose();
    let sym = (&mid + mid.transpose()) * 0.5;
    Ok(sym.symmetric_eigen().eigenvalues.iter().cloned().collect())
}

fn max_abs_generalized_eigenvalue(w: &DMatrix<f64>, r_mat: &DMatrix<f64>) -> Result<f64> {
    let mus = generalized_eigenvalues(w, r_mat)?;
    Ok(mus.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs())))
}

/// A unit-norm feasible null direction `D = B W B^T` with `A(D) ~ 0`,
/// or `None` when the restricted null space is trivial. Among several
/// candidates, the one with the largest-magnitude generalized eigenvalue
/// (smallest boundary step) is returned.
pub fn null_direction(lift: &PsdLift, op: &FeatureOperator, null_tol: f64) -> Result<Option<DMatrix<f64>>> {
    let r = lift.rank();
    if r == 0 {
        return Ok(None);
    }
    let dim = r * (r + 1) / 2;
    let kn = op.output_len();
    let b = lift.range_basis();
    let mut amat = DMatrix::zeros(kn, dim);
    for c in 0..dim {
        let w = sym_basis_element(r, c);
        let d = b * w * b.transpose();
        amat.set_column(c, &op.apply(&d));
    }
    // Null space via the Gram matrix so directions beyond min(KN, dim)
    // are not lost. At least `dim - KN` null directions exist by the
    // dimension count, so that many smallest eigenvectors are taken
    // unconditionally: their eigenvalues carry eigensolver noise up to
    // a few ulps of lambda_max, which can exceed the threshold.
    let gram = amat.transpose() * &amat;
    let eig = gram.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let thresh = if lmax > 0.0 { null_tol * null_tol * lmax } else { f64::INFINITY };
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let guaranteed = dim.saturating_sub(kn);
    let mut candidates = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if pos < guaranteed || eig.eigenvalues[i] <= thresh || lmax == 0.0 {
            candidates.push(eig.eigenvectors.column(i).into_owned());
        }
    }
    if candidates.is_empty() {
        return Ok(None);
    }
    let r_mat = b.transpose() * lift.matrix() * b;
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for coords in candidates {
        let w = sym_from_coords(r, &coords);
        let mu = max_abs_generalized_eigenvalue(&w, &r_mat)?;
        if best.as_ref().map_or(true, |(bm, _)| mu > *bm) {
            best = Some((mu, b * w * b.transpose()));
        }
    }
    Ok(best.map(|(_, d)| d))
}

/// Step to the PSD boundary along `D`: with `R = B^T Z B` and
/// `W = B^T D B`, solve `W x = mu R x` and take `t* = -1/mu_hat` for the
/// largest-magnitude eigenvalue. The result has strictly lower rank.
pub fn boundary_step(lift: &PsdLift, direction: &DMatrix<f64>) -> Result<(f64, PsdLift)> {
    let b = lift.range_basis();
    let w = b.transpose() * direction * b;
    let r_mat = b.transpose() * lift.matrix() * b;
    let mus = generalized_eigenvalues(&w, &r_mat)?;
    let mu_hat = mus.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if mu_hat.abs() < 1e-14 {
        return Err(Error::DegenerateDirection);
    }
    let t_star = -1.0 / mu_hat;
    let z_next = lift.matrix() + direction * t_star;
    let next = PsdLift::from_symmetric(&z_next, lift.rank_tol);
    Ok((t_star, next))
}

#[derive(Debug, Clone)]
pub struct ReduceReport {
    pub delta: UpdateMatrix,
    pub rank: usize,
    pub iterations: usize,
    /// Largest |tr(D)| / ||D||_F observed across accepted directions.
    pub max_trace_ratio: f64,
    pub initial_objective: f64,
    pub final_objective: f64,
}

/// Reduce the rank of a minimizer of the regularized risk while
/// preserving the objective value, until `r(r+1)/2 <= KN`.
pub fn rank_reduce(
    delta_star: &UpdateMatrix,
    data: &LinearizedDataset,
    lambda: f64,
    config: &ReduceConfig,
) -> Result<ReduceReport> {
    let m = data.shape().rows();
    let n = data.shape().cols();
    let initial_objective = model::regularized_risk(delta_star, data, lambda)?;
    let mut lift = lift_to_psd(delta_star, config.rank_tol)?;
    let op = FeatureOperator::new(data);
    let max_iters = lift.rank().max(1);
    let mut iterations = 0;
    let mut max_trace_ratio: f64 = 0.0;

    for _ in 0..max_iters {
        let Some(direction) = null_direction(&lift, &op, config.null_tol)? else {
            break;
        };
        let trace_ratio = direction.trace().abs() / direction.norm();
        max_trace_ratio = max_trace_ratio.max(trace_ratio);
        // At an exact minimizer with lambda > 0, two-sided feasibility
        // forces tr(D) = 0; a large trace certifies the input was not
        // optimal. With lambda = 0 the trace does not enter the
        // objective, so it is only recorded.
        if lambda > 0.0 && trace_ratio > config.trace_tol {
            return Err(Error::NotAMinimizer { trace: direction.trace().abs(), tol: config.trace_tol });
        }
        let rank_before = lift.rank();
        let (_t, next) = boundary_step(&lift, &direction)?;
        if next.rank() >= rank_before {
            // Numerical stall; keep the current certificate.
            break;
        }
        lift = next;
        iterations += 1;
    }

    let delta = extract_offdiag(&lift, m, n);
    let final_objective = model::regularized_risk(&delta, data, lambda)?;
    let sv = delta.clone().svd(false, false).singular_values;
    let smax = sv.max().max(0.0);
    let rank = sv.iter().filter(|&&s| s > config.rank_tol * smax && s > 0.0).count();
    Ok(ReduceReport {
        delta,
        rank,
        iterations,
        max_trace_ratio,
        initial_objective,
        final_objective,
    })
}
