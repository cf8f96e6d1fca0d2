//! Domain types and exact first/second derivatives of the linearized
//! fine-tuning objectives.
//!
//! The model under study is the affine predictor
//! `f_0(X) + <G(X), delta>` where `G(X)` is a collection of `K`
//! block-diagonal feature matrices and `delta` is the (dense) weight
//! update. The factored parameterization writes `delta = u v^T`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The dense m x n update matrix.
pub type UpdateMatrix = DMatrix<f64>;

/// Shapes of the T fine-tuned weight blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    blocks: Vec<(usize, usize)>,
}

impl BlockShape {
    pub fn new(blocks: Vec<(usize, usize)>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("BlockShape needs at least one block".into()));
        }
        if blocks.iter().any(|&(m, n)| m == 0 || n == 0) {
            return Err(Error::InvalidArgument("block dimensions must be >= 1".into()));
        }
        Ok(Self { blocks })
    }

    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Total rows m.
    pub fn rows(&self) -> usize {
        self.blocks.iter().map(|b| b.0).sum()
    }

    /// Total cols n.
    pub fn cols(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    /// Per-block (row offset, col offset, rows, cols).
    pub fn offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut out = Vec::with_capacity(self.blocks.len());
        let (mut ro, mut co) = (0, 0);
        for &(mi, ni) in &self.blocks {
            out.push((ro, co, mi, ni));
            ro += mi;
            co += ni;
        }
        out
    }

    /// Total number of entries inside the diagonal blocks.
    pub fn block_entries(&self) -> usize {
        self.blocks.iter().map(|&(m, n)| m * n).sum()
    }
}

/// Per-sample feature tensor: for each output coordinate j, the T dense
/// diagonal blocks of the block-diagonal matrix G^(j).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    shape: BlockShape,
    /// Indexed [j][t].
    per_coord: Vec<Vec<DMatrix<f64>>>,
}

impl FeatureMap {
    pub fn new(shape: BlockShape, per_coord: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        if per_coord.is_empty() {
            return Err(Error::InvalidArgument("FeatureMap needs K >= 1 coordinates".into()));
        }
        for coord in &per_coord {
            if coord.len() != shape.num_blocks() {
                return Err(Error::DimensionMismatch("feature block count != shape".into()));
            }
            for (g, &(mi, ni)) in coord.iter().zip(shape.blocks()) {
                if g.nrows() != mi || g.ncols() != ni {
                    return Err(Error::DimensionMismatch(format!(
                        "feature block is {}x{}, shape says {}x{}",
                        g.nrows(),
                        g.ncols(),
                        mi,
                        ni
                    )));
                }
            }
        }
        Ok(Self { shape, per_coord })
    }

    /// Single-block convenience constructor.
    pub fn single_block(coords: Vec<DMatrix<f64>>) -> Result<Self> {
        let (m, n) = (coords[0].nrows(), coords[0].ncols());
        let shape = BlockShape::new(vec![(m, n)])?;
        Self::new(shape, coords.into_iter().map(|g| vec![g]).collect())
    }

    pub fn shape(&self) -> &BlockShape {
        &self.shape
    }

    pub fn output_dim(&self) -> usize {
        self.per_coord.len()
    }

    pub fn coord_blocks(&self, j: usize) -> &[DMatrix<f64>] {
        &self.per_coord[j]
    }

    /// `<G^(j), delta>`, iterating only over the diagonal blocks.
    pub fn block_inner(&self, j: usize, delta: &UpdateMatrix) -> f64 {
        let mut acc = 0.0;
        for ((ro, co, mi, ni), g) in self.shape.offsets().into_iter().zip(&self.per_coord[j]) {
            for c in 0..ni {
                for r in 0..mi {
                    acc += g[(r, c)] * delta[(ro + r, co + c)];
                }
            }
        }
        acc
    }

    /// Frobenius norm of G^(j).
    pub fn coord_frobenius(&self, j: usize) -> f64 {
        self.per_coord[j].iter().map(|g| g.norm_squared()).sum::<f64>().sqrt()
    }

    /// Accumulate `w * G^(j)` into the diagonal blocks of `acc`.
    pub fn accumulate_scaled(&self, j: usize, w: f64, acc: &mut UpdateMatrix) {
        for ((ro, co, mi, ni), g) in self.shape.offsets().into_iter().zip(&self.per_coord[j]) {
            for c in 0..ni {
                for r in 0..mi {
                    acc[(ro + r, co + c)] += w * g[(r, c)];
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    SquaredError,
    CrossEntropy,
}

/// Label: class index (cross-entropy) or real target vector (squared error).
#[derive(Debug, Clone, PartialEq)]
pub enum Label {
    Class(usize),
    Target(DVector<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedSample {
    pub features: FeatureMap,
    pub base_output: DVector<f64>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearizedDataset {
    samples: Vec<LinearizedSample>,
    loss: LossKind,
    shape: BlockShape,
    output_dim: usize,
}

impl LinearizedDataset {
    pub fn new(samples: Vec<LinearizedSample>, loss: LossKind) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidArgument("dataset needs N >= 1 samples".into()))?;
        let shape = first.features.shape().clone();
        let output_dim = first.features.output_dim();
        if loss == LossKind::CrossEntropy && output_dim < 2 {
            return Err(Error::InvalidArgument("cross-entropy needs K >= 2".into()));
        }
        for s in &samples {
            if s.features.shape() != &shape || s.features.output_dim() != output_dim {
                return Err(Error::DimensionMismatch("samples disagree on shape or K".into()));
            }
            if s.base_output.len() != output_dim || !s.base_output.iter().all(|x| x.is_finite()) {
                return Err(Error::InvalidArgument("base output must be finite, length K".into()));
            }
            match (&s.label, loss) {
                (Label::Class(c), LossKind::CrossEntropy) if *c < output_dim => {}
                (Label::Target(t), LossKind::SquaredError) if t.len() == output_dim => {}
                _ => {
                    return Err(Error::InvalidArgument("label kind does not match loss kind".into()))
                }
            }
        }
        Ok(Self { samples, loss, shape, output_dim })
    }

    pub fn samples(&self) -> &[LinearizedSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn shape(&self) -> &BlockShape {
        &self.shape
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
}

/// The factored update `delta = u v^T` with rank budget r.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
}

impl LoraFactors {
    pub fn new(u: DMatrix<f64>, v: DMatrix<f64>) -> Result<Self> {
        if u.ncols() != v.ncols() || u.ncols() == 0 {
            return Err(Error::DimensionMismatch("u and v need equal column counts >= 1".into()));
        }
        Ok(Self { u, v })
    }

    pub fn zeros(m: usize, n: usize, r: usize) -> Self {
        Self { u: DMatrix::zeros(m, r), v: DMatrix::zeros(n, r) }
    }

    pub fn rank_budget(&self) -> usize {
        self.u.ncols()
    }

    /// `u v^T`.
    pub fn product(&self) -> UpdateMatrix {
        &self.u * self.v.transpose()
    }

    /// Stacked `Q = [u; v]` of size (m+n) x r.
    pub fn stacked(&self) -> DMatrix<f64> {
        let (m, n, r) = (self.u.nrows(), self.v.nrows(), self.rank_budget());
        let mut q = DMatrix::zeros(m + n, r);
        q.view_mut((0, 0), (m, r)).copy_from(&self.u);
        q.view_mut((m, 0), (n, r)).copy_from(&self.v);
        q
    }

    pub fn from_stacked(q: &DMatrix<f64>, m: usize) -> Self {
        let n = q.nrows() - m;
        Self {
            u: q.view((0, 0), (m, q.ncols())).into_owned(),
            v: q.view((m, 0), (n, q.ncols())).into_owned(),
        }
    }
}

/// Random symmetric PSD perturbation with Frobenius bound `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdPerturbation {
    matrix: DMatrix<f64>,
    bound: f64,
}

impl PsdPerturbation {
    pub fn new(matrix: DMatrix<f64>, bound: f64) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::DimensionMismatch("perturbation must be square".into()));
        }
        let fro = matrix.norm();
        let sym_err = (&matrix - matrix.transpose()).norm();
        if sym_err > 1e-10 * fro.max(1.0) {
            return Err(Error::InvalidArgument("perturbation must be symmetric".into()));
        }
        if bound > 0.0 && fro >= bound {
            return Err(Error::InvalidArgument(format!(
                "||P||_F = {fro} must be < bound {bound}"
            )));
        }
        if bound == 0.0 && fro != 0.0 {
            return Err(Error::InvalidArgument("bound = 0 encodes P = 0".into()));
        }
        if fro > 0.0 {
            let eig = matrix.clone().symmetric_eigen();
            let min_eig = eig.eigenvalues.min();
            if min_eig < -1e-10 * fro {
                return Err(Error::InvalidArgument(format!(
                    "perturbation is not PSD (min eigenvalue {min_eig})"
                )));
            }
        }
        Ok(Self { matrix, bound })
    }

    pub fn zero(dim: usize) -> Self {
        Self { matrix: DMatrix::zeros(dim, dim), bound: 0.0 }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn is_zero(&self) -> bool {
        self.bound == 0.0
    }
}

/// N x K array of scaled per-sample loss gradients `(1/N) dl/dyhat`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualWeights {
    pub values: DMatrix<f64>,
}

fn log_sum_exp(logits: &DVector<f64>) -> f64 {
    let mx = logits.max();
    mx + logits.iter().map(|&x| (x - mx).exp()).sum::<f64>().ln()
}

fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let mx = logits.max();
    let mut p: DVector<f64> = logits.map(|x| (x - mx).exp());
    let z = p.sum();
    p /= z;
    p
}

/// Per-sample loss value at prediction `yhat`.
pub fn loss_value(kind: LossKind, yhat: &DVector<f64>, label: &Label) -> f64 {
    match (kind, label) {
        (LossKind::SquaredError, Label::Target(y)) => (yhat - y).norm_squared(),
        (LossKind::CrossEntropy, Label::Class(c)) => log_sum_exp(yhat) - yhat[*c],
        _ => panic!("label kind does not match loss kind"),
    }
}

/// Per-sample loss gradient with respect to the prediction.
pub fn loss_grad(kind: LossKind, yhat: &DVector<f64>, label: &Label) -> DVector<f64> {
    match (kind, label) {
        (LossKind::SquaredError, Label::Target(y)) => (yhat - y) * 2.0,
        (LossKind::CrossEntropy, Label::Class(c)) => {
            let mut g = softmax(yhat);
            g[*c] -= 1.0;
            g
        }
        _ => panic!("label kind does not match loss kind"),
    }
}

/// Per-sample loss Hessian with respect to the prediction.
pub fn loss_hessian(kind: LossKind, yhat: &DVector<f64>) -> DMatrix<f64> {
    let k = yhat.len();
    match kind {
        LossKind::SquaredError => DMatrix::identity(k, k) * 2.0,
        LossKind::CrossEntropy => {
            let p = softmax(yhat);
            DMatrix::from_diagonal(&p) - &p * p.transpose()
        }
    }
}

/// Linearized prediction `f_0 + <G, delta>`.
pub fn predict(sample: &LinearizedSample, delta: &UpdateMatrix) -> Result<DVector<f64>> {
    let shape = sample.features.shape();
    if delta.nrows() != shape.rows() || delta.ncols() != shape.cols() {
        return Err(Error::DimensionMismatch(format!(
            "delta is {}x{}, shape totals are {}x{}",
            delta.nrows(),
            delta.ncols(),
            shape.rows(),
            shape.cols()
        )));
    }
    let k = sample.features.output_dim();
    let mut out = sample.base_output.clone();
    for j in 0..k {
        out[j] += sample.features.block_inner(j, delta);
    }
    Ok(out)
}

/// `L_hat(delta) = (1/N) sum_i l(predict_i, Y_i)`.
pub fn empirical_risk(delta: &UpdateMatrix, data: &LinearizedDataset) -> Result<f64> {
    let mut acc = 0.0;
    for s in data.samples() {
        let yhat = predict(s, delta)?;
        if !yhat.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("prediction"));
        }
        acc += loss_value(data.loss(), &yhat, &s.label);
    }
    Ok(acc / data.len() as f64)
}

/// Sum of singular values.
pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    let sv = m.clone().svd(false, false).singular_values;
    Ok(sv.iter().sum())
}

/// `L_hat(delta) + lambda * ||delta||_*`.
pub fn regularized_risk(delta: &UpdateMatrix, data: &LinearizedDataset, lambda: f64) -> Result<f64> {
    Ok(empirical_risk(delta, data)? + lambda * nuclear_norm(delta)?)
}

/// Perturbed factored objective
/// `L_hat(u v^T) + (lambda/2)(||u||_F^2 + ||v||_F^2) + <P, Q Q^T>`.
pub fn factored_risk(
    factors: &LoraFactors,
    data: &LinearizedDataset,
    lambda: f64,
    perturbation: &PsdPerturbation,
) -> Result<f64> {
    let delta = factors.product();
    let mut val = empirical_risk(&delta, data)?
        + 0.5 * lambda * (factors.u.norm_squared() + factors.v.norm_squared());
    if !perturbation.is_zero() {
        let q = factors.stacked();
        if perturbation.matrix().nrows() != q.nrows() {
            return Err(Error::DimensionMismatch("perturbation side != m+n".into()));
        }
        // <P, QQ^T> = <PQ, Q>
        val += (perturbation.matrix() * &q).dot(&q);
    }
    Ok(val)
}

/// Dual weights `(1/N) dl/dyhat` at the predictions of `delta`.
pub fn dual_weights(delta: &UpdateMatrix, data: &LinearizedDataset) -> Result<DualWeights> {
    let n = data.len();
    let k = data.output_dim();
    let mut values = DMatrix::zeros(n, k);
    for (i, s) in data.samples().iter().enumerate() {
        let yhat = predict(s, delta)?;
        if !yhat.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("prediction"));
        }
        let g = loss_grad(data.loss(), &yhat, &s.label);
        for j in 0..k {
            values[(i, j)] = g[j] / n as f64;
        }
    }
    Ok(DualWeights { values })
}

/// `S(w) = sum_{ij} w_i^(j) G^(j)(X_i)`, block-diagonal by construction.
pub fn assemble_s(weights: &DualWeights, data: &LinearizedDataset) -> Result<UpdateMatrix> {
    let shape = data.shape();
    if weights.values.nrows() != data.len() || weights.values.ncols() != data.output_dim() {
        return Err(Error::DimensionMismatch("dual weights are not N x K".into()));
    }
    let mut s = DMatrix::zeros(shape.rows(), shape.cols());
    for (i, sample) in data.samples().iter().enumerate() {
        for j in 0..data.output_dim() {
            let w = weights.values[(i, j)];
            if w != 0.0 {
                sample.features.accumulate_scaled(j, w, &mut s);
            }
        }
    }
    Ok(s)
}

/// Gradient of `L_hat(delta)` with respect to delta; equals `S(dual_weights)`.
pub fn risk_gradient(delta: &UpdateMatrix, data: &LinearizedDataset) -> Result<UpdateMatrix> {
    assemble_s(&dual_weights(delta, data)?, data)
}

/// Exact gradient of `factored_risk` with respect to (u, v).
pub fn grad_factored(
    factors: &LoraFactors,
    data: &LinearizedDataset,
    lambda: f64,
    perturbation: &PsdPerturbation,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let delta = factors.product();
    let s = risk_gradient(&delta, data)?;
    let mut gu = &s * &factors.v + &factors.u * lambda;
    let mut gv = s.transpose() * &factors.u + &factors.v * lambda;
    if !perturbation.is_zero() {
        let q = factors.stacked();
        let pq = perturbation.matrix() * &q;
        let m = factors.u.nrows();
        let n = factors.v.nrows();
        gu += pq.view((0, 0), (m, q.ncols())) * 2.0;
        gv += pq.view((m, 0), (n, q.ncols())) * 2.0;
    }
    Ok((gu, gv))
}

/// Exact Hessian-vector product of `factored_risk` along (du, dv).
pub fn hessian_vector_product(
    factors: &LoraFactors,
    data: &LinearizedDataset,
    lambda: f64,
    perturbation: &PsdPerturbation,
    du: &DMatrix<f64>,
    dv: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = data.len();
    let k = data.output_dim();
    let delta = factors.product();
    let s = risk_gradient(&delta, data)?;
    // Directional change of the prediction: <G^(j), du v^T + u dv^T>.
    let dm = du * factors.v.transpose() + &factors.u * dv.transpose();
    let mut curvature_weights = DMatrix::zeros(n, k);
    for (i, sample) in data.samples().iter().enumerate() {
        let yhat = predict(sample, &delta)?;
        let hl = loss_hessian(data.loss(), &yhat);
        let mut a = DVector::zeros(k);
        for j in 0..k {
            a[j] = sample.features.block_inner(j, &dm);
        }
        let c = hl * a / n as f64;
        for j in 0..k {
            curvature_weights[(i, j)] = c[j];
        }
    }
    let s2 = assemble_s(&DualWeights { values: curvature_weights }, data)?;
    let mut hu = &s2 * &factors.v + &s * dv + du * lambda;
    let mut hv = s2.transpose() * &factors.u + s.transpose() * du + dv * lambda;
    if !perturbation.is_zero() {
        let m = factors.u.nrows();
        let nn = factors.v.nrows();
        let r = factors.rank_budget();
        let mut dq = DMatrix::zeros(m + nn, r);
        dq.view_mut((0, 0), (m, r)).copy_from(du);
        dq.view_mut((m, 0), (nn, r)).copy_from(dv);
        let pdq = perturbation.matrix() * dq;
        hu += pdq.view((0, 0), (m, r)) * 2.0;
        hv += pdq.view((m, 0), (nn, r)) * 2.0;
    }
    Ok((hu, hv))
}

/// Dense Hessian side guard.
pub const HESSIAN_GUARD: usize = 4096;

/// Exact dense Hessian of `factored_risk` in the flattened (u, v)
/// coordinates (Q stacked column-major).
pub fn hessian_factored(
    factors: &LoraFactors,
    data: &LinearizedDataset,
    lambda: f64,
    perturbation: &PsdPerturbation,
) -> Result<DMatrix<f64>> {
    let m = factors.u.nrows();
    let n = factors.v.nrows();
    let r = factors.rank_budget();
    let side = (m + n) * r;
    if side > HESSIAN_GUARD {
        return Err(Error::HessianGuard { side, guard: HESSIAN_GUARD });
    }
    let mut h = DMatrix::zeros(side, side);
    for col in 0..side {
        // Basis direction: entry `col` of the flattened Q.
        let b = col / (m + n);
        let p = col % (m + n);
        let mut du = DMatrix::zeros(m, r);
        let mut dv = DMatrix::zeros(n, r);
        if p < m {
            du[(p, b)] = 1.0;
        } else {
            dv[(p - m, b)] = 1.0;
        }
        let (hu, hv) = hessian_vector_product(factors, data, lambda, perturbation, &du, &dv)?;
        for bb in 0..r {
            for pp in 0..m {
                h[(bb * (m + n) + pp, col)] = hu[(pp, bb)];
            }
            for pp in 0..n {
                h[(bb * (m + n) + m + pp, col)] = hv[(pp, bb)];
            }
        }
    }
    // Symmetrize away round-off.
    let ht = h.transpose();
    Ok((h + ht) * 0.5)
}

/// Balanced factorization of `delta` from its SVD: `u = U sqrt(S)`,
/// `v = V sqrt(S)`, padded with zero columns up to rank budget `r`.
pub fn balanced_factorization(delta: &UpdateMatrix, r: usize) -> Result<LoraFactors> {
    let svd = delta.clone().svd(true, true);
    let u_full = svd.u.as_ref().ok_or(Error::SvdFailure)?;
    let vt = svd.v_t.as_ref().ok_or(Error::SvdFailure)?;
    let k = svd.singular_values.len().min(r);
    let (m, n) = (delta.nrows(), delta.ncols());
    let mut u = DMatrix::zeros(m, r);
    let mut v = DMatrix::zeros(n, r);
    for c in 0..k {
        let s = svd.singular_values[c].max(0.0).sqrt();
        for i in 0..m {
            u[(i, c)] = u_full[(i, c)] * s;
        }
        for i in 0..n {
            v[(i, c)] = vt[(c, i)] * s;
        }
    }
    LoraFactors::new(u, v)
}
