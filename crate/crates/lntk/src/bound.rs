//! Generalization machinery: the prescribed regularization strength,
//! the excess-risk bound, synthetic tasks with a planted truth, and a
//! Monte-Carlo check of the bound and its 1/sqrt(N) scaling.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, BlockShape, FeatureMap, Label, LinearizedDataset, LinearizedSample, LossKind,
    UpdateMatrix,
};
use crate::optim::{self, rank_threshold, InitScheme, TrainConfig, TrainOutcome};

/// Inputs of the high-probability excess-risk bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundSpec {
    pub k: usize,
    /// R: almost-sure bound on ||G^(j)(X)||_F per sample.
    pub feature_bound: f64,
    pub n: usize,
    /// Confidence eta in (0, 1): the bound holds with probability > 1 - eta.
    pub eta: f64,
    /// Slack epsilon > 0 shared by lambda and the perturbation budget.
    pub slack_eps: f64,
    /// Per-sample Lipschitz constant of the loss in the prediction:
    /// sqrt(2) for cross-entropy; supplied explicitly for squared error.
    pub loss_lipschitz: f64,
    pub nuclear_true: f64,
    pub nuclear_lambda: f64,
}

impl BoundSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::InvalidArgument("K and N must be >= 1".into()));
        }
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(Error::InvalidArgument("eta must be in (0, 1)".into()));
        }
        if self.slack_eps < 0.0
            || self.feature_bound <= 0.0
            || self.loss_lipschitz <= 0.0
            || self.nuclear_true <= 0.0
            || self.nuclear_lambda < 0.0
        {
            return Err(Error::InvalidArgument("bound constants must be positive".into()));
        }
        Ok(())
    }
}

/// Lipschitz constant of the cross-entropy loss in the logits.
pub const CE_LIPSCHITZ: f64 = std::f64::consts::SQRT_2;

/// Per-sample Lipschitz constant of the squared-error loss over the
/// reachable class: predictions satisfy |yhat_j| <= R * D, so
/// `||grad|| = ||2(yhat - Y)|| <= 2 (sqrt(K) R D + label_bound)`.
pub fn mse_lipschitz(feature_bound: f64, class_bound: f64, label_bound: f64, k: usize) -> f64 {
    2.0 * ((k as f64).sqrt() * feature_bound * class_bound + label_bound)
}

fn confidence_factor(eta: f64) -> f64 {
    2.0 + (1.0 / eta).ln().sqrt()
}

/// Prescribed regularization strength
/// `lambda = (2 + eps) sqrt(2K) G_l R / sqrt(N) * (2 + sqrt(log 1/eta))`.
/// For cross-entropy (G_l = sqrt(2)) this is exactly
/// `2 (2 + eps) sqrt(K) R / sqrt(N) * (2 + sqrt(log 1/eta))`.
pub fn lambda_from_bound(spec: &BoundSpec) -> Result<f64> {
    spec.validate()?;
    Ok((2.0 + spec.slack_eps) * (2.0 * spec.k as f64).sqrt() * spec.loss_lipschitz
        * spec.feature_bound
        / (spec.n as f64).sqrt()
        * confidence_factor(spec.eta))
}

/// High-probability excess-risk bound
/// `||delta*_true||_* (2 + eps)^2 sqrt(2K) G_l R / sqrt(N) * (2 + sqrt(log 1/eta))`.
pub fn excess_risk_bound(spec: &BoundSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.nuclear_true * (2.0 + spec.slack_eps).powi(2) * (2.0 * spec.k as f64).sqrt()
        * spec.loss_lipschitz
        * spec.feature_bound
        / (spec.n as f64).sqrt()
        * confidence_factor(spec.eta))
}

/// Radius handed to the PSD perturbation sampler:
/// `eps lambda ||delta*_true||_* / (2 ||delta*_lambda||_*)`.
/// When the convex solution is zero the constraint is vacuous and the
/// budget is unbounded (+inf sentinel).
pub fn perturbation_budget(spec: &BoundSpec, lambda: f64) -> Result<f64> {
    spec.validate()?;
    if spec.nuclear_lambda == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(spec.slack_eps * lambda * spec.nuclear_true / (2.0 * spec.nuclear_lambda))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LabelLaw {
    /// `Y = <G, delta_true> + sigma_y * N(0, I)`; the truth is the exact
    /// population minimizer.
    Gaussian { sigma_y: f64 },
    /// Class sampled from the softmax of the true logits; the truth is
    /// the exact population minimizer of expected cross-entropy.
    Softmax,
}

/// Synthetic distribution with a planted truth: random block features
/// normalized so every `||G^(j)(X)||_F = R` exactly.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub shape: BlockShape,
    pub k: usize,
    pub feature_bound: f64,
    pub delta_true: UpdateMatrix,
    pub label_law: LabelLaw,
    pub n_pop: usize,
    pub seed: u64,
}

impl SyntheticTask {
    /// Squared-error task over a single m x n block with the planted
    /// truth normalized to unit nuclear norm.
    pub fn default_mse(m: usize, n: usize, k: usize, feature_bound: f64, sigma_y: f64, seed: u64) -> Self {
        Self::build(m, n, k, feature_bound, LabelLaw::Gaussian { sigma_y }, seed)
    }

    /// Cross-entropy task (K classes) with unit-nuclear-norm truth.
    pub fn default_ce(m: usize, n: usize, k: usize, feature_bound: f64, seed: u64) -> Self {
        Self::build(m, n, k, feature_bound, LabelLaw::Softmax, seed)
    }

    /// Squared-error task whose planted truth has the prescribed
    /// singular values (random orthogonal factors). The spectrum shape
    /// controls how the excess risk of the penalized estimate scales
    /// with the regularization strength.
    pub fn mse_with_spectrum(
        m: usize,
        n: usize,
        k: usize,
        feature_bound: f64,
        sigma_y: f64,
        spectrum: &[f64],
        seed: u64,
    ) -> Self {
        assert!(spectrum.len() <= m.min(n), "spectrum longer than min(m, n)");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let haar = |d: usize, rng: &mut ChaCha8Rng| {
            DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal)).qr().q()
        };
        let u = haar(m, &mut rng);
        let v = haar(n, &mut rng);
        let mut delta_true = DMatrix::zeros(m, n);
        for (i, &s) in spectrum.iter().enumerate() {
            delta_true += u.column(i) * v.column(i).transpose() * s;
        }
        Self {
            shape: BlockShape::new(vec![(m, n)]).unwrap(),
            k,
            feature_bound,
            delta_true,
            label_law: LabelLaw::Gaussian { sigma_y },
            n_pop: 10_000,
            seed,
        }
    }

    fn build(m: usize, n: usize, k: usize, feature_bound: f64, label_law: LabelLaw, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut delta_true = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let nuc = model::nuclear_norm(&delta_true).expect("planted truth SVD");
        // delta*_true != 0 is a standing hypothesis; normalize ||.||_* = 1.
        delta_true /= nuc;
        Self {
            shape: BlockShape::new(vec![(m, n)]).unwrap(),
            k,
            feature_bound,
            delta_true,
            label_law,
            n_pop: 10_000,
            seed,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.label_law {
            LabelLaw::Gaussian { .. } => LossKind::SquaredError,
            LabelLaw::Softmax => LossKind::CrossEntropy,
        }
    }

    pub fn nuclear_true(&self) -> f64 {
        model::nuclear_norm(&self.delta_true).expect("planted truth SVD")
    }

    fn draw_sample(&self, rng: &mut ChaCha8Rng) -> LinearizedSample {
        let per_coord: Vec<Vec<DMatrix<f64>>> = (0..self.k)
            .map(|_| {
                let mut blocks: Vec<DMatrix<f64>> = self
                    .shape
                    .blocks()
                    .iter()
                    .map(|&(mi, ni)| {
                        DMatrix::from_fn(mi, ni, |_, _| rng.sample::<f64, _>(StandardNormal))
                    })
                    .collect();
                // Normalize the whole coordinate map to ||G^(j)||_F = R.
                let fro: f64 =
                    blocks.iter().map(|b| b.norm_squared()).sum::<f64>().sqrt();
                let scale = if fro > 0.0 { self.feature_bound / fro } else { 0.0 };
                for b in blocks.iter_mut() {
                    *b *= scale;
                }
                blocks
            })
            .collect();
        let features = FeatureMap::new(self.shape.clone(), per_coord).unwrap();
        let mut logits = DVector::zeros(self.k);
        for j in 0..self.k {
            logits[j] = features.block_inner(j, &self.delta_true);
        }
        let label = match self.label_law {
            LabelLaw::Gaussian { sigma_y } => {
                let noise =
                    DVector::from_fn(self.k, |_, _| rng.sample::<f64, _>(StandardNormal) * sigma_y);
                Label::Target(&logits + noise)
            }
            LabelLaw::Softmax => {
                let max = logits.max();
                let probs: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
                let total: f64 = probs.iter().sum();
                let mut u = rng.gen::<f64>() * total;
                let mut class = self.k - 1;
                for (c, p) in probs.iter().enumerate() {
                    if u < *p {
                        class = c;
                        break;
                    }
                    u -= p;
                }
                Label::Class(class)
            }
        };
        LinearizedSample { features, base_output: DVector::zeros(self.k), label }
    }

    /// Draw a training set from the caller's stream.
    pub fn draw_dataset(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<LinearizedDataset> {
        let samples = (0..n).map(|_| self.draw_sample(rng)).collect();
        LinearizedDataset::new(samples, self.loss_kind())
    }

    /// Fixed evaluation set derived from the task seed; shared by all
    /// trials of a task so population-risk estimates are paired.
    pub fn holdout(&self) -> Result<LinearizedDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        self.draw_dataset(self.n_pop, &mut rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub converged: bool,
    pub excess: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub n: usize,
    pub trials: usize,
    pub lambda: f64,
    pub bound: f64,
    pub records: Vec<TrialRecord>,
    pub excluded: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub mean_excess: f64,
    pub std_err_excess: f64,
}

/// Per-trial: draw N samples, set lambda from the bound, solve the
/// convex problem to budget the perturbation, train the perturbed
/// factored model, and measure the excess population risk of the result
/// against the planted truth on the shared holdout. Non-converged
/// trials are flagged and excluded from the violation count.
pub fn monte_carlo_gap(
    task: &SyntheticTask,
    spec: &BoundSpec,
    trials: usize,
    master_seed: u64,
) -> Result<MonteCarloReport> {
    if trials < 2 {
        return Err(Error::InvalidArgument("need at least 2 trials".into()));
    }
    spec.validate()?;
    let n = spec.n;
    let lambda = lambda_from_bound(spec)?;
    let bound = excess_risk_bound(spec)?;
    let holdout = task.holdout()?;
    let truth_risk = model::empirical_risk(&task.delta_true, &holdout)?;
    let r = rank_threshold(spec.k, n).min(task.shape.rows().min(task.shape.cols()) * 2);

    let workers = std::thread::available_parallelism().map(|p| p.get()).unwrap_or(4);
    let records: Vec<TrialRecord> = std::thread::scope(|scope| {
        let chunks: Vec<Vec<usize>> = (0..workers)
            .map(|w| (0..trials).filter(|t| t % workers == w).collect())
            .collect();
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                let holdout = &holdout;
                scope.spawn(move || -> Result<Vec<TrialRecord>> {
                    let mut out = Vec::with_capacity(chunk.len());
                    for t in chunk {
                        let mut rng = ChaCha8Rng::seed_from_u64(
                            master_seed.wrapping_add(0x517c_c1b7_2722_0a95u64.wrapping_mul(t as u64 + 1)),
                        );
                        let data = task.draw_dataset(n, &mut rng)?;
                        // Budget the perturbation from the convex solution.
                        let sol = crate::prox::global_minimum(&data, lambda)?;
                        let nuclear_lambda = model::nuclear_norm(&sol.delta)?;
                        let budget_spec =
                            BoundSpec { nuclear_lambda, ..spec.clone() };
                        let budget = perturbation_budget(&budget_spec, lambda)?;
                        let perturb_eps = if budget.is_finite() { budget.min(lambda) } else { 0.0 };
                        let config = TrainConfig {
                            rank: r,
                            lambda,
                            perturb_eps,
                            step_size: 0.5,
                            epochs: 30_000,
                            init: InitScheme::BothGaussian,
                            sigma_init: 0.2,
                            seed: master_seed ^ (t as u64),
                            tol_grad: 1e-6,
                            backtrack: true,
                            ..TrainConfig::default()
                        };
                        let trace = optim::train(&data, &config)?;
                        let converged = matches!(trace.outcome, TrainOutcome::Converged);
                        let delta_hat = trace.factors.product();
                        let excess =
                            model::empirical_risk(&delta_hat, holdout)? - truth_risk;
                        out.push(TrialRecord { trial: t, converged, excess });
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("monte carlo worker panicked"))
            .collect::<Result<Vec<_>>>()
            .map(|v| {
                let mut flat: Vec<TrialRecord> = v.into_iter().flatten().collect();
                flat.sort_by_key(|r| r.trial);
                flat
            })
    })?;

    let kept: Vec<&TrialRecord> = records.iter().filter(|r| r.converged).collect();
    let excluded = trials - kept.len();
    let violations = kept.iter().filter(|r| r.excess > bound).count();
    let violation_rate =
        if kept.is_empty() { 0.0 } else { violations as f64 / kept.len() as f64 };
    let mean_excess = if kept.is_empty() {
        f64::NAN
    } else {
        kept.iter().map(|r| r.excess).sum::<f64>() / kept.len() as f64
    };
    let std_err_excess = if kept.len() < 2 {
        f64::NAN
    } else {
        let var = kept.iter().map(|r| (r.excess - mean_excess).powi(2)).sum::<f64>()
            / (kept.len() - 1) as f64;
        (var / kept.len() as f64).sqrt()
    };
    Ok(MonteCarloReport {
        n,
        trials,
        lambda,
        bound,
        records,
        excluded,
        violations,
        violation_rate,
        mean_excess,
        std_err_excess,
    })
}

/// Least-squares slope and R^2 of `log y` against `log x`.
pub fn loglog_fit(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 points for a fit".into()));
    }
    if points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return Err(Error::InvalidArgument("log-log fit needs positive data".into()));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = logs.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, r2))
}
