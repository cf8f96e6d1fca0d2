//! Landscape certification: SOSP certificates, rank deficiency of
//! perturbed stationary points, multistart global-optimality reports,
//! and the closed-form toy fixtures.

use nalgebra::{dvector, DMatrix};

use crate::error::Result;
use crate::model::{
    self, FeatureMap, Label, LinearizedDataset, LinearizedSample, LoraFactors, LossKind,
    PsdPerturbation,
};
use crate::optim::{self, TrainConfig, TrainOutcome};

/// The three 2x2 squared-error fixtures with K = 1 and f0 = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyInstance {
    A,
    B,
    C,
}

/// At `delta = [[w, x], [y, z]]` the empirical risks are
/// (a) `(x+y)^2`,
/// (b) `(z+4)^2/2 + (x+y)^2/2`,
/// (c) `(w-1)^2/3 + (z-4)^2/3 + (sqrt(3)x + sqrt(3)y)^2/3`.
pub fn toy_instance(which: ToyInstance) -> LinearizedDataset {
    let sample = |g: DMatrix<f64>, y: f64| LinearizedSample {
        features: FeatureMap::single_block(vec![g]).unwrap(),
        base_output: dvector![0.0],
        label: Label::Target(dvector![y]),
    };
    let s3 = 3.0f64.sqrt();
    let samples = match which {
        ToyInstance::A => vec![sample(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), 0.0)],
        ToyInstance::B => vec![
            sample(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]), -4.0),
            sample(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]), 0.0),
        ],
        ToyInstance::C => vec![
            sample(DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]), 1.0),
            sample(DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]), 4.0),
            sample(DMatrix::from_row_slice(2, 2, &[0.0, s3, s3, 0.0]), 0.0),
        ],
    };
    LinearizedDataset::new(samples, LossKind::SquaredError).unwrap()
}

pub const DEFAULT_TOL_GRAD: f64 = 1e-6;
pub const DEFAULT_TOL_HESS: f64 = 1e-6;
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct SospTolerances {
    pub tol_grad: f64,
    pub tol_hess: f64,
    pub rank_tol: f64,
}

impl Default for SospTolerances {
    fn default() -> Self {
        Self {
            tol_grad: DEFAULT_TOL_GRAD,
            tol_hess: DEFAULT_TOL_HESS,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub enum SospVerdict {
    Sosp,
    /// First-order stationary, but a strict-saddle witness exists: the
    /// stacked (m+n) x r direction attains curvature `lambda_min < -tol_hess`.
    FirstOrderOnly { witness: DMatrix<f64> },
    NotStationary,
}

#[derive(Debug, Clone)]
pub struct SospCertificate {
    pub grad_norm: f64,
    pub hessian_min_eigenvalue: f64,
    pub factor_rank: usize,
    pub tolerances: SospTolerances,
    pub verdict: SospVerdict,
}

impl SospCertificate {
    pub fn is_sosp(&self) -> bool {
        matches!(self.verdict, SospVerdict::Sosp)
    }
}

/// Numerical rank of the stacked factor matrix Q = [u; v].
pub fn rank_of_factors(factors: &LoraFactors, tolerance: f64) -> usize {
    let sv = factors.stacked().svd(false, false).singular_values;
    let smax = sv.max().max(0.0);
    sv.iter().filter(|&&s| s > tolerance * smax && s > 0.0).count()
}

/// Certify a candidate point: gradient norm, minimum Hessian eigenvalue
/// (dense eigensolve, guard inherited from the Hessian assembly), and
/// the numerical rank of Q.
pub fn sosp_certificate(
    factors: &LoraFactors,
    data: &LinearizedDataset,
    lambda: f64,
    perturbation: &PsdPerturbation,
    tolerances: &SospTolerances,
) -> Result<SospCertificate> {
    let (gu, gv) = model::grad_factored(factors, data, lambda, perturbation)?;
    let grad_norm = (gu.norm_squared() + gv.norm_squared()).sqrt();
    let h = model::hessian_factored(factors, data, lambda, perturbation)?;
    let eig = h.symmetric_eigen();
    let mut min_idx = 0;
    for i in 1..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[min_idx] {
            min_idx = i;
        }
    }
    let lambda_min = eig.eigenvalues[min_idx];
    let factor_rank = rank_of_factors(factors, tolerances.rank_tol);
    let verdict = if grad_norm > tolerances.tol_grad {
        SospVerdict::NotStationary
    } else if lambda_min >= -tolerances.tol_hess {
        SospVerdict::Sosp
    } else {
        // Un-flatten the eigenvector (column-major over Q) into a
        // stacked witness direction.
        let m = factors.u.nrows();
        let n = factors.v.nrows();
        let r = factors.rank_budget();
        let vec = eig.eigenvectors.column(min_idx);
        let mut witness = DMatrix::zeros(m + n, r);
        for c in 0..r {
            for p in 0..m + n {
                witness[(p, c)] = vec[c * (m + n) + p];
            }
        }
        SospVerdict::FirstOrderOnly { witness }
    };
    Ok(SospCertificate {
        grad_norm,
        hessian_min_eigenvalue: lambda_min,
        factor_rank,
        tolerances: *tolerances,
        verdict,
    })
}

#[derive(Debug, Clone)]
pub struct MultistartRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub final_factored_risk: f64,
    /// Unperturbed regularized objective `L_hat(uv^T) + lambda ||uv^T||_*`.
    pub final_unperturbed: f64,
    pub certificate: SospCertificate,
    pub within_bound: bool,
}

#[derive(Debug, Clone)]
pub struct MultistartReport {
    pub runs: Vec<MultistartRun>,
    /// max - min of final unperturbed objectives over non-diverged runs.
    pub spread: f64,
    /// Global minimum of the convex objective from the prox oracle.
    pub reference_global: f64,
    /// Nuclear norm of the prox solution, i.e. `||delta*_lambda||_*`.
    pub reference_nuclear: f64,
    /// Additive slack `2 eps ||delta*_lambda||_* + tolerance`.
    pub slack: f64,
    pub diverged: usize,
    pub all_within_bound: bool,
}

/// Train `runs` seeds of the same configuration (seeds `config.seed + i`)
/// and compare every final unperturbed objective against the convex
/// global minimum plus the Corollary-style slack
/// `2 * perturb_eps * ||delta*_lambda||_* + tolerance`.
pub fn multistart(
    data: &LinearizedDataset,
    config: &TrainConfig,
    runs: usize,
    tolerance: f64,
) -> Result<MultistartReport> {
    if runs < 2 {
        return Err(crate::error::Error::InvalidArgument("multistart needs runs >= 2".into()));
    }
    config.validate(data.len())?;
    let sol = crate::prox::global_minimum(data, config.lambda)?;
    let reference_global = sol.objective();
    let reference_nuclear = model::nuclear_norm(&sol.delta)?;
    let slack = 2.0 * config.perturb_eps * reference_nuclear + tolerance;
    let tols = SospTolerances {
        tol_grad: config.tol_grad.max(DEFAULT_TOL_GRAD),
        ..SospTolerances::default()
    };

    let results: Vec<Result<MultistartRun>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..runs)
            .map(|i| {
                let mut run_config = config.clone();
                run_config.seed = config.seed.wrapping_add(i as u64);
                let tols = tols;
                scope.spawn(move || -> Result<MultistartRun> {
                    let trace = optim::train(data, &run_config)?;
                    let delta = trace.factors.product();
                    let final_unperturbed =
                        model::regularized_risk(&delta, data, run_config.lambda)?;
                    let certificate = sosp_certificate(
                        &trace.factors,
                        data,
                        run_config.lambda,
                        &trace.perturbation,
                        &tols,
                    )?;
                    let diverged = matches!(trace.outcome, TrainOutcome::Diverged);
                    let within_bound =
                        !diverged && final_unperturbed <= reference_global + slack;
                    Ok(MultistartRun {
                        seed: run_config.seed,
                        outcome: trace.outcome,
                        final_factored_risk: trace.final_factored_risk(),
                        final_unperturbed,
                        certificate,
                        within_bound,
                    })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("multistart worker panicked")).collect()
    });

    let mut runs_out = Vec::with_capacity(runs);
    for r in results {
        runs_out.push(r?);
    }
    let finals: Vec<f64> = runs_out
        .iter()
        .filter(|r| !matches!(r.outcome, TrainOutcome::Diverged))
        .map(|r| r.final_unperturbed)
        .collect();
    let spread = if finals.is_empty() {
        0.0
    } else {
        let max = finals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = finals.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    };
    let diverged = runs_out.len() - finals.len();
    let all_within_bound = runs_out
        .iter()
        .filter(|r| !matches!(r.outcome, TrainOutcome::Diverged))
        .all(|r| r.within_bound);
    Ok(MultistartReport {
        runs: runs_out,
        spread,
        reference_global,
        reference_nuclear,
        slack,
        diverged,
        all_within_bound,
    })
}
