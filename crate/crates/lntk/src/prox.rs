//! Proximal gradient on the nuclear-norm-regularized linearized risk.
//!
//! This is the convex baseline: it certifies the global minimum value
//! `min_delta L_hat(delta) + lambda ||delta||_*` used by the landscape
//! and rank-reduction experiments.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, LinearizedDataset, UpdateMatrix};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProxConfig {
    pub lambda: f64,
    /// Initial step size.
    pub step0: f64,
    /// Backtracking shrink factor in (0, 1).
    pub beta: f64,
    pub max_iter: usize,
    /// Stop when `||delta_{t+1} - delta_t||_F / alpha` drops below this.
    pub tol: f64,
}

impl Default for ProxConfig {
    fn default() -> Self {
        Self { lambda: 0.0, step0: 1.0, beta: 0.5, max_iter: 20_000, tol: 1e-10 }
    }
}

impl ProxConfig {
    fn validate(&self) -> Result<()> {
        if self.step0 <= 0.0 {
            return Err(Error::InvalidArgument("initial step must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta) || self.beta == 0.0 {
            return Err(Error::InvalidArgument("beta must be in (0, 1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ProxResult {
    pub delta: UpdateMatrix,
    /// Regularized objective per iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl ProxResult {
    pub fn objective(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NAN)
    }
}

/// Singular value thresholding: the prox of `tau ||.||_*`.
pub fn svt(delta: &UpdateMatrix, tau: f64) -> Result<UpdateMatrix> {
    if tau < 0.0 {
        return Err(Error::InvalidArgument("threshold must be >= 0".into()));
    }
    if tau == 0.0 {
        return Ok(delta.clone());
    }
    let svd = delta.clone().svd(true, true);
    let u = svd.u.as_ref().ok_or(Error::SvdFailure)?;
    let vt = svd.v_t.as_ref().ok_or(Error::SvdFailure)?;
    let mut s = svd.singular_values.clone();
    for x in s.iter_mut() {
        *x = (*x - tau).max(0.0);
    }
    Ok(u * DMatrix::from_diagonal(&s) * vt)
}

/// Proximal gradient with backtracking on the smooth part:
/// `delta_{t+1} = svt(delta_t - alpha grad L_hat(delta_t), alpha lambda)`.
pub fn prox_gradient(data: &LinearizedDataset, config: &ProxConfig) -> Result<ProxResult> {
    config.validate()?;
    let m = data.shape().rows();
    let n = data.shape().cols();
    let mut delta: UpdateMatrix = DMatrix::zeros(m, n);
    let mut alpha = config.step0;
    let mut smooth = model::empirical_risk(&delta, data)?;
    let mut trace = vec![smooth + config.lambda * model::nuclear_norm(&delta)?];
    let mut converged = false;
    let mut iterations = 0;

    for t in 0..config.max_iter {
        iterations = t + 1;
        let grad = model::risk_gradient(&delta, data)?;
        // Backtrack until the quadratic upper bound on the smooth part holds.
        let (next, next_smooth) = loop {
            let candidate = svt(&(&delta - &grad * alpha), alpha * config.lambda)?;
            let diff = &candidate - &delta;
            let cand_smooth = model::empirical_risk(&candidate, data)?;
            let bound = smooth + grad.dot(&diff) + diff.norm_squared() / (2.0 * alpha);
            if cand_smooth <= bound + 1e-15 * (1.0 + smooth.abs()) || alpha < 1e-14 {
                break (candidate, cand_smooth);
            }
            alpha *= config.beta;
        };
        let move_norm = (&next - &delta).norm();
        delta = next;
        smooth = next_smooth;
        trace.push(smooth + config.lambda * model::nuclear_norm(&delta)?);
        if move_norm / alpha < config.tol {
            converged = true;
            break;
        }
    }
    Ok(ProxResult { delta, trace, converged, iterations })
}

/// Certified global minimum of the regularized risk, from a tight prox solve.
pub fn global_minimum(data: &LinearizedDataset, lambda: f64) -> Result<ProxResult> {
    let config = ProxConfig { lambda, max_iter: 100_000, tol: 1e-10, ..Default::default() };
    prox_gradient(data, &config)
}

pub fn global_min_value(data: &LinearizedDataset, lambda: f64) -> Result<f64> {
    Ok(global_minimum(data, lambda)?.objective())
}
