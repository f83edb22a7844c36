//! Dense linear-algebra and scalar helpers shared by the rest of the crate.
//!
//! The covariance state keeps `Λ = I + Σ φφᵀ` together with its inverse and
//! log-determinant. Inverses are maintained with the Sherman–Morrison rank-one
//! identity and periodically recomputed from a Cholesky factorization.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{invalid_input, Error, Result};

/// Default number of rank-one updates between two full refactorizations.
pub const DEFAULT_REFRESH_EVERY: usize = 1000;

static NEGATIVE_QUADFORM_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times [`elliptical_norm`] clamped a negative quadratic form to zero.
pub fn negative_quadform_clamps() -> u64 {
    NEGATIVE_QUADFORM_CLAMPS.load(Ordering::Relaxed)
}

/// Running empirical covariance with its inverse, log-determinant and the
/// inverse frozen at the start of the current epoch.
#[derive(Debug, Clone)]
pub struct CovarianceState {
    dim: usize,
    lambda: DMatrix<f64>,
    lambda_inv: DMatrix<f64>,
    log_det: f64,
    anchor_inv: Arc<DMatrix<f64>>,
    anchor_log_det: f64,
    refresh_every: usize,
    since_refresh: usize,
}

impl CovarianceState {
    /// Identity covariance of dimension `dim`; the anchor is also the identity.
    pub fn identity(dim: usize) -> Self {
        Self::with_refresh(dim, DEFAULT_REFRESH_EVERY)
    }

    pub fn with_refresh(dim: usize, refresh_every: usize) -> Self {
        assert!(dim > 0, "covariance dimension must be positive");
        let eye = DMatrix::identity(dim, dim);
        Self {
            dim,
            lambda: eye.clone(),
            lambda_inv: eye.clone(),
            log_det: 0.0,
            anchor_inv: Arc::new(eye),
            anchor_log_det: 0.0,
            refresh_every: refresh_every.max(1),
            since_refresh: 0,
        }
    }

    /// Builds a state from an explicit SPD matrix; inverse and log-det are
    /// computed by factorization and the anchor is set to the same matrix.
    pub fn from_matrix(lambda: DMatrix<f64>) -> Result<Self> {
        if !lambda.is_square() || lambda.nrows() == 0 {
            return invalid_input("covariance must be a non-empty square matrix");
        }
        let dim = lambda.nrows();
        let mut state = Self::identity(dim);
        state.lambda = lambda;
        state.refresh_inverse()?;
        state.freeze_anchor();
        Ok(state)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    pub fn lambda_inv(&self) -> &DMatrix<f64> {
        &self.lambda_inv
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn anchor_inv(&self) -> &Arc<DMatrix<f64>> {
        &self.anchor_inv
    }

    pub fn anchor_log_det(&self) -> f64 {
        self.anchor_log_det
    }

    /// `Λ ← Λ + φφᵀ`, with the inverse updated by Sherman–Morrison and the
    /// log-determinant by `log(1 + φᵀΛ⁻¹φ)`. The anchor is left untouched.
    pub fn rank_one_update(&mut self, phi: &DVector<f64>) -> Result<()> {
        if phi.len() != self.dim {
            return invalid_input(format!(
                "feature has dimension {}, covariance has {}",
                phi.len(),
                self.dim
            ));
        }
        if phi.iter().any(|v| !v.is_finite()) {
            return invalid_input("non-finite feature entry");
        }
        if phi.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        if self.since_refresh >= self.refresh_every {
            self.refresh_inverse()?;
        }
        let inv_phi = &self.lambda_inv * phi;
        let quad = phi.dot(&inv_phi).max(0.0);
        let denom = 1.0 + quad;
        self.lambda_inv
            .ger(-1.0 / denom, &inv_phi, &inv_phi, 1.0);
        self.lambda.ger(1.0, phi, phi, 1.0);
        self.log_det += quad.ln_1p();
        self.since_refresh += 1;
        Ok(())
    }

    /// Recomputes the inverse and log-determinant from `Λ` by Cholesky.
    pub fn refresh_inverse(&mut self) -> Result<()> {
        let chol = self.lambda.clone().cholesky().ok_or_else(|| {
            Error::Numeric("covariance lost positive definiteness".to_string())
        })?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let mut inv = chol.inverse();
        symmetrize(&mut inv);
        self.lambda_inv = inv;
        self.log_det = log_det;
        self.since_refresh = 0;
        Ok(())
    }

    /// Freezes the current inverse as the epoch anchor.
    pub fn freeze_anchor(&mut self) {
        self.anchor_inv = Arc::new(self.lambda_inv.clone());
        self.anchor_log_det = self.log_det;
    }

    /// `log det Λ − log det Λ_anchor`.
    pub fn log_det_growth(&self) -> f64 {
        self.log_det - self.anchor_log_det
    }

    /// Max-entry deviation of `ΛΛ⁻¹` from the identity.
    pub fn inverse_residual(&self) -> f64 {
        let prod = &self.lambda * &self.lambda_inv;
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((prod[(i, j)] - target).abs());
            }
        }
        worst
    }

    #[doc(hidden)]
    pub fn perturb_inverse_for_tests(&mut self, amount: f64) {
        for v in self.lambda_inv.iter_mut() {
            *v += amount;
        }
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// `√(φᵀ M φ)`; a negative quadratic form (rounding on a near-singular `M`)
/// is clamped to zero and counted.
pub fn elliptical_norm(inv: &DMatrix<f64>, phi: &DVector<f64>) -> f64 {
    let quad = phi.dot(&(inv * phi));
    if quad < 0.0 {
        NEGATIVE_QUADFORM_CLAMPS.fetch_add(1, Ordering::Relaxed);
        log::warn!("negative quadratic form {quad:e} clamped to zero");
        return 0.0;
    }
    quad.sqrt()
}

/// `(1/η) log Σ_a w_a exp(η v_a)`, stabilized by subtracting the maximum over
/// the support of `w`. The result is clamped into `[min v, max v]` over the
/// support to absorb rounding.
pub fn weighted_logsumexp(weights: &[f64], values: &[f64], eta: f64) -> Result<f64> {
    if weights.len() != values.len() || weights.is_empty() {
        return invalid_input("weights and values must be non-empty and of equal length");
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return invalid_input(format!("eta must be positive and finite, got {eta}"));
    }
    let mut total = 0.0;
    for &w in weights {
        if !(w >= 0.0) {
            return invalid_input(format!("negative or NaN weight {w}"));
        }
        total += w;
    }
    if total == 0.0 {
        return invalid_input("all weights are zero");
    }
    if (total - 1.0).abs() > 1e-12 * (weights.len() as f64).max(1.0) {
        return invalid_input(format!("weights sum to {total}, expected 1"));
    }
    let mut hi = f64::NEG_INFINITY;
    let mut lo = f64::INFINITY;
    for (&w, &v) in weights.iter().zip(values) {
        if w > 0.0 {
            if !v.is_finite() {
                return invalid_input("non-finite value under positive weight");
            }
            hi = hi.max(v);
            lo = lo.min(v);
        }
    }
    let acc: f64 = weights
        .iter()
        .zip(values)
        .filter(|(&w, _)| w > 0.0)
        .map(|(&w, &v)| w * (eta * (v - hi)).exp())
        .sum();
    Ok((hi + acc.ln() / eta).clamp(lo, hi))
}

/// Logistic function `e^z / (1 + e^z)`, branching on the sign of `z`.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `eta * scores`.
pub fn softmax(scores: &[f64], eta: f64) -> Vec<f64> {
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| (eta * (s - hi)).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    out
}
