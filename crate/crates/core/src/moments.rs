//! Exact mean and variance of the atomic time `TA[k] = D ε[k]` under the structured filter,
//! and the cost built from them.
//!
//! With the structured filter written in full coordinates, `x̂[k+1] = F x̂[k] − G_k (y[k] − H x̂[k])`
//! where `G_k = [I⊗V̄⁺ + (I⊗1)Γ] L̂_k`, the prediction error obeys
//! `ε[k+1] = (F + G_k H) ε[k] + v[k] + G_k w[k]`. Its first two moments are propagated exactly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::filters::riccati_step;
use crate::linalg::{asymmetry, symmetrize};
use crate::model::{build_decomposition, Decomposition, EnsembleModel};

/// Distribution `N(μ₀, Q₀)` of the initial prediction error `ε[0] = x[0] − x̂[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitError {
    pub mu0: DVector<f64>,
    pub q0: DMatrix<f64>,
}

impl InitError {
    pub fn new(mu0: DVector<f64>, q0: DMatrix<f64>) -> Result<Self> {
        let dim = mu0.len();
        if q0.nrows() != dim || q0.ncols() != dim {
            return Err(Error::invalid(format!(
                "Q0 must be {dim}x{dim}, got {}x{}",
                q0.nrows(),
                q0.ncols()
            )));
        }
        if mu0.iter().chain(q0.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("initial error has non-finite entries"));
        }
        let asym = asymmetry(&q0);
        if asym > 1e-10 {
            return Err(Error::NotSymmetric { asymmetry: asym });
        }
        let norm = q0.norm();
        if norm > 0.0 {
            let min = SymmetricEigen::new(q0.clone()).eigenvalues.min();
            if min < -1e-12 * norm {
                return Err(Error::NotPositiveSemidefinite {
                    min_eigenvalue: min,
                    norm,
                });
            }
        }
        Ok(InitError { mu0, q0 })
    }

    /// `μ₀ = μ̂₀ ⊗ 1_m`, `Q₀ = Q̂₀ ⊗ p I_m`: every clock starts with the same error statistics.
    pub fn structured(mu_hat: &DVector<f64>, q_hat: &DMatrix<f64>, p: f64, m: usize) -> Result<Self> {
        if p < 0.0 || !p.is_finite() {
            return Err(Error::invalid(format!("p must be non-negative, got {p}")));
        }
        let ones = DMatrix::from_element(m, 1, 1.0);
        let mu0 = DMatrix::from_column_slice(mu_hat.len(), 1, mu_hat.as_slice()).kronecker(&ones);
        let q0 = q_hat.kronecker(&(DMatrix::<f64>::identity(m, m) * p));
        Self::new(DVector::from_column_slice(mu0.as_slice()), q0)
    }

    /// A known initial state: `μ₀ = x[0] − x̂[0]`, `Q₀ = 0`.
    pub fn deterministic(x0: &DVector<f64>, x_hat0: &DVector<f64>) -> Result<Self> {
        if x0.len() != x_hat0.len() {
            return Err(Error::invalid(format!(
                "x0 has length {}, x_hat0 has length {}",
                x0.len(),
                x_hat0.len()
            )));
        }
        let dim = x0.len();
        Self::new(x0 - x_hat0, DMatrix::zeros(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }
}

/// Observable-subspace gains `L̂_0..L̂_{T−1}`. They depend on `(model, P̂₀, T)` only.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub gains: Vec<DMatrix<f64>>,
    /// `P̂_T`.
    pub final_covariance: DMatrix<f64>,
}

impl GainSchedule {
    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }
}

pub fn gain_schedule(model: &EnsembleModel, p_hat0: &DMatrix<f64>, horizon: usize) -> Result<GainSchedule> {
    if horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let no = model.obs_dim();
    if p_hat0.nrows() != no || p_hat0.ncols() != no {
        return Err(Error::invalid(format!(
            "P̂0 must be {no}x{no}, got {}x{}",
            p_hat0.nrows(),
            p_hat0.ncols()
        )));
    }
    let f = model.obs_transition();
    let h = model.obs_observation();
    let w = model.obs_process_noise();
    let mut p = p_hat0.clone();
    let mut gains = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let (gain, next) = riccati_step(&f, &h, &p, &w, &model.measurement_noise, k)?;
        gains.push(gain);
        p = next;
    }
    Ok(GainSchedule {
        gains,
        final_covariance: p,
    })
}

/// `E[TA[k]]` and `V[TA[k]]` for `k = 0..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub horizon: usize,
}

/// Moments of `TA[k]` for the structured filter on `decomp` driven by the given schedule.
///
/// The error is tracked as the clock average `ε_c = (1/m)(I⊗1ᵀ)ε` and the clock
/// differences `e_o = (I⊗V̄)ε`, a fixed change of basis in which
/// `e_o[k+1] = (F_oo + L̂_k H_o) e_o[k] + L̂_k w[k] + (I⊗V̄) v[k]` does not involve `Γ` and
/// `ε_c[k+1] = A ε_c[k] + Γ L̂_k (H_o e_o[k] + w[k]) + (1/m)(I⊗1ᵀ) v[k]`, with
/// `TA[k] = C ε_c[k]`. `Γ` then enters once per step and never multiplies itself through
/// terms that cancel only in exact arithmetic.
pub fn ta_moments(
    model: &EnsembleModel,
    decomp: &Decomposition,
    init: &InitError,
    schedule: &GainSchedule,
    horizon: usize,
) -> Result<TaMoments> {
    if schedule.len() < horizon {
        return Err(Error::invalid(format!(
            "gain schedule covers {} steps, horizon is {horizon}",
            schedule.len()
        )));
    }
    let (n, m, no) = (model.n(), model.m(), model.obs_dim());
    if init.dim() != model.state_dim() {
        return Err(Error::invalid(format!(
            "initial error has dimension {}, expected {}",
            init.dim(),
            model.state_dim()
        )));
    }
    if decomp.gamma.nrows() != n || decomp.gamma.ncols() != no {
        return Err(Error::invalid("decomposition does not match the model"));
    }
    let gamma = &decomp.gamma;
    let nm = n + no;

    // basis change ε ↦ (ε_c, e_o)
    let mut to_split = DMatrix::zeros(nm, model.state_dim());
    to_split.rows_mut(0, n).copy_from(&(&model.common_sum / m as f64));
    to_split.rows_mut(n, no).copy_from(&model.obs_projector);
    let mut mean_state = &to_split * &init.mu0;
    let mut sigma = &to_split * &init.q0 * to_split.transpose();

    let a = &model.clock_transition;
    let f_o = model.obs_transition();
    let h_o = model.obs_observation();
    let mut noise = DMatrix::zeros(nm, nm);
    noise
        .view_mut((0, 0), (n, n))
        .copy_from(&(&model.clock_noise / m as f64));
    noise
        .view_mut((n, n), (no, no))
        .copy_from(&model.obs_process_noise());
    let mut phi = DMatrix::zeros(nm, nm);
    phi.view_mut((0, 0), (n, n)).copy_from(a);
    let mut input = DMatrix::zeros(nm, m - 1);

    let c = &model.selector;
    let mut mean = Vec::with_capacity(horizon + 1);
    let mut var = Vec::with_capacity(horizon + 1);
    let record = |s: &DVector<f64>, cov: &DMatrix<f64>, mean: &mut Vec<f64>, var: &mut Vec<f64>| {
        mean.push((c * s.rows(0, n))[(0, 0)]);
        let cc = cov.view((0, 0), (n, n));
        var.push((c * cc * c.transpose())[(0, 0)].max(0.0));
    };
    record(&mean_state, &sigma, &mut mean, &mut var);
    for gain in &schedule.gains[..horizon] {
        let b = gamma * gain;
        phi.view_mut((0, n), (n, no)).copy_from(&(&b * &h_o));
        phi.view_mut((n, n), (no, no)).copy_from(&(&f_o + gain * &h_o));
        input.rows_mut(0, n).copy_from(&b);
        input.rows_mut(n, no).copy_from(gain);
        mean_state = &phi * &mean_state;
        sigma =
            &phi * &sigma * phi.transpose() + &input * &model.measurement_noise * input.transpose() + &noise;
        symmetrize(&mut sigma);
        record(&mean_state, &sigma, &mut mean, &mut var);
    }
    if mean.iter().chain(&var).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("moment propagation overflowed".into()));
    }
    Ok(TaMoments { mean, var, horizon })
}

/// Non-negative weights `(δ₁, δ₂)` of the squared mean and the variance; not both zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub delta1: f64,
    pub delta2: f64,
}

impl CostWeights {
    pub fn new(delta1: f64, delta2: f64) -> Result<Self> {
        if !(delta1 >= 0.0 && delta2 >= 0.0 && delta1.is_finite() && delta2.is_finite()) {
            return Err(Error::invalid(format!(
                "cost weights must be finite and non-negative, got δ1={delta1}, δ2={delta2}"
            )));
        }
        if delta1 + delta2 == 0.0 {
            return Err(Error::invalid("cost weights δ1 and δ2 are both zero"));
        }
        Ok(CostWeights { delta1, delta2 })
    }
}

/// `δ₁ Σ E[TA[k]]² + δ₂ Σ V[TA[k]]` over `k = 0..=T`.
pub fn cost_from_moments(moments: &TaMoments, weights: &CostWeights) -> f64 {
    let sq_mean: f64 = moments.mean.iter().map(|m| m * m).sum();
    let var: f64 = moments.var.iter().sum();
    weights.delta1 * sq_mean + weights.delta2 * var
}

pub fn cost_j(
    model: &EnsembleModel,
    gamma: &DMatrix<f64>,
    init: &InitError,
    schedule: &GainSchedule,
    weights: &CostWeights,
    horizon: usize,
) -> Result<f64> {
    let decomp = build_decomposition(model, gamma)?;
    let moments = ta_moments(model, &decomp, init, schedule, horizon)?;
    Ok(cost_from_moments(&moments, weights))
}

/// Two-sided standard-normal quantile for a central probability `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(0.5 + 0.5 * level))
}

/// `(mean − z√var, mean + z√var)` per step.
pub fn confidence_interval(moments: &TaMoments, level: f64) -> Result<Vec<(f64, f64)>> {
    let z = normal_quantile(level)?;
    Ok(moments
        .mean
        .iter()
        .zip(&moments.var)
        .map(|(&m, &v)| {
            let half = z * v.max(0.0).sqrt();
            (m - half, m + half)
        })
        .collect())
}
