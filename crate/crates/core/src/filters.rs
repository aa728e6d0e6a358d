//! Conventional (full-state) and structured Kalman filters for the ensemble model.
//!
//! Both filters use the predictor form with a negated gain:
//! `x̂[k+1] = F x̂[k] − L_k (y[k] − H x̂[k])`, `L_k = −F P_k Hᵀ (H P_k Hᵀ + R)⁻¹`.
//! Innovation covariances are factorized (Cholesky), never inverted, and every covariance is
//! resymmetrized after each step.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{kron_with_eye, solve_spd_right, symmetrize};
use crate::model::{Decomposition, EnsembleModel};

fn check_len(what: &str, v: &DVector<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(Error::invalid(format!(
            "{what} has length {}, expected {len}",
            v.len()
        )));
    }
    Ok(())
}

fn check_square(what: &str, p: &DMatrix<f64>, dim: usize) -> Result<()> {
    if p.nrows() != dim || p.ncols() != dim {
        return Err(Error::invalid(format!(
            "{what} must be {dim}x{dim}, got {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    Ok(())
}

/// `(gain, next covariance)` of one Riccati step for `(transition, observation)`.
pub(crate) fn riccati_step(
    transition: &DMatrix<f64>,
    observation: &DMatrix<f64>,
    p: &DMatrix<f64>,
    noise: &DMatrix<f64>,
    innovation_reg: &DMatrix<f64>,
    step: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let pht = p * observation.transpose();
    let mut s = observation * &pht + innovation_reg;
    symmetrize(&mut s);
    let gain = -solve_spd_right(&(transition * &pht), &s, step)?;
    let mut next = (transition + &gain * observation) * p * transition.transpose() + noise;
    symmetrize(&mut next);
    Ok((gain, next))
}

/// Conventional Kalman filter state: predicted state and its error covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CkfState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    pub k: usize,
}

impl CkfState {
    pub fn new(model: &EnsembleModel, x_hat: DVector<f64>, p: DMatrix<f64>) -> Result<Self> {
        check_len("x_hat", &x_hat, model.state_dim())?;
        check_square("P0", &p, model.state_dim())?;
        Ok(CkfState { x_hat, p, k: 0 })
    }
}

/// One step of the conventional Kalman filter. Returns the next state and the gain `L_k`.
pub fn ckf_step(
    state: &CkfState,
    y: &DVector<f64>,
    model: &EnsembleModel,
) -> Result<(CkfState, DMatrix<f64>)> {
    check_len("measurement", y, model.m() - 1)?;
    let f = &model.transition;
    let h = &model.observation;
    let (gain, p) = riccati_step(
        f,
        h,
        &state.p,
        &model.process_noise,
        &model.measurement_noise,
        state.k,
    )?;
    let innovation = y - h * &state.x_hat;
    let x_hat = f * &state.x_hat - &gain * innovation;
    Ok((
        CkfState {
            x_hat,
            p,
            k: state.k + 1,
        },
        gain,
    ))
}

/// Structured Kalman filter state in decomposed coordinates.
#[derive(Debug, Clone)]
pub struct SkfState {
    /// Predicted observable coordinates `ξ̂_o`.
    pub xi_o: DVector<f64>,
    /// Predicted unobservable coordinates `ξ̂_ō`.
    pub xi_obar: DVector<f64>,
    /// Observable error covariance `P̂`.
    pub p_o: DMatrix<f64>,
    pub decomp: Arc<Decomposition>,
    pub k: usize,
}

impl SkfState {
    /// Starts from a full-space initial guess, `ξ̂[0] = T⁻¹ x̂[0]`.
    pub fn new(decomp: Arc<Decomposition>, x_hat0: &DVector<f64>, p_o: DMatrix<f64>) -> Result<Self> {
        check_len("x_hat0", x_hat0, decomp.t.nrows())?;
        check_square("P̂0", &p_o, decomp.obs_dim())?;
        let (xi_o, xi_obar) = decomp.to_coordinates(x_hat0);
        Ok(SkfState {
            xi_o,
            xi_obar,
            p_o,
            decomp,
            k: 0,
        })
    }

    /// Full-space gain `G_k = [I⊗V̄⁺ + (I⊗1)Γ] L̂_k`, i.e. `T (L̂_k; 0)`.
    pub fn full_gain(&self, gain: &DMatrix<f64>) -> DMatrix<f64> {
        structured_full_gain(&self.decomp, gain)
    }

    /// Advances with a known gain and next covariance; used to replay a gain schedule.
    pub fn advance(&self, y: &DVector<f64>, gain: &DMatrix<f64>, next_p: DMatrix<f64>) -> SkfState {
        let d = &self.decomp;
        let innovation = y - &d.obs_observation * &self.xi_o;
        let xi_o = &d.obs_transition * &self.xi_o - gain * innovation;
        // the unobservable predictor uses the pre-update ξ̂_o
        let xi_obar = &d.coupling * &self.xi_o + &d.unobs_transition * &self.xi_obar;
        SkfState {
            xi_o,
            xi_obar,
            p_o: next_p,
            decomp: Arc::clone(&self.decomp),
            k: self.k + 1,
        }
    }
}

pub fn structured_full_gain(decomp: &Decomposition, gain: &DMatrix<f64>) -> DMatrix<f64> {
    decomp.t.columns(0, decomp.obs_dim()) * gain
}

/// One step of the structured Kalman filter. Returns the next state and the observable gain `L̂_k`.
pub fn skf_step(
    state: &SkfState,
    y: &DVector<f64>,
    model: &EnsembleModel,
) -> Result<(SkfState, DMatrix<f64>)> {
    check_len("measurement", y, model.m() - 1)?;
    let d = &state.decomp;
    let (gain, next_p) = riccati_step(
        &d.obs_transition,
        &d.obs_observation,
        &state.p_o,
        &d.obs_process_noise,
        &model.measurement_noise,
        state.k,
    )?;
    Ok((state.advance(y, &gain, next_p), gain))
}

/// `x̂ = T ξ̂`.
pub fn skf_reconstruct(state: &SkfState) -> DVector<f64> {
    state.decomp.to_state(&state.xi_o, &state.xi_obar)
}

/// Scaling of the innovation term `ρ (V̄V̄ᵀ)⁻¹` in the reduced covariance recursion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InnovationScale {
    /// `ρ = r` (measurement standard deviation).
    StdDev,
    /// `ρ = r²` (measurement variance).
    #[default]
    Variance,
}

impl InnovationScale {
    pub fn rho(self, r_sq: f64) -> f64 {
        match self {
            InnovationScale::StdDev => r_sq.sqrt(),
            InnovationScale::Variance => r_sq,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            InnovationScale::StdDev => "r",
            InnovationScale::Variance => "r^2",
        }
    }
}

/// One step of the reduced covariance recursion
/// `P̌_{k+1} = (F_oo + Ǧ_k H_o) P̌_k F_ooᵀ + W_clock ⊗ I_{m−1}` with
/// `Ǧ_k = −F_oo P̌_k H_oᵀ (H_o P̌_k H_oᵀ + ρ (V̄V̄ᵀ)⁻¹)⁻¹`.
///
/// When `P_0 (I⊗V̄)⁺ = (I⊗V̄)⁺ P̌_0`, the conventional filter's covariance satisfies
/// `P_k (I⊗V̄)⁺ = (I⊗V̄)⁺ P̌_k` for all k.
pub fn reduced_cov_step(
    p_check: &DMatrix<f64>,
    model: &EnsembleModel,
    scale: InnovationScale,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = model.m();
    check_square("P̌", p_check, model.obs_dim())?;
    // (V̄V̄ᵀ)⁻¹ = I − 11ᵀ/m
    let gram_inv =
        DMatrix::<f64>::identity(m - 1, m - 1) - DMatrix::from_element(m - 1, m - 1, 1.0 / m as f64);
    let reg = gram_inv * scale.rho(model.params.r_sq);
    let noise = kron_with_eye(&model.clock_noise, m - 1);
    let (gain, next) = riccati_step(
        &model.obs_transition(),
        &model.obs_observation(),
        p_check,
        &noise,
        &reg,
        0,
    )?;
    Ok((next, gain))
}

/// Ideal recursion of the summed unobservable error of the conventional filter:
/// `ε_ō[k+1] = A ε_ō[k] + (I⊗1ᵀ) v[k]`.
pub fn ideal_unobs_error_step(
    eps_obar: &DVector<f64>,
    v: &DVector<f64>,
    model: &EnsembleModel,
) -> DVector<f64> {
    &model.clock_transition * eps_obar + &model.common_sum * v
}

/// Predicted states and gains of a filter run over a measurement stream.
#[derive(Debug, Clone)]
pub struct FilterRun {
    /// `x̂[0..=K]`.
    pub x_hat: Vec<DVector<f64>>,
    /// `L_k` (CKF) or `L̂_k` (SKF), k = 0..K.
    pub gains: Vec<DMatrix<f64>>,
}

pub fn run_ckf(
    model: &EnsembleModel,
    x_hat0: &DVector<f64>,
    p0: &DMatrix<f64>,
    ys: &[DVector<f64>],
) -> Result<FilterRun> {
    let mut state = CkfState::new(model, x_hat0.clone(), p0.clone())?;
    let mut x_hat = vec![state.x_hat.clone()];
    let mut gains = Vec::with_capacity(ys.len());
    for y in ys {
        let (next, gain) = ckf_step(&state, y, model)?;
        x_hat.push(next.x_hat.clone());
        gains.push(gain);
        state = next;
    }
    Ok(FilterRun { x_hat, gains })
}

pub fn run_skf(
    model: &EnsembleModel,
    decomp: Arc<Decomposition>,
    x_hat0: &DVector<f64>,
    p_hat0: &DMatrix<f64>,
    ys: &[DVector<f64>],
) -> Result<FilterRun> {
    let mut state = SkfState::new(decomp, x_hat0, p_hat0.clone())?;
    let mut x_hat = vec![skf_reconstruct(&state)];
    let mut gains = Vec::with_capacity(ys.len());
    for y in ys {
        let (next, gain) = skf_step(&state, y, model)?;
        x_hat.push(skf_reconstruct(&next));
        gains.push(gain);
        state = next;
    }
    Ok(FilterRun { x_hat, gains })
}

/// Replays a precomputed gain schedule; `gains` must cover every measurement.
pub fn run_skf_scheduled(
    decomp: Arc<Decomposition>,
    x_hat0: &DVector<f64>,
    gains: &[DMatrix<f64>],
    ys: &[DVector<f64>],
) -> Result<FilterRun> {
    if gains.len() < ys.len() {
        return Err(Error::invalid(format!(
            "gain schedule covers {} steps, need {}",
            gains.len(),
            ys.len()
        )));
    }
    let no = decomp.obs_dim();
    let mut state = SkfState::new(decomp, x_hat0, DMatrix::zeros(no, no))?;
    let mut x_hat = vec![skf_reconstruct(&state)];
    for (y, gain) in ys.iter().zip(gains) {
        let p = std::mem::replace(&mut state.p_o, DMatrix::zeros(0, 0));
        state = state.advance(y, gain, p);
        x_hat.push(skf_reconstruct(&state));
    }
    Ok(FilterRun {
        x_hat,
        gains: gains[..ys.len()].to_vec(),
    })
}
