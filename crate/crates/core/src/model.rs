//! State-space model of a homogeneous `m`-clock ensemble of order `n` and its
//! observable canonical decomposition.
//!
//! The state is ordered by derivative level: `x = (x₁ᵀ, …, x_nᵀ)ᵀ` where `x_i` holds the
//! i-th level (time deviation, frequency deviation, drift, …) of all `m` clocks. Every
//! ensemble matrix is then a Kronecker product of a per-clock `n×n` block with an
//! `m`-dimensional clock block.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{kron_eye, kron_with_eye, ones};

/// Parameters of the ensemble model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Model order (number of derivative levels per clock).
    pub n: usize,
    /// Number of clocks.
    pub m: usize,
    /// Sampling interval in seconds.
    pub tau: f64,
    /// Diffusion coefficients `q_i²`, one per level.
    pub q_sq: Vec<f64>,
    /// Measurement-noise variance `r²` in s².
    pub r_sq: f64,
}

impl ModelParams {
    /// Third-order, five-clock ensemble sampled once per second with the noise levels of
    /// a hydrogen-maser-class ensemble.
    pub fn reference_ensemble() -> Self {
        ModelParams {
            n: 3,
            m: 5,
            tau: 1.0,
            q_sq: vec![2.9394e-10, 1.1785e-16, 4.5574e-35],
            r_sq: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::invalid("model order n must be at least 1"));
        }
        if self.m < 2 {
            return Err(Error::invalid(format!(
                "clock count m must be at least 2, got {}",
                self.m
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::invalid(format!(
                "sampling interval tau must be positive, got {}",
                self.tau
            )));
        }
        if self.q_sq.len() != self.n {
            return Err(Error::invalid(format!(
                "q_sq has {} entries, expected n = {}",
                self.q_sq.len(),
                self.n
            )));
        }
        check_diffusion(&self.q_sq)?;
        if !(self.r_sq.is_finite() && self.r_sq >= 0.0) {
            return Err(Error::invalid(format!(
                "measurement variance r_sq must be non-negative, got {}",
                self.r_sq
            )));
        }
        Ok(())
    }

    /// Full state dimension `n·m`.
    pub fn state_dim(&self) -> usize {
        self.n * self.m
    }

    /// Observable subspace dimension `n·(m−1)`.
    pub fn obs_dim(&self) -> usize {
        self.n * (self.m - 1)
    }
}

fn check_diffusion(q_sq: &[f64]) -> Result<()> {
    if let Some((i, q)) = q_sq
        .iter()
        .enumerate()
        .find(|(_, q)| !(q.is_finite() && **q >= 0.0))
    {
        return Err(Error::invalid(format!("q_sq[{i}] must be non-negative, got {q}")));
    }
    Ok(())
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, i| acc * i as f64)
}

/// Per-clock transition block: unit upper-triangular with entry `(i, j) = τ^{j−i}/(j−i)!`.
pub fn build_transition(n: usize, tau: f64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("model order n must be at least 1"));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be non-negative, got {tau}")));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| {
        if j >= i {
            tau.powi((j - i) as i32) / factorial(j - i)
        } else {
            0.0
        }
    }))
}

/// Single-clock process-noise covariance `∫₀^τ A_t diag(q²) A_tᵀ dt`, in closed form.
///
/// Entry `(i, j)` is `Σ_{k ≥ max(i,j)} q_k² τ^{a+b+1} / (a! b! (a+b+1))` with `a = k−i`,
/// `b = k−j`.
pub fn process_noise_single(n: usize, tau: f64, q_sq: &[f64]) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("model order n must be at least 1"));
    }
    if q_sq.len() != n {
        return Err(Error::invalid(format!(
            "q_sq has {} entries, expected {n}",
            q_sq.len()
        )));
    }
    if !(tau.is_finite() && tau >= 0.0) {
        return Err(Error::invalid(format!("tau must be non-negative, got {tau}")));
    }
    check_diffusion(q_sq)?;
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0;
            for (k, &q) in q_sq.iter().enumerate().skip(j) {
                let (a, b) = (k - i, k - j);
                let p = a + b + 1;
                acc += q * tau.powi(p as i32) / (factorial(a) * factorial(b) * p as f64);
            }
            w[(i, j)] = acc;
            w[(j, i)] = acc;
        }
    }
    Ok(w)
}

/// Clock-difference map `V̄ = [I_{m−1}, −1_{m−1}]` and its Moore–Penrose inverse.
///
/// The inverse is `[I − J/m; −1ᵀ/m]` (J the all-ones matrix), whose column sums vanish.
pub fn build_vbar(m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if m < 2 {
        return Err(Error::invalid(format!(
            "clock count m must be at least 2, got {m}"
        )));
    }
    let inv_m = 1.0 / m as f64;
    let vbar = DMatrix::from_fn(m - 1, m, |i, j| {
        if j == m - 1 {
            -1.0
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    let pinv = DMatrix::from_fn(m, m - 1, |i, j| {
        if i == m - 1 {
            -inv_m
        } else if i == j {
            1.0 - inv_m
        } else {
            -inv_m
        }
    });
    Ok((vbar, pinv))
}

/// All matrices of the ensemble model, built once per parameter set.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    pub params: ModelParams,
    /// Per-clock transition `A` (n×n).
    pub clock_transition: DMatrix<f64>,
    /// `F = A ⊗ I_m`.
    pub transition: DMatrix<f64>,
    /// Level selector `C = e₁ᵀ` (1×n).
    pub selector: DMatrix<f64>,
    /// `V̄` ((m−1)×m).
    pub diff_map: DMatrix<f64>,
    /// `V̄⁺` (m×(m−1)).
    pub diff_map_pinv: DMatrix<f64>,
    /// `H = C ⊗ V̄`.
    pub observation: DMatrix<f64>,
    /// Ensemble-time weights `D = (1/m) C (I_n ⊗ 1_mᵀ)` (1×nm).
    pub ensemble_weights: DMatrix<f64>,
    /// `W = W_clock ⊗ I_m`.
    pub process_noise: DMatrix<f64>,
    /// Single-clock process-noise block `W_clock` (n×n).
    pub clock_noise: DMatrix<f64>,
    /// `R = r² I_{m−1}`.
    pub measurement_noise: DMatrix<f64>,
    /// `I_n ⊗ V̄`: full state to observable coordinates.
    pub obs_projector: DMatrix<f64>,
    /// `I_n ⊗ V̄⁺`.
    pub obs_embed: DMatrix<f64>,
    /// `I_n ⊗ 1_m`.
    pub common_embed: DMatrix<f64>,
    /// `I_n ⊗ 1_mᵀ`: per-level sums over the clocks.
    pub common_sum: DMatrix<f64>,
}

impl EnsembleModel {
    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn m(&self) -> usize {
        self.params.m
    }

    pub fn state_dim(&self) -> usize {
        self.params.state_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.params.obs_dim()
    }

    /// `D·x`.
    pub fn ensemble_time(&self, x: &DVector<f64>) -> f64 {
        (&self.ensemble_weights * x)[(0, 0)]
    }

    /// Observable-subspace transition `A ⊗ I_{m−1}`.
    pub fn obs_transition(&self) -> DMatrix<f64> {
        kron_with_eye(&self.clock_transition, self.m() - 1)
    }

    /// Observable-subspace observation `C ⊗ I_{m−1}`.
    pub fn obs_observation(&self) -> DMatrix<f64> {
        kron_with_eye(&self.selector, self.m() - 1)
    }

    /// Observable-subspace process noise `W_clock ⊗ V̄V̄ᵀ`.
    pub fn obs_process_noise(&self) -> DMatrix<f64> {
        self.clock_noise.kronecker(&self.diff_gram())
    }

    /// `V̄ V̄ᵀ = I_{m−1} + 1 1ᵀ`.
    pub fn diff_gram(&self) -> DMatrix<f64> {
        &self.diff_map * self.diff_map.transpose()
    }

    /// Projects a full-space covariance onto observable coordinates: `(I⊗V̄) P (I⊗V̄)ᵀ`.
    pub fn project_covariance(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        &self.obs_projector * p * self.obs_projector.transpose()
    }
}

pub fn build_model(params: &ModelParams) -> Result<EnsembleModel> {
    params.validate()?;
    let (n, m) = (params.n, params.m);
    let a = build_transition(n, params.tau)?;
    let (vbar, vbar_pinv) = build_vbar(m)?;
    let clock_noise = process_noise_single(n, params.tau, &params.q_sq)?;
    let mut selector = DMatrix::zeros(1, n);
    selector[(0, 0)] = 1.0;
    let ones_row = ones(m).transpose();
    let ones_col = DMatrix::from_element(m, 1, 1.0);
    let common_sum = kron_eye(n, &DMatrix::from_row_slice(1, m, ones_row.as_slice()));
    let ensemble_weights = (&selector * &common_sum) / m as f64;
    Ok(EnsembleModel {
        transition: kron_with_eye(&a, m),
        observation: selector.kronecker(&vbar),
        process_noise: kron_with_eye(&clock_noise, m),
        measurement_noise: DMatrix::identity(m - 1, m - 1) * params.r_sq,
        obs_projector: kron_eye(n, &vbar),
        obs_embed: kron_eye(n, &vbar_pinv),
        common_embed: kron_eye(n, &ones_col),
        common_sum,
        ensemble_weights,
        clock_transition: a,
        selector,
        diff_map: vbar,
        diff_map_pinv: vbar_pinv,
        clock_noise,
        params: params.clone(),
    })
}

/// Observable canonical decomposition for a given transformation matrix `Γ`.
///
/// Coordinates are `x = T ξ` with `ξ = (ξ_o, ξ_ō)`, where
/// `T = [I⊗V̄⁺ + (I⊗1)Γ, I⊗1]`. In these coordinates the transition is block lower
/// triangular and the measurement only sees `ξ_o`.
#[derive(Debug, Clone)]
pub struct Decomposition {
    /// `Γ`, n×n(m−1).
    pub gamma: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub t_inv: DMatrix<f64>,
    /// `F_oo = A ⊗ I_{m−1}`.
    pub obs_transition: DMatrix<f64>,
    /// `F_ōo = −Γ(A ⊗ I_{m−1}) + AΓ`.
    pub coupling: DMatrix<f64>,
    /// `F_ōō = A`.
    pub unobs_transition: DMatrix<f64>,
    /// `H_o = C ⊗ I_{m−1}`.
    pub obs_observation: DMatrix<f64>,
    /// `W_o = W_clock ⊗ V̄V̄ᵀ`.
    pub obs_process_noise: DMatrix<f64>,
}

impl Decomposition {
    pub fn obs_dim(&self) -> usize {
        self.obs_transition.nrows()
    }

    pub fn unobs_dim(&self) -> usize {
        self.unobs_transition.nrows()
    }

    /// `T·(ξ_o; ξ_ō)`.
    pub fn to_state(&self, xi_o: &DVector<f64>, xi_obar: &DVector<f64>) -> DVector<f64> {
        let (no, nu) = (self.obs_dim(), self.unobs_dim());
        let t_o = self.t.columns(0, no);
        let t_u = self.t.columns(no, nu);
        t_o * xi_o + t_u * xi_obar
    }

    /// `T⁻¹ x`, split into `(ξ_o, ξ_ō)`.
    pub fn to_coordinates(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let xi = &self.t_inv * x;
        let no = self.obs_dim();
        (
            xi.rows(0, no).into_owned(),
            xi.rows(no, xi.len() - no).into_owned(),
        )
    }
}

pub fn build_decomposition(model: &EnsembleModel, gamma: &DMatrix<f64>) -> Result<Decomposition> {
    let (n, m) = (model.n(), model.m());
    let no = n * (m - 1);
    if gamma.nrows() != n || gamma.ncols() != no {
        return Err(Error::invalid(format!(
            "gamma must be {n}x{no}, got {}x{}",
            gamma.nrows(),
            gamma.ncols()
        )));
    }
    if gamma.iter().any(|g| !g.is_finite()) {
        return Err(Error::invalid("gamma has non-finite entries"));
    }
    let nm = n * m;
    let a = &model.clock_transition;
    let obs_transition = model.obs_transition();

    let mut t = DMatrix::zeros(nm, nm);
    t.view_mut((0, 0), (nm, no))
        .copy_from(&(&model.obs_embed + &model.common_embed * gamma));
    t.view_mut((0, no), (nm, n)).copy_from(&model.common_embed);

    // [[I, 0], [−Γ, I]] · [I⊗V̄; (1/m) I⊗1ᵀ]
    let mut t_inv = DMatrix::zeros(nm, nm);
    t_inv.view_mut((0, 0), (no, nm)).copy_from(&model.obs_projector);
    let common_avg = &model.common_sum / m as f64;
    t_inv
        .view_mut((no, 0), (n, nm))
        .copy_from(&(common_avg - gamma * &model.obs_projector));

    Ok(Decomposition {
        gamma: gamma.clone(),
        t,
        t_inv,
        coupling: a * gamma - gamma * &obs_transition,
        obs_transition,
        unobs_transition: a.clone(),
        obs_observation: model.obs_observation(),
        obs_process_noise: model.obs_process_noise(),
    })
}
