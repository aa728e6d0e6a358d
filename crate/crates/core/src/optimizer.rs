//! Recovery of the cost as an exact quadratic in `vec(Γ)` and its minimization.
//!
//! `vec(Γ)` stacks the columns of the n×n(m−1) matrix `Γ` (column-major, the storage order
//! of `nalgebra`), so coordinate `i + n·j` is entry `(i, j)`.
//!
//! The cost is sampled on a stencil of probe points, by default with unit steps. The
//! entries of `Γ` act on quantities many orders of magnitude apart, so the Hessian is badly
//! scaled; `StepRule::Adaptive` sizes a step per coordinate so that the quadratic change
//! along each axis is comparable to the cost itself. The form is stored in the probe-scaled
//! coordinates `u = v ⊘ h` it was measured in.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::psd_pinv;
use crate::model::EnsembleModel;
use crate::moments::{cost_j, CostWeights, GainSchedule, InitError};

/// Eigenvalues below this fraction of the largest are treated as null directions.
pub const NULL_CUTOFF: f64 = 1e-10;

/// `J(v) = ½ vᵀ M v + bᵀ v + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticForm {
    /// `M`.
    pub hessian: DMatrix<f64>,
    /// `b`, the gradient at `v = 0`.
    pub linear: DVector<f64>,
    /// `c = J(0)`.
    pub constant: f64,
    /// Probe step per coordinate.
    pub steps: DVector<f64>,
    /// `S M S` with `S = diag(steps)`, as measured.
    pub scaled_hessian: DMatrix<f64>,
    /// `S b`, as measured.
    pub scaled_linear: DVector<f64>,
    /// Cost evaluations spent, including step selection and validation.
    pub evaluations: usize,
    /// Largest relative mismatch between the form and the cost at the validation probes.
    pub probe_residual: f64,
}

impl QuadraticForm {
    /// Builds a form from `(M, b, c)` with unit steps.
    pub fn new(hessian: DMatrix<f64>, linear: DVector<f64>, constant: f64) -> Result<Self> {
        let d = linear.len();
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(Error::invalid(format!(
                "Hessian must be {d}x{d}, got {}x{}",
                hessian.nrows(),
                hessian.ncols()
            )));
        }
        Ok(QuadraticForm {
            scaled_hessian: hessian.clone(),
            scaled_linear: linear.clone(),
            hessian,
            linear,
            constant,
            steps: DVector::from_element(d, 1.0),
            evaluations: 0,
            probe_residual: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn evaluate(&self, v: &DVector<f64>) -> f64 {
        let u = v.component_div(&self.steps);
        self.evaluate_scaled(&u)
    }

    fn evaluate_scaled(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.scaled_hessian * u)) + self.scaled_linear.dot(u) + self.constant
    }

    /// `M v + b`.
    pub fn gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.hessian * v + &self.linear
    }

    /// Eigenvalues of the scaled Hessian `S M S`, ascending.
    pub fn scaled_eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.scaled_hessian.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `λ_min(M) / ‖M‖₂` measured in the probe-scaled basis.
    pub fn relative_min_eigenvalue(&self) -> f64 {
        let ev = self.scaled_eigenvalues();
        let max_abs = ev.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if max_abs == 0.0 {
            0.0
        } else {
            ev[0] / max_abs
        }
    }

    /// Gradient magnitude at the origin relative to the size of the form, both in the
    /// probe-scaled basis: `‖S b‖ / (‖S M S‖ + |c|)`.
    pub fn relative_gradient_at_zero(&self) -> f64 {
        let scale = self.scaled_hessian.norm() + self.constant.abs();
        if scale == 0.0 {
            return 0.0;
        }
        self.scaled_linear.norm() / scale
    }
}

pub fn vec_gamma(gamma: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(gamma.as_slice())
}

pub fn unvec_gamma(v: &DVector<f64>, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    if v.len() != rows * cols {
        return Err(Error::invalid(format!(
            "vector of length {} cannot be reshaped to {rows}x{cols}",
            v.len()
        )));
    }
    Ok(DMatrix::from_column_slice(rows, cols, v.as_slice()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// Unit steps, shrunk by 1e-3 while any probe overflows.
    Unit,
    /// Per-coordinate steps sized from the measured curvature.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOptions {
    pub steps: StepRule,
    /// Random probes used to validate the recovered form.
    pub validation_probes: usize,
    pub probe_seed: u64,
    /// Largest admissible relative probe residual.
    pub tolerance: f64,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            steps: StepRule::Unit,
            validation_probes: 10,
            probe_seed: 0,
            tolerance: 1e-6,
        }
    }
}

const MIN_STEP: f64 = 1e-15;
const MAX_STEP: f64 = 1e15;
const STEP_ROUNDS: usize = 8;

struct Sampler<'a, E> {
    eval: &'a E,
    count: std::sync::atomic::AtomicUsize,
}

impl<E> Sampler<'_, E>
where
    E: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    fn at(&self, v: &DVector<f64>) -> Result<f64> {
        self.count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        (self.eval)(v)
    }

    fn many(&self, points: &[DVector<f64>]) -> Result<Vec<f64>> {
        points.par_iter().map(|p| self.at(p)).collect()
    }
}

fn axis_points(steps: &DVector<f64>, sign: f64) -> Vec<DVector<f64>> {
    (0..steps.len())
        .map(|i| {
            let mut v = DVector::zeros(steps.len());
            v[i] = sign * steps[i];
            v
        })
        .collect()
}

/// Recovers `J` as an exact quadratic in `d` variables with default options.
pub fn recover_quadratic<E>(eval: &E, d: usize) -> Result<QuadraticForm>
where
    E: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    recover_quadratic_with(eval, d, &RecoveryOptions::default())
}

pub fn recover_quadratic_with<E>(eval: &E, d: usize, opts: &RecoveryOptions) -> Result<QuadraticForm>
where
    E: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    if d == 0 {
        return Err(Error::invalid("quadratic recovery needs at least one variable"));
    }
    let sampler = Sampler {
        eval,
        count: 0.into(),
    };
    let c = sampler.at(&DVector::zeros(d))?;
    if !c.is_finite() {
        return Err(Error::Numerical(format!("cost at the origin is {c}")));
    }
    let (steps, plus, minus) = choose_steps(&sampler, c, d, opts.steps)?;

    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| ((i + 1)..d).map(move |j| (i, j))).collect();
    let pair_points: Vec<DVector<f64>> = pairs
        .iter()
        .map(|&(i, j)| {
            let mut v = DVector::zeros(d);
            v[i] = steps[i];
            v[j] = steps[j];
            v
        })
        .collect();
    let pair_values = sampler.many(&pair_points)?;

    let mut scaled_hessian = DMatrix::zeros(d, d);
    let mut scaled_linear = DVector::zeros(d);
    for i in 0..d {
        scaled_hessian[(i, i)] = plus[i] + minus[i] - 2.0 * c;
        scaled_linear[i] = 0.5 * (plus[i] - minus[i]);
    }
    for (&(i, j), &value) in pairs.iter().zip(&pair_values) {
        let mij = value - plus[i] - plus[j] + c;
        scaled_hessian[(i, j)] = mij;
        scaled_hessian[(j, i)] = mij;
    }
    if scaled_hessian
        .iter()
        .chain(scaled_linear.iter())
        .any(|v| !v.is_finite())
    {
        return Err(Error::Numerical("probe evaluations overflowed".into()));
    }
    let inv = steps.map(|h| 1.0 / h);
    let hessian = DMatrix::from_fn(d, d, |i, j| scaled_hessian[(i, j)] * inv[i] * inv[j]);
    let linear = scaled_linear.component_mul(&inv);
    let mut form = QuadraticForm {
        hessian,
        linear,
        constant: c,
        steps,
        scaled_hessian,
        scaled_linear,
        evaluations: 0,
        probe_residual: 0.0,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.probe_seed);
    let probes: Vec<DVector<f64>> = (0..opts.validation_probes)
        .map(|_| DVector::from_fn(d, |i, _| rng.random_range(-1.0..1.0) * form.steps[i]))
        .collect();
    let values = sampler.many(&probes)?;
    form.probe_residual = probes
        .iter()
        .zip(&values)
        .map(|(p, &j)| (form.evaluate(p) - j).abs() / j.abs().max(c.abs()).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    form.evaluations = sampler.count.load(std::sync::atomic::Ordering::Relaxed);
    log::debug!(
        "recovered quadratic form: d={d}, {} evaluations, probe residual {:e}",
        form.evaluations,
        form.probe_residual
    );
    if form.probe_residual > opts.tolerance {
        return Err(Error::NonQuadratic {
            residual: form.probe_residual,
            tolerance: opts.tolerance,
        });
    }
    Ok(form)
}

/// Picks probe steps and returns them with the axis values `J(±h_i e_i)` at those steps.
fn choose_steps<E>(
    sampler: &Sampler<'_, E>,
    c: f64,
    d: usize,
    rule: StepRule,
) -> Result<(DVector<f64>, Vec<f64>, Vec<f64>)>
where
    E: Fn(&DVector<f64>) -> Result<f64> + Sync,
{
    let mut steps = DVector::from_element(d, 1.0);
    let mut reference = c.abs();
    for round in 0..STEP_ROUNDS {
        let plus = sampler.many(&axis_points(&steps, 1.0))?;
        let minus = sampler.many(&axis_points(&steps, -1.0))?;
        let overflowed: Vec<usize> = (0..d)
            .filter(|&i| !plus[i].is_finite() || !minus[i].is_finite())
            .collect();
        if !overflowed.is_empty() {
            if overflowed.iter().all(|&i| steps[i] <= MIN_STEP) {
                return Err(Error::Numerical("cost overflows at every probe step".into()));
            }
            for &i in &overflowed {
                steps[i] = (steps[i] * 1e-3).max(MIN_STEP);
            }
            continue;
        }
        if rule == StepRule::Unit {
            return Ok((steps, plus, minus));
        }
        if reference == 0.0 {
            reference = plus.iter().chain(&minus).fold(0.0f64, |a, v| a.max(v.abs()));
            if reference == 0.0 {
                return Ok((steps, plus, minus));
            }
        }
        let mut settled = true;
        for i in 0..d {
            let quad = 0.5 * (plus[i] + minus[i] - 2.0 * c);
            let ratio = quad / reference;
            let factor = if ratio > 1e-14 {
                if (1e-2..=1e2).contains(&ratio) {
                    continue;
                }
                ratio.sqrt().recip()
            } else {
                // curvature lost in rounding (or absent): look further out
                1e4
            };
            let next = (steps[i] * factor).clamp(MIN_STEP, MAX_STEP);
            if next != steps[i] {
                steps[i] = next;
                settled = false;
            }
        }
        if settled || round + 1 == STEP_ROUNDS {
            if settled {
                return Ok((steps, plus, minus));
            }
            let plus = sampler.many(&axis_points(&steps, 1.0))?;
            let minus = sampler.many(&axis_points(&steps, -1.0))?;
            if plus.iter().chain(&minus).all(|v| v.is_finite()) {
                return Ok((steps, plus, minus));
            }
        }
    }
    Err(Error::Numerical("could not find finite probe steps".into()))
}

/// Minimizer of the form. Returns `(v*, J(v*))`.
///
/// The Hessian is first equilibrated to unit diagonal; eigenvalues of the equilibrated
/// matrix below `NULL_CUTOFF · λ_max` are null directions and get zero component.
pub fn solve_optimal(form: &QuadraticForm) -> (DVector<f64>, f64) {
    let jacobi = form
        .scaled_hessian
        .diagonal()
        .map(|d| if d > 0.0 { d.sqrt().recip() } else { 1.0 });
    let d = form.dim();
    let equilibrated = DMatrix::from_fn(d, d, |i, j| form.scaled_hessian[(i, j)] * jacobi[i] * jacobi[j]);
    let pinv = psd_pinv(&equilibrated, NULL_CUTOFF);
    let w = -(pinv * form.scaled_linear.component_mul(&jacobi));
    let u = w.component_mul(&jacobi);
    let j = form.evaluate_scaled(&u);
    (u.component_mul(&form.steps), j)
}

/// `‖b‖`, the gradient norm at `Γ = 0`.
pub fn check_stationary_at_zero(form: &QuadraticForm) -> f64 {
    form.linear.norm()
}

/// Cost `J(Γ)` of the structured filter as a function of `vec(Γ)`.
#[derive(Debug, Clone)]
pub struct CostFunction {
    pub model: Arc<EnsembleModel>,
    pub init: Arc<InitError>,
    pub schedule: Arc<GainSchedule>,
    pub weights: CostWeights,
    pub horizon: usize,
}

impl CostFunction {
    pub fn dim(&self) -> usize {
        self.model.n() * self.model.obs_dim()
    }

    pub fn gamma_shape(&self) -> (usize, usize) {
        (self.model.n(), self.model.obs_dim())
    }

    pub fn at_gamma(&self, gamma: &DMatrix<f64>) -> Result<f64> {
        cost_j(
            &self.model,
            gamma,
            &self.init,
            &self.schedule,
            &self.weights,
            self.horizon,
        )
    }

    pub fn at(&self, v: &DVector<f64>) -> Result<f64> {
        let (r, c) = self.gamma_shape();
        self.at_gamma(&unvec_gamma(v, r, c)?)
    }
}

/// Optimal transformation matrix together with the recovered form it came from.
#[derive(Debug, Clone)]
pub struct GammaSolution {
    pub form: QuadraticForm,
    pub gamma: DMatrix<f64>,
    /// `J(Γ*)` from the form.
    pub cost: f64,
    /// `J(0)`.
    pub cost_at_zero: f64,
}

pub fn optimize_gamma(cost: &CostFunction, opts: &RecoveryOptions) -> Result<GammaSolution> {
    let eval = |v: &DVector<f64>| cost.at(v);
    let form = recover_quadratic_with(&eval, cost.dim(), opts)?;
    let (v, j) = solve_optimal(&form);
    let (r, c) = cost.gamma_shape();
    Ok(GammaSolution {
        gamma: unvec_gamma(&v, r, c)?,
        cost: j,
        cost_at_zero: form.constant,
        form,
    })
}
