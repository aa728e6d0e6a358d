//! Conventional Kalman filter carried in double-double arithmetic.
//!
//! In double precision the CKF covariance of the ensemble model loses its structure within
//! a couple of hundred steps: the common-mode block grows like k⁴ while the clock-difference
//! block settles near 1e-10, so rounding of the former swamps the latter. Carrying the
//! covariance, gain and state in double-double (about 32 significant digits) keeps the
//! filter on its ideal trajectory long enough to check the exact identities that relate it
//! to the structured filter. Only the reductions that cancel the common mode are exposed,
//! and they are evaluated before rounding back to `f64`.

use nalgebra::{DMatrix, DVector};
use twofloat::TwoFloat;

use crate::error::{Error, Result};
use crate::filters::FilterRun;
use crate::model::EnsembleModel;

type Dd = TwoFloat;

fn dd(v: f64) -> Dd {
    Dd::from(v)
}

/// `a / b` to full double-double accuracy. The crate's own division stops at about `f64`
/// precision (`1/3` comes back with a zero low word), so the quotient is refined from the
/// residual twice.
fn dd_div(a: Dd, b: Dd) -> Dd {
    let q0 = a.hi() / b.hi();
    let r = a - b * q0;
    let q = Dd::new_add(q0, r.hi() / b.hi());
    let r = a - b * q;
    q + r.hi() / b.hi()
}

/// Dense row-major double-double matrix with just the operations the filter needs.
#[derive(Debug, Clone)]
struct DdMat {
    rows: usize,
    cols: usize,
    data: Vec<Dd>,
}

impl DdMat {
    fn zeros(rows: usize, cols: usize) -> Self {
        DdMat {
            rows,
            cols,
            data: vec![dd(0.0); rows * cols],
        }
    }

    fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Dd) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        DdMat { rows, cols, data }
    }

    fn from_f64(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| dd(m[(i, j)]))
    }

    fn to_f64(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self.at(i, j).hi())
    }

    fn at(&self, i: usize, j: usize) -> Dd {
        self.data[i * self.cols + j]
    }

    fn at_mut(&mut self, i: usize, j: usize) -> &mut Dd {
        &mut self.data[i * self.cols + j]
    }

    fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    fn mul(&self, rhs: &DdMat) -> Self {
        assert_eq!(self.cols, rhs.rows);
        let mut out = DdMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a.hi() == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    let o = out.at_mut(i, j);
                    *o += a * rhs.at(k, j);
                }
            }
        }
        out
    }

    fn add(&self, rhs: &DdMat) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| self.at(i, j) + rhs.at(i, j))
    }

    fn neg(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| -self.at(i, j))
    }

    fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let avg = (self.at(i, j) + self.at(j, i)) * 0.5;
                *self.at_mut(i, j) = avg;
                *self.at_mut(j, i) = avg;
            }
        }
    }

    fn mul_vec(&self, v: &[Dd]) -> Vec<Dd> {
        (0..self.rows)
            .map(|i| (0..self.cols).fold(dd(0.0), |acc, j| acc + self.at(i, j) * v[j]))
            .collect()
    }

    /// `self · S⁻¹` by Gaussian elimination with partial pivoting on `Sᵀ X = selfᵀ`.
    fn solve_right(&self, s: &DdMat, step: usize) -> Result<DdMat> {
        let n = s.rows;
        let mut a = s.transpose();
        let mut b = self.transpose();
        let singular = || Error::SingularInnovation {
            step,
            condition: crate::linalg::condition_estimate(&s.to_f64()),
        };
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&x, &y| a.at(x, col).hi().abs().total_cmp(&a.at(y, col).hi().abs()))
                .unwrap();
            if a.at(pivot, col).hi() == 0.0 {
                return Err(singular());
            }
            if pivot != col {
                for j in 0..n {
                    a.data.swap(pivot * n + j, col * n + j);
                }
                for j in 0..b.cols {
                    let w = b.cols;
                    b.data.swap(pivot * w + j, col * w + j);
                }
            }
            let pivot_value = a.at(col, col);
            for r in (col + 1)..n {
                let factor = dd_div(a.at(r, col), pivot_value);
                if factor.hi() == 0.0 {
                    continue;
                }
                for j in col..n {
                    let v = a.at(col, j);
                    *a.at_mut(r, j) -= factor * v;
                }
                for j in 0..b.cols {
                    let v = b.at(col, j);
                    *b.at_mut(r, j) -= factor * v;
                }
            }
        }
        for col in (0..n).rev() {
            let diag = a.at(col, col);
            for j in 0..b.cols {
                let mut acc = b.at(col, j);
                for k in (col + 1)..n {
                    acc -= a.at(col, k) * b.at(k, j);
                }
                *b.at_mut(col, j) = dd_div(acc, diag);
            }
        }
        if b.data.iter().any(|v| !v.hi().is_finite()) {
            return Err(singular());
        }
        Ok(b.transpose())
    }
}

/// `I_n ⊗ V̄⁺` with the entries `δ_ij − 1/m` and `−1/m` formed in double-double, so the
/// columns sum to zero far below `f64` resolution.
fn exact_obs_embed(n: usize, m: usize) -> DdMat {
    let inv_m = dd_div(dd(1.0), dd(m as f64));
    let block = DdMat::from_fn(m, m - 1, |i, j| if i == j { dd(1.0) - inv_m } else { -inv_m });
    kron_eye(n, &block)
}

fn kron_eye(n: usize, block: &DdMat) -> DdMat {
    let (r, c) = (block.rows, block.cols);
    let mut out = DdMat::zeros(n * r, n * c);
    for b in 0..n {
        for i in 0..r {
            for j in 0..c {
                *out.at_mut(b * r + i, b * c + j) = block.at(i, j);
            }
        }
    }
    out
}

/// Double-double Riccati recursion `P' = (F + L H) P Fᵀ + W`, `L = −F P Hᵀ (H P Hᵀ + R)⁻¹`
/// for an arbitrary `(F, H, W, R)`.
#[derive(Debug, Clone)]
pub struct ExtendedRiccati {
    transition: DdMat,
    observation: DdMat,
    noise: DdMat,
    innovation_reg: DdMat,
    p: DdMat,
    k: usize,
}

impl ExtendedRiccati {
    pub fn new(
        transition: &DMatrix<f64>,
        observation: &DMatrix<f64>,
        noise: &DMatrix<f64>,
        innovation_reg: &DMatrix<f64>,
        p0: &DMatrix<f64>,
    ) -> Result<Self> {
        let dim = transition.nrows();
        let obs = observation.nrows();
        let square = |m: &DMatrix<f64>, d: usize| m.nrows() == d && m.ncols() == d;
        if !square(transition, dim)
            || observation.ncols() != dim
            || !square(noise, dim)
            || !square(innovation_reg, obs)
            || !square(p0, dim)
        {
            return Err(Error::invalid(format!(
                "inconsistent Riccati dimensions (state {dim}, measurement {obs})"
            )));
        }
        Ok(ExtendedRiccati {
            transition: DdMat::from_f64(transition),
            observation: DdMat::from_f64(observation),
            noise: DdMat::from_f64(noise),
            innovation_reg: DdMat::from_f64(innovation_reg),
            p: DdMat::from_f64(p0),
            k: 0,
        })
    }

    /// Reduced recursion of the clock differences with innovation term `ρ (V̄V̄ᵀ)⁻¹`; the
    /// inverse Gram matrix `I − 11ᵀ/m` is formed in double-double.
    pub fn reduced(model: &EnsembleModel, rho: f64, p_check0: &DMatrix<f64>) -> Result<Self> {
        let m = model.m();
        let noise = crate::linalg::kron_with_eye(&model.clock_noise, m - 1);
        let mut r = Self::new(
            &model.obs_transition(),
            &model.obs_observation(),
            &noise,
            &DMatrix::zeros(m - 1, m - 1),
            p_check0,
        )?;
        let inv_m = dd_div(dd(1.0), dd(m as f64));
        let rho = dd(rho);
        r.innovation_reg = DdMat::from_fn(m - 1, m - 1, |i, j| {
            let g = if i == j { dd(1.0) - inv_m } else { -inv_m };
            g * rho
        });
        Ok(r)
    }

    fn advance(&mut self) -> Result<DdMat> {
        let f = &self.transition;
        let h = &self.observation;
        let pht = self.p.mul(&h.transpose());
        let mut s = h.mul(&pht).add(&self.innovation_reg);
        s.symmetrize();
        let gain = f.mul(&pht).solve_right(&s, self.k)?.neg();
        let mut next = f
            .add(&gain.mul(h))
            .mul(&self.p)
            .mul(&f.transpose())
            .add(&self.noise);
        next.symmetrize();
        self.p = next;
        self.k += 1;
        Ok(gain)
    }

    /// Advances one step and returns the gain rounded to `f64`.
    pub fn step(&mut self) -> Result<DMatrix<f64>> {
        Ok(self.advance()?.to_f64())
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.p.to_f64()
    }

    pub fn step_index(&self) -> usize {
        self.k
    }
}

/// Double-double conventional Kalman filter on a fixed ensemble model.
#[derive(Debug, Clone)]
pub struct ExtendedCkf {
    riccati: ExtendedRiccati,
    obs_projector: DdMat,
    obs_embed: DdMat,
    common_sum: DdMat,
    x_hat: Vec<Dd>,
    last_gain: Option<DdMat>,
}

impl ExtendedCkf {
    pub fn new(model: &EnsembleModel, x_hat0: &DVector<f64>, p0: &DMatrix<f64>) -> Result<Self> {
        let dim = model.state_dim();
        if x_hat0.len() != dim {
            return Err(Error::invalid(format!(
                "x_hat0 has length {}, expected {dim}",
                x_hat0.len()
            )));
        }
        if p0.nrows() != dim || p0.ncols() != dim {
            return Err(Error::invalid(format!(
                "P0 must be {dim}x{dim}, got {}x{}",
                p0.nrows(),
                p0.ncols()
            )));
        }
        Ok(ExtendedCkf {
            riccati: ExtendedRiccati::new(
                &model.transition,
                &model.observation,
                &model.process_noise,
                &model.measurement_noise,
                p0,
            )?,
            obs_projector: DdMat::from_f64(&model.obs_projector),
            obs_embed: exact_obs_embed(model.n(), model.m()),
            common_sum: DdMat::from_f64(&model.common_sum),
            x_hat: x_hat0.iter().map(|&v| dd(v)).collect(),
            last_gain: None,
        })
    }

    pub fn step_index(&self) -> usize {
        self.riccati.k
    }

    /// Consumes `y[k]`; returns the gain `L_k` rounded to `f64`.
    pub fn step(&mut self, y: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = &self.riccati.observation;
        if y.len() != h.rows {
            return Err(Error::invalid(format!(
                "measurement has length {}, expected {}",
                y.len(),
                h.rows
            )));
        }
        let hx = h.mul_vec(&self.x_hat);
        let fx = self.riccati.transition.mul_vec(&self.x_hat);
        let gain = self.riccati.advance()?;
        let innovation: Vec<Dd> = y.iter().zip(&hx).map(|(&yi, &hi)| dd(yi) - hi).collect();
        let li = gain.mul_vec(&innovation);
        self.x_hat = fx.iter().zip(&li).map(|(&a, &b)| a - b).collect();
        let rounded = gain.to_f64();
        self.last_gain = Some(gain);
        Ok(rounded)
    }

    pub fn x_hat(&self) -> DVector<f64> {
        DVector::from_iterator(self.x_hat.len(), self.x_hat.iter().map(|v| v.hi()))
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        self.riccati.covariance()
    }

    /// `P_k (I⊗V̄)⁺`.
    pub fn embedded_covariance(&self) -> DMatrix<f64> {
        self.riccati.p.mul(&self.obs_embed).to_f64()
    }

    /// `(I⊗V̄) P_k (I⊗V̄)ᵀ`.
    pub fn observable_covariance(&self) -> DMatrix<f64> {
        self.obs_projector
            .mul(&self.riccati.p)
            .mul(&self.obs_projector.transpose())
            .to_f64()
    }

    /// `(I⊗1ᵀ) P_k (I⊗1)`.
    pub fn common_covariance(&self) -> DMatrix<f64> {
        self.common_sum
            .mul(&self.riccati.p)
            .mul(&self.common_sum.transpose())
            .to_f64()
    }

    /// `(I⊗1ᵀ) L` for the most recent gain, summed before rounding.
    pub fn common_gain(&self) -> Option<DMatrix<f64>> {
        self.last_gain.as_ref().map(|g| self.common_sum.mul(g).to_f64())
    }
}

/// Runs the double-double CKF over a measurement stream.
pub fn run_ckf_extended(
    model: &EnsembleModel,
    x_hat0: &DVector<f64>,
    p0: &DMatrix<f64>,
    ys: &[DVector<f64>],
) -> Result<FilterRun> {
    let mut filter = ExtendedCkf::new(model, x_hat0, p0)?;
    let mut x_hat = vec![filter.x_hat()];
    let mut gains = Vec::with_capacity(ys.len());
    for y in ys {
        gains.push(filter.step(y)?);
        x_hat.push(filter.x_hat());
    }
    Ok(FilterRun { x_hat, gains })
}
