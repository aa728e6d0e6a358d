//! Seeded Monte Carlo sample paths of the ensemble model.
//!
//! Random streams: every seed feeds a ChaCha8 generator (`seed_from_u64`). Process noise is
//! drawn from stream 0 and measurement noise from stream 1 of that generator, so the two
//! are independent and either can be re-randomized while the other is held fixed. Multi-path
//! runs derive the seed of path `i` as `base_seed + i`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::asymmetry;
use crate::model::EnsembleModel;

const PROCESS_STREAM: u64 = 0;
const MEASUREMENT_STREAM: u64 = 1;

/// Seeds of the process-noise and measurement-noise streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseSeeds {
    pub process: u64,
    pub measurement: u64,
}

impl NoiseSeeds {
    pub fn from_seed(seed: u64) -> Self {
        NoiseSeeds {
            process: seed,
            measurement: seed,
        }
    }

    /// Seeds of path `index` in a multi-path run.
    pub fn for_path(base_seed: u64, index: u64) -> Self {
        Self::from_seed(base_seed.wrapping_add(index))
    }
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn standard_normal_vector(rng: &mut ChaCha8Rng, len: usize) -> DVector<f64> {
    DVector::from_iterator(len, (0..len).map(|_| StandardNormal.sample(rng)))
}

/// Symmetric square-root factor `L` with `L Lᵀ = S` for a positive semidefinite `S`.
///
/// `S` is first equilibrated by its diagonal, `S = Δ S̃ Δ` with `Δ = diag(√S_ii)`, and the
/// eigendecomposition is taken of `S̃`. This keeps the relative accuracy of graded matrices
/// such as clock noise covariances, whose diagonal spans twenty-five orders of magnitude.
/// Eigenvalues of `S̃` below `−1e−12·‖S̃‖` are rejected; smaller negatives are clipped to 0.
pub fn psd_sqrt(s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !s.is_square() {
        return Err(Error::invalid(format!(
            "psd_sqrt needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("psd_sqrt input has non-finite entries"));
    }
    let asym = asymmetry(s);
    if asym > 1e-10 {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let n = s.nrows();
    let norm = s.norm();
    let mut scale = DVector::zeros(n);
    for i in 0..n {
        let d = s[(i, i)];
        if d < -1e-12 * norm {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: most_negative_eigenvalue(s),
                norm,
            });
        }
        scale[i] = d.max(0.0).sqrt();
    }
    let mut scaled = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            if scale[i] > 0.0 && scale[j] > 0.0 {
                scaled[(i, j)] = v / (scale[i] * scale[j]);
            } else if v.abs() > 1e-12 * norm {
                // a zero diagonal with a non-zero off-diagonal entry is indefinite
                return Err(Error::NotPositiveSemidefinite {
                    min_eigenvalue: most_negative_eigenvalue(s),
                    norm,
                });
            }
        }
    }
    let eig = SymmetricEigen::new(scaled);
    let scaled_norm = eig.eigenvalues.amax();
    let mut factor = eig.eigenvectors;
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -1e-12 * scaled_norm {
            return Err(Error::NotPositiveSemidefinite {
                min_eigenvalue: most_negative_eigenvalue(s),
                norm,
            });
        }
        let root = lam.max(0.0).sqrt();
        factor.column_mut(k).scale_mut(root);
    }
    for i in 0..n {
        factor.row_mut(i).scale_mut(scale[i]);
    }
    Ok(factor)
}

fn most_negative_eigenvalue(s: &DMatrix<f64>) -> f64 {
    let sym = 0.5 * (s + s.transpose());
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Noise realizations driving one sample path.
#[derive(Debug, Clone)]
pub struct NoiseDraws {
    /// Process noise `v[k]`, k = 0..horizon.
    pub process: Vec<DVector<f64>>,
    /// Measurement noise `w[k]`, k = 0..horizon.
    pub measurement: Vec<DVector<f64>>,
    pub seeds: NoiseSeeds,
}

/// Draws `v[k] ~ N(0, W)` and `w[k] ~ N(0, R)` for `k < horizon`.
pub fn draw_noise(model: &EnsembleModel, horizon: usize, seeds: NoiseSeeds) -> Result<NoiseDraws> {
    let sqrt_w = psd_sqrt(&model.process_noise)?;
    Ok(draw_noise_with_factor(model, &sqrt_w, horizon, seeds))
}

/// As [`draw_noise`] with a precomputed square-root factor of `W`.
pub fn draw_noise_with_factor(
    model: &EnsembleModel,
    sqrt_w: &DMatrix<f64>,
    horizon: usize,
    seeds: NoiseSeeds,
) -> NoiseDraws {
    let nm = model.state_dim();
    let mut rng = stream(seeds.process, PROCESS_STREAM);
    let process = (0..horizon)
        .map(|_| sqrt_w * standard_normal_vector(&mut rng, nm))
        .collect();
    let r = model.params.r_sq.sqrt();
    let mut rng = stream(seeds.measurement, MEASUREMENT_STREAM);
    let measurement = (0..horizon)
        .map(|_| standard_normal_vector(&mut rng, model.m() - 1) * r)
        .collect();
    NoiseDraws {
        process,
        measurement,
        seeds,
    }
}

/// One sample path: states `x[0..=K]`, measurements `y[0..K]` and ensemble time deviations
/// `z[0..=K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<f64>,
    /// Process-noise seed of the path.
    pub seed: u64,
    pub horizon: usize,
}

/// Runs the model forward from `x0` under the given noise.
pub fn propagate(model: &EnsembleModel, x0: &DVector<f64>, noise: &NoiseDraws) -> Result<SimTrace> {
    let nm = model.state_dim();
    if x0.len() != nm {
        return Err(Error::invalid(format!(
            "x0 has length {}, expected {nm}",
            x0.len()
        )));
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("x0 has non-finite entries"));
    }
    let horizon = noise.process.len();
    if horizon == 0 || noise.measurement.len() != horizon {
        return Err(Error::invalid("noise draws must cover a horizon of at least 1"));
    }
    let mut x = Vec::with_capacity(horizon + 1);
    let mut y = Vec::with_capacity(horizon);
    x.push(x0.clone());
    for k in 0..horizon {
        let xk = &x[k];
        y.push(&model.observation * xk + &noise.measurement[k]);
        let next = &model.transition * xk + &noise.process[k];
        x.push(next);
    }
    let z = x.iter().map(|xk| model.ensemble_time(xk)).collect();
    Ok(SimTrace {
        x,
        y,
        z,
        seed: noise.seeds.process,
        horizon,
    })
}

pub fn simulate(model: &EnsembleModel, x0: &DVector<f64>, horizon: usize, seed: u64) -> Result<SimTrace> {
    simulate_with_seeds(model, x0, horizon, NoiseSeeds::from_seed(seed))
}

pub fn simulate_with_seeds(
    model: &EnsembleModel,
    x0: &DVector<f64>,
    horizon: usize,
    seeds: NoiseSeeds,
) -> Result<SimTrace> {
    if horizon < 1 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let noise = draw_noise(model, horizon, seeds)?;
    propagate(model, x0, &noise)
}
