//! Atomic time, generated clock readings and overlapping Allan deviation.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::model::EnsembleModel;
use crate::simulator::SimTrace;

/// `TA[k] = z[k] − ẑ[k]` for one filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct TaSeries {
    pub values: Vec<f64>,
    /// Label of the filter that produced the estimates.
    pub source: String,
}

fn check_lengths(trace: &SimTrace, estimates: &[DVector<f64>]) -> Result<()> {
    if trace.x.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "trace has {} states but {} estimates were given",
            trace.x.len(),
            estimates.len()
        )));
    }
    Ok(())
}

/// `TA[k] = D (x[k] − x̂[k])`.
pub fn atomic_time(
    model: &EnsembleModel,
    trace: &SimTrace,
    estimates: &[DVector<f64>],
    source: impl Into<String>,
) -> Result<TaSeries> {
    check_lengths(trace, estimates)?;
    let mut values = Vec::with_capacity(estimates.len());
    for (x, x_hat) in trace.x.iter().zip(estimates) {
        if x_hat.len() != x.len() {
            return Err(Error::invalid(format!(
                "estimate has length {}, expected {}",
                x_hat.len(),
                x.len()
            )));
        }
        values.push(model.ensemble_time(&(x - x_hat)));
    }
    Ok(TaSeries {
        values,
        source: source.into(),
    })
}

/// Predicted ensemble time deviation `ẑ[k] = D x̂[k]`.
pub fn predicted_ensemble_time(model: &EnsembleModel, estimates: &[DVector<f64>]) -> Vec<f64> {
    estimates.iter().map(|x| model.ensemble_time(x)).collect()
}

/// Generated clock reading `ĥ₀[k] = (1/m) Σ_j h^j[k] − ẑ[k]`, where clock `j` reads
/// `h^j[k] = t0 + kτ + x_1^j[k]` (ideal reading plus its time deviation).
pub fn generated_clock_reading(
    model: &EnsembleModel,
    trace: &SimTrace,
    estimates: &[DVector<f64>],
    t0: f64,
) -> Result<Vec<f64>> {
    check_lengths(trace, estimates)?;
    let m = model.m();
    let tau = model.params.tau;
    Ok(trace
        .x
        .iter()
        .zip(estimates)
        .enumerate()
        .map(|(k, (x, x_hat))| {
            let ideal = t0 + k as f64 * tau;
            let mean_reading = (0..m).map(|j| ideal + x[j]).sum::<f64>() / m as f64;
            mean_reading - model.ensemble_time(x_hat)
        })
        .collect())
}

/// Preprocessing of the phase series before the Allan deviation, expressed on the
/// fractional frequency `y_i = (x_{i+1} − x_i)/τ₀`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Detrend {
    /// Use the phase as given.
    #[default]
    None,
    /// Remove the mean frequency (a linear phase ramp; leaves the deviation unchanged up to
    /// rounding because the second difference annihilates it).
    Mean,
    /// Remove a least-squares linear frequency drift (a quadratic phase term).
    Linear,
}

impl std::str::FromStr for Detrend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Detrend::None),
            "mean" => Ok(Detrend::Mean),
            "linear" => Ok(Detrend::Linear),
            other => Err(Error::invalid(format!(
                "unknown detrend '{other}', expected none|mean|linear"
            ))),
        }
    }
}

/// Applies `detrend` to a phase series and returns the re-integrated phase.
pub fn detrend_phase(phase: &[f64], tau0: f64, detrend: Detrend) -> Vec<f64> {
    if detrend == Detrend::None || phase.len() < 3 {
        return phase.to_vec();
    }
    let freq: Vec<f64> = phase.windows(2).map(|w| (w[1] - w[0]) / tau0).collect();
    let n = freq.len() as f64;
    let mean = freq.iter().sum::<f64>() / n;
    let residual: Vec<f64> = match detrend {
        Detrend::Mean => freq.iter().map(|y| y - mean).collect(),
        Detrend::Linear => {
            let t_mean = (n - 1.0) / 2.0;
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for (i, y) in freq.iter().enumerate() {
                let t = i as f64 - t_mean;
                sxy += t * (y - mean);
                sxx += t * t;
            }
            let slope = sxy / sxx;
            freq.iter()
                .enumerate()
                .map(|(i, y)| y - mean - slope * (i as f64 - t_mean))
                .collect()
        }
        Detrend::None => unreachable!(),
    };
    let mut out = Vec::with_capacity(phase.len());
    let mut acc = phase[0];
    out.push(acc);
    for y in residual {
        acc += y * tau0;
        out.push(acc);
    }
    out
}

/// Overlapping Allan deviation curve.
#[derive(Debug, Clone, PartialEq)]
pub struct AdevCurve {
    /// Averaging times `mτ₀`, seconds.
    pub taus: Vec<f64>,
    pub sigmas: Vec<f64>,
    /// Number of second differences averaged per point, `N − 2m`.
    pub n_samples: Vec<usize>,
}

/// Octave multiples `1, 2, 4, …` usable on a phase series of length `len` (`N ≥ 2m + 1`).
pub fn octave_multiples(len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut m = 1usize;
    while len > 2 * m {
        out.push(m);
        m *= 2;
    }
    out
}

/// `σ_y²(mτ₀) = Σ_{i} (x_{i+2m} − 2x_{i+m} + x_i)² / (2 (mτ₀)² (N − 2m))`.
///
/// Multiples that need more than `N` points are skipped with a warning. Duplicate or
/// unordered multiples are sorted and deduplicated so the taus come out strictly increasing.
pub fn overlapping_adev(phase: &[f64], tau0: f64, multiples: &[usize]) -> Result<AdevCurve> {
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return Err(Error::invalid(format!("tau0 must be positive, got {tau0}")));
    }
    if multiples.contains(&0) {
        return Err(Error::invalid("averaging multiples must be at least 1"));
    }
    let mut ms = multiples.to_vec();
    ms.sort_unstable();
    ms.dedup();
    let n = phase.len();
    let mut curve = AdevCurve {
        taus: Vec::new(),
        sigmas: Vec::new(),
        n_samples: Vec::new(),
    };
    for m in ms {
        if n < 2 * m + 1 {
            log::warn!("phase series of {n} points is too short for tau = {m}·tau0; skipped");
            continue;
        }
        let count = n - 2 * m;
        let sum: f64 = (0..count)
            .map(|i| {
                let d = phase[i + 2 * m] - 2.0 * phase[i + m] + phase[i];
                d * d
            })
            .sum();
        let tau = m as f64 * tau0;
        curve.taus.push(tau);
        curve.sigmas.push((sum / (2.0 * tau * tau * count as f64)).sqrt());
        curve.n_samples.push(count);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelParams};
    use crate::simulator::simulate;

    #[test]
    fn perfect_prediction_gives_zero() {
        let model = build_model(&ModelParams::reference_ensemble()).unwrap();
        let trace = simulate(&model, &DVector::zeros(15), 20, 3).unwrap();
        let ta = atomic_time(&model, &trace, &trace.x, "truth").unwrap();
        assert!(ta.values.iter().all(|&v| v == 0.0));
        assert_eq!(ta.source, "truth");
    }

    #[test]
    fn single_clock_offset_is_divided_by_m() {
        let model = build_model(&ModelParams::reference_ensemble()).unwrap();
        let trace = simulate(&model, &DVector::zeros(15), 10, 4).unwrap();
        let c = 2.5e-9;
        let est: Vec<_> = trace
            .x
            .iter()
            .map(|x| {
                let mut e = x.clone();
                e[2] += c;
                e
            })
            .collect();
        let ta = atomic_time(&model, &trace, &est, "shift").unwrap();
        for v in ta.values {
            assert!((v + c / 5.0).abs() < 1e-9 * c);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let model = build_model(&ModelParams::reference_ensemble()).unwrap();
        let trace = simulate(&model, &DVector::zeros(15), 10, 4).unwrap();
        assert!(atomic_time(&model, &trace, &trace.x[..5], "x").is_err());
        assert!(generated_clock_reading(&model, &trace, &trace.x[..5], 0.0).is_err());
    }

    #[test]
    fn clock_reading_with_true_state_is_ideal() {
        let model = build_model(&ModelParams::reference_ensemble()).unwrap();
        let trace = simulate(&model, &DVector::zeros(15), 10, 5).unwrap();
        let h = generated_clock_reading(&model, &trace, &trace.x, 100.0).unwrap();
        for (k, v) in h.iter().enumerate() {
            assert!((v - (100.0 + k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_has_zero_deviation() {
        let phase: Vec<f64> = (0..200).map(|i| 3e-9 * i as f64 + 1.0).collect();
        let curve = overlapping_adev(&phase, 1.0, &octave_multiples(200)).unwrap();
        assert!(curve.sigmas.iter().all(|&s| s < 1e-15));
        assert_eq!(curve.taus, vec![1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0]);
        assert_eq!(curve.n_samples[0], 198);
    }

    #[test]
    fn short_series_skips_taus() {
        let curve = overlapping_adev(&[0.0, 1.0, 0.0, 2.0], 1.0, &[1, 2, 8]).unwrap();
        assert_eq!(curve.taus, vec![1.0]);
        assert!(overlapping_adev(&[0.0; 4], 0.0, &[1]).is_err());
        assert!(overlapping_adev(&[0.0; 4], 1.0, &[0]).is_err());
    }

    #[test]
    fn detrend_modes() {
        let phase: Vec<f64> = (0..50).map(|i| 1e-9 * (i * i) as f64 + 0.1 * i as f64).collect();
        let lin = detrend_phase(&phase, 1.0, Detrend::Linear);
        let curve = overlapping_adev(&lin, 1.0, &[1, 2, 4]).unwrap();
        assert!(curve.sigmas.iter().all(|&s| s < 1e-15));
        let raw = overlapping_adev(&phase, 1.0, &[1, 2, 4]).unwrap();
        let mean = overlapping_adev(&detrend_phase(&phase, 1.0, Detrend::Mean), 1.0, &[1, 2, 4]).unwrap();
        for (a, b) in raw.sigmas.iter().zip(&mean.sigmas) {
            assert!((a - b).abs() <= 1e-6 * a);
        }
        assert_eq!(detrend_phase(&phase, 1.0, Detrend::None), phase);
        assert_eq!("linear".parse::<Detrend>().unwrap(), Detrend::Linear);
        assert!("cubic".parse::<Detrend>().is_err());
    }
}
