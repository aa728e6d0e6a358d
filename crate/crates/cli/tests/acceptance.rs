//! Acceptance suite on the reference five-clock, three-level ensemble.
//!
//! Prints one `PASS`/`FAIL` line per criterion, plus indented informational lines, and
//! exits non-zero if any criterion fails. Run with `cargo test --release --test acceptance`
//! for realistic timings.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use skf_cli::config::ScenarioConfig;
use skf_cli::scenario::{optimize, reduced_covariance_check, run_scenario, OptimizerReport, Setup};
use skf_core::extended::ExtendedCkf;
use skf_core::filters::{ckf_step, run_ckf, run_skf, skf_step, CkfState, InnovationScale, SkfState};
use skf_core::metrics::overlapping_adev;
use skf_core::model::{build_decomposition, build_model, process_noise_single, EnsembleModel, ModelParams};
use skf_core::moments::{gain_schedule, ta_moments, CostWeights, InitError};
use skf_core::optimizer::{optimize_gamma, vec_gamma, CostFunction, RecoveryOptions};
use skf_core::simulator::{simulate, simulate_with_seeds, NoiseSeeds};

struct Outcome {
    pass: bool,
    detail: String,
    info: Vec<String>,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
            info: Vec::new(),
        }
    }

    fn with_info(mut self, line: impl Into<String>) -> Self {
        self.info.push(line.into());
        self
    }
}

fn reference() -> EnsembleModel {
    build_model(&ModelParams::reference_ensemble()).unwrap()
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn case_setup(name: &str) -> Setup {
    Setup::new(ScenarioConfig::load(&config_path(name)).unwrap()).unwrap()
}

fn case_optimum(name: &str) -> (Setup, OptimizerReport) {
    let setup = case_setup(name);
    let opt = setup.config.optimizer.clone().unwrap();
    let report = optimize(&setup, &opt).unwrap();
    (setup, report)
}

fn case1_start(model: &EnsembleModel) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
    let nm = model.state_dim();
    let p0 = DMatrix::identity(nm, nm) * 0.1;
    let p_hat0 = model.project_covariance(&p0);
    (DVector::from_element(nm, 1e-28), p0, p_hat0)
}

fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

/// Composite 5-point Gauss–Legendre quadrature of `∫₀^τ e^{Nt} diag(q²) e^{Nᵀt} dt`.
fn quadrature_noise(n: usize, tau: f64, q_sq: &[f64]) -> DMatrix<f64> {
    let nodes = [
        0.0,
        -0.538_469_310_105_683_1,
        0.538_469_310_105_683_1,
        -0.906_179_845_938_664,
        0.906_179_845_938_664,
    ];
    let weights = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let expm = |t: f64| {
        let shift = DMatrix::from_fn(n, n, |i, j| if j == i + 1 { t } else { 0.0 });
        let mut term = DMatrix::identity(n, n);
        let mut sum = term.clone();
        for k in 1..n {
            term = &term * &shift / k as f64;
            sum += &term;
        }
        sum
    };
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(q_sq));
    let panels = 4;
    let h = tau / panels as f64;
    let mut acc = DMatrix::zeros(n, n);
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        for (x, w) in nodes.iter().zip(weights) {
            let a = expm(mid + 0.5 * h * x);
            acc += (&a * &q * a.transpose()) * (0.5 * h * w);
        }
    }
    acc
}

fn noise_closed_form() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=4);
        let tau = 10.0 * (1.0 - rng.random::<f64>()); // (0, 10]
        let q_sq: Vec<f64> = (0..n)
            .map(|_| 10f64.powf(rng.random_range(-36.0..-8.0)))
            .collect();
        let w = process_noise_single(n, tau, &q_sq).unwrap();
        let oracle = quadrature_noise(n, tau, &q_sq);
        for (a, b) in w.iter().zip(oracle.iter()) {
            worst = worst.max(((a - b) / b).abs());
        }
    }
    Outcome::new(
        worst <= 1e-10,
        format!("max entrywise relative error {worst:.2e} over 100 draws (tol 1e-10)"),
    )
}

fn full_equivalence() -> Outcome {
    let model = reference();
    let (x0, p0, p_hat0) = case1_start(&model);
    let decomp = Arc::new(build_decomposition(&model, &DMatrix::zeros(3, 12)).unwrap());
    let (mut worst, mut worst_f64): (f64, f64) = (0.0, 0.0);
    for seed in 1..=5 {
        let trace = simulate(&model, &x0, 200, seed).unwrap();
        let skf = run_skf(&model, Arc::clone(&decomp), &x0, &p_hat0, &trace.y).unwrap();
        let plain = run_ckf(&model, &x0, &p0, &trace.y).unwrap();
        let mut ckf = ExtendedCkf::new(&model, &x0, &p0).unwrap();
        for k in 0..=200 {
            let c = ckf.x_hat();
            worst = worst.max((&skf.x_hat[k] - &c).norm() / (1.0 + c.norm()));
            let p = &plain.x_hat[k];
            worst_f64 = worst_f64.max((&skf.x_hat[k] - p).norm() / (1.0 + p.norm()));
            if k < 200 {
                ckf.step(&trace.y[k]).unwrap();
            }
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!("max ‖x̂_SKF − x̂_CKF‖/(1+‖x̂_CKF‖) = {worst:.2e} over k ≤ 200, 5 paths, extended-precision CKF (tol 1e-6)"),
    )
    .with_info(format!("double-precision CKF on the same paths: {worst_f64:.2e}"))
}

fn unobservable_half() -> Outcome {
    let model = reference();
    let (x0, _, projected) = case1_start(&model);
    let decomp = Arc::new(build_decomposition(&model, &DMatrix::zeros(3, 12)).unwrap());
    let a = simulate_with_seeds(
        &model,
        &x0,
        1000,
        NoiseSeeds {
            process: 3,
            measurement: 3,
        },
    )
    .unwrap();
    let b = simulate_with_seeds(
        &model,
        &x0,
        1000,
        NoiseSeeds {
            process: 3,
            measurement: 4,
        },
    )
    .unwrap();
    let mut identical = true;
    let mut observable_moved = false;
    for p_hat0 in [
        DMatrix::identity(12, 12) * 1e-4,
        projected,
        DMatrix::identity(12, 12) * 10.0,
    ] {
        let mut sa = SkfState::new(Arc::clone(&decomp), &x0, p_hat0.clone()).unwrap();
        let mut sb = SkfState::new(Arc::clone(&decomp), &x0, p_hat0).unwrap();
        for k in 0..1000 {
            sa = skf_step(&sa, &a.y[k], &model).unwrap().0;
            sb = skf_step(&sb, &b.y[k], &model).unwrap().0;
            identical &= sa
                .xi_obar
                .iter()
                .zip(sb.xi_obar.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            observable_moved |= sa.xi_o != sb.xi_o;
        }
    }
    Outcome::new(
        identical && observable_moved,
        format!(
            "unobservable estimates bitwise identical under redrawn measurement noise: {identical}; \
             observable estimates differ: {observable_moved} (3 initial covariances, 1000 steps)"
        ),
    )
}

fn reduced_identity() -> Outcome {
    let model = reference();
    let r2 = reduced_covariance_check(&model, 0.1, InnovationScale::Variance, 100).unwrap();
    let r1 = reduced_covariance_check(&model, 0.1, InnovationScale::StdDev, 100).unwrap();
    let passing: Vec<&str> = [&r2, &r1]
        .iter()
        .filter(|c| c.max_relative_error <= 1e-8)
        .map(|c| c.noise_scale)
        .collect();
    // The same identity with both recursions in double precision.
    let (x0, p0, _) = case1_start(&model);
    let mut st = CkfState::new(&model, x0, p0).unwrap();
    let mut p_check = DMatrix::identity(12, 12) * 0.1;
    let mut worst_f64: f64 = 0.0;
    let y = DVector::zeros(4);
    for _ in 0..100 {
        st = ckf_step(&st, &y, &model).unwrap().0;
        p_check = skf_core::filters::reduced_cov_step(&p_check, &model, InnovationScale::Variance)
            .unwrap()
            .0;
        worst_f64 = worst_f64.max(rel(&(&st.p * &model.obs_embed), &(&model.obs_embed * &p_check)));
    }
    Outcome::new(
        r2.max_relative_error <= 1e-8,
        format!(
            "noise factor that satisfies the identity: {}; max relative error with r^2 {:.2e}, with r {:.2e} (k ≤ 100, tol 1e-8)",
            if passing.is_empty() { "none".to_string() } else { passing.join(", ") },
            r2.max_relative_error,
            r1.max_relative_error
        ),
    )
    .with_info(format!("both recursions in double precision (r^2): {worst_f64:.2e}"))
}

fn gain_orthogonality() -> Outcome {
    let model = reference();
    let (x0, p0, _) = case1_start(&model);
    let trace = simulate(&model, &x0, 200, 11).unwrap();
    let mut ckf = ExtendedCkf::new(&model, &x0, &p0).unwrap();
    let mut st = CkfState::new(&model, x0, p0).unwrap();
    let (mut worst, mut worst_f64): (f64, f64) = (0.0, 0.0);
    for y in &trace.y {
        let gain = ckf.step(y).unwrap();
        worst = worst.max(ckf.common_gain().unwrap().norm() / (1.0 + gain.norm()));
        let (next, g) = ckf_step(&st, y, &model).unwrap();
        worst_f64 = worst_f64.max((&model.common_sum * &g).norm() / (1.0 + g.norm()));
        st = next;
    }
    Outcome::new(
        worst <= 1e-8,
        format!("max ‖(I⊗1ᵀ)L_k‖/(1+‖L_k‖) = {worst:.2e} over k < 200, extended-precision CKF (tol 1e-8)"),
    )
    .with_info(format!("double-precision CKF: {worst_f64:.2e}"))
}

fn convexity(case2: &OptimizerReport) -> Outcome {
    let pass =
        case2.dimension == 36 && case2.relative_min_eigenvalue >= -1e-8 && case2.probe_residual <= 1e-8;
    Outcome::new(
        pass,
        format!(
            "d = {}, λ_min/‖M‖ = {:.2e} (tol −1e-8), max probe residual {:.2e} at 10 probes (tol 1e-8), {} evaluations",
            case2.dimension, case2.relative_min_eigenvalue, case2.probe_residual, case2.evaluations
        ),
    )
}

fn stationarity(case1: &OptimizerReport) -> Outcome {
    // A structured initial error with nonzero mean and covariance on every level.
    let model = Arc::new(reference());
    let mu_hat = DVector::from_column_slice(&[2e-8, -3e-12, 1e-18]);
    let q_hat = DMatrix::from_diagonal(&DVector::from_column_slice(&[1e-16, 1e-22, 1e-34]));
    let (_, _, p_hat0) = case1_start(&model);
    let cost = CostFunction {
        init: Arc::new(InitError::structured(&mu_hat, &q_hat, 0.5, 5).unwrap()),
        schedule: Arc::new(gain_schedule(&model, &p_hat0, 1000).unwrap()),
        weights: CostWeights::new(1.0, 5.4117).unwrap(),
        horizon: 1000,
        model,
    };
    let sol = optimize_gamma(&cost, &RecoveryOptions::default()).unwrap();
    let structured_grad = sol.form.relative_gradient_at_zero();
    let structured_gamma = vec_gamma(&sol.gamma).component_div(&sol.form.steps).norm();
    let pass = case1.relative_gradient_at_zero <= 1e-8
        && case1.scaled_gamma_norm <= 1e-6
        && structured_grad <= 1e-8
        && structured_gamma <= 1e-6;
    Outcome::new(
        pass,
        format!(
            "Case 1: ‖b‖/scale = {:.2e}, ‖Γ*‖/scale = {:.2e}; structured μ̂₀, Q̂₀, p = 0.5: ‖b‖/scale = {:.2e}, ‖Γ*‖/scale = {:.2e} (tol 1e-8, 1e-6)",
            case1.relative_gradient_at_zero, case1.scaled_gamma_norm, structured_grad, structured_gamma
        ),
    )
}

fn case2_improvement(case2: &OptimizerReport) -> Outcome {
    let pass = case2.gamma.amax() > 0.0 && case2.cost_at_optimum_direct < case2.cost_at_zero;
    Outcome::new(
        pass,
        format!(
            "‖Γ*‖ = {:.4}, J(0) = {:.6e}, J(Γ*) = {:.6e} (re-evaluated), predicted {:.6e}",
            case2.gamma_norm, case2.cost_at_zero, case2.cost_at_optimum_direct, case2.cost_at_optimum
        ),
    )
}

fn monte_carlo(setup: &Setup, gamma_star: &DMatrix<f64>) -> Outcome {
    let model = &setup.model;
    let horizon = 1000;
    let paths = 1000u64;
    let schedule = setup.runtime_schedule(horizon).unwrap();
    let init = InitError::deterministic(&setup.x0, &setup.x_hat0).unwrap();
    let checkpoints = [10, 100, 1000];
    let mut pass = true;
    let mut lines = Vec::new();
    for (label, gamma) in [("Γ = 0", DMatrix::zeros(3, 12)), ("Γ = Γ*", gamma_star.clone())] {
        let decomp = Arc::new(build_decomposition(model, &gamma).unwrap());
        let analytic = ta_moments(model, &decomp, &init, &schedule, horizon).unwrap();
        let samples: Vec<[f64; 3]> = (0..paths)
            .into_par_iter()
            .map(|i| {
                let trace = simulate(model, &setup.x0, horizon, 10_000 + i).unwrap();
                let run = skf_core::filters::run_skf_scheduled(
                    Arc::clone(&decomp),
                    &setup.x_hat0,
                    &schedule.gains,
                    &trace.y,
                )
                .unwrap();
                checkpoints.map(|k| model.ensemble_time(&(&trace.x[k] - &run.x_hat[k])))
            })
            .collect();
        for (c, &k) in checkpoints.iter().enumerate() {
            let n = paths as f64;
            let mean = samples.iter().map(|s| s[c]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[c] - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let (e, v) = (analytic.mean[k], analytic.var[k]);
            let mean_ok = (mean - e).abs() <= 3.0 * (v / n).sqrt();
            let var_ok = (var / v - 1.0).abs() <= 0.2;
            pass &= mean_ok && var_ok;
            lines.push(format!(
                "{label}, k = {k}: mean {mean:.3e} vs {e:.3e} (|Δ|/σ_mean = {:.2}), variance ratio {:.3}",
                (mean - e).abs() / (v / n).sqrt(),
                var / v
            ));
        }
    }
    let mut out = Outcome::new(
        pass,
        "1000 paths, Case-2 initial state, k ∈ {10, 100, 1000}: mean within 3σ/√N, variance within 20%",
    );
    out.info = lines;
    out
}

/// Growth of `tr((I⊗1ᵀ)P_k(I⊗1))`: `(growth factor, decreasing steps, first decrease)`.
fn common_trace_growth(traces: impl Iterator<Item = f64>, initial: f64) -> (f64, usize, Option<usize>) {
    let (mut prev, mut decreases, mut first) = (initial, 0, None);
    for (k, t) in traces.enumerate() {
        if t < prev {
            decreases += 1;
            first.get_or_insert(k + 1);
        }
        prev = t;
    }
    (prev / initial, decreases, first)
}

/// The growth is gated on the extended-precision CKF: in double precision the covariance
/// loses positive semidefiniteness around k = 1000 and its common-mode trace later turns
/// negative, which is reported below.
fn instability_witness() -> Outcome {
    let model = reference();
    let (x0, p0, p_hat0) = case1_start(&model);
    let steps = 10_000;
    let trace = simulate(&model, &x0, steps, 12).unwrap();
    let initial = (&model.common_sum * &p0 * model.common_sum.transpose()).trace();

    let mut ext = ExtendedCkf::new(&model, &x0, &p0).unwrap();
    let (growth, decreases, first) = common_trace_growth(
        trace.y.iter().map(|y| {
            ext.step(y).unwrap();
            ext.common_covariance().trace()
        }),
        initial,
    );

    let mut st = CkfState::new(&model, x0, p0).unwrap();
    let mut min_trace = f64::INFINITY;
    let (growth_f64, decreases_f64, first_f64) = common_trace_growth(
        trace.y.iter().map(|y| {
            st = ckf_step(&st, y, &model).unwrap().0;
            let t = (&model.common_sum * &st.p * model.common_sum.transpose()).trace();
            min_trace = min_trace.min(t);
            t
        }),
        initial,
    );

    let decomp = build_decomposition(&model, &DMatrix::zeros(3, 12)).unwrap();
    let mut state = SkfState::new(Arc::new(decomp), &DVector::zeros(15), p_hat0).unwrap();
    let mut reference_norm = 0.0;
    let mut worst_ratio: f64 = 1.0;
    for k in 1..=steps {
        state = skf_step(&state, &DVector::zeros(4), &model).unwrap().0;
        let norm = state.p_o.norm();
        if k == 2000 {
            reference_norm = norm;
        } else if k > 2000 {
            worst_ratio = worst_ratio.max(norm / reference_norm).max(reference_norm / norm);
        }
    }
    let pass = decreases == 0 && growth >= 10.0 && worst_ratio <= 2.0;
    let when = |f: Option<usize>| f.map(|k| format!(", first at k = {k}")).unwrap_or_default();
    Outcome::new(
        pass,
        format!(
            "extended-precision CKF: tr((I⊗1ᵀ)P_k(I⊗1)) grew {growth:.3e}× by k = 10⁴ with {decreases} decreasing steps{}; \
             SKF ‖P̂_k‖ within {worst_ratio:.4}× of its k = 2000 value (tol 2×)",
            when(first)
        ),
    )
    .with_info(format!(
        "double-precision CKF: final trace {growth_f64:.3e}× initial, {decreases_f64} decreasing steps{}, minimum trace {min_trace:.3e}",
        when(first_f64)
    ))
}

fn definitional_adev(phase: &[f64], tau0: f64, m: usize) -> f64 {
    let tau = m as f64 * tau0;
    let avg: Vec<f64> = (0..phase.len() - m)
        .map(|i| (phase[i + m] - phase[i]) / tau)
        .collect();
    let diffs: Vec<f64> = (0..avg.len() - m).map(|i| avg[i + m] - avg[i]).collect();
    (diffs.iter().map(|d| d * d).sum::<f64>() / (2.0 * diffs.len() as f64)).sqrt()
}

fn adev_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut draw = |len: usize| -> Vec<f64> {
        let mut acc = 0.0;
        (0..len)
            .map(|_| {
                let y: f64 = StandardNormal.sample(&mut rng);
                acc += y;
                acc
            })
            .collect()
    };
    let mut worst: f64 = 0.0;
    for len in [17, 100, 1000, 5000] {
        let phase = draw(len);
        let ms: Vec<usize> = (1..=len / 2 - 1).step_by((len / 40).max(1)).collect();
        let curve = overlapping_adev(&phase, 0.5, &ms).unwrap();
        for (i, m) in ms.iter().enumerate() {
            let o = definitional_adev(&phase, 0.5, *m);
            worst = worst.max((curve.sigmas[i] - o).abs() / o);
        }
    }
    let phase = draw(1_000_000);
    let ms: Vec<usize> = (0..=10).map(|e| 1 << e).collect();
    let curve = overlapping_adev(&phase, 1.0, &ms).unwrap();
    let xs: Vec<f64> = curve.taus.iter().map(|t| t.ln()).collect();
    let ys: Vec<f64> = curve.sigmas.iter().map(|s| s.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    Outcome::new(
        worst <= 1e-12 && (slope + 0.5).abs() <= 0.05,
        format!("max relative deviation from the definition {worst:.2e} (tol 1e-12); white-FM slope {slope:.4} on 10⁶ points (−0.5 ± 0.05)"),
    )
}

fn initial_covariance_robustness() -> Outcome {
    let model = reference();
    let x0 = DVector::from_element(15, 1e-28);
    let trace = simulate(&model, &x0, 1000, 13).unwrap();
    let decomp = Arc::new(build_decomposition(&model, &DMatrix::zeros(3, 12)).unwrap());
    let series: Vec<Vec<f64>> = [0.01, 0.02, 0.04]
        .iter()
        .map(|p| {
            let run = run_skf(
                &model,
                Arc::clone(&decomp),
                &x0,
                &(DMatrix::identity(12, 12) * *p),
                &trace.y,
            )
            .unwrap();
            trace
                .x
                .iter()
                .zip(&run.x_hat)
                .map(|(x, xh)| model.ensemble_time(&(x - xh)))
                .collect()
        })
        .collect();
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in i + 1..3 {
            let scale = 1.0
                + series[i][500..]
                    .iter()
                    .chain(&series[j][500..])
                    .fold(0.0f64, |a, v| a.max(v.abs()));
            let diff = (500..=1000).fold(0.0f64, |a, k| a.max((series[i][k] - series[j][k]).abs()));
            worst = worst.max(diff / scale);
        }
    }
    Outcome::new(
        worst <= 1e-6,
        format!("max pairwise |ΔTA|/(1+max|TA|) over 500 ≤ k ≤ 1000 = {worst:.2e} for P̂₀ ∈ {{0.01, 0.02, 0.04}}·I (tol 1e-6)"),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let load = || ScenarioConfig::load(&config_path("case1.toml")).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_scenario(load(), &a).unwrap();
    run_scenario(load(), &b).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .map(|n| n.to_string_lossy().into_owned())
        .collect();
    let count_b = std::fs::read_dir(&b).unwrap().count();
    Outcome::new(
        differing.is_empty() && count_b == names.len(),
        format!("{} artifacts compared, {} differ", names.len(), differing.len()),
    )
}

type Criterion<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() -> ExitCode {
    // `cargo test` passes harness flags; only `--list` needs an answer.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let (_, case1) = case_optimum("case1.toml");
    let (case2_setup, case2) = case_optimum("case2.toml");
    println!("optimizer runs took {:.1} s", start.elapsed().as_secs_f64());

    let criteria: Vec<(&str, Criterion<'_>)> = vec![
        ("model noise covariance closed form", Box::new(noise_closed_form)),
        ("full filter equivalence at Γ = 0", Box::new(full_equivalence)),
        (
            "unobservable half independent of measurements",
            Box::new(unobservable_half),
        ),
        ("reduced covariance identity", Box::new(reduced_identity)),
        ("gain orthogonality", Box::new(gain_orthogonality)),
        ("cost convexity", Box::new(|| convexity(&case2))),
        ("stationarity at Γ = 0", Box::new(|| stationarity(&case1))),
        ("Case-2 improvement", Box::new(|| case2_improvement(&case2))),
        (
            "analytic moments vs Monte Carlo",
            Box::new(|| monte_carlo(&case2_setup, &case2.gamma)),
        ),
        (
            "conventional filter instability witness",
            Box::new(instability_witness),
        ),
        ("Allan deviation correctness", Box::new(adev_correctness)),
        (
            "structured filter robustness to P̂₀",
            Box::new(initial_covariance_robustness),
        ),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = check();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!outcome.pass);
        println!(
            "{verdict} [{:>2}] {name}: {} ({:.1} s)",
            i + 1,
            outcome.detail,
            t.elapsed().as_secs_f64()
        );
        for line in &outcome.info {
            println!("         {line}");
        }
    }
    println!(
        "{} of {} criteria passed in {:.1} s",
        criteria.len() - failed,
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
