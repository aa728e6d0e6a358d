//! Pipeline stages shared by the subcommands and the end-to-end scenario run.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use skf_core::extended::{run_ckf_extended, ExtendedCkf, ExtendedRiccati};
use skf_core::filters::{run_ckf, run_skf_scheduled, InnovationScale};
use skf_core::metrics::{atomic_time, detrend_phase, octave_multiples, overlapping_adev, AdevCurve};
use skf_core::model::{build_decomposition, build_model, EnsembleModel};
use skf_core::moments::{
    confidence_interval, cost_from_moments, gain_schedule, ta_moments, CostWeights, GainSchedule, InitError,
    TaMoments,
};
use skf_core::optimizer::{
    check_stationary_at_zero, optimize_gamma, vec_gamma, CostFunction, RecoveryOptions,
};
use skf_core::simulator::{simulate_with_seeds, NoiseSeeds, SimTrace};

use crate::artifacts::{
    write_adev, write_filter, write_gamma, write_json, write_moments, write_trace, FilterTable, MomentsTable,
    TraceData,
};
use crate::config::{
    Algorithm, CovarianceSpec, GammaSource, InitialErrorSpec, OptimizerConfig, ScenarioConfig, SCHEMA_VERSION,
};
use crate::error::{CliResult, Stage};

/// Model and initial conditions realized from a configuration.
#[derive(Debug, Clone)]
pub struct Setup {
    pub config: ScenarioConfig,
    pub model: Arc<EnsembleModel>,
    pub x0: DVector<f64>,
    pub x_hat0: DVector<f64>,
    pub p0: DMatrix<f64>,
    /// Observable covariance the structured filter starts from.
    pub p_hat0: DMatrix<f64>,
}

impl Setup {
    pub fn new(config: ScenarioConfig) -> CliResult<Self> {
        let model = Arc::new(build_model(&config.model).stage("ensemble-model")?);
        let (nm, no) = (model.state_dim(), model.obs_dim());
        let x0 = config.x0();
        let x_hat0 = config.x_hat0();
        let p0 = config.filter.p0.realize(nm, &model, &DMatrix::zeros(nm, nm));
        let p_hat0 = config.filter.p_hat_0.realize(no, &model, &p0);
        Ok(Setup {
            config,
            model,
            x0,
            x_hat0,
            p0,
            p_hat0,
        })
    }

    pub fn gamma_shape(&self) -> (usize, usize) {
        (self.model.n(), self.model.obs_dim())
    }

    /// Initial prediction error used by the moment propagation.
    pub fn initial_error(&self) -> CliResult<InitError> {
        let spec = self
            .config
            .optimizer
            .as_ref()
            .map(|o| o.initial_error.clone())
            .unwrap_or(InitialErrorSpec::FromInit);
        match spec {
            InitialErrorSpec::FromInit => {
                InitError::deterministic(&self.x0, &self.x_hat0).stage("stat-propagation")
            }
            InitialErrorSpec::Structured { mu_hat, q_hat, p } => {
                InitError::structured(&DVector::from_vec(mu_hat), &q_hat, p, self.model.m())
                    .stage("stat-propagation")
            }
        }
    }

    pub fn runtime_schedule(&self, horizon: usize) -> CliResult<GainSchedule> {
        gain_schedule(&self.model, &self.p_hat0, horizon).stage("stat-propagation")
    }

    pub fn simulate_path(&self, index: usize) -> CliResult<SimTrace> {
        let seeds = NoiseSeeds::for_path(self.config.run.seed, index as u64);
        simulate_with_seeds(&self.model, &self.x0, self.config.run.horizon, seeds).stage("simulator")
    }

    /// Runs one filter over a trace and forms its atomic time.
    pub fn filter(
        &self,
        trace: &SimTrace,
        algo: Algorithm,
        gamma: &DMatrix<f64>,
        schedule: &GainSchedule,
    ) -> CliResult<FilterTable> {
        let run = match algo {
            Algorithm::Ckf => run_ckf(&self.model, &self.x_hat0, &self.p0, &trace.y).stage("filters")?,
            Algorithm::CkfExtended => {
                run_ckf_extended(&self.model, &self.x_hat0, &self.p0, &trace.y).stage("filters")?
            }
            Algorithm::Skf => {
                let decomp = Arc::new(build_decomposition(&self.model, gamma).stage("ensemble-model")?);
                run_skf_scheduled(decomp, &self.x_hat0, &schedule.gains, &trace.y).stage("filters")?
            }
        };
        let ta = atomic_time(&self.model, trace, &run.x_hat, algo.label()).stage("metrics")?;
        Ok(FilterTable {
            n: self.model.n(),
            m: self.model.m(),
            x_hat: run.x_hat,
            ta: ta.values,
        })
    }

    /// Overlapping ADEV of the predicted ensemble time deviation.
    pub fn adev(&self, table: &FilterTable) -> CliResult<AdevCurve> {
        let out = &self.config.outputs;
        let tau0 = self.config.model.tau;
        let phase = detrend_phase(&table.predicted_ensemble_time(), tau0, out.adev_detrend);
        let multiples = out
            .adev_multiples
            .clone()
            .unwrap_or_else(|| octave_multiples(phase.len()));
        overlapping_adev(&phase, tau0, &multiples).stage("metrics")
    }

    pub fn moments(&self, gamma: &DMatrix<f64>, schedule: &GainSchedule) -> CliResult<TaMoments> {
        let decomp = build_decomposition(&self.model, gamma).stage("ensemble-model")?;
        let init = self.initial_error()?;
        ta_moments(&self.model, &decomp, &init, schedule, self.config.run.horizon).stage("stat-propagation")
    }

    pub fn moments_table(&self, moments: &TaMoments) -> CliResult<MomentsTable> {
        let level = self.config.outputs.confidence_level;
        let band = confidence_interval(moments, level).stage("stat-propagation")?;
        Ok(MomentsTable::new(moments, level, band))
    }
}

/// Diagnostics of the recovered cost and its minimizer.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizerReport {
    pub dimension: usize,
    pub evaluations: usize,
    pub cost_at_zero: f64,
    pub cost_at_optimum: f64,
    /// `J(Γ*)` re-evaluated through the moment propagation.
    pub cost_at_optimum_direct: f64,
    pub gradient_norm_at_zero: f64,
    /// Gradient at zero relative to the scale of the form, in probe units.
    pub relative_gradient_at_zero: f64,
    pub relative_min_eigenvalue: f64,
    pub probe_residual: f64,
    pub gamma_norm: f64,
    /// `‖vec(Γ*)‖` in probe-step units.
    pub scaled_gamma_norm: f64,
    #[serde(skip)]
    pub gamma: DMatrix<f64>,
}

pub fn optimize(setup: &Setup, opt: &OptimizerConfig) -> CliResult<OptimizerReport> {
    let model = &setup.model;
    let no = model.obs_dim();
    let p_hat = opt.p_hat_0.realize(no, model, &setup.p0);
    let schedule = gain_schedule(model, &p_hat, opt.horizon).stage("gamma-optimizer")?;
    let weights = CostWeights::new(opt.delta1, opt.delta2).stage("gamma-optimizer")?;
    let cost = CostFunction {
        model: model.clone(),
        init: Arc::new(setup.initial_error()?),
        schedule: Arc::new(schedule),
        weights,
        horizon: opt.horizon,
    };
    let options = RecoveryOptions {
        steps: opt.steps,
        probe_seed: opt.probe_seed,
        ..Default::default()
    };
    let sol = optimize_gamma(&cost, &options).stage("gamma-optimizer")?;
    let direct = cost.at_gamma(&sol.gamma).stage("gamma-optimizer")?;
    let form = &sol.form;
    Ok(OptimizerReport {
        dimension: form.dim(),
        evaluations: form.evaluations,
        cost_at_zero: sol.cost_at_zero,
        cost_at_optimum: sol.cost,
        cost_at_optimum_direct: direct,
        gradient_norm_at_zero: check_stationary_at_zero(form),
        relative_gradient_at_zero: form.relative_gradient_at_zero(),
        relative_min_eigenvalue: form.relative_min_eigenvalue(),
        probe_residual: form.probe_residual,
        gamma_norm: sol.gamma.norm(),
        scaled_gamma_norm: vec_gamma(&sol.gamma).component_div(&form.steps).norm(),
        gamma: sol.gamma,
    })
}

/// Filter-specific figures of one sample path.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterSummary {
    pub algorithm: &'static str,
    pub max_abs_ta: f64,
    pub final_ta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PathSummary {
    pub index: usize,
    pub seed: u64,
    pub filters: Vec<FilterSummary>,
    /// Structured filter against each conventional filter that ran.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub equivalence: Vec<Equivalence>,
}

/// Agreement of the structured filter with a conventional filter over the equivalence window.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Equivalence {
    pub reference: &'static str,
    /// `max_k ‖x̂_SKF − x̂_CKF‖ / (1 + ‖x̂_CKF‖)`.
    pub state: f64,
    /// `max_k |TA_SKF − TA_CKF| / (1 + max_k |TA_CKF|)`.
    pub ta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentsSummary {
    pub cost: Option<f64>,
    pub final_mean: f64,
    pub final_var: f64,
    pub confidence_level: f64,
    /// Fraction of (path, k) samples of the structured filter's TA inside the band.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub band_coverage: Option<f64>,
}

/// The conventional filter's covariance against the reduced recursion,
/// `max_k ‖P_k (I⊗V̄)⁺ − (I⊗V̄)⁺ P̌_k‖ / ‖(I⊗V̄)⁺ P̌_k‖`, both carried in double-double.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReducedCovarianceCheck {
    /// `r` or `r^2`.
    pub noise_scale: &'static str,
    pub steps: usize,
    pub max_relative_error: f64,
}

/// Runs the check for `P₀ = p·I`, `P̌₀ = p·I` over `steps` steps.
pub fn reduced_covariance_check(
    model: &EnsembleModel,
    p: f64,
    scale: InnovationScale,
    steps: usize,
) -> CliResult<ReducedCovarianceCheck> {
    let (nm, no) = (model.state_dim(), model.obs_dim());
    let mut ckf =
        ExtendedCkf::new(model, &DVector::zeros(nm), &(DMatrix::identity(nm, nm) * p)).stage("filters")?;
    let mut reduced = ExtendedRiccati::reduced(
        model,
        scale.rho(model.params.r_sq),
        &(DMatrix::identity(no, no) * p),
    )
    .stage("filters")?;
    // the covariances do not depend on the measurements
    let y = DVector::zeros(model.m() - 1);
    let mut worst: f64 = 0.0;
    for _ in 0..steps {
        ckf.step(&y).stage("filters")?;
        reduced.step().stage("filters")?;
        let rhs = &model.obs_embed * reduced.covariance();
        let err = (ckf.embedded_covariance() - &rhs).norm() / rhs.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
    }
    Ok(ReducedCovarianceCheck {
        noise_scale: scale.label(),
        steps,
        max_relative_error: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    pub paths: usize,
    pub base_seed: u64,
    pub gamma_source: String,
    pub gamma_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub moments: Option<MomentsSummary>,
    pub equivalence_horizon: usize,
    /// Present when the conventional filter starts from `P₀ = p·I`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reduced_covariance: Option<ReducedCovarianceCheck>,
    pub path_results: Vec<PathSummary>,
    pub artifacts: Vec<String>,
}

/// Files written under the output directory, in emission order.
#[derive(Debug, Default)]
struct Emitted {
    dir: PathBuf,
    names: Vec<String>,
}

impl Emitted {
    fn path(&mut self, name: String) -> PathBuf {
        let p = self.dir.join(&name);
        self.names.push(name);
        p
    }
}

struct PathOutput {
    summary: PathSummary,
    trace: SimTrace,
    tables: Vec<(Algorithm, FilterTable, Option<AdevCurve>)>,
}

fn compare_runs(ckf: &FilterTable, skf: &FilterTable, window: usize) -> (f64, f64) {
    let end = window.min(ckf.x_hat.len().saturating_sub(1));
    let mut state: f64 = 0.0;
    for k in 0..=end {
        let c = &ckf.x_hat[k];
        state = state.max((&skf.x_hat[k] - c).norm() / (1.0 + c.norm()));
    }
    let scale = 1.0 + ckf.ta[..=end].iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ta = (0..=end).fold(0.0f64, |a, k| a.max((skf.ta[k] - ckf.ta[k]).abs())) / scale;
    (state, ta)
}

fn run_path(
    setup: &Setup,
    index: usize,
    gamma: &DMatrix<f64>,
    schedule: &GainSchedule,
) -> CliResult<PathOutput> {
    let trace = setup.simulate_path(index)?;
    let out = &setup.config.outputs;
    let mut tables = Vec::new();
    for &algo in &setup.config.filter.algorithms {
        let table = setup.filter(&trace, algo, gamma, schedule)?;
        let adev = if out.adev { Some(setup.adev(&table)?) } else { None };
        tables.push((algo, table, adev));
    }
    let filters = tables
        .iter()
        .map(|(algo, t, _)| FilterSummary {
            algorithm: algo.label(),
            max_abs_ta: t.ta.iter().fold(0.0, |a: f64, v| a.max(v.abs())),
            final_ta: *t.ta.last().unwrap_or(&0.0),
        })
        .collect();
    let find = |a: Algorithm| tables.iter().find(|(x, _, _)| *x == a).map(|(_, t, _)| t);
    let equivalence = match find(Algorithm::Skf) {
        Some(s) => [Algorithm::Ckf, Algorithm::CkfExtended]
            .into_iter()
            .filter_map(|a| find(a).map(|c| (a, c)))
            .map(|(a, c)| {
                let (state, ta) = compare_runs(c, s, out.equivalence_horizon);
                Equivalence {
                    reference: a.label(),
                    state,
                    ta,
                }
            })
            .collect(),
        None => Vec::new(),
    };
    Ok(PathOutput {
        summary: PathSummary {
            index,
            seed: trace.seed,
            filters,
            equivalence,
        },
        trace,
        tables,
    })
}

pub fn resolve_gamma(setup: &Setup) -> CliResult<(DMatrix<f64>, Option<OptimizerReport>)> {
    let (r, c) = setup.gamma_shape();
    match &setup.config.filter.gamma {
        GammaSource::Zero => Ok((DMatrix::zeros(r, c), None)),
        GammaSource::File(path) => Ok((load_gamma_checked(path, r, c)?, None)),
        GammaSource::Optimize => {
            let opt = setup
                .config
                .optimizer
                .as_ref()
                .expect("validated: optimize requires [optimizer]");
            let report = optimize(setup, opt)?;
            Ok((report.gamma.clone(), Some(report)))
        }
    }
}

pub fn load_gamma_checked(path: &Path, rows: usize, cols: usize) -> CliResult<DMatrix<f64>> {
    let g = crate::artifacts::read_gamma(path)?;
    if g.shape() != (rows, cols) {
        return Err(crate::error::CliError::artifact(
            path,
            format!("Γ is {}x{}, the model needs {rows}x{cols}", g.nrows(), g.ncols()),
        ));
    }
    Ok(g)
}

/// Runs every configured stage and writes the artifacts under `out_dir`.
///
/// Paths run in parallel; results are collected in path order and written sequentially, so
/// the artifact bytes depend only on the configuration.
pub fn run_scenario(config: ScenarioConfig, out_dir: &Path) -> CliResult<Summary> {
    let setup = Setup::new(config)?;
    let cfg = &setup.config;
    let out = &cfg.outputs;
    let mut emitted = Emitted {
        dir: out_dir.to_path_buf(),
        names: Vec::new(),
    };

    let (gamma, report) = resolve_gamma(&setup)?;
    if let Some(report) = &report {
        write_gamma(&emitted.path("gamma.json".into()), &report.gamma)?;
        write_json(&emitted.path("optimizer.json".into()), report)?;
    }

    let needs_schedule = out.moments || cfg.filter.algorithms.contains(&Algorithm::Skf);
    let schedule = if needs_schedule {
        setup.runtime_schedule(cfg.run.horizon)?
    } else {
        GainSchedule {
            gains: Vec::new(),
            final_covariance: DMatrix::zeros(0, 0),
        }
    };
    let results: Vec<PathOutput> = (0..cfg.run.paths)
        .into_par_iter()
        .map(|i| run_path(&setup, i, &gamma, &schedule))
        .collect::<CliResult<_>>()?;

    let (n, m) = (setup.model.n(), setup.model.m());
    for r in &results {
        let i = r.summary.index;
        if out.traces {
            write_trace(
                &emitted.path(format!("trace_{i:03}.csv")),
                &TraceData::from_trace(&r.trace, n, m),
            )?;
        }
        for (algo, table, adev) in &r.tables {
            if out.filters {
                write_filter(&emitted.path(format!("{}_{i:03}.csv", algo.label())), table)?;
            }
            if let Some(curve) = adev {
                write_adev(&emitted.path(format!("adev_{}_{i:03}.csv", algo.label())), curve)?;
            }
        }
    }

    let moments = if out.moments {
        let moments = setup.moments(&gamma, &schedule)?;
        let table = setup.moments_table(&moments)?;
        write_moments(&emitted.path("moments.csv".into()), &table)?;
        let cost = cfg
            .optimizer
            .as_ref()
            .map(|o| CostWeights::new(o.delta1, o.delta2).map(|w| cost_from_moments(&moments, &w)))
            .transpose()
            .stage("stat-propagation")?;
        let skf: Vec<&FilterTable> = results
            .iter()
            .flat_map(|r| {
                r.tables
                    .iter()
                    .filter(|(a, _, _)| *a == Algorithm::Skf)
                    .map(|(_, t, _)| t)
            })
            .collect();
        let band_coverage = (!skf.is_empty()).then(|| {
            let mut inside = 0usize;
            let mut total = 0usize;
            for t in &skf {
                for (k, v) in t.ta.iter().enumerate() {
                    let (lo, hi) = table.band[k];
                    total += 1;
                    inside += usize::from(lo <= *v && *v <= hi);
                }
            }
            inside as f64 / total as f64
        });
        Some(MomentsSummary {
            cost,
            final_mean: *moments.mean.last().unwrap_or(&0.0),
            final_var: *moments.var.last().unwrap_or(&0.0),
            confidence_level: out.confidence_level,
            band_coverage,
        })
    } else {
        None
    };

    let reduced_covariance = match cfg.filter.p0 {
        CovarianceSpec::Scaled(p) => Some(reduced_covariance_check(
            &setup.model,
            p,
            cfg.filter.reduced_noise_scale,
            out.equivalence_horizon.min(cfg.run.horizon),
        )?),
        _ => None,
    };

    let summary_path = emitted.path("summary.json".into());
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        n,
        m,
        horizon: cfg.run.horizon,
        paths: cfg.run.paths,
        base_seed: cfg.run.seed,
        gamma_source: match &cfg.filter.gamma {
            GammaSource::Zero => "zero".into(),
            GammaSource::File(p) => format!("file:{}", p.display()),
            GammaSource::Optimize => "optimize".into(),
        },
        gamma_norm: gamma.norm(),
        optimizer: report,
        moments,
        equivalence_horizon: out.equivalence_horizon,
        reduced_covariance,
        path_results: results.into_iter().map(|r| r.summary).collect(),
        artifacts: emitted.names.clone(),
    };
    write_json(&summary_path, &summary)?;
    log::info!(
        "wrote {} artifacts to {}",
        summary.artifacts.len(),
        out_dir.display()
    );
    Ok(summary)
}
