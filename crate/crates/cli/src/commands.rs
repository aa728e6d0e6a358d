//! Single-stage subcommands chaining on file artifacts.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use skf_core::metrics::{detrend_phase, octave_multiples, overlapping_adev, Detrend};

use crate::artifacts::{
    read_filter, read_trace, write_adev, write_comparison, write_filter, write_gamma, write_json,
    write_moments, write_trace, ComparisonTable, TraceData,
};
use crate::config::{Algorithm, CovarianceSpec, GammaSource, ScenarioConfig};
use crate::error::{CliError, CliResult, Stage};
use crate::scenario::{load_gamma_checked, optimize, run_scenario, Setup};

#[derive(Debug, Parser)]
#[command(name = "skf", version, about = "Clock-ensemble time-scale experiments")]
pub struct Cli {
    /// Scenario configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Output directory; defaults to `outputs.dir` of the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Replaces `run.seed`.
    #[arg(long, global = true)]
    pub seed_override: Option<u64>,

    /// Worker threads for path and probe parallelism (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the whole scenario: optimize (if configured), simulate, filter, moments, ADEV.
    Run,
    /// Simulate `run.paths` sample paths into `trace_NNN.csv`.
    Simulate,
    /// Filter one trace file.
    Filter(FilterArgs),
    /// Recover the cost, solve for the optimal Γ and write `gamma.json`.
    Optimize,
    /// Analytic atomic-time moments with the configured confidence band.
    Moments(MomentsArgs),
    /// Overlapping Allan deviation of a filter run's predicted ensemble time deviation.
    Adev(AdevArgs),
    /// Join several filter runs into one TA table and one ADEV table.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Trace CSV written by `simulate`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum)]
    pub algo: Algorithm,
    /// `zero` or a Γ JSON file; defaults to the configured source.
    #[arg(long)]
    pub gamma: Option<String>,
    /// Structured filter's initial covariance: `projected`, a scale `p` for `p·I`, or
    /// `config` for `filter.p_hat_0`.
    #[arg(long, default_value = "config")]
    pub phat0: String,
}

#[derive(Debug, Args)]
pub struct MomentsArgs {
    /// `zero` or a Γ JSON file; defaults to the configured source.
    #[arg(long)]
    pub gamma: Option<String>,
}

#[derive(Debug, Args)]
pub struct AdevArgs {
    /// Filter CSV written by `filter`.
    #[arg(long)]
    pub input: PathBuf,
    /// Overrides `outputs.adev_detrend` (none|mean|linear).
    #[arg(long)]
    pub detrend: Option<Detrend>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Filter CSVs to join; columns are named after the file stems.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
}

fn load_config(cli: &Cli) -> CliResult<ScenarioConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| CliError::config("--config <file> is required"))?;
    Ok(ScenarioConfig::load(path)?.with_seed_override(cli.seed_override))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".into())
}

/// Γ from a command-line choice, falling back to the configured source. A configured
/// `optimize` source reads the `gamma.json` left by a previous `optimize` stage.
fn gamma_for(setup: &Setup, choice: Option<&str>, out: &Path) -> CliResult<DMatrix<f64>> {
    let (r, c) = setup.gamma_shape();
    match choice {
        Some("zero") => Ok(DMatrix::zeros(r, c)),
        Some(file) => load_gamma_checked(Path::new(file), r, c),
        None => match &setup.config.filter.gamma {
            GammaSource::Zero => Ok(DMatrix::zeros(r, c)),
            GammaSource::File(p) => load_gamma_checked(p, r, c),
            GammaSource::Optimize => load_gamma_checked(&out.join("gamma.json"), r, c),
        },
    }
}

/// Executes the parsed command line.
pub fn execute(cli: &Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        // A second initialization (e.g. from tests) keeps the existing pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let config = load_config(cli)?;
    let out = cli.out.clone().unwrap_or_else(|| config.outputs.dir.clone());
    match &cli.command {
        Command::Run => {
            run_scenario(config, &out)?;
        }
        Command::Simulate => {
            let setup = Setup::new(config)?;
            let (n, m) = (setup.model.n(), setup.model.m());
            for i in 0..setup.config.run.paths {
                let trace = setup.simulate_path(i)?;
                write_trace(
                    &out.join(format!("trace_{i:03}.csv")),
                    &TraceData::from_trace(&trace, n, m),
                )?;
            }
        }
        Command::Filter(args) => {
            let mut config = config;
            match args.phat0.as_str() {
                "config" => {}
                "projected" => config.filter.p_hat_0 = CovarianceSpec::Projected,
                other => {
                    let p: f64 = other.parse().map_err(|_| {
                        CliError::config(format!(
                            "--phat0 '{other}': expected projected, config or a number"
                        ))
                    })?;
                    config.filter.p_hat_0 = CovarianceSpec::Scaled(p);
                }
            }
            let setup = Setup::new(config)?;
            let data = read_trace(&args.trace)?;
            if (data.n, data.m) != (setup.model.n(), setup.model.m()) {
                return Err(CliError::artifact(
                    &args.trace,
                    format!(
                        "trace has n = {}, m = {}; configuration has n = {}, m = {}",
                        data.n,
                        data.m,
                        setup.model.n(),
                        setup.model.m()
                    ),
                ));
            }
            let trace = data.into_trace(0);
            let gamma = gamma_for(&setup, args.gamma.as_deref(), &out)?;
            let schedule = setup.runtime_schedule(trace.horizon)?;
            let table = setup.filter(&trace, args.algo, &gamma, &schedule)?;
            let name = format!("{}_{}.csv", stem(&args.trace), args.algo.label());
            write_filter(&out.join(name), &table)?;
        }
        Command::Optimize => {
            let setup = Setup::new(config)?;
            let opt = setup
                .config
                .optimizer
                .clone()
                .ok_or_else(|| CliError::config("[optimizer]: missing (required by `optimize`)"))?;
            let report = optimize(&setup, &opt)?;
            write_gamma(&out.join("gamma.json"), &report.gamma)?;
            write_json(&out.join("optimizer.json"), &report)?;
        }
        Command::Moments(args) => {
            let setup = Setup::new(config)?;
            let gamma = gamma_for(&setup, args.gamma.as_deref(), &out)?;
            let schedule = setup.runtime_schedule(setup.config.run.horizon)?;
            let moments = setup.moments(&gamma, &schedule)?;
            write_moments(&out.join("moments.csv"), &setup.moments_table(&moments)?)?;
        }
        Command::Adev(args) => {
            let table = read_filter(&args.input)?;
            let detrend = args.detrend.unwrap_or(config.outputs.adev_detrend);
            let tau0 = config.model.tau;
            let phase = detrend_phase(&table.predicted_ensemble_time(), tau0, detrend);
            let multiples = config
                .outputs
                .adev_multiples
                .clone()
                .unwrap_or_else(|| octave_multiples(phase.len()));
            let curve = overlapping_adev(&phase, tau0, &multiples).stage("metrics")?;
            write_adev(&out.join(format!("{}_adev.csv", stem(&args.input))), &curve)?;
        }
        Command::Compare(args) => compare(&config, &args.inputs, &out)?,
    }
    Ok(())
}

fn compare(config: &ScenarioConfig, inputs: &[PathBuf], out: &Path) -> CliResult<()> {
    let tau0 = config.model.tau;
    let detrend = config.outputs.adev_detrend;
    let mut ta = ComparisonTable {
        key: "k".into(),
        keys: Vec::new(),
        columns: Vec::new(),
        integer_key: true,
    };
    let mut adev = ComparisonTable {
        key: "tau".into(),
        keys: Vec::new(),
        columns: Vec::new(),
        integer_key: false,
    };
    let mut curves = Vec::new();
    for path in inputs {
        let table = read_filter(path)?;
        let name = stem(path);
        if table.ta.len() > ta.keys.len() {
            ta.keys = (0..table.ta.len()).map(|k| k as f64).collect();
        }
        ta.columns
            .push((format!("TA_{name}"), table.ta.iter().copied().map(Some).collect()));
        let phase = detrend_phase(&table.predicted_ensemble_time(), tau0, detrend);
        let multiples = config
            .outputs
            .adev_multiples
            .clone()
            .unwrap_or_else(|| octave_multiples(phase.len()));
        curves.push((name, overlapping_adev(&phase, tau0, &multiples).stage("metrics")?));
    }
    let mut taus: Vec<f64> = curves.iter().flat_map(|(_, c)| c.taus.iter().copied()).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    for (name, curve) in &curves {
        let col = taus
            .iter()
            .map(|t| curve.taus.iter().position(|x| x == t).map(|i| curve.sigmas[i]))
            .collect();
        adev.columns.push((format!("sigma_{name}"), col));
    }
    adev.keys = taus;
    write_comparison(&out.join("compare_ta.csv"), &ta)?;
    write_comparison(&out.join("compare_adev.csv"), &adev)
}
