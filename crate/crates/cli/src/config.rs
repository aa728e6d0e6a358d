//! Scenario configuration (TOML, versioned schema).
//!
//! The file is parsed into permissive raw structs first and then resolved, so a single
//! validation pass can report every missing or inconsistent field at once.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use skf_core::filters::InnovationScale;
use skf_core::metrics::Detrend;
use skf_core::model::{EnsembleModel, ModelParams};
use skf_core::optimizer::StepRule;

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_HORIZON: usize = 1000;
pub const DEFAULT_PATHS: usize = 10;
pub const DEFAULT_LEVEL: f64 = 0.98;
pub const DEFAULT_EQUIVALENCE_HORIZON: usize = 200;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema_version: Option<u32>,
    model: Option<RawModel>,
    init: Option<RawInit>,
    filter: Option<RawFilter>,
    optimizer: Option<RawOptimizer>,
    run: Option<RawRun>,
    outputs: Option<RawOutputs>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    n: Option<usize>,
    m: Option<usize>,
    tau: Option<f64>,
    q_sq: Option<Vec<f64>>,
    r_sq: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVector {
    constant: Option<f64>,
    values: Option<Vec<f64>>,
    uniform: Option<[f64; 2]>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    x0: Option<RawVector>,
    x_hat0: Option<RawVector>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawCovariance {
    Scalar(f64),
    Keyword(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilter {
    algorithms: Option<Vec<String>>,
    gamma: Option<String>,
    gamma_file: Option<PathBuf>,
    p0: Option<RawCovariance>,
    p_hat_0: Option<RawCovariance>,
    reduced_noise_scale: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStructuredError {
    mu_hat: Option<Vec<f64>>,
    q_hat: Option<Vec<Vec<f64>>>,
    p: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawInitialError {
    Keyword(String),
    Structured(RawStructuredError),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    delta1: Option<f64>,
    delta2: Option<f64>,
    horizon: Option<usize>,
    p_hat_0: Option<RawCovariance>,
    initial_error: Option<RawInitialError>,
    steps: Option<String>,
    probe_seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    horizon: Option<usize>,
    paths: Option<usize>,
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutputs {
    dir: Option<PathBuf>,
    traces: Option<bool>,
    filters: Option<bool>,
    moments: Option<bool>,
    adev: Option<bool>,
    confidence_level: Option<f64>,
    adev_detrend: Option<String>,
    adev_multiples: Option<Vec<usize>>,
    equivalence_horizon: Option<usize>,
}

/// Vector given explicitly or drawn once from a seeded uniform distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum VectorSpec {
    Constant(f64),
    Values(Vec<f64>),
    /// Independent entries uniform on `[low, high)`, drawn from ChaCha8 seeded with `seed`.
    Uniform {
        low: f64,
        high: f64,
        seed: u64,
    },
}

impl VectorSpec {
    pub fn realize(&self, dim: usize) -> DVector<f64> {
        match self {
            VectorSpec::Constant(c) => DVector::from_element(dim, *c),
            VectorSpec::Values(v) => DVector::from_column_slice(v),
            VectorSpec::Uniform { low, high, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                DVector::from_fn(dim, |_, _| rng.random_range(*low..*high))
            }
        }
    }
}

/// Covariance given as `p·I`, an explicit matrix, or (observable covariances only) the
/// projection `(I⊗V̄) P₀ (I⊗V̄)ᵀ` of the filter's `P₀`.
#[derive(Debug, Clone, PartialEq)]
pub enum CovarianceSpec {
    Scaled(f64),
    Explicit(DMatrix<f64>),
    Projected,
}

impl CovarianceSpec {
    pub fn realize(&self, dim: usize, model: &EnsembleModel, p0: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            CovarianceSpec::Scaled(p) => DMatrix::identity(dim, dim) * *p,
            CovarianceSpec::Explicit(m) => m.clone(),
            CovarianceSpec::Projected => model.project_covariance(p0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, clap::ValueEnum)]
pub enum Algorithm {
    /// Conventional Kalman filter in double precision.
    Ckf,
    /// Conventional Kalman filter carried in double-double arithmetic; tracks the ideal
    /// recursion far longer than `Ckf` and serves as its reference.
    CkfExtended,
    Skf,
}

impl Algorithm {
    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Ckf => "ckf",
            Algorithm::CkfExtended => "ckf-extended",
            Algorithm::Skf => "skf",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GammaSource {
    Zero,
    File(PathBuf),
    Optimize,
}

/// Initial prediction error fed to the moment propagation and the cost.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialErrorSpec {
    /// `μ₀ = x[0] − x̂[0]`, `Q₀ = 0` from the configured initial vectors.
    FromInit,
    /// `μ₀ = μ̂₀⊗1_m`, `Q₀ = Q̂₀⊗pI_m`.
    Structured {
        mu_hat: Vec<f64>,
        q_hat: DMatrix<f64>,
        p: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    pub x0: VectorSpec,
    pub x_hat0: VectorSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub algorithms: Vec<Algorithm>,
    pub gamma: GammaSource,
    pub p0: CovarianceSpec,
    /// Observable covariance used by the structured filter at run time.
    pub p_hat_0: CovarianceSpec,
    /// Measurement-noise factor `ρ` (`r` or `r²`) of the reduced covariance recursion
    /// checked against the conventional filter.
    pub reduced_noise_scale: InnovationScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub delta1: f64,
    pub delta2: f64,
    pub horizon: usize,
    /// Observable covariance that builds the gain schedule inside the cost.
    pub p_hat_0: CovarianceSpec,
    pub initial_error: InitialErrorSpec,
    pub steps: StepRule,
    pub probe_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub horizon: usize,
    pub paths: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub traces: bool,
    pub filters: bool,
    pub moments: bool,
    pub adev: bool,
    pub confidence_level: f64,
    pub adev_detrend: Detrend,
    /// `None` selects octave multiples of `τ`.
    pub adev_multiples: Option<Vec<usize>>,
    pub equivalence_horizon: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub model: ModelParams,
    pub init: InitConfig,
    pub filter: FilterConfig,
    pub optimizer: Option<OptimizerConfig>,
    pub run: RunConfig,
    pub outputs: OutputConfig,
}

impl ScenarioConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses TOML text; relative file references resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| CliError::config(e.message().to_string()))?;
        Resolver::default().resolve(raw, base)
    }

    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(seed) = seed {
            self.run.seed = seed;
        }
        self
    }

    pub fn x0(&self) -> DVector<f64> {
        self.init.x0.realize(self.model.state_dim())
    }

    pub fn x_hat0(&self) -> DVector<f64> {
        self.init.x_hat0.realize(self.model.state_dim())
    }
}

#[derive(Default)]
struct Resolver {
    problems: Vec<String>,
}

impl Resolver {
    fn missing(&mut self, field: &str) {
        self.problems.push(format!("{field}: missing"));
    }

    fn bad(&mut self, field: &str, msg: impl std::fmt::Display) {
        self.problems.push(format!("{field}: {msg}"));
    }

    fn require<T>(&mut self, value: Option<T>, field: &str) -> Option<T> {
        if value.is_none() {
            self.missing(field);
        }
        value
    }

    fn resolve(mut self, raw: RawConfig, base: &Path) -> CliResult<ScenarioConfig> {
        match raw.schema_version {
            None => self.missing("schema_version"),
            Some(SCHEMA_VERSION) => {}
            Some(v) => self.bad(
                "schema_version",
                format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
            ),
        }
        let model = self.model(raw.model);
        let dims = model.as_ref().map(|p| (p.n, p.m));
        let init = self.init(raw.init, dims);
        let needs_optimizer = raw.filter.as_ref().and_then(|f| f.gamma.as_deref()) == Some("optimize");
        let filter = self.filter(raw.filter, dims, base);
        let optimizer = match raw.optimizer {
            Some(o) => self.optimizer(o, dims),
            None => {
                if needs_optimizer {
                    self.missing("[optimizer] (required by filter.gamma = \"optimize\")");
                }
                None
            }
        };
        let run = self.run(raw.run);
        let outputs = self.outputs(raw.outputs.unwrap_or_default());

        if !self.problems.is_empty() {
            return Err(CliError::Config(self.problems));
        }
        Ok(ScenarioConfig {
            model: model.expect("validated"),
            init: init.expect("validated"),
            filter: filter.expect("validated"),
            optimizer,
            run: run.expect("validated"),
            outputs: outputs.expect("validated"),
        })
    }

    fn model(&mut self, raw: Option<RawModel>) -> Option<ModelParams> {
        let Some(raw) = raw else {
            self.missing("[model]");
            return None;
        };
        let n = self.require(raw.n, "model.n");
        let m = self.require(raw.m, "model.m");
        let tau = self.require(raw.tau, "model.tau");
        let q_sq = self.require(raw.q_sq, "model.q_sq");
        let r_sq = self.require(raw.r_sq, "model.r_sq");
        let params = ModelParams {
            n: n?,
            m: m?,
            tau: tau?,
            q_sq: q_sq?,
            r_sq: r_sq?,
        };
        if let Err(e) = params.validate() {
            self.bad("model", e);
            return None;
        }
        Some(params)
    }

    fn vector(&mut self, raw: Option<RawVector>, field: &str, dim: Option<usize>) -> Option<VectorSpec> {
        let Some(raw) = raw else {
            self.missing(field);
            return None;
        };
        let given = [
            raw.constant.is_some(),
            raw.values.is_some(),
            raw.uniform.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count();
        if given != 1 {
            self.bad(field, "give exactly one of `constant`, `values` or `uniform`");
            return None;
        }
        if raw.seed.is_some() && raw.uniform.is_none() {
            self.bad(&format!("{field}.seed"), "only used with `uniform`");
        }
        if let Some(c) = raw.constant {
            if !c.is_finite() {
                self.bad(field, "constant must be finite");
                return None;
            }
            return Some(VectorSpec::Constant(c));
        }
        if let Some(values) = raw.values {
            if let Some(dim) = dim.filter(|&d| d != values.len()) {
                self.bad(
                    &format!("{field}.values"),
                    format!("has {} entries, expected n·m = {dim}", values.len()),
                );
                return None;
            }
            if values.iter().any(|v| !v.is_finite()) {
                self.bad(&format!("{field}.values"), "entries must be finite");
                return None;
            }
            return Some(VectorSpec::Values(values));
        }
        let [low, high] = raw.uniform.expect("checked above");
        if !(low.is_finite() && high.is_finite() && low < high) {
            self.bad(&format!("{field}.uniform"), "needs finite bounds with low < high");
            return None;
        }
        let seed = self.require(raw.seed, &format!("{field}.seed"))?;
        Some(VectorSpec::Uniform { low, high, seed })
    }

    fn init(&mut self, raw: Option<RawInit>, dims: Option<(usize, usize)>) -> Option<InitConfig> {
        let Some(raw) = raw else {
            self.missing("[init]");
            return None;
        };
        let dim = dims.map(|(n, m)| n * m);
        let x0 = self.vector(raw.x0, "init.x0", dim);
        let x_hat0 = self.vector(raw.x_hat0, "init.x_hat0", dim);
        Some(InitConfig {
            x0: x0?,
            x_hat0: x_hat0?,
        })
    }

    fn covariance(
        &mut self,
        raw: Option<RawCovariance>,
        field: &str,
        dim: Option<usize>,
        allow_projected: bool,
    ) -> Option<CovarianceSpec> {
        let raw = self.require(raw, field)?;
        match raw {
            RawCovariance::Scalar(p) if p.is_finite() && p >= 0.0 => Some(CovarianceSpec::Scaled(p)),
            RawCovariance::Scalar(p) => {
                self.bad(field, format!("scale must be finite and non-negative, got {p}"));
                None
            }
            RawCovariance::Keyword(k) if k == "projected" && allow_projected => {
                Some(CovarianceSpec::Projected)
            }
            RawCovariance::Keyword(k) => {
                let expected = if allow_projected {
                    "a scalar, a matrix or \"projected\""
                } else {
                    "a scalar or a matrix"
                };
                self.bad(field, format!("unknown value '{k}', expected {expected}"));
                None
            }
            RawCovariance::Matrix(rows) => {
                let r = rows.len();
                if rows.iter().any(|row| row.len() != r) {
                    self.bad(field, "matrix must be square");
                    return None;
                }
                if let Some(d) = dim.filter(|&d| d != r) {
                    self.bad(field, format!("matrix is {r}x{r}, expected {d}x{d}"));
                    return None;
                }
                let m = DMatrix::from_row_iterator(r, r, rows.into_iter().flatten());
                if m.iter().any(|v| !v.is_finite()) {
                    self.bad(field, "entries must be finite");
                    return None;
                }
                Some(CovarianceSpec::Explicit(m))
            }
        }
    }

    fn filter(
        &mut self,
        raw: Option<RawFilter>,
        dims: Option<(usize, usize)>,
        base: &Path,
    ) -> Option<FilterConfig> {
        let Some(raw) = raw else {
            self.missing("[filter]");
            return None;
        };
        let algorithms = match self.require(raw.algorithms, "filter.algorithms") {
            Some(list) => {
                let mut out = Vec::new();
                for name in list {
                    match name.as_str() {
                        "ckf" => out.push(Algorithm::Ckf),
                        "ckf-extended" => out.push(Algorithm::CkfExtended),
                        "skf" => out.push(Algorithm::Skf),
                        other => self.bad(
                            "filter.algorithms",
                            format!("unknown algorithm '{other}', expected ckf|ckf-extended|skf"),
                        ),
                    }
                }
                out.sort();
                out.dedup();
                if out.is_empty() {
                    self.bad("filter.algorithms", "list at least one algorithm");
                }
                Some(out)
            }
            None => None,
        };
        let gamma = match self.require(raw.gamma, "filter.gamma").as_deref() {
            Some("zero") => Some(GammaSource::Zero),
            Some("optimize") => Some(GammaSource::Optimize),
            Some("file") => match raw.gamma_file {
                Some(f) => {
                    let path = base.join(f);
                    if !path.exists() {
                        self.bad("filter.gamma_file", format!("{} does not exist", path.display()));
                    }
                    Some(GammaSource::File(path))
                }
                None => {
                    self.missing("filter.gamma_file (required by filter.gamma = \"file\")");
                    None
                }
            },
            Some(other) => {
                self.bad(
                    "filter.gamma",
                    format!("unknown source '{other}', expected zero|file|optimize"),
                );
                None
            }
            None => None,
        };
        let p0 = self.covariance(raw.p0, "filter.p0", dims.map(|(n, m)| n * m), false);
        let p_hat_0 = self.covariance(
            raw.p_hat_0,
            "filter.p_hat_0",
            dims.map(|(n, m)| n * (m - 1)),
            true,
        );
        let reduced_noise_scale = match raw.reduced_noise_scale.as_deref() {
            None | Some("r^2") => Some(InnovationScale::Variance),
            Some("r") => Some(InnovationScale::StdDev),
            Some(other) => {
                self.bad(
                    "filter.reduced_noise_scale",
                    format!("unknown value '{other}', expected r^2 or r"),
                );
                None
            }
        };
        Some(FilterConfig {
            algorithms: algorithms?,
            gamma: gamma?,
            p0: p0?,
            p_hat_0: p_hat_0?,
            reduced_noise_scale: reduced_noise_scale?,
        })
    }

    fn weight(&mut self, value: Option<f64>, field: &str) -> Option<f64> {
        let w = self.require(value, field)?;
        if !(w.is_finite() && w >= 0.0) {
            self.bad(field, format!("must be finite and non-negative, got {w}"));
            return None;
        }
        Some(w)
    }

    fn optimizer(&mut self, raw: RawOptimizer, dims: Option<(usize, usize)>) -> Option<OptimizerConfig> {
        let delta1 = self.weight(raw.delta1, "optimizer.delta1");
        let delta2 = self.weight(raw.delta2, "optimizer.delta2");
        if delta1 == Some(0.0) && delta2 == Some(0.0) {
            self.bad("optimizer", "delta1 and delta2 cannot both be zero");
        }
        let horizon = raw.horizon.unwrap_or(DEFAULT_HORIZON);
        if horizon == 0 {
            self.bad("optimizer.horizon", "must be at least 1");
        }
        let p_hat_0 = self.covariance(
            raw.p_hat_0,
            "optimizer.p_hat_0",
            dims.map(|(n, m)| n * (m - 1)),
            true,
        );
        let initial_error = match raw.initial_error {
            None => Some(InitialErrorSpec::FromInit),
            Some(RawInitialError::Keyword(k)) if k == "from_init" => Some(InitialErrorSpec::FromInit),
            Some(RawInitialError::Keyword(k)) => {
                self.bad(
                    "optimizer.initial_error",
                    format!("unknown value '{k}', expected \"from_init\" or a table"),
                );
                None
            }
            Some(RawInitialError::Structured(s)) => self.structured_error(s, dims),
        };
        let steps = match raw.steps.as_deref() {
            None | Some("unit") => Some(StepRule::Unit),
            Some("adaptive") => Some(StepRule::Adaptive),
            Some(other) => {
                self.bad(
                    "optimizer.steps",
                    format!("unknown rule '{other}', expected unit|adaptive"),
                );
                None
            }
        };
        let probe_seed = self.require(raw.probe_seed, "optimizer.probe_seed");
        Some(OptimizerConfig {
            delta1: delta1?,
            delta2: delta2?,
            horizon,
            p_hat_0: p_hat_0?,
            initial_error: initial_error?,
            steps: steps?,
            probe_seed: probe_seed?,
        })
    }

    fn structured_error(
        &mut self,
        raw: RawStructuredError,
        dims: Option<(usize, usize)>,
    ) -> Option<InitialErrorSpec> {
        let mu_hat = self.require(raw.mu_hat, "optimizer.initial_error.mu_hat");
        let q_hat = self.require(raw.q_hat, "optimizer.initial_error.q_hat");
        let p = self.require(raw.p, "optimizer.initial_error.p");
        let (mu_hat, q_hat, p) = (mu_hat?, q_hat?, p?);
        let n = mu_hat.len();
        if let Some((dn, _)) = dims.filter(|&(dn, _)| dn != n) {
            self.bad(
                "optimizer.initial_error.mu_hat",
                format!("has {n} entries, expected n = {dn}"),
            );
            return None;
        }
        if q_hat.len() != n || q_hat.iter().any(|r| r.len() != n) {
            self.bad("optimizer.initial_error.q_hat", format!("must be {n}x{n}"));
            return None;
        }
        if !(p.is_finite() && p >= 0.0) {
            self.bad("optimizer.initial_error.p", "must be finite and non-negative");
            return None;
        }
        Some(InitialErrorSpec::Structured {
            mu_hat,
            q_hat: DMatrix::from_row_iterator(n, n, q_hat.into_iter().flatten()),
            p,
        })
    }

    fn run(&mut self, raw: Option<RawRun>) -> Option<RunConfig> {
        let Some(raw) = raw else {
            self.missing("[run]");
            return None;
        };
        let seed = self.require(raw.seed, "run.seed");
        let horizon = raw.horizon.unwrap_or(DEFAULT_HORIZON);
        if horizon == 0 {
            self.bad("run.horizon", "must be at least 1");
        }
        let paths = raw.paths.unwrap_or(DEFAULT_PATHS);
        if paths == 0 {
            self.bad("run.paths", "must be at least 1");
        }
        Some(RunConfig {
            horizon,
            paths,
            seed: seed?,
        })
    }

    fn outputs(&mut self, raw: RawOutputs) -> Option<OutputConfig> {
        let level = raw.confidence_level.unwrap_or(DEFAULT_LEVEL);
        if !(level > 0.0 && level < 1.0) {
            self.bad(
                "outputs.confidence_level",
                format!("must lie in (0, 1), got {level}"),
            );
        }
        let detrend = match raw.adev_detrend.as_deref().unwrap_or("none").parse::<Detrend>() {
            Ok(d) => Some(d),
            Err(e) => {
                self.bad("outputs.adev_detrend", e);
                None
            }
        };
        if let Some(ms) = &raw.adev_multiples {
            if ms.is_empty() || ms.contains(&0) {
                self.bad("outputs.adev_multiples", "needs positive multiples");
            }
        }
        Some(OutputConfig {
            dir: raw.dir.unwrap_or_else(|| PathBuf::from("out")),
            traces: raw.traces.unwrap_or(true),
            filters: raw.filters.unwrap_or(true),
            moments: raw.moments.unwrap_or(true),
            adev: raw.adev.unwrap_or(true),
            confidence_level: level,
            adev_detrend: detrend?,
            adev_multiples: raw.adev_multiples,
            equivalence_horizon: raw.equivalence_horizon.unwrap_or(DEFAULT_EQUIVALENCE_HORIZON),
        })
    }
}
