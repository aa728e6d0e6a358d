//! CSV and JSON artifacts exchanged between pipeline stages.
//!
//! Floating-point fields are written in scientific notation with 17 significant digits,
//! which round-trips every `f64` exactly, so parsing a file and writing it again reproduces
//! it byte for byte. Integer columns (`k`, `n_samples`) are written as plain integers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use skf_core::metrics::AdevCurve;
use skf_core::moments::TaMoments;
use skf_core::simulator::SimTrace;

use crate::error::{CliError, CliResult};

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> CliResult<csv::Writer<BufWriter<File>>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::artifact(path, format!("{other:?}")),
    }
}

fn write_rows(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = create(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Parsed CSV: header plus raw string rows.
struct RawTable {
    header: Vec<String>,
    rows: Vec<csv::StringRecord>,
}

fn read_raw(path: &Path, producer: &'static str) -> CliResult<RawTable> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        });
    }
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let rows = r
        .records()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| csv_err(path, e))?;
    Ok(RawTable { header, rows })
}

fn parse_f64(path: &Path, field: &str, line: usize) -> CliResult<f64> {
    field
        .parse()
        .map_err(|_| CliError::artifact(path, format!("row {line}: '{field}' is not a number")))
}

fn parse_index(path: &Path, field: &str, line: usize) -> CliResult<usize> {
    field
        .parse()
        .map_err(|_| CliError::artifact(path, format!("row {line}: '{field}' is not an index")))
}

fn expect_header(path: &Path, found: &[String], expected: &[String]) -> CliResult<()> {
    if found != expected {
        return Err(CliError::artifact(
            path,
            format!(
                "header is '{}', expected '{}'",
                found.join(","),
                expected.join(",")
            ),
        ));
    }
    Ok(())
}

/// Checks that column 0 counts 0, 1, 2, ….
fn check_index(path: &Path, row: &csv::StringRecord, line: usize) -> CliResult<()> {
    let k = parse_index(path, &row[0], line)?;
    if k != line {
        return Err(CliError::artifact(path, format!("row {line} has k = {k}")));
    }
    Ok(())
}

/// Level-major state labels `{prefix}_i_j` for level `i` and clock `j`, both 1-based.
pub fn state_labels(prefix: &str, n: usize, m: usize) -> Vec<String> {
    (1..=n)
        .flat_map(|i| (1..=m).map(move |j| format!("{prefix}_{i}_{j}")))
        .collect()
}

/// Recovers `(n, m)` from level-major state labels.
fn state_shape(path: &Path, labels: &[String], prefix: &str) -> CliResult<(usize, usize)> {
    let last = labels
        .last()
        .ok_or_else(|| CliError::artifact(path, "no state columns"))?;
    let mut parts = last
        .strip_prefix(prefix)
        .and_then(|s| s.strip_prefix('_'))
        .map(|s| s.split('_'))
        .ok_or_else(|| CliError::artifact(path, format!("unexpected column '{last}'")))?;
    let mut next = || {
        parts
            .next()
            .and_then(|p| p.parse::<usize>().ok())
            .ok_or_else(|| CliError::artifact(path, format!("unexpected column '{last}'")))
    };
    let (n, m) = (next()?, next()?);
    if labels != state_labels(prefix, n, m).as_slice() {
        return Err(CliError::artifact(
            path,
            "state columns are not in level-major order",
        ));
    }
    Ok((n, m))
}

/// True states, measurements and ensemble time deviation of one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceData {
    pub n: usize,
    pub m: usize,
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub z: Vec<f64>,
}

impl TraceData {
    pub fn from_trace(trace: &SimTrace, n: usize, m: usize) -> Self {
        TraceData {
            n,
            m,
            x: trace.x.clone(),
            y: trace.y.clone(),
            z: trace.z.clone(),
        }
    }

    /// `seed` is path metadata only; the CSV does not store it.
    pub fn into_trace(self, seed: u64) -> SimTrace {
        SimTrace {
            horizon: self.y.len(),
            x: self.x,
            y: self.y,
            z: self.z,
            seed,
        }
    }
}

/// Header `k, x_1_1..x_n_m, y_1..y_{m-1}, z`; the last row (`k = K`) has empty `y` fields.
pub fn write_trace(path: &Path, data: &TraceData) -> CliResult<()> {
    let mut header = vec!["k".to_owned()];
    header.extend(state_labels("x", data.n, data.m));
    header.extend((1..data.m).map(|j| format!("y_{j}")));
    header.push("z".to_owned());
    let rows = data.x.iter().zip(&data.z).enumerate().map(|(k, (x, z))| {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|&v| fmt_f64(v)));
        match data.y.get(k) {
            Some(y) => row.extend(y.iter().map(|&v| fmt_f64(v))),
            None => row.extend((1..data.m).map(|_| String::new())),
        }
        row.push(fmt_f64(*z));
        row
    });
    write_rows(path, &header, rows)
}

pub fn read_trace(path: &Path) -> CliResult<TraceData> {
    let raw = read_raw(path, "simulate")?;
    if raw.header.len() < 4 || raw.header[0] != "k" || raw.header.last().map(String::as_str) != Some("z") {
        return Err(CliError::artifact(path, "expected header 'k,x_…,y_…,z'"));
    }
    let first_y = raw
        .header
        .iter()
        .position(|h| h.starts_with("y_"))
        .ok_or_else(|| CliError::artifact(path, "no measurement columns"))?;
    let (n, m) = state_shape(path, &raw.header[1..first_y], "x")?;
    let mut expected = vec!["k".to_owned()];
    expected.extend(state_labels("x", n, m));
    expected.extend((1..m).map(|j| format!("y_{j}")));
    expected.push("z".to_owned());
    expect_header(path, &raw.header, &expected)?;

    let nm = n * m;
    let mut data = TraceData {
        n,
        m,
        x: Vec::with_capacity(raw.rows.len()),
        y: Vec::with_capacity(raw.rows.len()),
        z: Vec::with_capacity(raw.rows.len()),
    };
    let last = raw.rows.len().saturating_sub(1);
    for (line, row) in raw.rows.iter().enumerate() {
        check_index(path, row, line)?;
        let x = (1..=nm)
            .map(|c| parse_f64(path, &row[c], line))
            .collect::<CliResult<Vec<_>>>()?;
        data.x.push(DVector::from_vec(x));
        let y_fields: Vec<&str> = (nm + 1..nm + m).map(|c| &row[c]).collect();
        if line == last {
            if y_fields.iter().any(|f| !f.is_empty()) {
                return Err(CliError::artifact(path, "final row must not carry a measurement"));
            }
        } else {
            let y = y_fields
                .iter()
                .map(|f| parse_f64(path, f, line))
                .collect::<CliResult<Vec<_>>>()?;
            data.y.push(DVector::from_vec(y));
        }
        data.z.push(parse_f64(path, &row[nm + m], line)?);
    }
    if data.y.is_empty() {
        return Err(CliError::artifact(path, "trace needs at least one measurement"));
    }
    Ok(data)
}

/// Predicted states and atomic time of one filter run.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTable {
    pub n: usize,
    pub m: usize,
    pub x_hat: Vec<DVector<f64>>,
    pub ta: Vec<f64>,
}

impl FilterTable {
    /// `ẑ[k] = D x̂[k]`, the mean of the level-1 entries.
    pub fn predicted_ensemble_time(&self) -> Vec<f64> {
        self.x_hat
            .iter()
            .map(|x| x.rows(0, self.m).sum() / self.m as f64)
            .collect()
    }
}

/// Header `k, xhat_1_1..xhat_n_m, TA`.
pub fn write_filter(path: &Path, table: &FilterTable) -> CliResult<()> {
    let mut header = vec!["k".to_owned()];
    header.extend(state_labels("xhat", table.n, table.m));
    header.push("TA".to_owned());
    let rows = table.x_hat.iter().zip(&table.ta).enumerate().map(|(k, (x, ta))| {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(|&v| fmt_f64(v)));
        row.push(fmt_f64(*ta));
        row
    });
    write_rows(path, &header, rows)
}

pub fn read_filter(path: &Path) -> CliResult<FilterTable> {
    let raw = read_raw(path, "filter")?;
    if raw.header.len() < 3 || raw.header[0] != "k" || raw.header.last().map(String::as_str) != Some("TA") {
        return Err(CliError::artifact(path, "expected header 'k,xhat_…,TA'"));
    }
    let (n, m) = state_shape(path, &raw.header[1..raw.header.len() - 1], "xhat")?;
    let nm = n * m;
    let mut table = FilterTable {
        n,
        m,
        x_hat: Vec::with_capacity(raw.rows.len()),
        ta: Vec::with_capacity(raw.rows.len()),
    };
    for (line, row) in raw.rows.iter().enumerate() {
        check_index(path, row, line)?;
        let x = (1..=nm)
            .map(|c| parse_f64(path, &row[c], line))
            .collect::<CliResult<Vec<_>>>()?;
        table.x_hat.push(DVector::from_vec(x));
        table.ta.push(parse_f64(path, &row[nm + 1], line)?);
    }
    Ok(table)
}

/// Analytic atomic-time moments with a two-sided confidence band.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentsTable {
    /// Confidence level in percent as it appears in the header, e.g. `98`.
    pub level_label: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub band: Vec<(f64, f64)>,
}

impl MomentsTable {
    pub fn new(moments: &TaMoments, level: f64, band: Vec<(f64, f64)>) -> Self {
        MomentsTable {
            level_label: level_label(level),
            mean: moments.mean.clone(),
            var: moments.var.clone(),
            band,
        }
    }
}

/// `0.98` → `"98"`, `0.995` → `"99.5"`.
pub fn level_label(level: f64) -> String {
    let pct = format!("{:.6}", level * 100.0);
    pct.trim_end_matches('0').trim_end_matches('.').to_owned()
}

/// Header `k, mean, var, lo98, hi98` (the suffix follows the confidence level).
pub fn write_moments(path: &Path, table: &MomentsTable) -> CliResult<()> {
    let header = moments_header(&table.level_label);
    let rows = (0..table.mean.len()).map(|k| {
        vec![
            k.to_string(),
            fmt_f64(table.mean[k]),
            fmt_f64(table.var[k]),
            fmt_f64(table.band[k].0),
            fmt_f64(table.band[k].1),
        ]
    });
    write_rows(path, &header, rows)
}

fn moments_header(label: &str) -> Vec<String> {
    vec![
        "k".into(),
        "mean".into(),
        "var".into(),
        format!("lo{label}"),
        format!("hi{label}"),
    ]
}

pub fn read_moments(path: &Path) -> CliResult<MomentsTable> {
    let raw = read_raw(path, "moments")?;
    let label = raw
        .header
        .get(3)
        .and_then(|h| h.strip_prefix("lo"))
        .ok_or_else(|| CliError::artifact(path, "expected header 'k,mean,var,loNN,hiNN'"))?
        .to_owned();
    expect_header(path, &raw.header, &moments_header(&label))?;
    let mut table = MomentsTable {
        level_label: label,
        mean: Vec::new(),
        var: Vec::new(),
        band: Vec::new(),
    };
    for (line, row) in raw.rows.iter().enumerate() {
        check_index(path, row, line)?;
        table.mean.push(parse_f64(path, &row[1], line)?);
        table.var.push(parse_f64(path, &row[2], line)?);
        table
            .band
            .push((parse_f64(path, &row[3], line)?, parse_f64(path, &row[4], line)?));
    }
    Ok(table)
}

/// Header `tau, sigma, n_samples`.
pub fn write_adev(path: &Path, curve: &AdevCurve) -> CliResult<()> {
    let header = ["tau", "sigma", "n_samples"].map(String::from);
    let rows = (0..curve.taus.len()).map(|i| {
        vec![
            fmt_f64(curve.taus[i]),
            fmt_f64(curve.sigmas[i]),
            curve.n_samples[i].to_string(),
        ]
    });
    write_rows(path, &header, rows)
}

pub fn read_adev(path: &Path) -> CliResult<AdevCurve> {
    let raw = read_raw(path, "adev")?;
    expect_header(
        path,
        &raw.header,
        &["tau", "sigma", "n_samples"].map(String::from),
    )?;
    let mut curve = AdevCurve {
        taus: Vec::new(),
        sigmas: Vec::new(),
        n_samples: Vec::new(),
    };
    for (line, row) in raw.rows.iter().enumerate() {
        curve.taus.push(parse_f64(path, &row[0], line)?);
        curve.sigmas.push(parse_f64(path, &row[1], line)?);
        curve.n_samples.push(parse_index(path, &row[2], line)?);
    }
    Ok(curve)
}

/// Side-by-side columns keyed by a shared first column; missing entries are left empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub key: String,
    pub keys: Vec<f64>,
    pub columns: Vec<(String, Vec<Option<f64>>)>,
    /// Write the key column as an integer (`k`) rather than a float (`tau`).
    pub integer_key: bool,
}

pub fn write_comparison(path: &Path, table: &ComparisonTable) -> CliResult<()> {
    let mut header = vec![table.key.clone()];
    header.extend(table.columns.iter().map(|(name, _)| name.clone()));
    let rows = table.keys.iter().enumerate().map(|(i, &key)| {
        let mut row = vec![if table.integer_key {
            (key as usize).to_string()
        } else {
            fmt_f64(key)
        }];
        row.extend(
            table
                .columns
                .iter()
                .map(|(_, col)| col.get(i).copied().flatten().map(fmt_f64).unwrap_or_default()),
        );
        row
    });
    write_rows(path, &header, rows)
}

/// Transformation matrix as stored on disk: row-major data with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaFile {
    /// `[rows, cols]`.
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl GammaFile {
    pub fn from_matrix(gamma: &DMatrix<f64>) -> Self {
        GammaFile {
            shape: [gamma.nrows(), gamma.ncols()],
            data: gamma.transpose().as_slice().to_vec(),
        }
    }

    pub fn to_matrix(&self) -> Option<DMatrix<f64>> {
        let [r, c] = self.shape;
        (self.data.len() == r * c).then(|| DMatrix::from_row_slice(r, c, &self.data))
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::artifact(path, e.to_string()))?;
    text.push('\n');
    let mut file = File::create(path).map_err(|e| CliError::io(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

pub fn write_gamma(path: &Path, gamma: &DMatrix<f64>) -> CliResult<()> {
    write_json(path, &GammaFile::from_matrix(gamma))
}

pub fn read_gamma(path: &Path) -> CliResult<DMatrix<f64>> {
    if !path.exists() {
        return Err(CliError::MissingArtifact {
            path: path.to_path_buf(),
            producer: "optimize",
        });
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let file: GammaFile = serde_json::from_str(&text).map_err(|e| CliError::artifact(path, e.to_string()))?;
    file.to_matrix().ok_or_else(|| {
        CliError::artifact(
            path,
            format!(
                "shape {:?} does not match {} entries",
                file.shape,
                file.data.len()
            ),
        )
    })
}
