//! File I/O and run bookkeeping for the `kqt` command-line tool.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use kqt_ewma::{ErrorClass, Histogram, KqtError, ThresholdTable};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("parse error at row {row}, column {column}: '{value}' is not a number")]
    Parse {
        row: usize,
        column: usize,
        value: String,
    },

    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },

    #[error("row {row} has {got} columns, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        got: usize,
    },

    #[error("data has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error(transparent)]
    Core(#[from] KqtError),
}

impl CliError {
    /// 2 usage, 3 data, 4 numeric or calibration failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.class() == ErrorClass::Numeric => 4,
            _ => 3,
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Reads comma-separated rows of floats. A first row containing any
/// non-numeric cell is taken as a header and skipped.
pub fn ingest_csv(path: &Path, expected_dim: Option<usize>) -> Result<kqt_ewma::Dataset> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    read_csv(file, expected_dim).map_err(|e| match e {
        CliError::Csv { source, .. } => CliError::Csv {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_csv<R: Read>(reader: R, expected_dim: Option<usize>) -> Result<kqt_ewma::Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut dim: Option<usize> = None;
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| CliError::Csv {
            path: PathBuf::new(),
            source,
        })?;
        let row = i + 1;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        if i == 0 && rec.iter().any(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        let d = *dim.get_or_insert(rec.len());
        if rec.len() != d {
            return Err(CliError::Ragged {
                row,
                expected: d,
                got: rec.len(),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| CliError::Parse {
                row,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(CliError::NonFinite { row, column: j + 1 });
            }
            values.push(v);
        }
    }
    let Some(d) = dim else {
        return Err(CliError::Core(KqtError::TooFewPoints { needed: 1, got: 0 }));
    };
    if let Some(e) = expected_dim {
        if e != d {
            return Err(CliError::Dimension {
                expected: e,
                got: d,
            });
        }
    }
    Ok(kqt_ewma::Dataset::new(d, values)?)
}

/// Writes one sample per row, floats in shortest round-trip form.
pub fn write_csv(path: &Path, data: &kqt_ewma::Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    for row in data.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|source| CliError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn save_model(path: &Path, h: &Histogram) -> Result<()> {
    write_text(path, &h.to_json()?)
}

pub fn load_model(path: &Path) -> Result<Histogram> {
    Ok(Histogram::from_json(&read_text(path)?)?)
}

pub fn save_table(path: &Path, t: &ThresholdTable) -> Result<()> {
    write_text(path, &t.to_json()?)
}

pub fn load_table(path: &Path) -> Result<ThresholdTable> {
    Ok(ThresholdTable::from_json(&read_text(path)?)?)
}

/// `<path>.<suffix>` next to an output file.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Serialize)]
pub struct ArtifactVersions {
    pub tool: &'static str,
    pub model: u32,
    pub thresholds: u32,
}

impl Default for ArtifactVersions {
    fn default() -> Self {
        ArtifactVersions {
            tool: env!("CARGO_PKG_VERSION"),
            model: kqt_ewma::histogram::MODEL_VERSION,
            thresholds: kqt_ewma::calibration::TABLE_VERSION,
        }
    }
}

/// Everything needed to rerun a subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub versions: ArtifactVersions,
}

impl RunManifest {
    pub fn new(subcommand: &str, config: serde_json::Value, seed: Option<u64>) -> Self {
        RunManifest {
            subcommand: subcommand.into(),
            config,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: ArtifactVersions::default(),
        }
    }

    /// Writes `<output>.manifest.json` for the first output.
    pub fn write_next_to(&self, output: &Path) -> Result<PathBuf> {
        let path = sibling(output, "manifest.json");
        let mut s = serde_json::to_string_pretty(self).map_err(KqtError::from)?;
        s.push('\n');
        write_text(&path, &s)?;
        Ok(path)
    }
}

/// Parses `uniform` or a comma-separated probability list.
pub fn parse_probs(text: &str, k: usize) -> Result<Vec<f64>> {
    if text.eq_ignore_ascii_case("uniform") {
        return Ok(kqt_ewma::histogram::uniform_probs(k));
    }
    let pi = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad probability '{s}'")))
        })
        .collect::<Result<Vec<_>>>()?;
    if pi.len() != k {
        return Err(CliError::Usage(format!(
            "--pi lists {} probabilities but --k is {k}",
            pi.len()
        )));
    }
    Ok(pi)
}
