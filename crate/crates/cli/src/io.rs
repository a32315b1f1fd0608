//! Prediction, label and report files.
//!
//! Predictions are JSON Lines: a header object followed by one object per
//! row. Labels are single-column CSV with an optional `label` header.
//! Reports are pretty-printed JSON, written atomically.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ppc_uq_core::{
    ClassPredictions, EnsemblePredictions, Gaussian, Labels, PpcReport, RegressionPredictions,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TOOL_NAME: &str = "ppc-uq";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Model {
        path: PathBuf,
        source: ppc_uq_core::Error,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

pub type IoResult<T> = std::result::Result<T, IoError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// What the numbers in a prediction file mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Probs,
    Logits,
    Gaussian,
}

impl ValueKind {
    fn as_str(self) -> &'static str {
        match self {
            ValueKind::Probs => "probs",
            ValueKind::Logits => "logits",
            ValueKind::Gaussian => "gaussian",
        }
    }
}

/// First line of a prediction file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionHeader {
    pub rows: usize,
    pub models: usize,
    /// Present for classification only.
    pub classes: Option<usize>,
    pub values: ValueKind,
}

impl PredictionHeader {
    pub fn kind(&self) -> &'static str {
        if self.classes.is_some() {
            "classification"
        } else {
            "regression"
        }
    }

    fn to_json(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("kind".into(), self.kind().into());
        obj.insert("rows".into(), self.rows.into());
        obj.insert("models".into(), self.models.into());
        if let Some(c) = self.classes {
            obj.insert("classes".into(), c.into());
        }
        obj.insert("values".into(), self.values.as_str().into());
        Value::Object(obj)
    }

    fn from_json(value: &Value, path: &Path) -> IoResult<Self> {
        let err = |msg: String| parse_err(path, 1, format!("header: {msg}"));
        let obj = value
            .as_object()
            .ok_or_else(|| err("expected a JSON object".into()))?;
        let count = |field: &str| -> IoResult<usize> {
            let v = obj
                .get(field)
                .ok_or_else(|| err(format!("missing field '{field}'")))?;
            v.as_u64()
                .filter(|n| *n > 0)
                .map(|n| n as usize)
                .ok_or_else(|| err(format!("field '{field}' must be a positive integer, got {v}")))
        };
        let text = |field: &str| -> IoResult<&str> {
            let v = obj
                .get(field)
                .ok_or_else(|| err(format!("missing field '{field}'")))?;
            v.as_str()
                .ok_or_else(|| err(format!("field '{field}' must be a string, got {v}")))
        };
        for key in obj.keys() {
            if !matches!(key.as_str(), "kind" | "rows" | "models" | "classes" | "values") {
                return Err(err(format!("unknown field '{key}'")));
            }
        }
        let rows = count("rows")?;
        let models = count("models")?;
        let values = text("values")?;
        match text("kind")? {
            "classification" => {
                let classes = count("classes")?;
                let values = match values {
                    "probs" => ValueKind::Probs,
                    "logits" => ValueKind::Logits,
                    other => {
                        return Err(err(format!(
                            "field 'values' must be 'probs' or 'logits' for classification, got '{other}'"
                        )))
                    }
                };
                Ok(Self {
                    rows,
                    models,
                    classes: Some(classes),
                    values,
                })
            }
            "regression" => {
                if obj.contains_key("classes") {
                    return Err(err("field 'classes' is only valid for classification".into()));
                }
                if values != "gaussian" {
                    return Err(err(format!(
                        "field 'values' must be 'gaussian' for regression, got '{values}'"
                    )));
                }
                Ok(Self {
                    rows,
                    models,
                    classes: None,
                    values: ValueKind::Gaussian,
                })
            }
            other => Err(err(format!(
                "field 'kind' must be 'classification' or 'regression', got '{other}'"
            ))),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassRow {
    preds: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RegressionRow {
    preds: Vec<Gaussian>,
}

/// Reads a prediction file. Logit files keep their logits.
pub fn read_predictions(path: &Path) -> IoResult<(PredictionHeader, EnsemblePredictions)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(io_err(path))?,
        None => return Err(parse_err(path, 1, "empty file, expected a header line")),
    };
    let header_value: Value = serde_json::from_str(&header_line)
        .map_err(|e| parse_err(path, 1, format!("header is not valid JSON: {e}")))?;
    let header = PredictionHeader::from_json(&header_value, path)?;
    let (n, m) = (header.rows, header.models);

    let mut body = Vec::with_capacity(n);
    for (idx, line) in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        body.push((idx + 1, line));
    }
    if body.len() != n {
        return Err(parse_err(
            path,
            body.last().map_or(1, |(l, _)| *l),
            format!("header declares {n} rows but the body has {}", body.len()),
        ));
    }

    let preds = match header.classes {
        Some(c) => {
            let mut flat = Vec::with_capacity(n * m * c);
            for (line_no, line) in &body {
                let row: ClassRow = serde_json::from_str(line)
                    .map_err(|e| parse_err(path, *line_no, format!("field 'preds': {e}")))?;
                if row.preds.len() != m {
                    return Err(parse_err(
                        path,
                        *line_no,
                        format!("field 'preds' has {} models, header declares {m}", row.preds.len()),
                    ));
                }
                for (j, model) in row.preds.iter().enumerate() {
                    if model.len() != c {
                        return Err(parse_err(
                            path,
                            *line_no,
                            format!(
                                "field 'preds' model {j} has {} classes, header declares {c}",
                                model.len()
                            ),
                        ));
                    }
                    flat.extend_from_slice(model);
                }
            }
            let built = match header.values {
                ValueKind::Logits => ClassPredictions::from_logits(n, m, c, flat),
                _ => ClassPredictions::from_probs(n, m, c, flat),
            };
            EnsemblePredictions::Classification(built.map_err(|e| model_err(path, &body, e))?)
        }
        None => {
            let mut params = Vec::with_capacity(n * m);
            for (line_no, line) in &body {
                let row: RegressionRow = serde_json::from_str(line)
                    .map_err(|e| parse_err(path, *line_no, format!("field 'preds': {e}")))?;
                if row.preds.len() != m {
                    return Err(parse_err(
                        path,
                        *line_no,
                        format!("field 'preds' has {} models, header declares {m}", row.preds.len()),
                    ));
                }
                params.extend(row.preds);
            }
            EnsemblePredictions::Regression(
                RegressionPredictions::new(n, m, params).map_err(|e| model_err(path, &body, e))?,
            )
        }
    };
    Ok((header, preds))
}

/// Maps a validation error that names a row back to its line number.
fn model_err(path: &Path, body: &[(usize, String)], source: ppc_uq_core::Error) -> IoError {
    let text = source.to_string();
    let row = text
        .split("row ")
        .nth(1)
        .and_then(|rest| rest.split(|c: char| !c.is_ascii_digit()).next())
        .and_then(|digits| digits.parse::<usize>().ok());
    match row.and_then(|r| body.get(r)) {
        Some((line, _)) => parse_err(path, *line, text),
        None => IoError::Model {
            path: path.to_path_buf(),
            source,
        },
    }
}

/// Header describing `preds` as it would be written.
pub fn header_for(preds: &EnsemblePredictions) -> PredictionHeader {
    match preds {
        EnsemblePredictions::Classification(p) => PredictionHeader {
            rows: p.rows(),
            models: p.models(),
            classes: Some(p.classes()),
            values: if p.logits().is_some() {
                ValueKind::Logits
            } else {
                ValueKind::Probs
            },
        },
        EnsemblePredictions::Regression(p) => PredictionHeader {
            rows: p.rows(),
            models: p.models(),
            classes: None,
            values: ValueKind::Gaussian,
        },
    }
}

/// Writes predictions; logits are written when present, else probabilities.
pub fn write_predictions(path: &Path, preds: &EnsemblePredictions) -> IoResult<()> {
    let header = header_for(preds);
    atomic_write(path, |out| {
        serde_json::to_writer(&mut *out, &header.to_json())?;
        out.write_all(b"\n").map_err(io_err(path))?;
        match preds {
            EnsemblePredictions::Classification(p) => {
                let (m, c) = (p.models(), p.classes());
                let source = p.logits().unwrap_or(p.flat_probs());
                for row in source.chunks_exact(m * c) {
                    let nested: Vec<&[f64]> = row.chunks_exact(c).collect();
                    serde_json::to_writer(&mut *out, &serde_json::json!({ "preds": nested }))?;
                    out.write_all(b"\n").map_err(io_err(path))?;
                }
            }
            EnsemblePredictions::Regression(p) => {
                for i in 0..p.rows() {
                    serde_json::to_writer(&mut *out, &serde_json::json!({ "preds": p.row(i) }))?;
                    out.write_all(b"\n").map_err(io_err(path))?;
                }
            }
        }
        Ok(())
    })
}

/// Reads labels; `kind` is "classification" or "regression".
pub fn read_labels(path: &Path, kind: &str) -> IoResult<Labels> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut classes = Vec::new();
    let mut targets = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| parse_err(path, line, e.to_string()))?;
        if record.len() != 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected one column, found {}", record.len()),
            ));
        }
        let field = &record[0];
        if idx == 0 && field == "label" {
            continue;
        }
        if kind == "classification" {
            let v = field.parse::<usize>().map_err(|_| {
                parse_err(path, line, format!("label '{field}' is not a class index"))
            })?;
            classes.push(v);
        } else {
            let v = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| parse_err(path, line, format!("label '{field}' is not a finite number")))?;
            targets.push(v);
        }
    }
    Ok(if kind == "classification" {
        Labels::Classes(classes)
    } else {
        Labels::Targets(targets)
    })
}

pub fn write_labels(path: &Path, labels: &Labels) -> IoResult<()> {
    atomic_write(path, |out| {
        let mut writer = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| parse_err(path, 0, e.to_string());
        writer.write_record(["label"]).map_err(csv_err)?;
        match labels {
            Labels::Classes(v) => {
                for y in v {
                    writer.write_record([y.to_string()]).map_err(csv_err)?;
                }
            }
            Labels::Targets(v) => {
                for y in v {
                    writer.write_record([y.to_string()]).map_err(csv_err)?;
                }
            }
        }
        writer.flush().map_err(io_err(path))
    })
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> IoResult<String> {
    let mut file = File::open(path).map_err(io_err(path))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let read = file.read(&mut buf).map_err(io_err(path))?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigests {
    pub predictions: String,
    pub labels: String,
}

/// A check report as written to disk. No timestamp, so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub tool: String,
    pub version: String,
    #[serde(flatten)]
    pub report: PpcReport,
    pub inputs: InputDigests,
}

impl ReportFile {
    pub fn new(report: PpcReport, inputs: InputDigests) -> Self {
        Self {
            tool: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
            report,
            inputs,
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> IoResult<()> {
    atomic_write(path, |out| {
        serde_json::to_writer_pretty(&mut *out, value)?;
        out.write_all(b"\n").map_err(io_err(path))
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> IoResult<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| {
        let line = e.line();
        parse_err(path, line, e.to_string())
    })
}

/// Writes through a temporary file in the target directory, then renames.
pub fn atomic_write<F>(path: &Path, fill: F) -> IoResult<()>
where
    F: FnOnce(&mut BufWriter<&mut File>) -> IoResult<()>,
{
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    {
        let mut out = BufWriter::new(tmp.as_file_mut());
        fill(&mut out)?;
        out.flush().map_err(io_err(path))?;
    }
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| IoError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_errors_name_the_field() {
        let p = Path::new("x.jsonl");
        let cases = [
            (r#"{"kind":"classification","rows":2,"models":1,"values":"probs"}"#, "'classes'"),
            (r#"{"kind":"regression","rows":"2","models":1,"values":"gaussian"}"#, "'rows'"),
            (r#"{"kind":"other","rows":2,"models":1,"values":"gaussian"}"#, "'kind'"),
            (r#"{"kind":"regression","rows":2,"models":1,"values":"probs"}"#, "'values'"),
            (r#"{"kind":"regression","rows":2,"models":1,"values":"gaussian","x":1}"#, "'x'"),
        ];
        for (text, field) in cases {
            let v: Value = serde_json::from_str(text).unwrap();
            let msg = PredictionHeader::from_json(&v, p).unwrap_err().to_string();
            assert!(msg.contains(field), "{msg}");
            assert!(msg.starts_with("x.jsonl:1:"), "{msg}");
        }
    }

    #[test]
    fn header_json_round_trip() {
        let h = PredictionHeader {
            rows: 3,
            models: 2,
            classes: Some(4),
            values: ValueKind::Logits,
        };
        assert_eq!(PredictionHeader::from_json(&h.to_json(), Path::new("h")).unwrap(), h);
    }
}
