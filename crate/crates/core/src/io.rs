//! File formats: prediction records (JSON lines or CSV), truth records,
//! estimate reports and corrected predictions.
//!
//! A prediction file holds one record per line,
//! `{"f": [..K reals], "h": real, "y": label?, "x": [features]?}`, or a CSV
//! table with header `f1,…,fK,h[,y][,x1,…,xD]`. The format is chosen from
//! the file extension: `.csv` selects CSV, anything else JSON lines.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::correction::CorrectedPosterior;
use crate::prob::{PredictionRecord, ProbabilityVector, SourceLabelModel, TargetLabelModel};
use crate::simulate::LabeledSample;
use crate::{Error, Result};

/// A prediction record with optional raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct DataRow {
    pub record: PredictionRecord,
    pub features: Option<Vec<f64>>,
}

impl From<&LabeledSample> for DataRow {
    fn from(s: &LabeledSample) -> Self {
        Self {
            record: s.record.clone(),
            features: Some(s.features.clone()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRow {
    f: Vec<f64>,
    h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<Vec<f64>>,
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn row_from_parts(
    f: Vec<f64>,
    h: f64,
    y: Option<usize>,
    x: Option<Vec<f64>>,
    line: usize,
    path: &Path,
) -> Result<DataRow> {
    let what = || format!("record at {}:{line}", path.display());
    let f = ProbabilityVector::new(f).map_err(|e| Error::format(what(), e))?;
    let record = PredictionRecord::new(f, h, y).map_err(|e| Error::format(what(), e))?;
    Ok(DataRow {
        record,
        features: x,
    })
}

/// Reads a prediction file; all records must share the same `K`.
pub fn read_records(path: &Path) -> Result<Vec<DataRow>> {
    let text = read_text(path)?;
    let rows = if is_csv(path) {
        parse_csv(&text, path)?
    } else {
        parse_jsonl(&text, path)?
    };
    if rows.is_empty() {
        return Err(Error::format(path.display().to_string(), "no records"));
    }
    let k = rows[0].record.k();
    if let Some(i) = rows.iter().position(|r| r.record.k() != k) {
        return Err(Error::format(
            path.display().to_string(),
            format!(
                "record {} has {} classes, expected {k}",
                i + 1,
                rows[i].record.k()
            ),
        ));
    }
    Ok(rows)
}

fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<DataRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("record at {}:{}", path.display(), i + 1), e))?;
        rows.push(row_from_parts(row.f, row.h, row.y, row.x, i + 1, path)?);
    }
    Ok(rows)
}

fn parse_csv(text: &str, path: &Path) -> Result<Vec<DataRow>> {
    let bad = |m: String| Error::format(path.display().to_string(), m);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| bad(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let k = header
        .iter()
        .take_while(|name| name.starts_with('f'))
        .count();
    let expected_f = (1..=k).all(|j| header[j - 1] == format!("f{j}"));
    if k == 0 || !expected_f || header.get(k).map(String::as_str) != Some("h") {
        return Err(bad("header must start with f1,...,fK,h".to_string()));
    }
    let mut pos = k + 1;
    let has_y = header.get(pos).map(String::as_str) == Some("y");
    if has_y {
        pos += 1;
    }
    let n_x = header.len() - pos;
    if (1..=n_x).any(|d| header[pos + d - 1] != format!("x{d}")) {
        return Err(bad("trailing columns must be x1,...,xD".to_string()));
    }

    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let num = |col: usize| -> Result<f64> {
            rec.get(col)
                .ok_or_else(|| bad(format!("line {line}: missing column {}", header[col])))?
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("line {line}, column {}: {e}", header[col])))
        };
        let f = (0..k).map(num).collect::<Result<Vec<_>>>()?;
        let h = num(k)?;
        let y = if has_y {
            let cell = rec.get(k + 1).unwrap_or("").trim();
            if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse::<usize>()
                        .map_err(|e| bad(format!("line {line}, column y: {e}")))?,
                )
            }
        } else {
            None
        };
        let x = if n_x > 0 {
            Some((pos..pos + n_x).map(num).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        rows.push(row_from_parts(f, h, y, x, line, path)?);
    }
    Ok(rows)
}

/// Serialises rows as JSON lines.
pub fn records_to_jsonl(rows: &[DataRow]) -> String {
    let mut out = String::new();
    for r in rows {
        let row = JsonRow {
            f: r.record.f.as_slice().to_vec(),
            h: r.record.h,
            y: r.record.label,
            x: r.features.clone(),
        };
        out.push_str(&serde_json::to_string(&row).expect("records serialise"));
        out.push('\n');
    }
    out
}

/// Serialises rows as CSV. The `y` and `x` columns are written when any
/// row carries them.
pub fn records_to_csv(rows: &[DataRow]) -> String {
    let k = rows.first().map_or(0, |r| r.record.k());
    let has_y = rows.iter().any(|r| r.record.label.is_some());
    let n_x = rows
        .iter()
        .filter_map(|r| r.features.as_ref())
        .map(Vec::len)
        .max()
        .unwrap_or(0);
    let mut header: Vec<String> = (1..=k).map(|j| format!("f{j}")).collect();
    header.push("h".to_string());
    if has_y {
        header.push("y".to_string());
    }
    header.extend((1..=n_x).map(|d| format!("x{d}")));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory CSV write");
    for r in rows {
        let mut cells: Vec<String> = r
            .record
            .f
            .as_slice()
            .iter()
            .map(|v| v.to_string())
            .collect();
        cells.push(r.record.h.to_string());
        if has_y {
            cells.push(r.record.label.map(|y| y.to_string()).unwrap_or_default());
        }
        if let Some(x) = &r.features {
            cells.extend(x.iter().map(|v| v.to_string()));
        }
        w.write_record(&cells).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
}

pub fn write_records(path: &Path, rows: &[DataRow]) -> Result<()> {
    let text = if is_csv(path) {
        records_to_csv(rows)
    } else {
        records_to_jsonl(rows)
    };
    write_text(path, &text)
}

/// Ground truth of a simulated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub c: ProbabilityVector,
    pub rho_s: f64,
    pub pi: ProbabilityVector,
    pub rho_t: f64,
    #[serde(rename = "K")]
    pub k: usize,
}

impl Truth {
    pub fn new(source: &SourceLabelModel, target: &TargetLabelModel) -> Self {
        Self {
            c: source.c().clone(),
            rho_s: source.rho_s(),
            pi: target.pi.clone(),
            rho_t: target.rho_t,
            k: source.k(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c.len() != self.k || self.pi.len() != self.k {
            return Err(Error::format("truth file", "c and pi must have K entries"));
        }
        if !(0.0..=1.0).contains(&self.rho_t) || !(0.0..=1.0).contains(&self.rho_s) {
            return Err(Error::format(
                "truth file",
                "rho_s and rho_t must lie in [0, 1]",
            ));
        }
        Ok(())
    }
}

/// Pretty-printed JSON followed by a newline.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serialises to JSON");
    s.push('\n');
    s
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &to_json_pretty(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| Error::format(format!("{what} {}", path.display()), e))
}

pub fn read_truth(path: &Path) -> Result<Truth> {
    let truth: Truth = read_json(path, "truth file")?;
    truth.validate()?;
    Ok(truth)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e| Error::format(format!("{what} {}", path.display()), e))
}

/// One line of a corrected-predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectedRow {
    /// Corrected posterior over the `K+1` classes.
    pub g: Vec<f64>,
    /// 1-based argmax of `g`.
    pub label: usize,
    /// Ground-truth label carried over from the target file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<usize>,
}

impl CorrectedRow {
    pub fn new(posterior: &CorrectedPosterior, y: Option<usize>) -> Self {
        Self {
            g: posterior.probs.as_slice().to_vec(),
            label: posterior.classify(),
            y,
        }
    }
}

pub fn corrected_to_jsonl(rows: &[CorrectedRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("corrected rows serialise"));
        out.push('\n');
    }
    out
}

pub fn read_corrected(path: &Path) -> Result<Vec<CorrectedRow>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: CorrectedRow = serde_json::from_str(line).map_err(|e| {
            Error::format(format!("corrected row at {}:{}", path.display(), i + 1), e)
        })?;
        if row.label == 0 || row.label > row.g.len() {
            return Err(Error::format(
                format!("corrected row at {}:{}", path.display(), i + 1),
                "label outside 1..=K+1",
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(
            path.display().to_string(),
            "no corrected rows",
        ));
    }
    Ok(rows)
}
