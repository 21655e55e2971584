//! On-disk formats. Every record file is JSON-lines; reports are canonical
//! JSON (sorted keys, six-decimal floats) so identical inputs give identical
//! bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{
    validate_dataset, DatasetSchema, Detection, GtAnnotation, PairRecord, Vocabulary,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Unlabeled,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Unlabeled, Split::Test];
}

/// Vocabulary, ground truth, pair records and their split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    pub vocabulary: Vocabulary,
    pub schema: DatasetSchema,
    pub gt: Vec<GtAnnotation>,
    pub records: Vec<PairRecord>,
    /// Parallel to `records`.
    pub splits: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitLine {
    pub pair_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureLine {
    pub pair_id: String,
    pub stream: String,
    pub vec: Vec<f64>,
}

/// Frozen stream output for one pair, the input to calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub pair_id: String,
    pub stream: String,
    pub s: Vec<f64>,
    pub e: Vec<f64>,
    pub det_h: f64,
    pub det_o: f64,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelLine {
    pub pair_id: String,
    pub labels: Vec<f64>,
}

impl DatasetBundle {
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.records.len() {
            return Err(Error::Validation(format!(
                "{} split tags for {} records",
                self.splits.len(),
                self.records.len()
            )));
        }
        for (r, s) in self.records.iter().zip(&self.splits) {
            match (s, &r.verb_labels) {
                (Split::Unlabeled, Some(_)) => {
                    return Err(Error::Validation(format!(
                        "unlabeled pair {} carries verb labels",
                        r.pair_id
                    )))
                }
                (Split::Train | Split::Val, None) => {
                    return Err(Error::Validation(format!(
                        "labeled-split pair {} has no verb labels",
                        r.pair_id
                    )))
                }
                _ => {}
            }
        }
        validate_dataset(&self.records, &self.gt, &self.vocabulary, &self.schema).into_result()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == split).then_some(i))
            .collect()
    }

    /// Writes `vocab.json`, `schema.json`, `pairs.jsonl`, `gt.jsonl`,
    /// `splits.jsonl` and one `features_<stream>.jsonl` per stream.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("vocab.json"), &self.vocabulary)?;
        write_json(&dir.join("schema.json"), &self.schema)?;
        let bare: Vec<PairRecord> = self
            .records
            .iter()
            .map(|r| PairRecord {
                features: BTreeMap::new(),
                ..r.clone()
            })
            .collect();
        write_jsonl(&dir.join("pairs.jsonl"), &bare)?;
        write_jsonl(&dir.join("gt.jsonl"), &self.gt)?;
        let splits: Vec<SplitLine> = self
            .records
            .iter()
            .zip(&self.splits)
            .map(|(r, &split)| SplitLine {
                pair_id: r.pair_id.clone(),
                split,
            })
            .collect();
        write_jsonl(&dir.join("splits.jsonl"), &splits)?;
        for stream in self.schema.feature_dims.keys() {
            let lines: Vec<FeatureLine> = self
                .records
                .iter()
                .filter_map(|r| {
                    r.features.get(stream).map(|v| FeatureLine {
                        pair_id: r.pair_id.clone(),
                        stream: stream.clone(),
                        vec: v.clone(),
                    })
                })
                .collect();
            write_jsonl(&dir.join(format!("features_{stream}.jsonl")), &lines)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let vocabulary: Vocabulary = read_json(&dir.join("vocab.json"))?;
        let schema: DatasetSchema = read_json(&dir.join("schema.json"))?;
        let mut records: Vec<PairRecord> = read_jsonl(&dir.join("pairs.jsonl"))?;
        let gt = parse_gt(&dir.join("gt.jsonl"), &vocabulary)?;
        let split_lines: Vec<SplitLine> = read_jsonl(&dir.join("splits.jsonl"))?;
        let by_id: BTreeMap<&str, usize> = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.pair_id.as_str(), i))
            .collect();
        let mut splits = vec![None; records.len()];
        for line in &split_lines {
            let i = *by_id.get(line.pair_id.as_str()).ok_or_else(|| {
                Error::Validation(format!("split for unknown pair `{}`", line.pair_id))
            })?;
            splits[i] = Some(line.split);
        }
        let splits = splits
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.ok_or_else(|| {
                    Error::Validation(format!("pair `{}` has no split tag", records[i].pair_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut loaded = Vec::new();
        for (stream, &dim) in &schema.feature_dims {
            let feats = parse_features(&dir.join(format!("features_{stream}.jsonl")), dim)?;
            loaded.push((stream.clone(), feats));
        }
        for r in &mut records {
            for (stream, feats) in &loaded {
                if let Some(v) = feats.get(&r.pair_id) {
                    r.features.insert(stream.clone(), v.clone());
                }
            }
        }
        let bundle = Self {
            vocabulary,
            schema,
            gt,
            records,
            splits,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io(path, e))
}

/// Reads one JSON value per non-blank line, reporting 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::Validation(format!("serialize: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Validation(format!("serialize: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn line_error(path: &Path, line: usize, message: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    }
}

/// One detection per line, validated against `vocab`, file order kept.
pub fn parse_detections(path: &Path, vocab: &Vocabulary) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection =
            serde_json::from_str(&line).map_err(|e| line_error(path, i + 1, e.to_string()))?;
        if !(d.score.is_finite() && d.score > 0.0) {
            return Err(line_error(path, i + 1, format!("score {} must be finite and > 0", d.score)));
        }
        if !vocab.contains(d.composition) {
            return Err(line_error(
                path,
                i + 1,
                format!("unknown composition {}", d.composition),
            ));
        }
        out.push(d);
    }
    Ok(out)
}

pub fn parse_gt(path: &Path, vocab: &Vocabulary) -> Result<Vec<GtAnnotation>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let g: GtAnnotation =
            serde_json::from_str(&line).map_err(|e| line_error(path, i + 1, e.to_string()))?;
        if !vocab.contains(g.composition) {
            return Err(line_error(
                path,
                i + 1,
                format!("unknown composition {}", g.composition),
            ));
        }
        out.push(g);
    }
    Ok(out)
}

/// Feature vectors keyed by pair id. Every vector must have `expected_dim`
/// finite entries and each pair id may appear once.
pub fn parse_features(path: &Path, expected_dim: usize) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut out = BTreeMap::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: FeatureLine =
            serde_json::from_str(&line).map_err(|e| line_error(path, i + 1, e.to_string()))?;
        if f.vec.len() != expected_dim {
            return Err(line_error(
                path,
                i + 1,
                format!(
                    "pair `{}`: dimension {} != expected {expected_dim}",
                    f.pair_id,
                    f.vec.len()
                ),
            ));
        }
        if let Some(j) = f.vec.iter().position(|v| !v.is_finite()) {
            return Err(line_error(
                path,
                i + 1,
                format!("pair `{}`: non-finite entry at {j}", f.pair_id),
            ));
        }
        if out.insert(f.pair_id.clone(), f.vec).is_some() {
            return Err(line_error(path, i + 1, format!("duplicate pair `{}`", f.pair_id)));
        }
    }
    Ok(out)
}

/// Serializes `value` with sorted object keys and every non-integer number
/// printed with six decimals.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value).map_err(|e| Error::Validation(format!("serialize: {e}")))?;
    let mut out = String::new();
    write_canonical(&v, 0, &mut out);
    out.push('\n');
    Ok(out)
}

fn write_canonical(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize, out: &mut String| out.extend(std::iter::repeat_n(' ', n * 2));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                out.push_str(&format_float(n.as_f64().unwrap_or(f64::NAN)));
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            // Scalar arrays stay on one line.
            if items.iter().all(|i| !i.is_array() && !i.is_object()) {
                out.push('[');
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    write_canonical(item, indent, out);
                }
                out.push(']');
                return;
            }
            out.push_str("[\n");
            for (k, item) in items.iter().enumerate() {
                pad(indent + 1, out);
                write_canonical(item, indent + 1, out);
                if k + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(indent, out);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (k, key) in keys.iter().enumerate() {
                pad(indent + 1, out);
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_canonical(&map[*key], indent + 1, out);
                if k + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(indent, out);
            out.push('}');
        }
    }
}

fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return "null".into();
    }
    let s = format!("{x:.6}");
    if s == "-0.000000" {
        "0.000000".into()
    } else {
        s
    }
}

/// Writes `metrics` as canonical JSON.
pub fn emit_report<T: Serialize>(metrics: &T, path: &Path) -> Result<()> {
    let text = canonical_json(metrics)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
