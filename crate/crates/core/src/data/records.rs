//! JSON-lines record files for annotations, proposals and detections, and
//! per-video score tensors. Lines starting with `#` are comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::data::tensor_io::{read_tensor, write_tensor};
use crate::error::{CdcError, Result};
use crate::eval::GroundTruthInstance;
use crate::localize::{Detection, ProposalSegment};
use crate::ops::softmax::ScoreMatrix;

pub const FRAME_CONVENTION: &str = "# frame indices are 0-based and inclusive";

fn read_jsonl<T, F>(path: &Path, validate: F) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    F: Fn(&T) -> std::result::Result<(), String>,
{
    let text = std::fs::read_to_string(path).map_err(|e| CdcError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let located = |message: String| CdcError::Record {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let rec: T = serde_json::from_str(line).map_err(|e| located(e.to_string()))?;
        validate(&rec).map_err(located)?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut s = String::new();
    writeln!(s, "{FRAME_CONVENTION}").expect("write to string");
    for r in records {
        writeln!(
            s,
            "{}",
            serde_json::to_string(r).expect("record serializes")
        )
        .expect("write to string");
    }
    std::fs::write(path, s).map_err(|e| CdcError::io(path, e))
}

fn check_interval(start: usize, end: usize) -> std::result::Result<(), String> {
    if start > end {
        return Err(format!("start {start} after end {end}"));
    }
    Ok(())
}

fn check_label(label: usize, k: Option<usize>) -> std::result::Result<(), String> {
    match k {
        Some(k) if label >= k => Err(format!("label {label} out of range for {k} action classes")),
        _ => Ok(()),
    }
}

/// Annotation records `{"video", "start", "end", "label"}`. With `k`, labels
/// must be action classes `< k`.
pub fn load_annotations(
    path: impl AsRef<Path>,
    k: Option<usize>,
) -> Result<Vec<GroundTruthInstance>> {
    read_jsonl(path.as_ref(), |g: &GroundTruthInstance| {
        check_interval(g.start, g.end)?;
        check_label(g.label, k)
    })
}

pub fn save_annotations(path: impl AsRef<Path>, gt: &[GroundTruthInstance]) -> Result<()> {
    write_jsonl(path.as_ref(), gt)
}

pub fn load_proposals(path: impl AsRef<Path>) -> Result<Vec<ProposalSegment>> {
    read_jsonl(path.as_ref(), |p: &ProposalSegment| {
        check_interval(p.start, p.end)
    })
}

pub fn save_proposals(path: impl AsRef<Path>, proposals: &[ProposalSegment]) -> Result<()> {
    write_jsonl(path.as_ref(), proposals)
}

pub fn load_detections(path: impl AsRef<Path>, k: Option<usize>) -> Result<Vec<Detection>> {
    read_jsonl(path.as_ref(), |d: &Detection| {
        check_interval(d.start, d.end)?;
        check_label(d.label, k)?;
        if !d.score.is_finite() {
            return Err(format!("non-finite score {}", d.score));
        }
        Ok(())
    })
}

pub fn save_detections(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    write_jsonl(path.as_ref(), detections)
}

/// Scores of one video as a `(K+1, L)` tensor at `<dir>/<video>.cdct`.
pub fn save_scores(dir: impl AsRef<Path>, video: &str, scores: &ScoreMatrix) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| CdcError::io(dir, e))?;
    write_tensor(dir.join(format!("{video}.cdct")), &scores.to_tensor())
}

/// Every `*.cdct` score file in `dir`, keyed by video id.
pub fn load_scores(dir: impl AsRef<Path>) -> Result<BTreeMap<String, ScoreMatrix>> {
    let dir = dir.as_ref();
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| CdcError::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| CdcError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("cdct") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CdcError::BadFormat(format!("unusable file name {}", path.display())))?
            .to_string();
        out.insert(id, ScoreMatrix::from_tensor(&read_tensor(&path)?)?);
    }
    Ok(out)
}
