use std::collections::HashSet;
use std::path::Path;

use thiserror::Error;

use crate::domain::Problem;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: invalid field `{field}`")]
    Schema { line: usize, field: String },
    #[error("dataset is empty")]
    Empty,
}

impl DatasetError {
    fn schema(line: usize, field: impl Into<String>) -> Self {
        Self::Schema { line, field: field.into() }
    }
}

/// Reads a JSONL dataset, one problem per non-blank line.
pub fn load_dataset(path: &Path) -> Result<Vec<Problem>, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Io { path: path.display().to_string(), source })?;
    parse_dataset(&text)
}

pub fn parse_dataset(text: &str) -> Result<Vec<Problem>, DatasetError> {
    let mut seen = HashSet::new();
    let mut problems = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let problem: Problem = serde_json::from_str(line).map_err(|e| DatasetError::schema(line_no, field_of(&e)))?;
        problem.validate().map_err(|field| DatasetError::schema(line_no, field))?;
        if !seen.insert(problem.id.clone()) {
            return Err(DatasetError::schema(line_no, "duplicate_id"));
        }
        problems.push(problem);
    }
    if problems.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(problems)
}

/// Best-effort field name from a serde error message.
fn field_of(err: &serde_json::Error) -> String {
    let msg = err.to_string();
    for marker in ["missing field `", "unknown variant `", "unknown field `"] {
        if let Some(rest) = msg.split_once(marker).map(|(_, r)| r) {
            if marker == "unknown variant `" {
                return "answer_kind".to_string();
            }
            if let Some((name, _)) = rest.split_once('`') {
                return name.to_string();
            }
        }
    }
    "json".to_string()
}
