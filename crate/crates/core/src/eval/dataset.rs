//! Dataset ingestion: JSONL and CSV with configurable field mapping.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::judge::JudgeLabel;
use crate::model::Query;

/// Whether the dataset's headline metric improves downward (attack success
/// rates) or upward (safe / defense rates).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    LowerIsBetter,
    HigherIsBetter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Jsonl,
    Csv,
}

impl DatasetFormat {
    /// Picks the format from a file extension; anything that is not `.csv`
    /// reads as JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => DatasetFormat::Csv,
            _ => DatasetFormat::Jsonl,
        }
    }
}

/// Maps record fields onto item fields. `label` is optional and feeds
/// `expected_label` for judge-calibration sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldMap {
    pub id: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl Default for FieldMap {
    fn default() -> Self {
        Self {
            id: "id".into(),
            prompt: "prompt".into(),
            label: None,
        }
    }
}

/// One evaluation item: the query plus dataset-level orientation and an
/// optional gold label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetItem {
    pub query: Query,
    pub orientation: Orientation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_label: Option<JudgeLabel>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field {field:?}")]
    MissingField { line: usize, field: String },
    #[error("line {line}: empty prompt text")]
    EmptyText { line: usize },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset has no items")]
    Empty,
}

/// Loads a dataset in file order. IDs must be unique and prompts non-empty;
/// violations are reported with line numbers (1-based, header-inclusive for
/// CSV).
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    field_map: &FieldMap,
    orientation: Orientation,
) -> Result<Vec<DatasetItem>, DatasetError> {
    let raw = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let records = match format {
        DatasetFormat::Jsonl => jsonl_records(&raw)?,
        DatasetFormat::Csv => csv_records(&raw)?,
    };

    let mut seen = HashSet::new();
    let mut items = Vec::with_capacity(records.len());
    for (line, record) in records {
        let id = take_field(&record, &field_map.id, line)?;
        let text = take_field(&record, &field_map.prompt, line)?;
        if text.trim().is_empty() {
            return Err(DatasetError::EmptyText { line });
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId { line, id });
        }
        let expected_label = match &field_map.label {
            Some(field) => match record.get(field).map(String::as_str) {
                Some("safe") => Some(JudgeLabel::Safe),
                Some("unsafe") => Some(JudgeLabel::Unsafe),
                Some(other) if !other.is_empty() => {
                    return Err(DatasetError::Malformed {
                        line,
                        message: format!("unknown label {other:?}"),
                    })
                }
                _ => None,
            },
            None => None,
        };
        let mut meta: BTreeMap<String, String> = record;
        meta.remove(&field_map.id);
        meta.remove(&field_map.prompt);
        items.push(DatasetItem {
            query: Query { id, text, meta },
            orientation,
            expected_label,
        });
    }
    if items.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok(items)
}

type Record = BTreeMap<String, String>;

fn take_field(record: &Record, field: &str, line: usize) -> Result<String, DatasetError> {
    record
        .get(field)
        .cloned()
        .ok_or_else(|| DatasetError::MissingField {
            line,
            field: field.to_string(),
        })
}

fn jsonl_records(raw: &str) -> Result<Vec<(usize, Record)>, DatasetError> {
    let mut out = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| DatasetError::Malformed {
                line: line_no,
                message: e.to_string(),
            })?;
        let object = value.as_object().ok_or_else(|| DatasetError::Malformed {
            line: line_no,
            message: "record is not a JSON object".into(),
        })?;
        let record = object
            .iter()
            .map(|(k, v)| {
                let text = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                (k.clone(), text)
            })
            .collect();
        out.push((line_no, record));
    }
    Ok(out)
}

fn csv_records(raw: &str) -> Result<Vec<(usize, Record)>, DatasetError> {
    let mut reader = csv::Reader::from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| DatasetError::Malformed {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line_no = i + 2; // line 1 is the header
        let row = row.map_err(|e| DatasetError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = headers
            .iter()
            .zip(row.iter())
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        out.push((line_no, record));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str, ext: &str) -> tempfile::TempPath {
        let mut file = tempfile::Builder::new().suffix(ext).tempfile().unwrap();
        file.write_all(content.as_bytes()).unwrap();
        file.into_temp_path()
    }

    #[test]
    fn three_line_jsonl_loads_in_order() {
        let path = write_temp(
            r#"{"id":"a","prompt":"one"}
{"id":"b","prompt":"two"}
{"id":"c","prompt":"three","category":"privacy"}
"#,
            ".jsonl",
        );
        let items = load_dataset(
            &path,
            DatasetFormat::Jsonl,
            &FieldMap::default(),
            Orientation::HigherIsBetter,
        )
        .unwrap();
        assert_eq!(items.len(), 3);
        assert_eq!(items[0].query.id, "a");
        assert_eq!(items[2].query.meta.get("category").unwrap(), "privacy");
    }

    #[test]
    fn duplicate_ids_are_reported_with_the_id() {
        let path = write_temp(
            "{\"id\":\"a\",\"prompt\":\"one\"}\n{\"id\":\"a\",\"prompt\":\"two\"}\n",
            ".jsonl",
        );
        let err = load_dataset(
            &path,
            DatasetFormat::Jsonl,
            &FieldMap::default(),
            Orientation::HigherIsBetter,
        )
        .unwrap_err();
        match err {
            DatasetError::DuplicateId { line, id } => {
                assert_eq!(line, 2);
                assert_eq!(id, "a");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn csv_field_mapping_reads_the_question_column() {
        let path = write_temp("id,question\nq1,What is safety?\nq2,Another\n", ".csv");
        let map = FieldMap {
            prompt: "question".into(),
            ..FieldMap::default()
        };
        let items = load_dataset(
            &path,
            DatasetFormat::Csv,
            &map,
            Orientation::LowerIsBetter,
        )
        .unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].query.text, "What is safety?");
        assert_eq!(items[0].orientation, Orientation::LowerIsBetter);
    }

    #[test]
    fn missing_fields_and_malformed_lines_report_line_numbers() {
        let path = write_temp("{\"id\":\"a\"}\n", ".jsonl");
        let err = load_dataset(
            &path,
            DatasetFormat::Jsonl,
            &FieldMap::default(),
            Orientation::HigherIsBetter,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::MissingField { line: 1, .. }));

        let path = write_temp("not json\n", ".jsonl");
        let err = load_dataset(
            &path,
            DatasetFormat::Jsonl,
            &FieldMap::default(),
            Orientation::HigherIsBetter,
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Malformed { line: 1, .. }));
    }

    #[test]
    fn gold_labels_flow_into_expected_label() {
        let path = write_temp(
            "{\"id\":\"a\",\"prompt\":\"p\",\"gold\":\"unsafe\"}\n",
            ".jsonl",
        );
        let map = FieldMap {
            label: Some("gold".into()),
            ..FieldMap::default()
        };
        let items = load_dataset(
            &path,
            DatasetFormat::Jsonl,
            &map,
            Orientation::HigherIsBetter,
        )
        .unwrap();
        assert_eq!(items[0].expected_label, Some(JudgeLabel::Unsafe));
    }

    #[test]
    fn format_from_extension() {
        assert_eq!(
            DatasetFormat::from_path(Path::new("x.csv")),
            DatasetFormat::Csv
        );
        assert_eq!(
            DatasetFormat::from_path(Path::new("x.jsonl")),
            DatasetFormat::Jsonl
        );
    }
}
