//! TSV and JSONL dataset formats.
//!
//! TSV lines are `label<TAB>turn_1<TAB>...<TAB>turn_N<TAB>response`. Lines
//! starting with `#` are comments (used for provenance headers). Records are
//! numbered from 1 ignoring comments, headers and blank lines; consecutive
//! records with identical context share the id `<split>:<first record number>`.
//!
//! JSONL lines are `{"id", "turns", "response", "label", "origin"}`. A first
//! line holding a single `"header"` object is skipped.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Conversation, Dataset, Example, Label, Origin, Split, Utterance};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Tsv,
    Jsonl,
}

impl Format {
    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => Format::Jsonl,
            _ => Format::Tsv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Format::Tsv),
            "jsonl" => Ok(Format::Jsonl),
            other => Err(Error::Invalid(format!("unknown format {other:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<String>,
    turns: Vec<String>,
    response: String,
    label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<String>,
}

pub fn load_dataset(path: &Path, format: Format, split: Split) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let result = match format {
        Format::Tsv => parse_tsv(reader, split),
        Format::Jsonl => parse_jsonl(reader, split),
    };
    result.map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

fn make_utterance(text: &str, line: usize) -> Result<Utterance> {
    Utterance::new(text).map_err(|_| Error::Parse {
        line,
        message: "blank utterance".into(),
    })
}

/// Tracks the id of the current run of identical contexts.
struct IdAssigner {
    split: Split,
    last: Option<(Vec<String>, String)>,
}

impl IdAssigner {
    fn new(split: Split) -> Self {
        Self { split, last: None }
    }

    fn assign(&mut self, turns: &[String], record: usize) -> String {
        match &self.last {
            Some((prev, id)) if prev.as_slice() == turns => id.clone(),
            _ => {
                let id = format!("{}:{}", self.split.as_str(), record);
                self.last = Some((turns.to_vec(), id.clone()));
                id
            }
        }
    }
}

pub fn parse_tsv<R: BufRead>(reader: R, split: Split) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut ids = IdAssigner::new(split);
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<tsv>", e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected at least 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let label = match fields[0] {
            "1" => Label::Positive,
            "0" => Label::Negative,
            other => {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("label must be 0 or 1, found {other:?}"),
                })
            }
        };
        let turn_texts: Vec<String> = fields[1..fields.len() - 1]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let turns = turn_texts
            .iter()
            .map(|t| make_utterance(t, lineno))
            .collect::<Result<Vec<_>>>()?;
        let response = make_utterance(fields[fields.len() - 1], lineno)?;
        let id = ids.assign(&turn_texts, examples.len() + 1);
        examples.push(Example {
            context: Conversation::new(id, turns)?,
            response,
            label,
            origin: Origin::for_label(label),
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset::new(split, examples))
}

pub fn parse_jsonl<R: BufRead>(reader: R, split: Split) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut ids = IdAssigner::new(split);
    let mut seen_data = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        if !seen_data {
            seen_data = true;
            if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(&line) {
                if map.len() == 1 && map.contains_key("header") {
                    continue;
                }
            }
        }
        let rec: JsonRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let label = Label::from_int(rec.label).ok_or_else(|| Error::Parse {
            line: lineno,
            message: format!("label must be 0 or 1, found {}", rec.label),
        })?;
        let origin = match rec.origin.as_deref() {
            Some(s) => s.parse().map_err(|_| Error::Parse {
                line: lineno,
                message: format!("unknown origin {s:?}"),
            })?,
            None => Origin::for_label(label),
        };
        if rec.turns.is_empty() {
            return Err(Error::Parse {
                line: lineno,
                message: "context has no turns".into(),
            });
        }
        let turns = rec
            .turns
            .iter()
            .map(|t| make_utterance(t, lineno))
            .collect::<Result<Vec<_>>>()?;
        let id = match rec.id {
            Some(id) => id,
            None => ids.assign(&rec.turns, examples.len() + 1),
        };
        examples.push(Example {
            context: Conversation::new(id, turns)?,
            response: make_utterance(&rec.response, lineno)?,
            label,
            origin,
        });
    }
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset::new(split, examples))
}

pub fn write_dataset(dataset: &Dataset, path: &Path, format: Format) -> Result<()> {
    write_dataset_with_header(dataset, path, format, None)
}

/// Writes a dataset, optionally preceded by a provenance header.
///
/// In TSV the header becomes a single `#` comment line holding compact JSON;
/// in JSONL it is a `{"header": ...}` line. Both are skipped on load.
pub fn write_dataset_with_header(
    dataset: &Dataset,
    path: &Path,
    format: Format,
    header: Option<&serde_json::Value>,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut buf = Vec::new();
    match format {
        Format::Tsv => {
            if let Some(h) = header {
                writeln!(buf, "# {h}").expect("write to Vec");
            }
            write_tsv(dataset, &mut buf)?;
        }
        Format::Jsonl => {
            if let Some(h) = header {
                let line = serde_json::json!({ "header": h });
                writeln!(buf, "{line}").expect("write to Vec");
            }
            write_jsonl(dataset, &mut buf);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&buf).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_tsv(dataset: &Dataset, out: &mut Vec<u8>) -> Result<()> {
    for (i, ex) in dataset.examples.iter().enumerate() {
        let texts = ex
            .context
            .texts()
            .chain(std::iter::once(ex.response.text()));
        let mut line = ex.label.as_int().to_string();
        for t in texts {
            if t.contains('\t') || t.contains('\n') {
                return Err(Error::TabInUtterance { line: i + 1 });
            }
            line.push('\t');
            line.push_str(t);
        }
        line.push('\n');
        out.extend_from_slice(line.as_bytes());
    }
    Ok(())
}

fn write_jsonl(dataset: &Dataset, out: &mut Vec<u8>) {
    for ex in &dataset.examples {
        let rec = JsonRecord {
            id: Some(ex.context.id().to_string()),
            turns: ex.context.texts().map(str::to_string).collect(),
            response: ex.response.text().to_string(),
            label: ex.label.as_int(),
            origin: Some(ex.origin.as_str().to_string()),
        };
        serde_json::to_writer(&mut *out, &rec).expect("serializing plain record");
        out.push(b'\n');
    }
}
