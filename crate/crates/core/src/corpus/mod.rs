//! Dialogue/section-header/section-text triplets: loading, validation,
//! preprocessing, fold assignment and a synthetic generator.

mod folds;
mod synthetic;
mod taxonomy;

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::RESERVED_TOKENS;

pub use folds::{make_folds, FoldAssignment, FoldManifest, FoldManifestEntry, FoldSplit};
pub use synthetic::{generate_synthetic_corpus, SIGNATURES};
pub use taxonomy::{section_description, SectionHeader};

/// Text form of the separator between dialogue and section description.
pub const SEP_MARKER: &str = "<SEP>";

/// One labeled example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub id: String,
    pub dialogue: String,
    #[serde(rename = "section_header")]
    pub header: SectionHeader,
    pub section_text: String,
}

impl Triplet {
    pub fn validate(&self) -> Result<()> {
        if self.dialogue.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "example {}: empty dialogue",
                self.id
            )));
        }
        if self.section_text.trim().is_empty() {
            return Err(Error::InvalidArgument(format!(
                "example {}: empty section_text",
                self.id
            )));
        }
        Ok(())
    }
}

/// Model-ready text fields derived from a [`Triplet`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessedExample {
    pub id: String,
    pub classifier_input: String,
    pub summarizer_input: String,
    pub target_summary: String,
    pub header: SectionHeader,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Jsonl,
    Csv,
}

impl DataFormat {
    /// Guesses the format from a file extension, defaulting to JSONL.
    pub fn from_path(path: &Path) -> DataFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => DataFormat::Csv,
            _ => DataFormat::Jsonl,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    id: Option<String>,
    dialogue: Option<String>,
    section_header: Option<String>,
    section_text: Option<String>,
}

/// Loads and validates triplets. Unknown header codes are collected across the
/// whole file and reported together.
pub fn load_dataset(path: &Path, format: DataFormat) -> Result<Vec<Triplet>> {
    let raw = match format {
        DataFormat::Jsonl => read_jsonl_records(path)?,
        DataFormat::Csv => read_csv_records(path)?,
    };
    if raw.is_empty() {
        log::warn!("{}: no records found", path.display());
        return Ok(Vec::new());
    }

    let mut unknown: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(raw.len());
    for (index, (line, rec)) in raw.into_iter().enumerate() {
        let field = |v: Option<String>, name: &str| {
            v.ok_or_else(|| Error::Record {
                line,
                message: format!("missing field `{name}`"),
            })
        };
        let dialogue = field(rec.dialogue, "dialogue")?;
        let code = field(rec.section_header, "section_header")?;
        let section_text = field(rec.section_text, "section_text")?;
        let Some(header) = SectionHeader::from_code(&code) else {
            if !unknown.contains(&code) {
                unknown.push(code);
            }
            continue;
        };
        if dialogue.trim().is_empty() || section_text.trim().is_empty() {
            return Err(Error::Record {
                line,
                message: "dialogue and section_text must be non-empty".into(),
            });
        }
        out.push(Triplet {
            id: rec.id.unwrap_or_else(|| index.to_string()),
            dialogue,
            header,
            section_text,
        });
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownHeader { codes: unknown });
    }
    Ok(out)
}

fn read_jsonl_records(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push((line_no, rec));
    }
    Ok(out)
}

fn read_csv_records(path: &Path) -> Result<Vec<(usize, RawRecord)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_reader(file);
    let mut out = Vec::new();
    for rec in reader.deserialize::<RawRecord>() {
        let rec = rec.map_err(|e| Error::Record {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        // header row is line 1
        out.push((out.len() + 2, rec));
    }
    Ok(out)
}

/// Writes triplets as JSONL using the loader's field names.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut buf = String::new();
    for row in rows {
        buf.push_str(&serde_json::to_string(row)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Replaces every newline variant by a single space and blanks out reserved
/// token markers so the only SEP in a summarizer input is the one we insert.
fn clean_text(text: &str) -> String {
    let mut s = text.replace("\r\n", " ").replace(['\n', '\r'], " ");
    for marker in RESERVED_TOKENS {
        if s.contains(marker) {
            s = s.replace(marker, " ");
        }
    }
    s
}

pub fn preprocess(t: &Triplet) -> ProcessedExample {
    let dialogue = clean_text(&t.dialogue);
    let target_summary = clean_text(&t.section_text);
    let summarizer_input = format!(
        "{} {} {}",
        dialogue,
        SEP_MARKER,
        section_description(t.header)
    );
    ProcessedExample {
        id: t.id.clone(),
        classifier_input: dialogue,
        summarizer_input,
        target_summary,
        header: t.header,
    }
}
