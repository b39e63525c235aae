//! Relevance records: parsing, validation and judgment extraction.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::Document;

/// Grades above this are relevant; below are non-relevant. Equal is excluded
/// from training pairs.
pub const NEUTRAL_GRADE: u8 = 3;

/// One annotated (query, title) row. Grades run from 1 (bad) to 5 (perfect).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub qid: String,
    pub query: String,
    pub title_id: String,
    pub title: String,
    pub grade: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub central: Option<u8>,
}

impl RelevanceRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(1..=5).contains(&self.grade) {
            return Err(format!("grade out of range: {}", self.grade));
        }
        if self.query.trim().is_empty() {
            return Err("empty query".into());
        }
        if self.title.trim().is_empty() {
            return Err("empty title".into());
        }
        if self.qid.is_empty() || self.title_id.is_empty() {
            return Err("empty qid or title_id".into());
        }
        if let Some(c) = self.central {
            if c > 1 {
                return Err(format!("central must be 0 or 1, got {c}"));
            }
        }
        Ok(())
    }

    pub fn is_positive(&self) -> bool {
        self.grade > NEUTRAL_GRADE
    }

    pub fn is_negative(&self) -> bool {
        self.grade < NEUTRAL_GRADE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordFormat {
    Jsonl,
    Tsv,
}

impl FromStr for RecordFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "jsonl" | "json" => Ok(RecordFormat::Jsonl),
            "tsv" => Ok(RecordFormat::Tsv),
            other => Err(Error::InvalidConfig(format!("unknown record format {other:?}"))),
        }
    }
}

impl RecordFormat {
    /// Guesses from a file extension; anything but `.tsv` is JSONL.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => RecordFormat::Tsv,
            _ => RecordFormat::Jsonl,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParseIssue {
    /// 1-based.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ParseIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParseOutcome {
    pub records: Vec<RelevanceRecord>,
    pub issues: Vec<ParseIssue>,
}

fn parse_tsv_line(line: &str) -> std::result::Result<RelevanceRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 5 && fields.len() != 6 {
        return Err(format!("expected 5 or 6 tab-separated fields, found {}", fields.len()));
    }
    let grade: u8 = fields[4]
        .trim()
        .parse()
        .map_err(|_| format!("grade is not an integer: {:?}", fields[4]))?;
    let central = match fields.get(5).map(|s| s.trim()) {
        None | Some("") => None,
        Some(s) => Some(s.parse::<u8>().map_err(|_| format!("central is not an integer: {s:?}"))?),
    };
    Ok(RelevanceRecord {
        qid: fields[0].to_owned(),
        query: fields[1].to_owned(),
        title_id: fields[2].to_owned(),
        title: fields[3].to_owned(),
        grade,
        central,
    })
}

/// Parses every line, collecting malformed ones as issues. Blank lines and a
/// leading TSV header (`qid\t...`) are ignored.
pub fn parse_records<R: BufRead>(reader: R, format: RecordFormat) -> Result<ParseOutcome> {
    let mut out = ParseOutcome::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) if e.kind() == std::io::ErrorKind::InvalidData => {
                out.issues.push(ParseIssue {
                    line: line_no,
                    message: "line is not valid UTF-8".into(),
                });
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        if format == RecordFormat::Tsv && line_no == 1 && line.starts_with("qid\t") {
            continue;
        }
        let parsed = match format {
            RecordFormat::Jsonl => serde_json::from_str::<RelevanceRecord>(line).map_err(|e| e.to_string()),
            RecordFormat::Tsv => parse_tsv_line(line),
        };
        match parsed.and_then(|r| r.validate().map(|_| r)) {
            Ok(r) => out.records.push(r),
            Err(message) => out.issues.push(ParseIssue { line: line_no, message }),
        }
    }
    if out.records.is_empty() {
        return Err(Error::NoValidRecords {
            issues: out.issues.len(),
        });
    }
    Ok(out)
}

pub fn write_records<W: Write>(mut w: W, records: &[RelevanceRecord], format: RecordFormat) -> Result<()> {
    for r in records {
        match format {
            RecordFormat::Jsonl => {
                serde_json::to_writer(&mut w, r)?;
                writeln!(w)?;
            }
            RecordFormat::Tsv => {
                let central = r.central.map(|c| format!("\t{c}")).unwrap_or_default();
                writeln!(w, "{}\t{}\t{}\t{}\t{}{}", r.qid, r.query, r.title_id, r.title, r.grade, central)?;
            }
        }
    }
    Ok(())
}

/// Relevance judgments for one query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct QueryJudgment {
    pub query: String,
    /// Title ids with grade above neutral.
    pub relevant: BTreeSet<String>,
    /// Every judged title id with its grade.
    pub grades: BTreeMap<String, u8>,
}

/// Judged queries keyed by qid, ordered for reproducible aggregation.
pub type Judgments = BTreeMap<String, QueryJudgment>;

#[derive(Clone, Debug)]
pub struct JudgmentSplit {
    pub judgments: Judgments,
    /// Distinct titles in first-seen order.
    pub corpus: Vec<Document>,
    /// Queries dropped for lacking any relevant title.
    pub excluded: Vec<String>,
}

pub fn split_judgments(records: &[RelevanceRecord]) -> JudgmentSplit {
    let mut judgments: Judgments = BTreeMap::new();
    let mut corpus = Vec::new();
    let mut seen: HashMap<&str, ()> = HashMap::new();
    for r in records {
        if seen.insert(r.title_id.as_str(), ()).is_none() {
            corpus.push(Document::new(r.title_id.clone(), r.title.clone()));
        }
        let j = judgments.entry(r.qid.clone()).or_insert_with(|| QueryJudgment {
            query: r.query.clone(),
            relevant: BTreeSet::new(),
            grades: BTreeMap::new(),
        });
        j.grades.insert(r.title_id.clone(), r.grade);
        if r.is_positive() {
            j.relevant.insert(r.title_id.clone());
        }
    }
    let excluded: Vec<String> = judgments
        .iter()
        .filter(|(_, j)| j.relevant.is_empty())
        .map(|(q, _)| q.clone())
        .collect();
    for q in &excluded {
        judgments.remove(q);
    }
    JudgmentSplit {
        judgments,
        corpus,
        excluded,
    }
}
