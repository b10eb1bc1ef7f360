//! Corpus and dataset record types with JSON-lines IO.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "PA")]
    Pa,
    #[serde(rename = "AP")]
    Ap,
    #[serde(rename = "LATERAL")]
    Lateral,
}

impl View {
    pub fn is_frontal(self) -> bool {
        matches!(self, View::Pa | View::Ap)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub patient_id: String,
    pub study_id: String,
    /// Days since the patient's first visit.
    pub timestamp: i64,
    pub view: View,
    /// Image path relative to the corpus root.
    pub image: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub study_id: String,
    pub findings: Option<String>,
    pub impression: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Difference,
    Presence,
    Abnormality,
    View,
    Location,
    Level,
    Type,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::Difference,
        Category::Presence,
        Category::Abnormality,
        Category::View,
        Category::Location,
        Category::Level,
        Category::Type,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerForm {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaRecord {
    pub qa_id: String,
    pub study_id: String,
    pub past_study_id: Option<String>,
    pub category: Category,
    pub question: String,
    pub answer: String,
    pub answer_form: AnswerForm,
    pub split: Split,
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        if self.category == Category::Difference && self.past_study_id.is_none() {
            return Err(Error::Data(format!("difference question {} lacks a past study", self.qa_id)));
        }
        if self.answer_form == AnswerForm::Closed && !matches!(self.answer.as_str(), "yes" | "no") {
            return Err(Error::Data(format!("closed answer of {} is not yes/no", self.qa_id)));
        }
        Ok(())
    }
}

/// Where a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Findings,
    Impression,
    Vqa,
}

/// One (past image, current image, instruction, target) example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LongitudinalSample {
    pub id: String,
    pub stage: u8,
    pub split: Split,
    pub kind: SampleKind,
    pub patient_id: String,
    pub past_study_id: Option<String>,
    pub study_id: String,
    pub past_image: Option<String>,
    pub current_image: String,
    pub instruction: String,
    pub target: String,
    pub category: Option<Category>,
    pub answer_form: Option<AnswerForm>,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
