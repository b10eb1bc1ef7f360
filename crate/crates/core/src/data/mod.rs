//! Corpus generation and dataset construction.

pub mod build;
pub mod records;
pub mod synth;

pub use records::{
    read_jsonl, write_jsonl, AnswerForm, Category, LongitudinalSample, QaRecord, ReportRecord,
    SampleKind, Split, StudyRecord, View,
};
