//! Dataset construction: prior-visit pairing, report and question samples,
//! test-image exclusion and report cleaning.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::records::{
    read_jsonl, write_jsonl, Category, LongitudinalSample, QaRecord, ReportRecord, SampleKind, Split,
    StudyRecord,
};
use crate::error::{Error, Result};
use crate::text::{train_bpe, Vocab};

pub const FINDINGS_INSTRUCTION: &str = "what does the image describe?";
pub const IMPRESSION_INSTRUCTION: &str = "what is the summary of the image?";

/// A current study and, when the patient has an earlier one, the study
/// immediately before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VisitPair<'a> {
    pub past: Option<&'a StudyRecord>,
    pub current: &'a StudyRecord,
}

/// Keeps posterior-anterior and anterior-posterior studies.
pub fn frontal_only(studies: &[StudyRecord]) -> Vec<StudyRecord> {
    studies.iter().filter(|s| s.view.is_frontal()).cloned().collect()
}

/// Pairs every study with the patient's preceding study. Studies are ordered
/// by timestamp, ties broken by study id.
pub fn pair_prior_visit(studies: &[StudyRecord]) -> Vec<VisitPair<'_>> {
    let mut by_patient: BTreeMap<&str, Vec<&StudyRecord>> = BTreeMap::new();
    for s in studies {
        by_patient.entry(&s.patient_id).or_default().push(s);
    }
    let mut out = Vec::with_capacity(studies.len());
    for visits in by_patient.values_mut() {
        visits.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then_with(|| a.study_id.cmp(&b.study_id)));
        let mut past = None;
        for &current in visits.iter() {
            out.push(VisitPair { past, current });
            past = Some(current);
        }
    }
    out
}

/// Lowercases, replaces punctuation other than `.` and `,` with spaces and
/// splits periods and commas into their own tokens.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len());
    for c in text.to_lowercase().chars() {
        match c {
            '.' | ',' => {
                spaced.push(' ');
                spaced.push(c);
                spaced.push(' ');
            }
            c if c.is_alphanumeric() => spaced.push(c),
            _ => spaced.push(' '),
        }
    }
    spaced.split_whitespace().map(str::to_string).collect()
}

fn is_punct(t: &str) -> bool {
    t == "." || t == ","
}

/// Report text normalizer that drops words seen fewer than `min_count` times
/// in the fitting corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportCleaner {
    keep: BTreeSet<String>,
}

impl ReportCleaner {
    pub fn fit<S: AsRef<str>>(texts: &[S], min_count: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for tok in normalize_tokens(t.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let keep = counts
            .into_iter()
            .filter(|(t, n)| *n >= min_count && !is_punct(t))
            .map(|(t, _)| t)
            .collect();
        ReportCleaner { keep }
    }

    pub fn clean(&self, text: &str) -> String {
        let mut out = String::new();
        let mut last_punct = true;
        for tok in normalize_tokens(text) {
            if is_punct(&tok) {
                if !last_punct {
                    out.push_str(&tok);
                    last_punct = true;
                } else if tok == "." && out.ends_with(',') {
                    out.pop();
                    out.push('.');
                }
            } else if self.keep.contains(&tok) {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(&tok);
                last_punct = false;
            }
        }
        out
    }
}

fn sample(
    id: String,
    stage: u8,
    kind: SampleKind,
    past: Option<&StudyRecord>,
    current: &StudyRecord,
    instruction: &str,
    target: String,
) -> LongitudinalSample {
    LongitudinalSample {
        id,
        stage,
        split: current.split,
        kind,
        patient_id: current.patient_id.clone(),
        past_study_id: past.map(|p| p.study_id.clone()),
        study_id: current.study_id.clone(),
        past_image: past.map(|p| p.image.clone()),
        current_image: current.image.clone(),
        instruction: instruction.to_string(),
        target,
        category: None,
        answer_form: None,
    }
}

/// One sample per available report section of each pair. Returns the
/// samples and the number of pairs skipped for lacking both sections.
pub fn make_report_samples(
    pairs: &[VisitPair],
    reports: &BTreeMap<String, ReportRecord>,
    cleaner: &ReportCleaner,
    stage: u8,
) -> (Vec<LongitudinalSample>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for pair in pairs {
        let Some(report) = reports.get(&pair.current.study_id) else {
            skipped += 1;
            continue;
        };
        let before = out.len();
        let sections = [
            (&report.findings, SampleKind::Findings, FINDINGS_INSTRUCTION, "findings"),
            (&report.impression, SampleKind::Impression, IMPRESSION_INSTRUCTION, "impression"),
        ];
        for (text, kind, instruction, tag) in sections {
            let Some(text) = text else { continue };
            let target = cleaner.clean(text);
            if target.is_empty() {
                continue;
            }
            out.push(sample(
                format!("{}_{tag}", pair.current.study_id),
                stage,
                kind,
                pair.past,
                pair.current,
                instruction,
                target,
            ));
        }
        if out.len() == before {
            skipped += 1;
        }
    }
    (out, skipped)
}

/// Question samples of the given categories and split. Unknown study
/// references are a corpus error.
pub fn make_vqa_samples(
    qa: &[QaRecord],
    studies: &BTreeMap<String, StudyRecord>,
    categories: &[Category],
    split: Split,
    stage: u8,
) -> Result<Vec<LongitudinalSample>> {
    let lookup = |id: &str| {
        studies
            .get(id)
            .ok_or_else(|| Error::Data(format!("question refers to unknown study `{id}`")))
    };
    let mut out = Vec::new();
    for q in qa {
        q.validate()?;
        let current = lookup(&q.study_id)?;
        let past = q.past_study_id.as_deref().map(lookup).transpose()?;
        if q.split != split || !categories.contains(&q.category) {
            continue;
        }
        let mut s = sample(q.qa_id.clone(), stage, SampleKind::Vqa, past, current, &q.question, q.answer.clone());
        s.split = q.split;
        s.category = Some(q.category);
        s.answer_form = Some(q.answer_form);
        out.push(s);
    }
    Ok(out)
}

fn image_ids(s: &LongitudinalSample) -> impl Iterator<Item = &str> {
    std::iter::once(s.current_image.as_str()).chain(s.past_image.as_deref())
}

/// Drops every report sample that shares an image with a test question.
/// Returns the kept samples and the number removed.
pub fn enforce_test_exclusion(
    samples: Vec<LongitudinalSample>,
    test: &[LongitudinalSample],
) -> (Vec<LongitudinalSample>, usize) {
    let banned: BTreeSet<&str> = test.iter().flat_map(image_ids).collect();
    let before = samples.len();
    let kept: Vec<_> = samples
        .into_iter()
        .filter(|s| image_ids(s).all(|i| !banned.contains(i)))
        .collect();
    let removed = before - kept.len();
    if removed > 0 {
        log::info!("excluded {removed} report samples sharing images with the test questions");
    }
    (kept, removed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildConfig {
    pub vocab_size: usize,
    pub min_word_count: usize,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            vocab_size: 1024,
            min_word_count: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    pub config: BuildConfig,
    pub frontal_studies: usize,
    pub dropped_non_frontal: usize,
    pub report_pairs_skipped: usize,
    pub excluded_for_test_overlap: usize,
    pub vocab_size: usize,
    pub files: BTreeMap<String, usize>,
}

pub const DATASET_FILES: [&str; 10] = [
    "stage1_train",
    "stage1_valid",
    "stage2",
    "stage2_valid",
    "stage3_train",
    "stage3_valid",
    "stage3_test",
    "nondiff_train",
    "nondiff_valid",
    "nondiff_test",
];

/// Builds every dataset file from a corpus directory.
pub fn build_datasets(corpus_dir: &Path, out_dir: &Path, config: &BuildConfig) -> Result<BuildSummary> {
    let all: Vec<StudyRecord> = read_jsonl(&corpus_dir.join("studies.jsonl"))?;
    let reports: Vec<ReportRecord> = read_jsonl(&corpus_dir.join("reports.jsonl"))?;
    let qa: Vec<QaRecord> = read_jsonl(&corpus_dir.join("qa.jsonl"))?;
    let studies = frontal_only(&all);
    let by_id: BTreeMap<String, StudyRecord> = studies.iter().map(|s| (s.study_id.clone(), s.clone())).collect();
    let reports: BTreeMap<String, ReportRecord> = reports.into_iter().map(|r| (r.study_id.clone(), r)).collect();

    let train_reports: Vec<&str> = studies
        .iter()
        .filter(|s| s.split == Split::Train)
        .filter_map(|s| reports.get(&s.study_id))
        .flat_map(|r| r.findings.iter().chain(r.impression.iter()).map(String::as_str))
        .collect();
    let cleaner = ReportCleaner::fit(&train_reports, config.min_word_count);

    let pairs = pair_prior_visit(&studies);
    let (report_samples, skipped) = make_report_samples(&pairs, &reports, &cleaner, 2);
    let diff = [Category::Difference];
    let nondiff: Vec<Category> = Category::ALL[1..].to_vec();
    let diff_split = |split, stage| make_vqa_samples(&qa, &by_id, &diff, split, stage);
    let test_questions = make_vqa_samples(&qa, &by_id, &Category::ALL, Split::Test, 3)?;
    let (report_samples, excluded) = enforce_test_exclusion(report_samples, &test_questions);

    let stage1 = |split: Split| -> Vec<LongitudinalSample> {
        pairs
            .iter()
            .filter(|p| p.current.split == split)
            .filter_map(|p| {
                let text = reports.get(&p.current.study_id)?.findings.as_deref()?;
                let target = cleaner.clean(text);
                (!target.is_empty()).then(|| {
                    sample(
                        format!("{}_caption", p.current.study_id),
                        1,
                        SampleKind::Findings,
                        None,
                        p.current,
                        FINDINGS_INSTRUCTION,
                        target,
                    )
                })
            })
            .collect()
    };
    let (valid_reports, train_reports): (Vec<_>, Vec<_>) =
        report_samples.into_iter().partition(|s| s.split == Split::Valid);
    let mut stage2 = train_reports;
    stage2.extend(diff_split(Split::Train, 2)?);
    let mut stage2_valid = valid_reports;
    stage2_valid.extend(diff_split(Split::Valid, 2)?);

    let datasets: Vec<(&str, Vec<LongitudinalSample>)> = vec![
        ("stage1_train", stage1(Split::Train)),
        ("stage1_valid", stage1(Split::Valid)),
        ("stage2", stage2),
        ("stage2_valid", stage2_valid),
        ("stage3_train", diff_split(Split::Train, 3)?),
        ("stage3_valid", diff_split(Split::Valid, 3)?),
        ("stage3_test", diff_split(Split::Test, 3)?),
        ("nondiff_train", make_vqa_samples(&qa, &by_id, &nondiff, Split::Train, 3)?),
        ("nondiff_valid", make_vqa_samples(&qa, &by_id, &nondiff, Split::Valid, 3)?),
        ("nondiff_test", make_vqa_samples(&qa, &by_id, &nondiff, Split::Test, 3)?),
    ];

    let mut texts: Vec<&str> = Vec::new();
    for (name, rows) in &datasets {
        if name.ends_with("_train") || *name == "stage2" {
            for s in rows {
                texts.push(&s.instruction);
                texts.push(&s.target);
            }
        }
    }
    if texts.is_empty() {
        return Err(Error::Data("corpus yields no training text".into()));
    }
    let vocab = train_bpe(&texts, config.vocab_size.max(vocab_floor(&texts)))?;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = BTreeMap::new();
    for (name, rows) in &datasets {
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), rows)?;
        files.insert(name.to_string(), rows.len());
    }
    vocab.save(&out_dir.join("vocab.txt"))?;
    let summary = BuildSummary {
        config: config.clone(),
        frontal_studies: studies.len(),
        dropped_non_frontal: all.len() - studies.len(),
        report_pairs_skipped: skipped,
        excluded_for_test_overlap: excluded,
        vocab_size: vocab.len(),
        files,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
    let path = out_dir.join("build_summary.json");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Smallest vocabulary that still covers every character of `texts`.
fn vocab_floor(texts: &[&str]) -> usize {
    let chars: BTreeSet<char> = texts.iter().flat_map(|t| t.to_lowercase().chars().collect::<Vec<_>>()).collect();
    chars.len() + crate::text::NUM_SPECIALS
}

pub fn load_vocab(dataset_dir: &Path) -> Result<Vocab> {
    Vocab::load(&dataset_dir.join("vocab.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::records::View;

    fn study(p: &str, s: &str, t: i64) -> StudyRecord {
        StudyRecord {
            patient_id: p.into(),
            study_id: s.into(),
            timestamp: t,
            view: View::Pa,
            image: format!("images/{p}/{s}.pgm"),
            split: Split::Train,
        }
    }

    fn ids(pairs: &[VisitPair]) -> Vec<(Option<String>, String)> {
        pairs
            .iter()
            .map(|p| (p.past.map(|s| s.study_id.clone()), p.current.study_id.clone()))
            .collect()
    }

    #[test]
    fn pairing_examples() {
        assert!(pair_prior_visit(&[]).is_empty());
        let one = [study("a", "s1", 0)];
        assert_eq!(ids(&pair_prior_visit(&one)), vec![(None, "s1".to_string())]);
        let three = [study("a", "s3", 9), study("a", "s1", 1), study("a", "s2", 5)];
        assert_eq!(
            ids(&pair_prior_visit(&three)),
            vec![
                (None, "s1".to_string()),
                (Some("s1".to_string()), "s2".to_string()),
                (Some("s2".to_string()), "s3".to_string()),
            ]
        );
    }

    #[test]
    fn timestamp_ties_follow_study_id() {
        let tied = [study("a", "sb", 4), study("a", "sa", 4)];
        assert_eq!(
            ids(&pair_prior_visit(&tied)),
            vec![(None, "sa".to_string()), (Some("sa".to_string()), "sb".to_string())]
        );
    }

    #[test]
    fn lateral_views_are_dropped() {
        let mut lat = study("a", "s2", 3);
        lat.view = View::Lateral;
        let kept = frontal_only(&[study("a", "s1", 1), lat]);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn cleaner_strips_and_drops_rare_words() {
        let corpus = ["The lungs are clear.", "the LUNGS are clear!", "the lungs are clear; xyz"];
        let c = ReportCleaner::fit(&corpus, 3);
        assert_eq!(c.clean("The lungs (___) are  clear, xyz."), "the lungs are clear.");
        assert_eq!(c.clean("xyz. the lungs"), "the lungs");
    }

    fn reports(entries: &[(&str, Option<&str>, Option<&str>)]) -> BTreeMap<String, ReportRecord> {
        entries
            .iter()
            .map(|(s, f, i)| {
                (
                    s.to_string(),
                    ReportRecord {
                        study_id: s.to_string(),
                        findings: f.map(str::to_string),
                        impression: i.map(str::to_string),
                    },
                )
            })
            .collect()
    }

    #[test]
    fn report_samples_per_section() {
        let studies = [study("a", "s1", 0), study("a", "s2", 1), study("a", "s3", 2)];
        let pairs = pair_prior_visit(&studies);
        let reps = reports(&[
            ("s1", Some("word word word"), None),
            ("s2", Some("word word word"), Some("word")),
            ("s3", None, None),
        ]);
        let cleaner = ReportCleaner::fit(&["word word word"], 3);
        let (samples, skipped) = make_report_samples(&pairs, &reps, &cleaner, 2);
        assert_eq!(skipped, 1);
        assert_eq!(samples.len(), 3);
        assert_eq!(samples[0].instruction, FINDINGS_INSTRUCTION);
        assert_eq!(samples[0].past_image, None);
        assert_eq!(samples[1].instruction, FINDINGS_INSTRUCTION);
        assert_eq!(samples[2].instruction, IMPRESSION_INSTRUCTION);
        assert_eq!(samples[2].past_study_id.as_deref(), Some("s1"));
    }

    fn qa(id: &str, study: &str, past: Option<&str>, category: Category, split: Split) -> QaRecord {
        let closed = category != Category::Difference;
        QaRecord {
            qa_id: id.into(),
            study_id: study.into(),
            past_study_id: past.map(str::to_string),
            category,
            question: "q".into(),
            answer: if closed { "yes".into() } else { "a".into() },
            answer_form: if closed {
                crate::data::AnswerForm::Closed
            } else {
                crate::data::AnswerForm::Open
            },
            split,
        }
    }

    #[test]
    fn vqa_filtering_and_dangling_refs() {
        let studies: BTreeMap<String, StudyRecord> = [study("a", "s1", 0), study("a", "s2", 1)]
            .into_iter()
            .map(|s| (s.study_id.clone(), s))
            .collect();
        let mut rows = Vec::new();
        for i in 0..10 {
            let cat = if i < 6 { Category::Difference } else { Category::Presence };
            let split = if i % 5 == 0 { Split::Test } else { Split::Train };
            rows.push(qa(&format!("q{i}"), "s2", Some("s1"), cat, split));
        }
        let train_diff = make_vqa_samples(&rows, &studies, &[Category::Difference], Split::Train, 3).unwrap();
        assert_eq!(train_diff.len(), 4);
        assert!(train_diff.iter().all(|s| s.past_image.is_some()));
        let test_all = make_vqa_samples(&rows, &studies, &Category::ALL, Split::Test, 3).unwrap();
        assert_eq!(test_all.len(), 2);
        assert!(test_all.iter().all(|s| s.split == Split::Test));
        rows.push(qa("bad", "s9", None, Category::Presence, Split::Train));
        assert!(make_vqa_samples(&rows, &studies, &Category::ALL, Split::Train, 3).is_err());
    }

    #[test]
    fn exclusion_removes_overlap() {
        let studies = [study("a", "s1", 0), study("a", "s2", 1), study("b", "t1", 0)];
        let pairs = pair_prior_visit(&studies);
        let reps = reports(&[("s1", Some("w w w"), None), ("s2", Some("w w w"), None), ("t1", Some("w w w"), None)]);
        let cleaner = ReportCleaner::fit(&["w w w"], 3);
        let (samples, _) = make_report_samples(&pairs, &reps, &cleaner, 2);
        let (same, removed) = enforce_test_exclusion(samples.clone(), &[]);
        assert_eq!((same.len(), removed), (3, 0));
        let test = vec![samples[0].clone()];
        let (kept, removed) = enforce_test_exclusion(samples, &test);
        // s1 is the current image of one sample and the past image of another
        assert_eq!(removed, 2);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].study_id, "t1");
    }
}
