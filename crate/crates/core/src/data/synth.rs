//! Procedural longitudinal corpus: latent findings per visit, rendered
//! images, templated reports and question-answer pairs.

use std::fmt;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::records::{
    write_jsonl, AnswerForm, Category, QaRecord, ReportRecord, Split, StudyRecord, View,
};
use crate::error::{Error, Result};

pub const DIFFERENCE_QUESTION: &str = "what has changed compared to the reference image?";
pub const NO_CHANGE: &str = "nothing has changed.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingKind {
    Opacity,
    Effusion,
    Consolidation,
    Pneumothorax,
}

impl FindingKind {
    pub const ALL: [FindingKind; 4] = [
        FindingKind::Opacity,
        FindingKind::Effusion,
        FindingKind::Consolidation,
        FindingKind::Pneumothorax,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub fn level(self) -> u8 {
        match self {
            Severity::Mild => 1,
            Severity::Moderate => 2,
            Severity::Severe => 3,
        }
    }

    fn from_level(l: u8) -> Option<Self> {
        match l {
            1 => Some(Severity::Mild),
            2 => Some(Severity::Moderate),
            3 => Some(Severity::Severe),
            _ => None,
        }
    }
}

macro_rules! display_lowercase {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = serde_json::to_value(self).expect("unit variant");
                f.write_str(s.as_str().expect("string tag"))
            }
        }
    )*};
}
display_lowercase!(FindingKind, Side, Severity);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub side: Side,
    pub severity: Severity,
}

impl Finding {
    fn place(&self) -> String {
        format!("{} {}", self.side, self.kind)
    }
}

/// Ground-truth latent state of one study (`finding: None` means normal).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRecord {
    pub patient_id: String,
    pub study_id: String,
    pub finding: Option<Finding>,
}

/// Answer to the difference question for a (past, current) state pair.
pub fn difference_answer(past: Option<Finding>, cur: Option<Finding>) -> String {
    match (past, cur) {
        (None, None) => NO_CHANGE.to_string(),
        (None, Some(c)) => format!("there is a new {}.", c.place()),
        (Some(p), None) => format!("the {} has resolved.", p.place()),
        (Some(p), Some(c)) if p.kind == c.kind && p.side == c.side => {
            match c.severity.level().cmp(&p.severity.level()) {
                std::cmp::Ordering::Greater => format!("the {} is worsening.", c.place()),
                std::cmp::Ordering::Less => format!("the {} is improving.", c.place()),
                std::cmp::Ordering::Equal => NO_CHANGE.to_string(),
            }
        }
        (Some(p), Some(c)) => format!("the {} has resolved. there is a new {}.", p.place(), c.place()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_patients: usize,
    /// Inclusive range of visits per patient.
    pub min_visits: usize,
    pub max_visits: usize,
    pub image_size: usize,
    pub lateral_rate: f64,
    pub missing_section_rate: f64,
    pub typo_rate: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_patients: usize) -> Self {
        SynthConfig {
            seed,
            n_patients,
            min_visits: 1,
            max_visits: 4,
            image_size: 64,
            lateral_rate: 0.1,
            missing_section_rate: 0.1,
            typo_rate: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("at least one patient is required".into()));
        }
        if self.min_visits == 0 || self.min_visits > self.max_visits {
            return Err(Error::Config("visit range must satisfy 1 <= min <= max".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        for r in [self.lateral_rate, self.missing_section_rate, self.typo_rate] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config("rates must lie in [0, 1)".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub studies: Vec<StudyRecord>,
    pub reports: Vec<ReportRecord>,
    pub qa: Vec<QaRecord>,
    pub states: Vec<StateRecord>,
    /// `(relative path, 8-bit grayscale pixels)` per study.
    pub images: Vec<(String, Vec<u8>)>,
}

fn random_finding(rng: &mut ChaCha8Rng) -> Finding {
    Finding {
        kind: FindingKind::ALL[rng.random_range(0..4)],
        side: if rng.random_bool(0.5) { Side::Left } else { Side::Right },
        severity: Severity::from_level(rng.random_range(1..=3)).expect("level in range"),
    }
}

fn next_state(prev: Option<Finding>, rng: &mut ChaCha8Rng) -> Option<Finding> {
    let r: f64 = rng.random();
    match prev {
        None if r < 0.55 => None,
        None => Some(random_finding(rng)),
        Some(f) => {
            let lvl = f.severity.level();
            if r < 0.25 {
                Some(f)
            } else if r < 0.5 {
                Some(Finding {
                    severity: Severity::from_level((lvl + 1).min(3)).expect("level in range"),
                    ..f
                })
            } else if r < 0.75 {
                Severity::from_level(lvl - 1).map(|severity| Finding { severity, ..f })
            } else if r < 0.9 {
                None
            } else {
                let mut g = random_finding(rng);
                while g.kind == f.kind && g.side == f.side {
                    g = random_finding(rng);
                }
                Some(g)
            }
        }
    }
}

/// Per-patient anatomy shared across visits.
struct Anatomy {
    lung_dx: f64,
    lung_dy: f64,
    lung_rx: f64,
    lung_ry: f64,
}

fn gauss(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

fn render(size: usize, view: View, finding: Option<Finding>, anat: &Anatomy, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let gain: f64 = rng.random_range(-0.03..0.03);
    let lungs = [(0.30 + anat.lung_dx, 0.48 + anat.lung_dy), (0.70 - anat.lung_dx, 0.48 + anat.lung_dy)];
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let (u, v) = ((px as f64 + 0.5) / s, (py as f64 + 0.5) / s);
            let mut val: f64 = 0.05;
            let body = ((u - 0.5) / 0.47).powi(2) + ((v - 0.55) / 0.5).powi(2);
            if body < 1.0 {
                val = 0.55;
            }
            match view {
                View::Lateral => {
                    if ((u - 0.5) / 0.25).powi(2) + ((v - 0.5) / 0.3).powi(2) < 1.0 {
                        val = 0.3;
                    }
                }
                _ => {
                    for &(cx, cy) in &lungs {
                        if ((u - cx) / anat.lung_rx).powi(2) + ((v - cy) / anat.lung_ry).powi(2) < 1.0 {
                            val = 0.3;
                        }
                    }
                    if (u - 0.5).abs() < 0.06 && v > 0.2 {
                        val = 0.75;
                    }
                    if ((u - 0.56) / 0.12).powi(2) + ((v - 0.66) / 0.1).powi(2) < 1.0 {
                        val = 0.7;
                    }
                }
            }
            if let (Some(f), true) = (finding, view.is_frontal()) {
                let (lx, ly) = lungs[usize::from(f.side == Side::Right)];
                let sev = f64::from(f.severity.level());
                let amp = 0.12 * sev;
                let outward = if f.side == Side::Left { -1.0 } else { 1.0 };
                val += match f.kind {
                    FindingKind::Opacity => amp * gauss(u - lx, v - ly, 0.05 + 0.015 * sev),
                    FindingKind::Consolidation => 1.3 * amp * gauss(u - lx, v - ly - 0.13, 0.04 + 0.012 * sev),
                    FindingKind::Effusion => {
                        let level = ly + anat.lung_ry - 0.07 * sev;
                        let inside = ((u - lx) / (anat.lung_rx * 1.1)).powi(2) < 1.0;
                        if inside {
                            amp / (1.0 + (-(v - level) / 0.015).exp())
                        } else {
                            0.0
                        }
                    }
                    FindingKind::Pneumothorax => {
                        -0.8 * amp * gauss(u - lx - outward * 0.06, v - ly + 0.17, 0.04 + 0.012 * sev)
                    }
                };
            }
            let marker = match view {
                View::Ap => px >= 2 && px < 6 && py >= 2 && py < 6,
                View::Pa => px + 6 >= size && px + 2 < size && py >= 2 && py < 6,
                View::Lateral => px >= 2 && px < 6 && py + 6 >= size && py + 2 < size,
            };
            if marker {
                val = 0.95;
            }
            val += gain + noise.sample(rng);
            out.push((val.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

fn typo(word: &str, rng: &mut ChaCha8Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    let i = rng.random_range(0..chars.len());
    let mut out: String = chars[..=i].iter().collect();
    out.push(chars[i]);
    out.extend(&chars[i + 1..]);
    out
}

fn add_typo(text: &str, rng: &mut ChaCha8Rng) -> String {
    let words: Vec<&str> = text.split(' ').collect();
    let candidates: Vec<usize> = (0..words.len())
        .filter(|&i| words[i].chars().all(|c| c.is_ascii_alphabetic()) && words[i].len() > 3)
        .collect();
    let Some(&i) = candidates.choose(rng) else {
        return text.to_string();
    };
    let mut out: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    out[i] = typo(words[i], rng);
    out.join(" ")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn change_clause(past: Option<Finding>, cur: Option<Finding>) -> String {
    let answer = difference_answer(past, cur);
    if answer == NO_CHANGE {
        "there is no interval change".to_string()
    } else {
        answer.trim_end_matches('.').replace(". ", " and ")
    }
}

fn findings_text(view: View, cur: Option<Finding>, prior: Option<Option<Finding>>, rng: &mut ChaCha8Rng) -> String {
    let mut parts = Vec::new();
    parts.push(
        match view {
            View::Pa => "PA and lateral views of the chest.",
            View::Ap => "AP portable view of the chest.",
            View::Lateral => "Lateral view of the chest.",
        }
        .to_string(),
    );
    parts.push(match cur {
        None => ["The lungs are clear.", "No focal consolidation, pleural effusion or pneumothorax."]
            [rng.random_range(0..2)]
            .to_string(),
        Some(f) => format!("There is a {} {} {}.", f.severity, f.side, f.kind),
    });
    if let Some(past) = prior {
        parts.push(format!("Compared to the prior study (___), {}.", change_clause(past, cur)));
    }
    parts.push(
        ["The heart size is normal.", "Heart size is mildly enlarged.", "Cardiomediastinal silhouette is stable."]
            [rng.random_range(0..3)]
            .to_string(),
    );
    parts.join(" ")
}

fn impression_text(cur: Option<Finding>, prior: Option<Option<Finding>>) -> String {
    match (cur, prior) {
        (None, None) => "No acute cardiopulmonary process.".to_string(),
        (None, Some(past)) => format!("No acute cardiopulmonary process; {}.", change_clause(past, None)),
        (Some(f), None) => capitalize(&format!("{} {} {}.", f.severity, f.side, f.kind)),
        (Some(f), Some(past)) => capitalize(&format!(
            "{} {} {}, {}.",
            f.severity,
            f.side,
            f.kind,
            change_clause(past, Some(f))
        )),
    }
}

fn yes_no(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

fn single_image_qa(view: View, cur: Option<Finding>, rng: &mut ChaCha8Rng) -> Vec<(Category, String, String, AnswerForm)> {
    let mut all = vec![
        (
            Category::Abnormality,
            "is there any abnormality in the image?".to_string(),
            yes_no(cur.is_some()),
            AnswerForm::Closed,
        ),
        (
            Category::View,
            "which view is this image taken?".to_string(),
            format!("{} view", if view == View::Pa { "pa" } else { "ap" }),
            AnswerForm::Open,
        ),
    ];
    let asked = match cur {
        Some(f) if rng.random_bool(0.5) => f.kind,
        _ => FindingKind::ALL[rng.random_range(0..4)],
    };
    all.push((
        Category::Presence,
        format!("is there evidence of {asked} in the image?"),
        yes_no(cur.is_some_and(|f| f.kind == asked)),
        AnswerForm::Closed,
    ));
    if let Some(f) = cur {
        all.push((
            Category::Location,
            format!("where in the image is the {} located?", f.kind),
            format!("{} lung", f.side),
            AnswerForm::Open,
        ));
        all.push((
            Category::Level,
            format!("what level is the {}?", f.kind),
            f.severity.to_string(),
            AnswerForm::Open,
        ));
        all.push((
            Category::Type,
            "what type of abnormality is seen in the image?".to_string(),
            f.kind.to_string(),
            AnswerForm::Open,
        ));
    }
    all.shuffle(rng);
    all.truncate(2);
    all.sort_by_key(|q| q.0);
    all
}

fn assign_splits(n: usize, rng: &mut ChaCha8Rng) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = ((n as f64) * 0.8).round().max(1.0) as usize;
    let n_valid = ((n as f64) * 0.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &p) in order.iter().enumerate() {
        splits[p] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    splits
}

/// Builds the whole corpus in memory. Identical configs give identical output.
pub fn generate_corpus(config: &SynthConfig) -> Result<Corpus> {
    config.validate()?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let splits = assign_splits(config.n_patients, &mut split_rng);
    let mut corpus = Corpus {
        config: config.clone(),
        studies: Vec::new(),
        reports: Vec::new(),
        qa: Vec::new(),
        states: Vec::new(),
        images: Vec::new(),
    };
    for (p, &split) in splits.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(p as u64 + 1);
        let patient_id = format!("p{p:05}");
        let anat = Anatomy {
            lung_dx: rng.random_range(-0.02..0.02),
            lung_dy: rng.random_range(-0.02..0.02),
            lung_rx: rng.random_range(0.13..0.16),
            lung_ry: rng.random_range(0.25..0.29),
        };
        let visits = rng.random_range(config.min_visits..=config.max_visits);
        let mut state = None;
        let mut day = 0i64;
        let mut prior_frontal: Option<(String, Option<Finding>)> = None;
        for visit in 0..visits {
            if visit > 0 {
                day += rng.random_range(7..400);
                state = next_state(state, &mut rng);
            } else if rng.random_bool(0.5) {
                state = Some(random_finding(&mut rng));
            }
            let study_id = format!("s{p:05}_{visit:02}");
            let view = if rng.random_bool(config.lateral_rate) {
                View::Lateral
            } else if rng.random_bool(0.6) {
                View::Pa
            } else {
                View::Ap
            };
            let image = format!("images/{patient_id}/{study_id}.pgm");
            corpus.images.push((image.clone(), render(config.image_size, view, state, &anat, &mut rng)));
            corpus.studies.push(StudyRecord {
                patient_id: patient_id.clone(),
                study_id: study_id.clone(),
                timestamp: day,
                view,
                image,
                split,
            });
            corpus.states.push(StateRecord {
                patient_id: patient_id.clone(),
                study_id: study_id.clone(),
                finding: state,
            });
            let prior = prior_frontal.as_ref().map(|(_, f)| *f);
            let mut findings = findings_text(view, state, prior, &mut rng);
            let mut impression = impression_text(state, prior);
            if rng.random_bool(config.typo_rate) {
                findings = add_typo(&findings, &mut rng);
            }
            if rng.random_bool(config.typo_rate) {
                impression = add_typo(&impression, &mut rng);
            }
            corpus.reports.push(ReportRecord {
                study_id: study_id.clone(),
                findings: (!rng.random_bool(config.missing_section_rate)).then_some(findings),
                impression: (!rng.random_bool(config.missing_section_rate)).then_some(impression),
            });
            if !view.is_frontal() {
                continue;
            }
            if let Some((past_id, past_state)) = &prior_frontal {
                corpus.qa.push(QaRecord {
                    qa_id: format!("{study_id}_difference"),
                    study_id: study_id.clone(),
                    past_study_id: Some(past_id.clone()),
                    category: Category::Difference,
                    question: DIFFERENCE_QUESTION.to_string(),
                    answer: difference_answer(*past_state, state),
                    answer_form: AnswerForm::Open,
                    split,
                });
            }
            for (category, question, answer, answer_form) in single_image_qa(view, state, &mut rng) {
                let tag = serde_json::to_value(category).expect("unit variant");
                corpus.qa.push(QaRecord {
                    qa_id: format!("{study_id}_{}", tag.as_str().expect("string tag")),
                    study_id: study_id.clone(),
                    past_study_id: None,
                    category,
                    question,
                    answer,
                    answer_form,
                    split,
                });
            }
            prior_frontal = Some((study_id, state));
        }
    }
    Ok(corpus)
}

pub fn encode_pgm(size: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
    use image::ImageEncoder;
    if pixels.len() != size * size {
        return Err(Error::Data("pixel buffer does not match image size".into()));
    }
    let mut buf = Vec::new();
    PnmEncoder::new(&mut buf)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(pixels, size as u32, size as u32, image::ExtendedColorType::L8)
        .map_err(|e| Error::Data(format!("encoding image: {e}")))?;
    Ok(buf)
}

/// Decodes an 8-bit grayscale PGM or PNG file into `(side, pixels)`.
pub fn read_gray_image(path: &Path) -> Result<(usize, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .into_luma8();
    if img.width() != img.height() {
        return Err(Error::Data(format!("{}: image is not square", path.display())));
    }
    Ok((img.width() as usize, img.into_raw()))
}

impl Corpus {
    /// Writes the corpus files and images under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("studies.jsonl"), &self.studies)?;
        write_jsonl(&dir.join("reports.jsonl"), &self.reports)?;
        write_jsonl(&dir.join("qa.jsonl"), &self.qa)?;
        write_jsonl(&dir.join("states.jsonl"), &self.states)?;
        let cfg = serde_json::to_string_pretty(&self.config).map_err(|e| Error::Data(e.to_string()))?;
        let cfg_path = dir.join("corpus.json");
        std::fs::write(&cfg_path, cfg + "\n").map_err(|e| Error::io(&cfg_path, e))?;
        for (rel, pixels) in &self.images {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let bytes = encode_pgm(self.config.image_size, pixels)?;
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(kind: FindingKind, side: Side, severity: Severity) -> Option<Finding> {
        Some(Finding { kind, side, severity })
    }

    #[test]
    fn answer_rules() {
        use FindingKind::*;
        use Severity::*;
        use Side::*;
        assert_eq!(difference_answer(None, None), "nothing has changed.");
        assert_eq!(
            difference_answer(f(Effusion, Left, Mild), f(Effusion, Left, Severe)),
            "the left effusion is worsening."
        );
        assert_eq!(
            difference_answer(f(Opacity, Right, Severe), f(Opacity, Right, Moderate)),
            "the right opacity is improving."
        );
        assert_eq!(difference_answer(f(Opacity, Right, Mild), f(Opacity, Right, Mild)), NO_CHANGE);
        assert_eq!(difference_answer(None, f(Pneumothorax, Left, Mild)), "there is a new left pneumothorax.");
        assert_eq!(difference_answer(f(Pneumothorax, Left, Mild), None), "the left pneumothorax has resolved.");
        assert_eq!(
            difference_answer(f(Opacity, Left, Mild), f(Opacity, Right, Mild)),
            "the left opacity has resolved. there is a new right opacity."
        );
    }

    #[test]
    fn same_seed_same_corpus() {
        let cfg = SynthConfig::new(11, 12);
        assert_eq!(generate_corpus(&cfg).unwrap(), generate_corpus(&cfg).unwrap());
        let other = generate_corpus(&SynthConfig::new(12, 12)).unwrap();
        assert_ne!(generate_corpus(&cfg).unwrap().studies, other.studies);
    }

    #[test]
    fn visit_counts_and_order() {
        let c = generate_corpus(&SynthConfig::new(3, 40)).unwrap();
        let mut per_patient = std::collections::BTreeMap::<&str, Vec<i64>>::new();
        for s in &c.studies {
            per_patient.entry(&s.patient_id).or_default().push(s.timestamp);
        }
        assert_eq!(per_patient.len(), 40);
        for ts in per_patient.values() {
            assert!((1..=4).contains(&ts.len()));
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
        }
        for q in &c.qa {
            q.validate().unwrap();
        }
    }

    #[test]
    fn split_sizes() {
        let c = generate_corpus(&SynthConfig::new(1, 200)).unwrap();
        let mut counts = std::collections::BTreeMap::<Split, std::collections::BTreeSet<&str>>::new();
        for s in &c.studies {
            counts.entry(s.split).or_default().insert(&s.patient_id);
        }
        assert_eq!(counts[&Split::Train].len(), 160);
        assert_eq!(counts[&Split::Valid].len(), 20);
        assert_eq!(counts[&Split::Test].len(), 20);
        let one = generate_corpus(&SynthConfig::new(1, 1)).unwrap();
        assert!(one.studies.iter().all(|s| s.split == Split::Train));
    }

    #[test]
    fn severity_changes_brightness() {
        let anat = Anatomy { lung_dx: 0.0, lung_dy: 0.0, lung_rx: 0.15, lung_ry: 0.27 };
        let mean = |sev| {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let img = render(64, View::Pa, f(FindingKind::Opacity, Side::Left, sev), &anat, &mut rng);
            img.iter().map(|&x| f64::from(x)).sum::<f64>()
        };
        assert!(mean(Severity::Mild) < mean(Severity::Moderate));
        assert!(mean(Severity::Moderate) < mean(Severity::Severe));
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..=255).collect();
        let path = dir.path().join("x.pgm");
        std::fs::write(&path, encode_pgm(16, &pixels).unwrap()).unwrap();
        assert!(std::fs::read(&path).unwrap().starts_with(b"P5"));
        assert_eq!(read_gray_image(&path).unwrap(), (16, pixels));
    }
}
