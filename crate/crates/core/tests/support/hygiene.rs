//! Data invariants shared by the hygiene property test and the acceptance run.

use std::collections::{BTreeMap, BTreeSet};

use lvqa_core::data::build::{build_datasets, pair_prior_visit, frontal_only, BuildConfig, DATASET_FILES};
use lvqa_core::data::synth::{difference_answer, generate_corpus, StateRecord, SynthConfig};
use lvqa_core::data::{read_jsonl, Category, LongitudinalSample, Split};

/// Panics on the first violated data invariant of the corpus generated from `seed`.
pub fn check_corpus(seed: u64) {
    let mut cfg = SynthConfig::new(seed, 40);
    cfg.image_size = 16;
    let corpus = generate_corpus(&cfg).unwrap();

    let frontal = frontal_only(&corpus.studies);
    for pair in pair_prior_visit(&frontal) {
        if let Some(past) = pair.past {
            assert_eq!(past.patient_id, pair.current.patient_id);
            assert!(past.timestamp < pair.current.timestamp);
        }
    }

    let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
    for s in &corpus.studies {
        let prev = split_of.insert(&s.patient_id, s.split);
        assert!(prev.is_none_or(|p| p == s.split), "patient {} spans splits", s.patient_id);
    }

    let states: BTreeMap<&str, &StateRecord> = corpus.states.iter().map(|s| (s.study_id.as_str(), s)).collect();
    for q in corpus.qa.iter().filter(|q| q.category == Category::Difference) {
        let past = states[q.past_study_id.as_deref().unwrap()].finding;
        let cur = states[q.study_id.as_str()].finding;
        assert_eq!(q.answer, difference_answer(past, cur));
    }

    let dir = tempfile::tempdir().unwrap();
    let corpus_dir = dir.path().join("corpus");
    let out = dir.path().join("data");
    corpus.write(&corpus_dir).unwrap();
    let summary = build_datasets(&corpus_dir, &out, &BuildConfig::default()).unwrap();
    assert_eq!(summary.files.len(), DATASET_FILES.len());

    let load = |name: &str| -> Vec<LongitudinalSample> { read_jsonl(&out.join(format!("{name}.jsonl"))).unwrap() };
    let test_images: BTreeSet<String> = ["stage3_test", "nondiff_test"]
        .iter()
        .flat_map(|n| load(n))
        .flat_map(|s| std::iter::once(s.current_image).chain(s.past_image))
        .collect();
    if !test_images.is_empty() {
        assert!(summary.excluded_for_test_overlap > 0);
    }
    for name in ["stage2", "stage2_valid"] {
        for s in load(name) {
            assert!(!test_images.contains(&s.current_image), "{} leaks a test image", s.id);
            if let Some(p) = &s.past_image {
                assert!(!test_images.contains(p), "{} leaks a test image", s.id);
            }
        }
    }
}
