//! Captioning and question-answering metrics: corpus BLEU, ROUGE-L, CIDEr,
//! a reduced METEOR and exact-match accuracy.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rust_stemmers::{Algorithm, Stemmer};
use serde::{Deserialize, Serialize};

use crate::data::AnswerForm;
use crate::error::{Error, Result};

const ROUGE_BETA: f64 = 1.2;
const CIDER_MAX_N: usize = 4;

/// Lowercases and trims; the shared answer normalization.
pub fn normalize(text: &str) -> String {
    text.trim().to_lowercase()
}

pub fn tokenize(text: &str) -> Vec<String> {
    normalize(text).split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
    pub form: Option<AnswerForm>,
}

impl EvalPair {
    pub fn new(candidate: &str, references: &[&str], form: Option<AnswerForm>) -> Self {
        EvalPair {
            candidate: tokenize(candidate),
            references: references.iter().map(|r| tokenize(r)).collect(),
            form,
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n with clipped counts and closest-reference brevity
/// penalty. A zero precision at order two or higher is smoothed by adding
/// one to its numerator and denominator.
pub fn bleu(pairs: &[EvalPair], n: usize) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for p in pairs {
        let c = p.candidate.len();
        cand_len += c;
        ref_len += p
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .unwrap_or(0);
        for k in 1..=n {
            let cand = ngram_counts(&p.candidate, k);
            let refs: Vec<_> = p.references.iter().map(|r| ngram_counts(r, k)).collect();
            for (gram, count) in cand {
                let ceiling = refs.iter().map(|r| r.get(gram).copied().unwrap_or(0)).max().unwrap_or(0);
                matched[k - 1] += count.min(ceiling);
                total[k - 1] += count;
            }
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let (m, t) = (matched[k] as f64, total[k] as f64);
        let precision = if matched[k] > 0 {
            m / t
        } else if k == 0 {
            return 0.0;
        } else {
            log::debug!("BLEU order {} has no matches; smoothing", k + 1);
            (m + 1.0) / (t + 1.0)
        };
        log_sum += precision.ln();
    }
    let (c, r) = (cand_len as f64, ref_len as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / n as f64).exp()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_pair(cand: &[String], reference: &[String]) -> f64 {
    let l = lcs(cand, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / cand.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over pairs of the best-reference LCS F-measure with beta 1.2.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| rouge_pair(&p.candidate, r)).fold(0.0, f64::max))
        .sum();
    total / pairs.len() as f64
}

/// CIDEr over n-grams of orders 1 to 4. Document frequencies come from the
/// reference sets with IDF `ln(N / df)`, `N` being the number of pairs;
/// n-grams absent from every reference weigh nothing. The candidate's weights are clipped at the reference's, and the final score
/// is 10 times the mean cosine over orders and references.
pub fn cider(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let scores = cider_per_pair(pairs);
    scores.iter().sum::<f64>() / scores.len() as f64
}

pub fn cider_per_pair(pairs: &[EvalPair]) -> Vec<f64> {
    let distinct: HashSet<&Vec<Vec<String>>> = pairs.iter().map(|p| &p.references).collect();
    if distinct.len() < 2 {
        log::warn!("CIDEr over fewer than two distinct reference sets; IDF weights are degenerate");
    }
    let n_docs = pairs.len() as f64;
    let mut df: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); CIDER_MAX_N];
    for p in pairs {
        for (k, table) in df.iter_mut().enumerate() {
            let seen: HashSet<&[String]> = p.references.iter().flat_map(|r| ngram_counts(r, k + 1).into_keys()).collect();
            for g in seen {
                *table.entry(g).or_insert(0) += 1;
            }
        }
    }
    let tfidf = |tokens: &[String], k: usize| -> HashMap<Vec<String>, f64> {
        ngram_counts(tokens, k + 1)
            .into_iter()
            .map(|(g, c)| {
                let w = df[k].get(g).map_or(0.0, |&d| (n_docs / d as f64).ln());
                (g.to_vec(), c as f64 * w)
            })
            .collect()
    };
    let norm = |v: &HashMap<Vec<String>, f64>| v.values().map(|w| w * w).sum::<f64>().sqrt();
    pairs
        .iter()
        .map(|p| {
            if p.references.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for k in 0..CIDER_MAX_N {
                let cand = tfidf(&p.candidate, k);
                let cand_norm = norm(&cand);
                for r in &p.references {
                    let refv = tfidf(r, k);
                    let ref_norm = norm(&refv);
                    if cand_norm == 0.0 || ref_norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = cand
                        .iter()
                        .filter_map(|(g, w)| refv.get(g).map(|rw| w.min(*rw) * rw))
                        .sum();
                    total += dot / (cand_norm * ref_norm);
                }
            }
            10.0 * total / (CIDER_MAX_N * p.references.len()) as f64
        })
        .collect()
}

/// Unigram alignment: exact matches first, then Porter stems among the
/// leftovers. Each candidate token, in order, takes the earliest free
/// reference token. Returns `(candidate index, reference index)` pairs.
fn align(cand: &[String], reference: &[String], stemmer: &Stemmer) -> Vec<(usize, usize)> {
    let mut used_c = vec![false; cand.len()];
    let mut used_r = vec![false; reference.len()];
    let mut links = Vec::new();
    let stems = |t: &[String]| -> Vec<String> { t.iter().map(|w| stemmer.stem(w).into_owned()).collect() };
    let (cs, rs) = (stems(cand), stems(reference));
    for (ckeys, rkeys) in [(cand, reference), (&cs[..], &rs[..])] {
        for (i, c) in ckeys.iter().enumerate() {
            if used_c[i] {
                continue;
            }
            if let Some(j) = (0..rkeys.len()).find(|&j| !used_r[j] && rkeys[j] == *c) {
                used_c[i] = true;
                used_r[j] = true;
                links.push((i, j));
            }
        }
    }
    links.sort_unstable();
    links
}

fn meteor_pair(cand: &[String], reference: &[String], stemmer: &Stemmer) -> f64 {
    let links = align(cand, reference, stemmer);
    let m = links.len();
    if m == 0 {
        return 0.0;
    }
    let chunks = 1 + links.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count();
    let p = m as f64 / cand.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// METEOR without synonym or paraphrase stages, best reference per pair,
/// averaged over the corpus.
pub fn meteor_simple(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let stemmer = Stemmer::create(Algorithm::English);
    let total: f64 = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| meteor_pair(&p.candidate, r, &stemmer)).fold(0.0, f64::max))
        .sum();
    total / pairs.len() as f64
}

/// Exact-match percentages `(open, closed, all)`; a form with no pairs
/// yields `None`.
pub fn exact_match(pairs: &[EvalPair]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let mut hits = [0usize; 2];
    let mut counts = [0usize; 2];
    for p in pairs {
        let slot = match p.form {
            Some(AnswerForm::Closed) => 1,
            _ => 0,
        };
        counts[slot] += 1;
        if p.references.iter().any(|r| *r == p.candidate) {
            hits[slot] += 1;
        }
    }
    let pct = |h: usize, n: usize| (n > 0).then(|| 100.0 * h as f64 / n as f64);
    (
        pct(hits[0], counts[0]),
        pct(hits[1], counts[1]),
        pct(hits[0] + hits[1], counts[0] + counts[1]),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub accuracy_open: Option<f64>,
    pub accuracy_closed: Option<f64>,
    pub accuracy_all: Option<f64>,
    pub n_pairs: usize,
    pub meteor_variant: String,
    pub cider_idf: String,
}

impl MetricReport {
    pub fn compute(pairs: &[EvalPair]) -> Self {
        let (open, closed, all) = exact_match(pairs);
        MetricReport {
            bleu1: bleu(pairs, 1),
            bleu2: bleu(pairs, 2),
            bleu3: bleu(pairs, 3),
            bleu4: bleu(pairs, 4),
            meteor: meteor_simple(pairs),
            rouge_l: rouge_l(pairs),
            cider: cider(pairs),
            accuracy_open: open,
            accuracy_closed: closed,
            accuracy_all: all,
            n_pairs: pairs.len(),
            meteor_variant: "exact and Porter2-stem unigram matching, no synonyms".into(),
            cider_idf: "ln(N / df)".into(),
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// One row per sample: id, prediction, reference, form, exact match and
/// the sample's CIDEr within the corpus.
pub fn write_per_sample_csv(
    path: &Path,
    ids: &[String],
    predictions: &[String],
    references: &[String],
    pairs: &[EvalPair],
) -> Result<()> {
    let cider = cider_per_pair(pairs);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["id", "prediction", "reference", "form", "exact_match", "cider"]).map_err(wrap)?;
    for i in 0..pairs.len() {
        let form = match pairs[i].form {
            Some(AnswerForm::Open) => "open",
            Some(AnswerForm::Closed) => "closed",
            None => "",
        };
        let exact = pairs[i].references.iter().any(|r| *r == pairs[i].candidate);
        w.write_record([
            ids[i].as_str(),
            predictions[i].as_str(),
            references[i].as_str(),
            form,
            if exact { "1" } else { "0" },
            &cider[i].to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
