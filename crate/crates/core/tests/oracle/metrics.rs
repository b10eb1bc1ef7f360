//! Brute-force metric implementations used as test oracles.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rust_stemmers::{Algorithm, Stemmer};

use lvqa_core::metrics::EvalPair;

const WORDS: [&str; 9] = ["the", "left", "right", "effusion", "effusions", "is", "worsening", "worsen", "new"];

pub fn random_pairs(seed: u64, count: usize) -> Vec<EvalPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sentence = |rng: &mut ChaCha8Rng| -> String {
        let len = rng.random_range(1..=8);
        (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
    };
    (0..count)
        .map(|_| {
            let cand = sentence(&mut rng);
            let n_refs = rng.random_range(1..=3);
            let refs: Vec<String> = (0..n_refs).map(|_| sentence(&mut rng)).collect();
            let refs: Vec<&str> = refs.iter().map(String::as_str).collect();
            EvalPair::new(&cand, &refs, None)
        })
        .collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= t.len() {
        out.push(t[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn unique(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut u: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !u.contains(g) {
            u.push(g.clone());
        }
    }
    u
}

pub fn bleu(pairs: &[EvalPair], n: usize) -> f64 {
    let mut c_len = 0.0;
    let mut r_len = 0.0;
    for p in pairs {
        let c = p.candidate.len() as f64;
        c_len += c;
        let mut best = f64::INFINITY;
        let mut best_len = 0.0;
        for r in &p.references {
            let l = r.len() as f64;
            let d = (l - c).abs();
            if d < best || (d == best && l < best_len) {
                best = d;
                best_len = l;
            }
        }
        r_len += best_len;
    }
    if c_len == 0.0 {
        return 0.0;
    }
    let mut logs = 0.0;
    for k in 1..=n {
        let (mut m, mut t) = (0.0, 0.0);
        for p in pairs {
            let cg = grams(&p.candidate, k);
            for g in unique(&cg) {
                let c = count(&cg, &g);
                let mut ceiling = 0;
                for r in &p.references {
                    ceiling = ceiling.max(count(&grams(r, k), &g));
                }
                m += c.min(ceiling) as f64;
                t += c as f64;
            }
        }
        if m == 0.0 {
            if k == 1 {
                return 0.0;
            }
            m += 1.0;
            t += 1.0;
        }
        logs += (m / t).ln();
    }
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * (logs / n as f64).exp()
}

/// Longest common subsequence by enumerating every subset of `a`.
fn lcs_brute(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).collect::<Vec<_>>().iter().map(|&i| &a[i]).collect();
        if sub.len() <= best {
            continue;
        }
        let mut j = 0;
        for w in b {
            if j < sub.len() && sub[j] == w {
                j += 1;
            }
        }
        if j == sub.len() {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    let mut sum = 0.0;
    for p in pairs {
        let mut best: f64 = 0.0;
        for r in &p.references {
            let l = lcs_brute(&p.candidate, r) as f64;
            if l > 0.0 {
                let prec = l / p.candidate.len() as f64;
                let rec = l / r.len() as f64;
                best = best.max(2.44 * prec * rec / (rec + 1.44 * prec));
            }
        }
        sum += best;
    }
    sum / pairs.len() as f64
}

pub fn cider(pairs: &[EvalPair]) -> f64 {
    let n_docs = pairs.len() as f64;
    let mut total = 0.0;
    for p in pairs {
        let mut s = 0.0;
        for k in 1..=4 {
            let mut vocab: Vec<Vec<String>> = Vec::new();
            for q in pairs {
                for r in &q.references {
                    vocab.extend(grams(r, k));
                }
            }
            vocab.extend(grams(&p.candidate, k));
            let vocab = unique(&vocab);
            let idf: Vec<f64> = vocab
                .iter()
                .map(|g| {
                    let df = pairs.iter().filter(|q| q.references.iter().any(|r| count(&grams(r, k), g) > 0)).count();
                    if df == 0 {
                        0.0
                    } else {
                        (n_docs / df as f64).ln()
                    }
                })
                .collect();
            let vec_of = |t: &[String]| -> Vec<f64> {
                let gs = grams(t, k);
                vocab.iter().zip(&idf).map(|(g, w)| count(&gs, g) as f64 * w).collect()
            };
            let c = vec_of(&p.candidate);
            for r in &p.references {
                let rv = vec_of(r);
                let cn: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
                let rn: f64 = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                if cn > 0.0 && rn > 0.0 {
                    let dot: f64 = c.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
                    s += dot / (cn * rn);
                }
            }
        }
        total += 10.0 * s / (4.0 * p.references.len() as f64);
    }
    total / n_docs
}

fn meteor_one(c: &[String], r: &[String], stemmer: &Stemmer) -> f64 {
    // target[i] = reference index aligned to candidate token i
    let mut target: Vec<Option<usize>> = vec![None; c.len()];
    let mut taken = vec![false; r.len()];
    let stem = |w: &String| stemmer.stem(w).to_string();
    for use_stem in [false, true] {
        for i in 0..c.len() {
            if target[i].is_some() {
                continue;
            }
            for j in 0..r.len() {
                let hit = if use_stem { stem(&c[i]) == stem(&r[j]) } else { c[i] == r[j] };
                if !taken[j] && hit {
                    taken[j] = true;
                    target[i] = Some(j);
                    break;
                }
            }
        }
    }
    let aligned: Vec<(usize, usize)> = target.iter().enumerate().filter_map(|(i, t)| t.map(|j| (i, j))).collect();
    let m = aligned.len() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut chunks = 0.0;
    for (k, &(i, j)) in aligned.iter().enumerate() {
        let continues = k > 0 && aligned[k - 1].0 + 1 == i && aligned[k - 1].1 + 1 == j;
        if !continues {
            chunks += 1.0;
        }
    }
    let p = m / c.len() as f64;
    let rc = m / r.len() as f64;
    let f = 10.0 * p * rc / (rc + 9.0 * p);
    f * (1.0 - 0.5 * (chunks / m).powi(3))
}

pub fn meteor(pairs: &[EvalPair]) -> f64 {
    let stemmer = Stemmer::create(Algorithm::English);
    let mut sum = 0.0;
    for p in pairs {
        let mut best: f64 = 0.0;
        for r in &p.references {
            best = best.max(meteor_one(&p.candidate, r, &stemmer));
        }
        sum += best;
    }
    sum / pairs.len() as f64
}
