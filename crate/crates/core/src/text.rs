//! Lowercasing byte-pair-encoding codec.
//!
//! Text is split into chunks of an optional single leading whitespace
//! character followed by a run of non-whitespace characters (a whitespace
//! character followed by more whitespace forms a chunk of its own). Merges
//! never cross chunk boundaries, and concatenating the chunks reproduces the
//! text exactly.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::MAX_TEXT_LEN;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;

/// Text substituted for unknown-symbol ids when decoding.
pub const UNK_GLYPH: &str = "<unk>";

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>"];
const FILE_MAGIC: &str = "lvqa-bpe";
const FILE_VERSION: u32 = 1;

/// Token ids wrapped in begin/end markers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids between the markers.
    pub fn body(&self) -> &[usize] {
        let start = usize::from(self.ids.first() == Some(&BOS));
        let end = if self.ids.len() > start && self.ids.last() == Some(&EOS) {
            self.ids.len() - 1
        } else {
            self.ids.len()
        };
        &self.ids[start..end]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    max_len: usize,
}

/// Splits lowercased text into merge-isolated chunks.
pub fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if c.is_whitespace() {
            match iter.peek() {
                Some(&(_, n)) if !n.is_whitespace() => continue,
                _ => {
                    out.push(&text[start..i + c.len_utf8()]);
                    start = i + c.len_utf8();
                }
            }
        } else if iter.peek().is_none_or(|&(_, n)| n.is_whitespace()) {
            out.push(&text[start..i + c.len_utf8()]);
            start = i + c.len_utf8();
        }
    }
    out
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns merges until the vocabulary reaches `vocab_size` or no adjacent
/// pair remains.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Contract("cannot train a codec on an empty corpus".into()));
    }
    let mut words: BTreeMap<String, usize> = BTreeMap::new();
    for line in corpus {
        let lower = line.as_ref().to_lowercase();
        for chunk in chunks(&lower) {
            *words.entry(chunk.to_string()).or_default() += 1;
        }
    }
    let mut charset: Vec<char> = words.keys().flat_map(|w| w.chars()).collect();
    charset.sort_unstable();
    charset.dedup();
    let base = NUM_SPECIALS + charset.len();
    if vocab_size < base {
        return Err(Error::Contract(format!(
            "vocab size {vocab_size} is below the {base} base symbols"
        )));
    }

    let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
    tokens.extend(charset.iter().map(char::to_string));
    let mut split: Vec<(Vec<String>, usize)> = words
        .into_iter()
        .map(|(w, n)| (w.chars().map(String::from).collect(), n))
        .collect();
    let mut merges = Vec::new();
    let mut known: HashMap<String, usize> = tokens
        .iter()
        .enumerate()
        .skip(NUM_SPECIALS)
        .map(|(i, t)| (t.clone(), i))
        .collect();

    while tokens.len() < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (symbols, n) in &split {
            for w in symbols.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += n;
            }
        }
        // BTreeMap iterates in lexicographic order, so the first maximum wins ties.
        let mut best: Option<((&str, &str), usize)> = None;
        for (&pair, &n) in &counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((pair, n));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (symbols, _) in split.iter_mut() {
            if symbols.len() > 1 {
                *symbols = merge_pair(symbols, &l, &r);
            }
        }
        let merged = format!("{l}{r}");
        if !known.contains_key(&merged) {
            known.insert(merged.clone(), tokens.len());
            tokens.push(merged);
        }
        merges.push((l, r));
    }
    Vocab::from_parts(tokens, merges, MAX_TEXT_LEN)
}

impl Vocab {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>, max_len: usize) -> Result<Self> {
        if tokens.len() < NUM_SPECIALS {
            return Err(Error::Data("vocabulary lacks the special tokens".into()));
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate().skip(NUM_SPECIALS) {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate token {t:?}")));
            }
        }
        let mut ranks = HashMap::new();
        for (i, (l, r)) in merges.iter().enumerate() {
            if !index.contains_key(&format!("{l}{r}")) {
                return Err(Error::Data(format!("merge ({l:?}, {r:?}) has no token")));
            }
            ranks.entry((l.clone(), r.clone())).or_insert(i);
        }
        Ok(Vocab {
            tokens,
            index,
            merges,
            ranks,
            max_len,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Sets the total sequence length limit, markers included.
    pub fn with_max_len(mut self, max_len: usize) -> Result<Self> {
        if !(2..=MAX_TEXT_LEN).contains(&max_len) {
            return Err(Error::Config(format!("max_len must be in 2..={MAX_TEXT_LEN}")));
        }
        self.max_len = max_len;
        Ok(self)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    fn encode_chunk(&self, chunk: &str, out: &mut Vec<usize>) {
        let mut symbols: Vec<Option<String>> = chunk
            .chars()
            .map(|c| {
                let s = c.to_string();
                self.index.contains_key(&s).then_some(s)
            })
            .collect();
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..symbols.len().saturating_sub(1) {
                if let (Some(l), Some(r)) = (&symbols[i], &symbols[i + 1]) {
                    if let Some(&rank) = self.ranks.get(&(l.clone(), r.clone())) {
                        if best.is_none_or(|(b, _)| rank < b) {
                            best = Some((rank, i));
                        }
                    }
                }
            }
            let Some((rank, _)) = best else { break };
            let (l, r) = &self.merges[rank];
            let mut next = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                let hit = i + 1 < symbols.len()
                    && symbols[i].as_deref() == Some(l.as_str())
                    && symbols[i + 1].as_deref() == Some(r.as_str());
                if hit {
                    next.push(Some(format!("{l}{r}")));
                    i += 2;
                } else {
                    next.push(symbols[i].take());
                    i += 1;
                }
            }
            symbols = next;
        }
        out.extend(symbols.iter().map(|s| match s {
            Some(s) => self.index[s],
            None => UNK,
        }));
    }

    /// Encodes `text`, keeping at most `max_len - 2` body tokens.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let lower = text.to_lowercase();
        let mut ids = vec![BOS];
        for chunk in chunks(&lower) {
            self.encode_chunk(chunk, &mut ids);
            if ids.len() > self.max_len - 1 {
                break;
            }
        }
        ids.truncate(self.max_len - 1);
        ids.push(EOS);
        TokenSequence { ids }
    }

    /// Concatenates token strings, dropping markers and padding.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                UNK => out.push_str(UNK_GLYPH),
                _ => out.push_str(self.tokens.get(id).ok_or_else(|| {
                    Error::Tensor(lvqa_tensor::TensorError::IndexOutOfRange {
                        op: "decode",
                        index: id,
                        bound: self.tokens.len(),
                    })
                })?),
            }
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{FILE_MAGIC} {FILE_VERSION}");
        let _ = writeln!(s, "tokens {}", self.tokens.len());
        let _ = writeln!(s, "merges {}", self.merges.len());
        let _ = writeln!(s, "max_len {}", self.max_len);
        let _ = writeln!(s, "specials {}", SPECIAL_NAMES.join(" "));
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{} {}", escape(l), escape(r));
        }
        for t in &self.tokens[NUM_SPECIALS..] {
            let _ = writeln!(s, "{}", escape(t));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("vocab file: {what}"));
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| bad(&format!("expected `{key}`")))
        };
        if header(FILE_MAGIC)?.parse::<u32>().ok() != Some(FILE_VERSION) {
            return Err(bad("unsupported version"));
        }
        let parse = |v: String| v.parse::<usize>().map_err(|_| bad("bad count"));
        let n_tokens = parse(header("tokens")?)?;
        let n_merges = parse(header("merges")?)?;
        let max_len = parse(header("max_len")?)?;
        if header("specials")? != SPECIAL_NAMES.join(" ") {
            return Err(bad("unexpected special tokens"));
        }
        if n_tokens < NUM_SPECIALS {
            return Err(bad("too few tokens"));
        }
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let line = lines.next().ok_or_else(|| bad("truncated merges"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad("malformed merge"))?;
            merges.push((unescape(l)?, unescape(r)?));
        }
        let mut tokens: Vec<String> = SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        for _ in NUM_SPECIALS..n_tokens {
            let line = lines.next().ok_or_else(|| bad("truncated token table"))?;
            tokens.push(unescape(line)?);
        }
        if lines.next().is_some() {
            return Err(bad("trailing content"));
        }
        Vocab::from_parts(tokens, merges, max_len)?.with_max_len(max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_text(&text)
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c if c.is_whitespace() || c.is_control() => {
                let _ = write!(out, "\\u{{{:x}}}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Result<String> {
    let bad = || Error::Data(format!("vocab file: bad escape in {s:?}"));
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next().ok_or_else(bad)? {
            '\\' => out.push('\\'),
            's' => out.push(' '),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            'u' => {
                if it.next() != Some('{') {
                    return Err(bad());
                }
                let hex: String = it.by_ref().take_while(|&c| c != '}').collect();
                let code = u32::from_str_radix(&hex, 16).map_err(|_| bad())?;
                out.push(char::from_u32(code).ok_or_else(bad)?);
            }
            _ => return Err(bad()),
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus() -> Vec<&'static str> {
        vec![
            "no acute findings.",
            "the left effusion is worsening.",
            "there is a new right opacity.",
            "nothing has changed.",
        ]
    }

    #[test]
    fn chunking_roundtrips() {
        let s = " a  bc\tdef \n";
        let c = chunks(s);
        assert_eq!(c, vec![" a", " ", " bc", "\tdef", " ", "\n"]);
        assert_eq!(c.concat(), s);
        assert!(chunks("").is_empty());
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // pairs in "aaab": (a,a) twice, (a,b) once
        let v = train_bpe(&["aaab"], NUM_SPECIALS + 2 + 1).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "a".to_string()));
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = train_bpe(&["ba dc"], NUM_SPECIALS + 5 + 1).unwrap();
        assert_eq!(v.merges()[0], (" ".to_string(), "d".to_string()));
    }

    #[test]
    fn minimal_vocab_is_character_level() {
        let chars = 3 + NUM_SPECIALS;
        let v = train_bpe(&["abc"], chars).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.encode("cab").ids, vec![BOS, 6, 4, 5, EOS]);
        assert!(train_bpe(&["abc"], chars - 1).is_err());
        assert!(train_bpe::<&str>(&[], 100).is_err());
    }

    #[test]
    fn empty_text_and_markers() {
        let v = train_bpe(&corpus(), 60).unwrap();
        assert_eq!(v.encode("").ids, vec![BOS, EOS]);
        assert_eq!(v.decode(&[BOS, EOS]).unwrap(), "");
        assert_eq!(v.decode(&v.encode("no acute findings").ids).unwrap(), "no acute findings");
    }

    #[test]
    fn corpus_roundtrip_and_lowercasing() {
        let v = train_bpe(&corpus(), 80).unwrap();
        for s in corpus() {
            assert_eq!(v.decode(&v.encode(s).ids).unwrap(), s);
        }
        assert_eq!(v.decode(&v.encode("NO Acute").ids).unwrap(), "no acute");
    }

    #[test]
    fn unknown_symbols_decode_to_glyph() {
        let v = train_bpe(&corpus(), 60).unwrap();
        let seq = v.encode("no $ change");
        assert!(seq.ids.contains(&UNK));
        assert_eq!(v.decode(&seq.ids).unwrap(), format!("no {UNK_GLYPH} change"));
        assert!(v.decode(&[v.len()]).is_err());
    }

    #[test]
    fn long_text_truncates_to_limit() {
        let v = train_bpe(&corpus(), 80).unwrap();
        let long: String = "the left opacity is new. ".repeat(20);
        assert_eq!(long.len(), 500);
        let seq = v.encode(&long);
        assert_eq!(seq.len(), MAX_TEXT_LEN);
        assert_eq!(seq.ids[0], BOS);
        assert_eq!(*seq.ids.last().unwrap(), EOS);
        assert!(!seq.body().contains(&PAD));
        let short = v.clone().with_max_len(5).unwrap().encode(&long);
        assert_eq!(short.len(), 5);
    }

    #[test]
    fn file_roundtrip() {
        let v = train_bpe(&["a b\\c\td\u{a0}e", "aa bb aa"], 40).unwrap();
        let text = v.to_text();
        let back = Vocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(Vocab::from_text(&text.replace("lvqa-bpe 1", "lvqa-bpe 9")).is_err());
        assert!(Vocab::from_text(&text[..text.len() - 3]).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_bpe(&corpus(), 70).unwrap();
        let b = train_bpe(&corpus(), 70).unwrap();
        assert_eq!(a.to_text(), b.to_text());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn roundtrip_over_training_charset(s in "[a-e .,]{0,60}", size in 20usize..60) {
            let v = train_bpe(&["abcde ., ab cd ee", "a.b,c d"], size).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s).ids).unwrap(), s);
        }
    }
}
