//! Segmented-corpus ingestion and BMES label handling.
//!
//! A corpus file is UTF-8, one sentence per line, words separated by
//! whitespace. Characters are Unicode scalar values. An optional two-column
//! character mapping file (source TAB target, one pair per line) can be
//! applied at ingestion, e.g. to fold traditional forms onto simplified ones.

use std::collections::{HashMap, HashSet};
use std::io::BufRead;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::numerics::rng_from_seed;
use crate::{Error, Result};

/// Per-character segmentation label: begin / middle / end of a multi-char
/// word, or a single-character word. The declaration order defines the
/// label order used for deterministic tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    B = 0,
    M = 1,
    E = 2,
    S = 3,
}

pub const NUM_LABELS: usize = 4;

impl Label {
    pub const ALL: [Label; NUM_LABELS] = [Label::B, Label::M, Label::E, Label::S];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_char(self) -> char {
        match self {
            Label::B => 'B',
            Label::M => 'M',
            Label::E => 'E',
            Label::S => 'S',
        }
    }
}

/// A sentence as a list of non-empty words; concatenating the words yields
/// the raw character sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentedSentence {
    words: Vec<String>,
}

impl SegmentedSentence {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.iter().any(|w| w.is_empty()) {
            return Err(Error::invalid("segmented sentence contains an empty word"));
        }
        Ok(SegmentedSentence { words })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn chars(&self) -> Vec<char> {
        self.words.iter().flat_map(|w| w.chars()).collect()
    }

    pub fn char_len(&self) -> usize {
        self.words.iter().map(|w| w.chars().count()).sum()
    }

    pub fn surface(&self) -> String {
        self.words.concat()
    }

    /// Words rendered as a single space-joined line.
    pub fn to_line(&self) -> String {
        self.words.join(" ")
    }
}

/// Optional character-to-character rewrite applied at ingestion.
#[derive(Clone, Debug, Default)]
pub struct CharMap {
    map: HashMap<char, char>,
}

impl CharMap {
    pub fn from_reader(reader: impl BufRead, source_name: &str) -> Result<CharMap> {
        let mut map = HashMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (from, to) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => {
                    return Err(Error::Format {
                        source_name: source_name.to_string(),
                        line: idx + 1,
                        message: "expected exactly two tab-separated fields".into(),
                    })
                }
            };
            let (fa, fb) = (from.chars().collect::<Vec<_>>(), to.chars().collect::<Vec<_>>());
            if fa.len() != 1 || fb.len() != 1 {
                return Err(Error::Format {
                    source_name: source_name.to_string(),
                    line: idx + 1,
                    message: "each field must be a single character".into(),
                });
            }
            map.insert(fa[0], fb[0]);
        }
        Ok(CharMap { map })
    }

    pub fn apply_char(&self, c: char) -> char {
        *self.map.get(&c).unwrap_or(&c)
    }

    pub fn apply_str(&self, s: &str) -> String {
        s.chars().map(|c| self.apply_char(c)).collect()
    }
}

/// Read a whitespace-segmented corpus. Empty lines are skipped; invalid
/// UTF-8 is reported with its 1-based line number.
pub fn read_segmented(
    reader: impl BufRead,
    source_name: &str,
    map: Option<&CharMap>,
) -> Result<Vec<SegmentedSentence>> {
    let mut out = Vec::new();
    for (idx, raw) in reader.split(b'\n').enumerate() {
        let mut bytes = raw?;
        if bytes.last() == Some(&b'\r') {
            bytes.pop();
        }
        let line = String::from_utf8(bytes).map_err(|e| Error::Format {
            source_name: source_name.to_string(),
            line: idx + 1,
            message: format!("invalid UTF-8: {e}"),
        })?;
        let words: Vec<String> = line
            .split_whitespace()
            .map(|w| match map {
                Some(m) => m.apply_str(w),
                None => w.to_string(),
            })
            .collect();
        if words.is_empty() {
            continue;
        }
        out.push(SegmentedSentence::new(words)?);
    }
    Ok(out)
}

/// Label every character of a segmentation: length-1 words become S, longer
/// words become B M... E.
pub fn to_bmes(sentence: &SegmentedSentence) -> Vec<Label> {
    let mut labels = Vec::with_capacity(sentence.char_len());
    for word in sentence.words() {
        let n = word.chars().count();
        if n == 1 {
            labels.push(Label::S);
        } else {
            labels.push(Label::B);
            for _ in 0..n - 2 {
                labels.push(Label::M);
            }
            labels.push(Label::E);
        }
    }
    labels
}

/// Reconstruct a segmentation from labels. Exact inverse of [`to_bmes`] on
/// valid sequences; invalid sequences are repaired deterministically: a word
/// opens at every B or S (closing any word still open), S and E close the
/// word at their own position, and a trailing open word closes at the end.
pub fn from_bmes(chars: &[char], labels: &[Label]) -> Result<SegmentedSentence> {
    if chars.len() != labels.len() {
        return Err(Error::invalid(format!(
            "character/label length mismatch: {} vs {}",
            chars.len(),
            labels.len()
        )));
    }
    let mut words = Vec::new();
    let mut start: Option<usize> = None;
    let close = |s: usize, e: usize, words: &mut Vec<String>| {
        words.push(chars[s..=e].iter().collect());
    };
    for (t, &label) in labels.iter().enumerate() {
        match label {
            Label::B | Label::S => {
                if let Some(s) = start.take() {
                    close(s, t - 1, &mut words);
                }
                if label == Label::S {
                    close(t, t, &mut words);
                } else {
                    start = Some(t);
                }
            }
            Label::M => {
                if start.is_none() {
                    start = Some(t);
                }
            }
            Label::E => {
                let s = start.take().unwrap_or(t);
                close(s, t, &mut words);
            }
        }
    }
    if let Some(s) = start {
        close(s, chars.len() - 1, &mut words);
    }
    SegmentedSentence::new(words)
}

/// Deterministic split into (train, dev) keeping the original order within
/// each part. dev size is round(fraction * N).
pub fn split_train_dev(
    corpus: &[SegmentedSentence],
    fraction: f64,
    seed: u64,
) -> (Vec<SegmentedSentence>, Vec<SegmentedSentence>) {
    let n = corpus.len();
    let dev_size = ((fraction * n as f64).round() as usize).min(n);
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(seed);
    indices.shuffle(&mut rng);
    let dev_set: HashSet<usize> = indices.into_iter().take(dev_size).collect();
    let mut train = Vec::with_capacity(n - dev_size);
    let mut dev = Vec::with_capacity(dev_size);
    for (i, s) in corpus.iter().enumerate() {
        if dev_set.contains(&i) {
            dev.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, dev)
}

/// Word types seen in training, used for OOV bookkeeping.
pub fn word_types(corpus: &[SegmentedSentence]) -> HashSet<String> {
    corpus
        .iter()
        .flat_map(|s| s.words().iter().cloned())
        .collect()
}

/// Gold word tokens in `eval_gold` whose type never occurs as a word in
/// `train`, plus the token-level OOV rate.
pub fn oov_words(
    train: &[SegmentedSentence],
    eval_gold: &[SegmentedSentence],
) -> (HashSet<String>, f64) {
    let train_types = word_types(train);
    let mut oov = HashSet::new();
    let mut oov_tokens = 0usize;
    let mut total_tokens = 0usize;
    for s in eval_gold {
        for w in s.words() {
            total_tokens += 1;
            if !train_types.contains(w) {
                oov_tokens += 1;
                oov.insert(w.clone());
            }
        }
    }
    let rate = if total_tokens == 0 {
        0.0
    } else {
        oov_tokens as f64 / total_tokens as f64
    };
    (oov, rate)
}

/// Corpus summary counters.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub sentences: usize,
    pub tokens: usize,
    pub chars: usize,
    pub dict_size: usize,
    pub char_types: usize,
    pub oov_rate: Option<f64>,
}

pub fn stats(corpus: &[SegmentedSentence], train_dict: Option<&HashSet<String>>) -> CorpusStats {
    let mut tokens = 0usize;
    let mut chars = 0usize;
    let mut dict = HashSet::new();
    let mut char_set = HashSet::new();
    let mut oov_tokens = 0usize;
    for s in corpus {
        for w in s.words() {
            tokens += 1;
            chars += w.chars().count();
            dict.insert(w.as_str());
            char_set.extend(w.chars());
            if let Some(td) = train_dict {
                if !td.contains(w) {
                    oov_tokens += 1;
                }
            }
        }
    }
    CorpusStats {
        sentences: corpus.len(),
        tokens,
        chars,
        dict_size: dict.len(),
        char_types: char_set.len(),
        oov_rate: train_dict.map(|_| {
            if tokens == 0 {
                0.0
            } else {
                oov_tokens as f64 / tokens as f64
            }
        }),
    }
}

pub const STATS_TSV_HEADER: &str = "corpus\ttokens\tchars\tdict_size\tchar_types\tsentences\toov_rate";

pub fn stats_tsv_row(name: &str, s: &CorpusStats) -> String {
    let oov = match s.oov_rate {
        Some(r) => format!("{:.4}", r),
        None => "-".to_string(),
    };
    format!(
        "{}\t{}\t{}\t{}\t{}\t{}\t{}",
        name, s.tokens, s.chars, s.dict_size, s.char_types, s.sentences, oov
    )
}

/// Split sentences longer than `cap` characters at gold word boundaries,
/// greedily packing words up to the cap. Used on training data only; a
/// single word longer than the cap is kept whole.
pub fn split_long(sentences: &[SegmentedSentence], cap: usize) -> Vec<SegmentedSentence> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        if s.char_len() <= cap {
            out.push(s.clone());
            continue;
        }
        let mut cur: Vec<String> = Vec::new();
        let mut cur_len = 0usize;
        for w in s.words() {
            let wl = w.chars().count();
            if cur_len + wl > cap && !cur.is_empty() {
                out.push(SegmentedSentence::new(std::mem::take(&mut cur)).unwrap());
                cur_len = 0;
            }
            cur.push(w.clone());
            cur_len += wl;
        }
        if !cur.is_empty() {
            out.push(SegmentedSentence::new(cur).unwrap());
        }
    }
    out
}
