//! Vocabularies, embedding tables, and the growable task-embedding table.
//!
//! A single character vocabulary (and optional bigram vocabulary) is shared
//! across every task; only the task table distinguishes criteria.

use std::collections::HashMap;
use std::io::BufRead;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::numerics::{xavier_uniform, Rng, Tensor1, Tensor2};
use crate::{Error, Result};

pub const UNK_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_TOKEN: &str = "<pad>";

/// Token <-> id bijection with reserved UNK (id 0) and PAD (id 1) entries.
/// Ids are assigned by frequency (descending), ties by first occurrence.
#[derive(Clone, Debug)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

/// Serializable form used by checkpoints: tokens in id order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VocabData {
    pub tokens: Vec<(String, u64)>,
}

impl Vocab {
    /// Build one shared vocabulary over several token streams. Tokens seen
    /// fewer than `min_count` times are dropped (lookups return UNK).
    pub fn build(corpora: &[Vec<String>], min_count: u64) -> Result<Vocab> {
        if corpora.iter().all(|c| c.is_empty()) {
            return Err(Error::invalid("cannot build a vocabulary from empty corpora"));
        }
        let mut counts: HashMap<&str, (u64, usize)> = HashMap::new();
        let mut order = 0usize;
        for corpus in corpora {
            for token in corpus {
                let entry = counts.entry(token.as_str()).or_insert_with(|| {
                    order += 1;
                    (0, order)
                });
                entry.0 += 1;
            }
        }
        let mut items: Vec<(&str, u64, usize)> = counts
            .into_iter()
            .filter(|(_, (c, _))| *c >= min_count)
            .map(|(t, (c, o))| (t, c, o))
            .collect();
        items.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

        let mut vocab = Vocab::reserved_only();
        for (token, count, _) in items {
            let id = vocab.id_to_token.len() as u32;
            vocab.token_to_id.insert(token.to_string(), id);
            vocab.id_to_token.push(token.to_string());
            vocab.counts.push(count);
        }
        Ok(vocab)
    }

    fn reserved_only() -> Vocab {
        Vocab {
            token_to_id: HashMap::from([
                (UNK_TOKEN.to_string(), UNK_ID),
                (PAD_TOKEN.to_string(), PAD_ID),
            ]),
            id_to_token: vec![UNK_TOKEN.to_string(), PAD_TOKEN.to_string()],
            counts: vec![0, 0],
        }
    }

    /// Lookup with UNK fallback.
    pub fn id(&self, token: &str) -> u32 {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved entries always exist
    }

    pub fn to_data(&self) -> VocabData {
        VocabData {
            tokens: self
                .id_to_token
                .iter()
                .cloned()
                .zip(self.counts.iter().copied())
                .collect(),
        }
    }

    pub fn from_data(data: &VocabData) -> Result<Vocab> {
        if data.tokens.len() < 2
            || data.tokens[0].0 != UNK_TOKEN
            || data.tokens[1].0 != PAD_TOKEN
        {
            return Err(Error::Checkpoint("vocabulary data missing reserved entries".into()));
        }
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::with_capacity(data.tokens.len());
        let mut counts = Vec::with_capacity(data.tokens.len());
        for (i, (token, count)) in data.tokens.iter().enumerate() {
            token_to_id.insert(token.clone(), i as u32);
            id_to_token.push(token.clone());
            counts.push(*count);
        }
        Ok(Vocab { token_to_id, id_to_token, counts })
    }
}

/// A dense lookup table of shape (vocab size, dim).
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub weights: Tensor2,
}

impl EmbeddingTable {
    /// Rows are drawn independently like `xavier_uniform(1, dim)` rows.
    pub fn new(vocab_size: usize, dim: usize, rng: &mut Rng) -> Result<EmbeddingTable> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::invalid("embedding table needs vocab_size, dim >= 1"));
        }
        let mut weights = Tensor2::zeros((vocab_size, dim));
        for mut row in weights.outer_iter_mut() {
            let draw = xavier_uniform(1, dim, rng)?;
            for (dst, src) in row.iter_mut().zip(draw.iter()) {
                *dst = *src;
            }
        }
        Ok(EmbeddingTable { weights })
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn vocab_size(&self) -> usize {
        self.weights.nrows()
    }

    pub fn row(&self, id: u32) -> Result<ArrayView1<'_, f64>> {
        if (id as usize) < self.vocab_size() {
            Ok(self.weights.row(id as usize))
        } else {
            Err(Error::invalid(format!("embedding id {id} out of range")))
        }
    }
}

/// Growable table of per-task embeddings. Slots beyond `registered` are
/// pre-allocated spares: already initialized, not yet addressable.
#[derive(Clone, Debug)]
pub struct TaskTable {
    pub weights: Tensor2,
    registered: usize,
}

impl TaskTable {
    pub fn new(capacity: usize, dim: usize, rng: &mut Rng) -> Result<TaskTable> {
        if capacity == 0 || dim == 0 {
            return Err(Error::invalid("task table needs capacity, dim >= 1"));
        }
        let table = EmbeddingTable::new(capacity, dim, rng)?;
        Ok(TaskTable { weights: table.weights, registered: 0 })
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn capacity(&self) -> usize {
        self.weights.nrows()
    }

    pub fn registered(&self) -> usize {
        self.registered
    }

    /// Register a new task: the smallest unused id. The row is initialized
    /// like `xavier_uniform(1, dim)`; the table grows if no spare slot is
    /// left.
    pub fn register(&mut self, rng: &mut Rng) -> Result<u32> {
        if self.registered == self.capacity() {
            let extra = EmbeddingTable::new(self.capacity().max(1), self.dim(), rng)?;
            let mut grown = Tensor2::zeros((self.capacity() * 2, self.dim()));
            grown.slice_mut(ndarray::s![..self.capacity(), ..]).assign(&self.weights);
            grown
                .slice_mut(ndarray::s![self.capacity().., ..])
                .assign(&extra.weights);
            self.weights = grown;
        }
        let id = self.registered as u32;
        let draw = xavier_uniform(1, self.dim(), rng)?;
        for (dst, src) in self.weights.row_mut(id as usize).iter_mut().zip(draw.iter()) {
            *dst = *src;
        }
        self.registered += 1;
        Ok(id)
    }

    /// Restore a table whose first `registered` rows are live.
    pub fn from_weights(weights: Tensor2, registered: usize) -> Result<TaskTable> {
        if registered > weights.nrows() {
            return Err(Error::Checkpoint("registered task count exceeds table size".into()));
        }
        Ok(TaskTable { weights, registered })
    }

    pub fn embedding(&self, id: u32) -> Result<ArrayView1<'_, f64>> {
        if (id as usize) < self.registered {
            Ok(self.weights.row(id as usize))
        } else {
            Err(Error::invalid(format!("task id {id} is not registered")))
        }
    }
}

/// A sentence encoded against the shared vocabularies: character ids plus
/// the derived bigram ids (position t pairs character t-1 with t; position 0
/// is anchored on PAD).
#[derive(Clone, Debug)]
pub struct EncodedSentence {
    pub chars: Vec<char>,
    pub char_ids: Vec<u32>,
    pub bigram_ids: Option<Vec<u32>>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }
}

/// The bigram token for position t given its predecessor.
pub fn bigram_token(prev: Option<char>, cur: char) -> String {
    match prev {
        Some(p) => format!("{p}\u{1}{cur}"),
        None => format!("{PAD_TOKEN}\u{1}{cur}"),
    }
}

pub fn encode_sentence(
    chars: &[char],
    char_vocab: &Vocab,
    bigram_vocab: Option<&Vocab>,
) -> EncodedSentence {
    let char_ids = chars
        .iter()
        .map(|c| char_vocab.id(&c.to_string()))
        .collect();
    let bigram_ids = bigram_vocab.map(|v| {
        chars
            .iter()
            .enumerate()
            .map(|(t, &c)| v.id(&bigram_token(if t == 0 { None } else { Some(chars[t - 1]) }, c)))
            .collect()
    });
    EncodedSentence { chars: chars.to_vec(), char_ids, bigram_ids }
}

/// Collect the bigram tokens of a character sequence (for vocab building).
pub fn bigram_tokens(chars: &[char]) -> Vec<String> {
    chars
        .iter()
        .enumerate()
        .map(|(t, &c)| bigram_token(if t == 0 { None } else { Some(chars[t - 1]) }, c))
        .collect()
}

/// The per-position input vector: unigram embedding concatenated with the
/// bigram embedding when the bigram channel is enabled. `t` is 0-based.
pub fn input_vector(
    sentence: &EncodedSentence,
    t: usize,
    char_table: &EmbeddingTable,
    bigram_table: Option<&EmbeddingTable>,
) -> Result<Tensor1> {
    if t >= sentence.len() {
        return Err(Error::invalid(format!(
            "position {t} out of range for sentence of length {}",
            sentence.len()
        )));
    }
    let uni = char_table.row(sentence.char_ids[t])?;
    match (bigram_table, &sentence.bigram_ids) {
        (Some(table), Some(ids)) => {
            let bi = table.row(ids[t])?;
            let mut out = Tensor1::zeros(uni.len() + bi.len());
            out.slice_mut(ndarray::s![..uni.len()]).assign(&uni);
            out.slice_mut(ndarray::s![uni.len()..]).assign(&bi);
            Ok(out)
        }
        (None, _) => Ok(uni.to_owned()),
        (Some(_), None) => Err(Error::invalid(
            "bigram table configured but sentence was encoded without bigrams",
        )),
    }
}

/// Coverage report from pretrained-vector loading.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coverage {
    pub matched: usize,
    pub total: usize,
}

/// Load word2vec-style text vectors: an optional `count dim` header line,
/// then one `token v1 .. vd` line per token. Rows for in-vocabulary tokens
/// are overwritten; everything else keeps its initialization.
pub fn load_pretrained_vectors(
    reader: impl BufRead,
    source_name: &str,
    vocab: &Vocab,
    table: &mut EmbeddingTable,
) -> Result<Coverage> {
    let dim = table.dim();
    let mut matched = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if idx == 0 && fields.len() == 2 {
            if let (Ok(_), Ok(file_dim)) = (fields[0].parse::<u64>(), fields[1].parse::<usize>()) {
                if file_dim != dim {
                    return Err(Error::Format {
                        source_name: source_name.to_string(),
                        line: 1,
                        message: format!("vector dimension {file_dim} does not match table dim {dim}"),
                    });
                }
                continue;
            }
        }
        if fields.len() != dim + 1 {
            return Err(Error::Format {
                source_name: source_name.to_string(),
                line: idx + 1,
                message: format!("expected 1 token + {dim} values, found {} fields", fields.len()),
            });
        }
        let token = fields[0];
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        let mut row = table.weights.row_mut(id as usize);
        for (j, value) in fields[1..].iter().enumerate() {
            let v: f64 = value.parse().map_err(|_| Error::Format {
                source_name: source_name.to_string(),
                line: idx + 1,
                message: format!("field {} is not a number", j + 2),
            })?;
            row[j] = v;
        }
        matched += 1;
    }
    Ok(Coverage { matched, total: vocab.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng_from_seed;
    use std::io::Cursor;

    fn char_tokens(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn vocab_build_and_lookup() {
        let v = Vocab::build(&[char_tokens("ab"), char_tokens("ba")], 1).unwrap();
        // UNK, PAD, then a and b (tie on frequency -> first occurrence).
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.id("z"), UNK_ID);
        assert_eq!(v.token(2), Some("a"));
    }

    #[test]
    fn vocab_min_count_maps_rare_tokens_to_unk() {
        let v = Vocab::build(&[char_tokens("aab")], 2).unwrap();
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn vocab_is_shared_across_corpora() {
        let corpora: Vec<Vec<String>> = (0..8).map(|_| char_tokens("xy")).collect();
        let v = Vocab::build(&corpora, 1).unwrap();
        for _ in 0..8 {
            assert_eq!(v.id("x"), v.id("x"));
        }
        assert_eq!(v.len(), 4);
    }

    #[test]
    fn vocab_rejects_empty_input() {
        assert!(Vocab::build(&[vec![]], 1).is_err());
    }

    #[test]
    fn vocab_round_trips_ids() {
        let v = Vocab::build(&[char_tokens("abcab")], 1).unwrap();
        for id in 0..v.len() as u32 {
            let token = v.token(id).unwrap().to_string();
            assert_eq!(v.id(&token), id);
        }
        let restored = Vocab::from_data(&v.to_data()).unwrap();
        assert_eq!(restored.len(), v.len());
        assert_eq!(restored.id("c"), v.id("c"));
    }

    #[test]
    fn input_vector_layout() {
        let mut rng = rng_from_seed(3);
        let cv = Vocab::build(&[char_tokens("ab")], 1).unwrap();
        let chars: Vec<char> = "ab".chars().collect();
        let bv = Vocab::build(&[bigram_tokens(&chars)], 1).unwrap();
        let ct = EmbeddingTable::new(cv.len(), 4, &mut rng).unwrap();
        let bt = EmbeddingTable::new(bv.len(), 3, &mut rng).unwrap();

        let enc = encode_sentence(&chars, &cv, Some(&bv));
        let x = input_vector(&enc, 1, &ct, Some(&bt)).unwrap();
        assert_eq!(x.len(), 7);

        // Bigram channel disabled: exactly the unigram row.
        let enc_plain = encode_sentence(&chars, &cv, None);
        let x0 = input_vector(&enc_plain, 0, &ct, None).unwrap();
        assert_eq!(x0, ct.row(enc_plain.char_ids[0]).unwrap().to_owned());

        // Position 0 uses the PAD-anchored bigram.
        let first = bigram_token(None, 'a');
        assert_eq!(enc.bigram_ids.as_ref().unwrap()[0], bv.id(&first));

        // Unseen character resolves to the UNK row.
        let enc_unk = encode_sentence(&['z'], &cv, None);
        let xu = input_vector(&enc_unk, 0, &ct, None).unwrap();
        assert_eq!(xu, ct.row(UNK_ID).unwrap().to_owned());

        assert!(input_vector(&enc, 2, &ct, Some(&bt)).is_err());
    }

    #[test]
    fn input_vector_length_constant_across_positions() {
        let mut rng = rng_from_seed(4);
        let cv = Vocab::build(&[char_tokens("abcd")], 1).unwrap();
        let chars: Vec<char> = "dcba".chars().collect();
        let bv = Vocab::build(&[bigram_tokens(&chars)], 1).unwrap();
        let ct = EmbeddingTable::new(cv.len(), 5, &mut rng).unwrap();
        let bt = EmbeddingTable::new(bv.len(), 5, &mut rng).unwrap();
        let enc = encode_sentence(&chars, &cv, Some(&bv));
        let lens: Vec<usize> = (0..4)
            .map(|t| input_vector(&enc, t, &ct, Some(&bt)).unwrap().len())
            .collect();
        assert!(lens.iter().all(|&l| l == lens[0]));
    }

    #[test]
    fn pretrained_loading_coverage_and_idempotence() {
        let mut rng = rng_from_seed(5);
        let v = Vocab::build(&[char_tokens("abcde")], 1).unwrap();
        let mut t = EmbeddingTable::new(v.len(), 2, &mut rng).unwrap();
        let before = t.weights.clone();

        let text = "a 1.0 2.0\nzz 9.0 9.0\nb -1.0 0.5\n";
        let cov = load_pretrained_vectors(Cursor::new(text), "vec", &v, &mut t).unwrap();
        assert_eq!(cov, Coverage { matched: 2, total: v.len() });
        assert_eq!(t.weights.row(v.id("a") as usize).to_vec(), vec![1.0, 2.0]);
        assert_eq!(t.weights.row(v.id("b") as usize).to_vec(), vec![-1.0, 0.5]);
        // Uncovered rows untouched.
        assert_eq!(t.weights.row(v.id("c") as usize), before.row(v.id("c") as usize));

        // Loading the same stream twice changes nothing further.
        let snapshot = t.weights.clone();
        load_pretrained_vectors(Cursor::new(text), "vec", &v, &mut t).unwrap();
        assert_eq!(t.weights, snapshot);
    }

    #[test]
    fn pretrained_loading_empty_and_errors() {
        let mut rng = rng_from_seed(6);
        let v = Vocab::build(&[char_tokens("ab")], 1).unwrap();
        let mut t = EmbeddingTable::new(v.len(), 2, &mut rng).unwrap();
        let before = t.weights.clone();
        let cov = load_pretrained_vectors(Cursor::new(""), "vec", &v, &mut t).unwrap();
        assert_eq!(cov, Coverage { matched: 0, total: v.len() });
        assert_eq!(t.weights, before);

        let err = load_pretrained_vectors(Cursor::new("a 1.0\n"), "vec", &v, &mut t).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected {other:?}"),
        }

        // Header with mismatched dimension is rejected up front.
        let err =
            load_pretrained_vectors(Cursor::new("10 3\n"), "vec", &v, &mut t).unwrap_err();
        assert!(matches!(err, Error::Format { line: 1, .. }));
    }

    #[test]
    fn task_table_registration() {
        let mut rng = rng_from_seed(8);
        let mut t = TaskTable::new(4, 20, &mut rng).unwrap();
        assert!(t.embedding(0).is_err());
        assert_eq!(t.register(&mut rng).unwrap(), 0);
        assert!(t.embedding(0).is_ok());
        for expect in 1..8 {
            assert_eq!(t.register(&mut rng).unwrap(), expect);
        }
        assert_eq!(t.registered(), 8);
        assert!(t.capacity() >= 8);
        // Rows are distinct with overwhelming probability.
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert_ne!(t.embedding(i).unwrap(), t.embedding(j).unwrap());
            }
        }
        assert!(t.embedding(8).is_err());
    }
}
