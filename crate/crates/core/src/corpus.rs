//! Sentence corpora, character vocabularies and fixed-length encodings.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Display character for the padding symbol.
pub const PAD_SYMBOL: char = '\u{2400}';
/// Display character for the unknown-character symbol.
pub const UNK_SYMBOL: char = '\u{FFFD}';

/// Character ↔ index bijection. Corpus characters come first in rank order
/// (descending frequency, ties by ascending code point); the pad and unk
/// symbols occupy the last two indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    chars: Vec<char>,
    index: HashMap<char, usize>,
    pad_id: usize,
    unk_id: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from ranked corpus characters.
    pub fn from_ranked(ranked: Vec<char>) -> Result<Self> {
        let mut chars = Vec::with_capacity(ranked.len() + 2);
        let mut index = HashMap::with_capacity(ranked.len() + 2);
        for c in ranked {
            if c == PAD_SYMBOL || c == UNK_SYMBOL {
                return Err(Error::InvalidArgument(format!(
                    "character {c:?} is reserved for padding/unknown"
                )));
            }
            if index.insert(c, chars.len()).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate character {c:?}")));
            }
            chars.push(c);
        }
        let pad_id = chars.len();
        let unk_id = pad_id + 1;
        chars.push(PAD_SYMBOL);
        chars.push(UNK_SYMBOL);
        index.insert(PAD_SYMBOL, pad_id);
        index.insert(UNK_SYMBOL, unk_id);
        Ok(Vocabulary {
            chars,
            index,
            pad_id,
            unk_id,
        })
    }

    /// Total number of symbols, including pad and unk.
    pub fn size(&self) -> usize {
        self.chars.len()
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn unk_id(&self) -> usize {
        self.unk_id
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Corpus characters only, in rank order.
    pub fn corpus_chars(&self) -> &[char] {
        &self.chars[..self.pad_id]
    }

    pub fn index_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn symbol(&self, id: usize) -> Option<char> {
        self.chars.get(id).copied()
    }

    /// Maps characters through the vocabulary, substituting unk for unknown
    /// characters, then right-pads with pad or truncates to exactly `seq_len`.
    pub fn encode(&self, sentence: &str, seq_len: usize) -> EncodedSentence {
        let mut ids: Vec<usize> = sentence
            .chars()
            .take(seq_len)
            .map(|c| match self.index.get(&c) {
                Some(&i) if i != self.pad_id => i,
                _ => self.unk_id,
            })
            .collect();
        ids.resize(seq_len, self.pad_id);
        EncodedSentence { ids }
    }

    /// Text form: `pad=<id>` and `unk=<id>` header lines, then one corpus
    /// character per line in rank order.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("pad={}\nunk={}\n", self.pad_id, self.unk_id);
        for c in self.corpus_chars() {
            s.push(*c);
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.split('\n');
        let mut header = |key: &str, line_no: usize| -> Result<usize> {
            let line = lines.next().unwrap_or("");
            line.strip_prefix(key)
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Config {
                    location: format!("vocabulary line {line_no}"),
                    message: format!("expected `{key}=<index>`, found {line:?}"),
                })
        };
        let pad = header("pad", 1)?;
        let unk = header("unk", 2)?;
        let mut ranked = Vec::new();
        for (i, line) in lines.enumerate() {
            let mut it = line.chars();
            match (it.next(), it.next()) {
                (None, _) => continue,
                (Some(c), None) => ranked.push(c),
                _ => {
                    return Err(Error::Config {
                        location: format!("vocabulary line {}", i + 3),
                        message: format!("expected a single character, found {line:?}"),
                    })
                }
            }
        }
        let vocab = Vocabulary::from_ranked(ranked)?;
        if vocab.pad_id != pad || vocab.unk_id != unk {
            return Err(Error::Config {
                location: "vocabulary line 1".into(),
                message: format!(
                    "pad/unk indices {pad}/{unk} do not match {} listed characters",
                    vocab.pad_id
                ),
            });
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Keeps the `max_chars` most frequent characters (ties broken by code
/// point) and appends pad and unk.
pub fn build_vocab<I, T>(lines: I, max_chars: usize) -> Result<Vocabulary>
where
    I: IntoIterator<Item = T>,
    T: AsRef<str>,
{
    if max_chars == 0 {
        return Err(Error::InvalidArgument("max_chars must be at least 1".into()));
    }
    let mut counts: HashMap<char, u64> = HashMap::new();
    for line in lines {
        for c in line.as_ref().chars() {
            if c != PAD_SYMBOL && c != UNK_SYMBOL {
                *counts.entry(c).or_default() += 1;
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(char, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(max_chars);
    Vocabulary::from_ranked(ranked.into_iter().map(|(c, _)| c).collect())
}

/// Reads a UTF-8 corpus, one sentence per line. Blank lines are skipped and a
/// trailing carriage return is removed.
pub fn read_corpus(path: &Path, lowercase: bool) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(split_corpus(&text, lowercase))
}

pub fn split_corpus(text: &str, lowercase: bool) -> Vec<String> {
    text.lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.is_empty())
        .map(|l| if lowercase { l.to_lowercase() } else { l.to_string() })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
}

impl EncodedSentence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A sentence as a `T×V` indicator matrix, stored by its hot indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotSequence {
    ids: Vec<usize>,
    vocab_size: usize,
}

impl OneHotSequence {
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn to_matrix<S: Scalar>(&self) -> Tensor<S> {
        let mut m = Tensor::zeros(self.ids.len(), self.vocab_size);
        for (t, &id) in self.ids.iter().enumerate() {
            m.set(t, id, S::one());
        }
        m
    }
}

pub fn one_hot(enc: &EncodedSentence, vocab_size: usize) -> Result<OneHotSequence> {
    if let Some(&id) = enc.ids.iter().find(|&&id| id >= vocab_size) {
        return Err(Error::IndexOutOfRange {
            id,
            size: vocab_size,
        });
    }
    Ok(OneHotSequence {
        ids: enc.ids.clone(),
        vocab_size,
    })
}

/// `m` encoded sentences sharing `T` and `V`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    ids: Vec<usize>,
    size: usize,
    seq_len: usize,
    vocab_size: usize,
}

impl Batch {
    pub fn new(sentences: &[&EncodedSentence], vocab_size: usize) -> Result<Self> {
        let first = sentences
            .first()
            .ok_or(Error::EmptyInput("batch has no sentences"))?;
        let seq_len = first.len();
        let mut ids = Vec::with_capacity(sentences.len() * seq_len);
        for s in sentences {
            if s.len() != seq_len {
                return Err(Error::Shape(format!(
                    "batch mixes sentence lengths {seq_len} and {}",
                    s.len()
                )));
            }
            if let Some(&id) = s.ids.iter().find(|&&id| id >= vocab_size) {
                return Err(Error::IndexOutOfRange {
                    id,
                    size: vocab_size,
                });
            }
            ids.extend_from_slice(&s.ids);
        }
        Ok(Batch {
            ids,
            size: sentences.len(),
            seq_len,
            vocab_size,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Example-major ids: entry `b·T + t`.
    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn sequence(&self, b: usize) -> OneHotSequence {
        OneHotSequence {
            ids: self.ids[b * self.seq_len..(b + 1) * self.seq_len].to_vec(),
            vocab_size: self.vocab_size,
        }
    }

    /// `(m·T)×V` one-hot matrix, row `b·T + t`.
    pub fn one_hot_matrix<S: Scalar>(&self) -> Tensor<S> {
        let mut m = Tensor::zeros(self.ids.len(), self.vocab_size);
        for (r, &id) in self.ids.iter().enumerate() {
            m.set(r, id, S::one());
        }
        m
    }
}

/// Position of a [`BatchStream`] inside its random stream, sufficient to
/// resume it exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchStreamState {
    pub epoch: u64,
    pub epoch_start_word_pos: u128,
    pub cursor: usize,
}

/// Endless stream of shuffled batches. Each epoch is a fresh permutation of
/// the dataset; the trailing partial batch of an epoch is dropped.
#[derive(Clone, Debug)]
pub struct BatchStream {
    data: Vec<EncodedSentence>,
    vocab_size: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    state: BatchStreamState,
}

impl BatchStream {
    pub fn new(
        data: Vec<EncodedSentence>,
        vocab_size: usize,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("dataset has no sentences"));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if batch_size > data.len() {
            return Err(Error::BatchTooLarge {
                batch: batch_size,
                dataset: data.len(),
            });
        }
        let mut stream = BatchStream {
            order: Vec::new(),
            data,
            vocab_size,
            batch_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
            state: BatchStreamState {
                epoch: 0,
                epoch_start_word_pos: 0,
                cursor: 0,
            },
        };
        stream.shuffle_epoch();
        Ok(stream)
    }

    fn shuffle_epoch(&mut self) {
        self.state.epoch_start_word_pos = self.rng.get_word_pos();
        self.order = (0..self.data.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.state.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.data.len() / self.batch_size
    }

    pub fn dataset(&self) -> &[EncodedSentence] {
        &self.data
    }

    pub fn state(&self) -> BatchStreamState {
        self.state
    }

    pub fn restore(&mut self, state: BatchStreamState) {
        self.rng.set_word_pos(state.epoch_start_word_pos);
        self.shuffle_epoch();
        self.state = state;
    }

    /// Dataset indices of the next batch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.state.cursor + self.batch_size > self.data.len() {
            self.state.epoch += 1;
            self.shuffle_epoch();
        }
        let c = self.state.cursor;
        self.state.cursor += self.batch_size;
        self.order[c..c + self.batch_size].to_vec()
    }

    pub fn next_batch(&mut self) -> Batch {
        let idx = self.next_indices();
        let refs: Vec<&EncodedSentence> = idx.iter().map(|&i| &self.data[i]).collect();
        Batch::new(&refs, self.vocab_size).expect("dataset validated at construction")
    }
}

impl Iterator for BatchStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Convenience for `BatchStream::new` over already-encoded sentences.
pub fn batches(
    data: Vec<EncodedSentence>,
    vocab_size: usize,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<BatchStream> {
    BatchStream::new(data, vocab_size, batch_size, shuffle_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(v: &Vocabulary, s: &str) -> Vec<usize> {
        s.chars().map(|c| v.index_of(c).unwrap()).collect()
    }

    #[test]
    fn two_letter_corpus_gives_four_symbols() {
        let v = build_vocab(["ab", "ba"], 100).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.corpus_chars(), &['a', 'b']);
        assert_ne!(v.pad_id(), v.unk_id());
    }

    #[test]
    fn truncation_keeps_most_frequent() {
        let v = build_vocab(["aab", "ab"], 1).unwrap();
        assert_eq!(v.size(), 3);
        assert_eq!(v.corpus_chars(), &['a']);
    }

    #[test]
    fn ties_break_by_code_point() {
        let v = build_vocab(["zyx", "xyz"], 10).unwrap();
        assert_eq!(v.corpus_chars(), &['x', 'y', 'z']);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(
            build_vocab(Vec::<String>::new(), 10),
            Err(Error::EmptyCorpus)
        ));
        assert!(matches!(build_vocab([""], 10), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn encode_pads_truncates_and_substitutes_unknowns() {
        let v = build_vocab(["abcdef"], 100).unwrap();
        let pad = v.pad_id();
        let mut want = ids(&v, "ab");
        want.extend([pad, pad]);
        assert_eq!(v.encode("ab", 4).ids, want);
        assert_eq!(v.encode("abcdef", 3).ids, ids(&v, "abc"));
        let e = v.encode("a§b", 3).ids;
        assert_eq!(e, vec![ids(&v, "a")[0], v.unk_id(), ids(&v, "b")[0]]);
    }

    #[test]
    fn one_hot_rows_and_range_check() {
        let enc = EncodedSentence { ids: vec![1, 0] };
        let m = one_hot(&enc, 2).unwrap().to_matrix::<f64>();
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        let single = one_hot(&EncodedSentence { ids: vec![0] }, 2).unwrap();
        assert_eq!(single.to_matrix::<f64>().data(), &[1.0, 0.0]);
        assert!(matches!(
            one_hot(&EncodedSentence { ids: vec![2] }, 2),
            Err(Error::IndexOutOfRange { id: 2, size: 2 })
        ));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = build_vocab(["hello world", "a b"], 100).unwrap();
        let text = v.to_file_string();
        assert!(text.starts_with(&format!("pad={}\nunk={}\n", v.pad_id(), v.unk_id())));
        assert_eq!(Vocabulary::parse(&text).unwrap(), v);
    }

    fn dataset(n: usize) -> Vec<EncodedSentence> {
        (0..n).map(|i| EncodedSentence { ids: vec![i % 3] }).collect()
    }

    #[test]
    fn epoch_drops_partial_batch() {
        let mut s = batches(dataset(10), 3, 3, 7).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let mut seen = Vec::new();
        for _ in 0..3 {
            seen.extend(s.next_indices());
        }
        assert_eq!(seen.len(), 9);
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        s.next_indices();
        assert_eq!(s.state().epoch, 1);
    }

    #[test]
    fn same_seed_same_order_and_restore_resumes() {
        let mut a = batches(dataset(10), 3, 3, 42).unwrap();
        let mut b = batches(dataset(10), 3, 3, 42).unwrap();
        let xs: Vec<_> = (0..7).map(|_| a.next_indices()).collect();
        let ys: Vec<_> = (0..7).map(|_| b.next_indices()).collect();
        assert_eq!(xs, ys);

        let saved = a.state();
        let ahead: Vec<_> = (0..5).map(|_| a.next_indices()).collect();
        let mut c = batches(dataset(10), 3, 3, 42).unwrap();
        c.restore(saved);
        let resumed: Vec<_> = (0..5).map(|_| c.next_indices()).collect();
        assert_eq!(ahead, resumed);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        assert!(matches!(
            batches(dataset(2), 3, 3, 0),
            Err(Error::BatchTooLarge { batch: 3, dataset: 2 })
        ));
    }

    #[test]
    fn evaluation_protocol_is_ten_batches_of_sixty_four() {
        let s = batches(dataset(640), 3, 64, 0).unwrap();
        assert_eq!(s.batches_per_epoch(), 10);
    }
}
