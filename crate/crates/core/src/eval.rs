//! Text decoding, BLEU without brevity penalty, and n-gram Jensen–Shannon
//! divergence.

use std::collections::{BTreeMap, HashMap};
use std::hash::Hash;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Mode;
use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::gan::{sample_noise, Generator};
use crate::seq::{split_batch, ProbSequence};
use crate::tensor::Scalar;

/// Seed used for evaluation noise unless one is given explicitly.
pub const DEFAULT_EVAL_SEED: u64 = 0x5EED_E7A1;

/// Argmax per row, mapped through `vocab`, with trailing padding removed.
/// Ties go to the lowest index.
pub fn decode_text<S: Scalar>(p: &ProbSequence<S>, vocab: &Vocabulary) -> String {
    decode_ids(&p.argmax(), vocab)
}

pub fn decode_ids(ids: &[usize], vocab: &Vocabulary) -> String {
    let end = ids
        .iter()
        .rposition(|&i| i != vocab.pad_id())
        .map_or(0, |p| p + 1);
    ids[..end]
        .iter()
        .map(|&i| vocab.symbol(i).unwrap_or(crate::corpus::UNK_SYMBOL))
        .collect()
}

/// `num_batches·m` decoded samples drawn with noise from `seed`.
pub fn generate_samples<S: Scalar>(
    generator: &Generator<S>,
    vocab: &Vocabulary,
    num_batches: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = generator.shape().seq_len;
    let mut out = Vec::with_capacity(num_batches * batch_size);
    for _ in 0..num_batches {
        let z = sample_noise(&mut rng, batch_size, generator.noise_dim());
        let probs = generator.generate_batch(&z)?;
        out.extend(split_batch(&probs, t).iter().map(|p| decode_text(p, vocab)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// Whitespace-separated tokens.
    #[default]
    Word,
    /// Every character, spaces included.
    Char,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BleuWeights {
    /// `w_n = 1/N`.
    #[default]
    Uniform,
    /// `w_n = 1/n`.
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BleuOptions {
    pub granularity: Granularity,
    pub weights: BleuWeights,
}

fn tokens(text: &str, granularity: Granularity) -> Vec<String> {
    match granularity {
        Granularity::Word => text.split_whitespace().map(str::to_owned).collect(),
        Granularity::Char => text.chars().map(String::from).collect(),
    }
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-N with the brevity penalty fixed to 1 and clipped precisions against
/// the whole reference set, macro-averaged over candidates. A candidate with
/// any zero precision (including having fewer than `n` tokens) scores 0.
pub fn bleu_n(candidates: &[String], references: &[String], max_n: usize, options: BleuOptions) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("no candidate sentences"));
    }
    if references.is_empty() {
        return Err(Error::EmptyInput("no reference sentences"));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("BLEU order must be at least 1".into()));
    }
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokens(r, options.granularity)).collect();
    // Clip bound per order: the largest count of each n-gram in any one reference.
    let mut max_ref: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); max_n];
    for r in &refs {
        for (n, table) in max_ref.iter_mut().enumerate() {
            for (g, c) in ngram_counts(r, n + 1) {
                let e = table.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
    }
    let weight = |n: usize| match options.weights {
        BleuWeights::Uniform => 1.0 / max_n as f64,
        BleuWeights::Inverse => 1.0 / n as f64,
    };
    let mut total = 0.0;
    for cand in candidates {
        let toks = tokens(cand, options.granularity);
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=max_n {
            let counts = ngram_counts(&toks, n);
            let denom: usize = counts.values().sum();
            let clipped: usize = counts
                .iter()
                .map(|(g, &c)| c.min(max_ref[n - 1].get(g).copied().unwrap_or(0)))
                .sum();
            if clipped == 0 {
                zero = true;
                break;
            }
            log_sum += weight(n) * (clipped as f64 / denom as f64).ln();
        }
        if !zero {
            total += log_sum.exp();
        }
    }
    Ok(total / candidates.len() as f64)
}

fn char_ngram_distribution(corpus: &[String], n: usize) -> (BTreeMap<Vec<char>, usize>, usize) {
    let mut counts = BTreeMap::new();
    let mut total = 0;
    for s in corpus {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() >= n {
            for w in chars.windows(n) {
                *counts.entry(w.to_vec()).or_insert(0) += 1;
                total += 1;
            }
        }
    }
    (counts, total)
}

/// Jensen–Shannon divergence in nats between the character n-gram frequency
/// distributions of two corpora. N-grams do not cross sentence boundaries.
pub fn ngram_jsd(generated: &[String], training: &[String], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    let (p, np) = char_ngram_distribution(generated, n);
    let (q, nq) = char_ngram_distribution(training, n);
    if np == 0 {
        return Err(Error::DegenerateCorpus { n, which: "generated" });
    }
    if nq == 0 {
        return Err(Error::DegenerateCorpus { n, which: "training" });
    }
    let half_kl = |x: f64, m: f64| if x > 0.0 { 0.5 * x * (x / m).ln() } else { 0.0 };
    let mut support: Vec<&Vec<char>> = p.keys().chain(q.keys()).collect();
    support.sort();
    support.dedup();
    let mut jsd = 0.0;
    for g in support {
        let pi = p.get(g).map_or(0.0, |&c| c as f64 / np as f64);
        let qi = q.get(g).map_or(0.0, |&c| c as f64 / nq as f64);
        let m = 0.5 * (pi + qi);
        jsd += half_kl(pi, m) + half_kl(qi, m);
    }
    Ok(jsd.clamp(0.0, std::f64::consts::LN_2))
}

/// Sampling protocol for [`evaluate`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub num_batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub bleu: BleuOptions,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            num_batches: 10,
            batch_size: 64,
            seed: DEFAULT_EVAL_SEED,
            bleu: BleuOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: BTreeMap<usize, f64>,
    pub jsd: BTreeMap<usize, f64>,
    pub num_candidates: usize,
    pub reference_size: usize,
    pub seq_len: usize,
    pub mode: Mode,
    pub iteration: u64,
    pub eval_seed: u64,
    pub bleu_granularity: Granularity,
    pub bleu_weights: BleuWeights,
    pub bleu_brevity_penalty: bool,
    pub jsd_unit: String,
    pub jsd_granularity: Granularity,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// BLEU-{2,3,4} and JSD-{1..4} over a fresh set of generated candidates.
pub fn evaluate<S: Scalar>(
    generator: &Generator<S>,
    vocab: &Vocabulary,
    references: &[String],
    protocol: &EvalProtocol,
    mode: Mode,
    iteration: u64,
) -> Result<(MetricReport, Vec<String>)> {
    let candidates = generate_samples(generator, vocab, protocol.num_batches, protocol.batch_size, protocol.seed)?;
    let report = score_candidates(&candidates, references, protocol, generator.shape().seq_len, mode, iteration)?;
    Ok((report, candidates))
}

/// The metric half of [`evaluate`], for candidates obtained elsewhere.
pub fn score_candidates(
    candidates: &[String],
    references: &[String],
    protocol: &EvalProtocol,
    seq_len: usize,
    mode: Mode,
    iteration: u64,
) -> Result<MetricReport> {
    let mut bleu = BTreeMap::new();
    for n in 2..=4 {
        bleu.insert(n, bleu_n(candidates, references, n, protocol.bleu)?);
    }
    let mut jsd = BTreeMap::new();
    for n in 1..=4 {
        jsd.insert(n, ngram_jsd(candidates, references, n)?);
    }
    Ok(MetricReport {
        bleu,
        jsd,
        num_candidates: candidates.len(),
        reference_size: references.len(),
        seq_len,
        mode,
        iteration,
        eval_seed: protocol.seed,
        bleu_granularity: protocol.bleu.granularity,
        bleu_weights: protocol.bleu.weights,
        bleu_brevity_penalty: false,
        jsd_unit: "nats".into(),
        jsd_granularity: Granularity::Char,
    })
}
