//! Browser bindings: the two-word separability experiment, BLEU/JSD on pasted
//! text, and a small training run that advances a few iterations per call.
//!
//! Every export returns JSON text so the page needs no generated glue types.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use textkd::config::{Mode, TrainConfig};
use textkd::corpus::{build_vocab, split_corpus};
use textkd::diagnostics::{self, Geometry, SeparabilityReport, TwoWordConfig};
use textkd::eval::{self, bleu_n, ngram_jsd, BleuOptions, Granularity};
use textkd::training::{TrainState, Trainer};

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("plain data serializes")
}

#[derive(Serialize)]
struct Separability {
    geometry: &'static str,
    accuracy: f64,
    bayes_accuracy: f64,
}

impl From<&SeparabilityReport> for Separability {
    fn from(r: &SeparabilityReport) -> Self {
        Separability {
            geometry: r.geometry.as_str(),
            accuracy: r.accuracy,
            bayes_accuracy: r.bayes_accuracy,
        }
    }
}

/// Trains the three two-word critics. `steps` trades accuracy for page latency.
#[wasm_bindgen]
pub fn two_word(radius: f64, steps: usize, seed: u64) -> Result<String, String> {
    let cfg = TwoWordConfig {
        radius,
        steps,
        seed,
        train_per_class: 2000,
        test_per_class: 2000,
        ..TwoWordConfig::default()
    };
    let r = diagnostics::two_word_experiment(&cfg).map_err(|e| e.to_string())?;
    let rows: Vec<Separability> = [&r.one_hot, &r.softened, &r.control].into_iter().map(Into::into).collect();
    Ok(to_json(&rows))
}

/// Bayes accuracy of the softened geometry, for drawing the curve.
#[wasm_bindgen]
pub fn softened_bayes_accuracy(radius: f64) -> f64 {
    diagnostics::bayes_accuracy(Geometry::SoftenedVsSegment, radius, 1 << 14)
}

#[derive(Serialize, Default)]
struct TextMetrics {
    bleu: Vec<(usize, Option<f64>)>,
    jsd: Vec<(usize, Option<f64>)>,
}

/// BLEU-{2,3,4} and JSD-{1..4} between two newline-separated corpora.
/// Orders with no n-grams on one side are reported as `null`.
#[wasm_bindgen]
pub fn text_metrics(candidates: &str, references: &str, char_level: bool) -> Result<String, String> {
    let cands = split_corpus(candidates, false);
    let refs = split_corpus(references, false);
    if cands.is_empty() || refs.is_empty() {
        return Err("both boxes need at least one non-empty line".into());
    }
    let opts = BleuOptions {
        granularity: if char_level { Granularity::Char } else { Granularity::Word },
        ..BleuOptions::default()
    };
    let mut m = TextMetrics::default();
    for n in 2..=4 {
        m.bleu.push((n, bleu_n(&cands, &refs, n, opts).ok()));
    }
    for n in 1..=4 {
        m.jsd.push((n, ngram_jsd(&cands, &refs, n).ok()));
    }
    Ok(to_json(&m))
}

#[derive(Serialize)]
struct Progress {
    iteration: u64,
    l_ae: Option<f64>,
    l_d: Option<f64>,
    l_g: Option<f64>,
    jsd1: f64,
    samples: Vec<String>,
}

/// A deliberately tiny generator/critic pair trained on user text.
#[wasm_bindgen]
pub struct DemoTrainer {
    trainer: Trainer,
}

#[wasm_bindgen]
impl DemoTrainer {
    #[wasm_bindgen(constructor)]
    pub fn new(corpus: &str, mode: &str, seed: u64) -> Result<DemoTrainer, String> {
        let sentences = split_corpus(corpus, false);
        if sentences.is_empty() {
            return Err("paste at least one sentence".into());
        }
        let mut cfg = TrainConfig {
            mode: mode.parse::<Mode>()?,
            seed,
            seq_len: 16,
            batch_size: 16,
            hidden: 32,
            noise_dim: 16,
            channels: 16,
            res_blocks: 1,
            gan_lr: 1e-3,
            eval_samples: 64,
            ..TrainConfig::default()
        };
        cfg.batch_size = cfg.batch_size.min(sentences.len());
        cfg.validate().map_err(|e| e.to_string())?;
        let vocab = build_vocab(&sentences, cfg.max_chars).map_err(|e| e.to_string())?;
        let data = sentences.iter().map(|s| vocab.encode(s, cfg.seq_len)).collect();
        let state = TrainState::init(cfg, vocab).map_err(|e| e.to_string())?;
        let trainer = Trainer::new(state, data).map_err(|e| e.to_string())?;
        Ok(DemoTrainer { trainer })
    }

    /// Runs `n` iterations and reports the last losses, the unigram JSD and
    /// a handful of samples.
    pub fn step(&mut self, n: u32) -> Result<String, String> {
        let mut last = None;
        for _ in 0..n {
            last = Some(self.trainer.step().map_err(|e| e.to_string())?);
        }
        let state = &self.trainer.state;
        let samples = eval::generate_samples(&state.generator, &state.vocab, 1, 8, state.iteration)
            .map_err(|e| e.to_string())?;
        Ok(to_json(&Progress {
            iteration: state.iteration,
            l_ae: last.as_ref().and_then(|r| r.l_ae),
            l_d: last.as_ref().and_then(|r| r.l_d),
            l_g: last.as_ref().and_then(|r| r.l_g),
            jsd1: self.trainer.unigram_jsd().map_err(|e| e.to_string())?,
            samples,
        }))
    }
}
