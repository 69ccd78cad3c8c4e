//! The adversarial training loop: per iteration one autoencoder step, `k`
//! critic steps and one generator step.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autoencoder::Autoencoder;
use crate::checkpoint;
use crate::config::{Mode, TrainConfig};
use crate::corpus::{BatchStream, BatchStreamState, EncodedSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{decode_ids, generate_samples, ngram_jsd, DEFAULT_EVAL_SEED};
use crate::gan::{sample_noise, Critic, Generator};
use crate::optim::Adam;
use crate::tensor::Tensor;

/// Offsets added to the master seed for each independent random stream.
pub mod seed_offset {
    pub const AUTOENCODER: u64 = 1;
    pub const GENERATOR: u64 = 2;
    pub const CRITIC: u64 = 3;
    pub const DATA: u64 = 4;
    pub const NOISE: u64 = 5;
}

/// Consecutive non-finite iterations tolerated before training aborts.
pub const DIVERGENCE_PATIENCE: u32 = 10;

/// Capacity of the metrics queue; rows beyond it are dropped and counted.
pub const METRICS_QUEUE: usize = 4096;

/// Losses after one iteration; `jsd1` is present on evaluation iterations.
/// The record for iteration 0 carries no losses.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub iteration: u64,
    pub l_ae: Option<f64>,
    pub l_d: Option<f64>,
    pub l_g: Option<f64>,
    pub jsd1: Option<f64>,
}

impl MetricRecord {
    pub fn is_finite(&self) -> bool {
        [self.l_ae, self.l_d, self.l_g]
            .iter()
            .all(|v| v.is_none_or(f64::is_finite))
    }
}

fn field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub iteration: u64,
    pub autoencoder: Option<Autoencoder<f32>>,
    pub ae_opt: Option<Adam<f32>>,
    pub generator: Generator<f32>,
    pub gen_opt: Adam<f32>,
    pub critic: Critic<f32>,
    pub critic_opt: Adam<f32>,
    pub data_stream: BatchStreamState,
    pub noise_word_pos: u128,
    pub nonfinite_streak: u32,
    /// Evaluation records only; per-iteration losses go to the metrics CSV.
    pub history: Vec<MetricRecord>,
}

impl TrainState {
    /// Freshly initialised networks and optimizers. In iwgan mode no
    /// autoencoder exists.
    pub fn init(config: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let v = vocab.size();
        let seeded = |off: u64| ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(off));
        let autoencoder = match config.mode {
            Mode::TextKd => {
                let mut ae = Autoencoder::new(v, config.hidden, vocab.pad_id(), &mut seeded(seed_offset::AUTOENCODER));
                ae.set_teacher_forcing(config.teacher_forcing);
                Some(ae)
            }
            Mode::Iwgan => None,
        };
        let ae_opt = autoencoder.as_ref().map(|ae| Adam::new(config.ae_adam(), &ae.params));
        let shape = config.net_shape(v);
        let generator = Generator::new(shape, config.noise_dim, &mut seeded(seed_offset::GENERATOR))?;
        let critic = Critic::new(shape, &mut seeded(seed_offset::CRITIC))?;
        Ok(TrainState {
            gen_opt: Adam::new(config.gan_adam(), &generator.params),
            critic_opt: Adam::new(config.gan_adam(), &critic.params),
            config,
            vocab,
            iteration: 0,
            autoencoder,
            ae_opt,
            generator,
            critic,
            data_stream: BatchStreamState {
                epoch: 0,
                epoch_start_word_pos: 0,
                cursor: 0,
            },
            noise_word_pos: 0,
            nonfinite_streak: 0,
            history: Vec::new(),
        })
    }
}

/// Appends CSV rows from a background thread so the loop never waits on I/O.
pub struct MetricsWriter {
    tx: Option<SyncSender<String>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
    dropped: Arc<AtomicU64>,
    path: PathBuf,
}

impl MetricsWriter {
    pub const HEADER: &'static str = "iteration,l_ae,l_d,l_g,wall_ms";

    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let mut out = BufWriter::new(file);
        if empty {
            writeln!(out, "{}", Self::HEADER).map_err(|e| Error::io(path, e))?;
        }
        let (tx, rx) = sync_channel::<String>(METRICS_QUEUE);
        let handle = std::thread::spawn(move || {
            for line in rx {
                writeln!(out, "{line}")?;
            }
            out.flush()
        });
        Ok(MetricsWriter {
            tx: Some(tx),
            handle: Some(handle),
            dropped: Arc::new(AtomicU64::new(0)),
            path: path.to_owned(),
        })
    }

    pub fn emit(&self, r: &MetricRecord, wall_ms: u128) {
        let line = format!(
            "{},{},{},{},{wall_ms}",
            r.iteration,
            field(r.l_ae),
            field(r.l_d),
            field(r.l_g)
        );
        if let Some(tx) = &self.tx {
            if let Err(TrySendError::Full(_) | TrySendError::Disconnected(_)) = tx.try_send(line) {
                self.dropped.fetch_add(1, Ordering::Relaxed);
            }
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    /// Flushes outstanding rows and reports write failures.
    pub fn finish(mut self) -> Result<u64> {
        self.close()?;
        Ok(self.dropped())
    }

    fn close(&mut self) -> Result<()> {
        self.tx.take();
        if let Some(h) = self.handle.take() {
            h.join()
                .expect("metrics writer panicked")
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// Which updates one iteration performed, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Update {
    Autoencoder,
    Critic,
    Generator,
}

/// Live training session over a [`TrainState`].
pub struct Trainer {
    pub state: TrainState,
    stream: BatchStream,
    noise: ChaCha8Rng,
    references: Vec<String>,
    trace: Option<Vec<Update>>,
}

impl Trainer {
    /// `data` must be the corpus encoded with `state.vocab` at the configured
    /// length. Restores the data and noise streams from `state`.
    pub fn new(state: TrainState, data: Vec<EncodedSentence>) -> Result<Self> {
        let cfg = &state.config;
        if let Some(bad) = data.iter().find(|s| s.len() != cfg.seq_len) {
            return Err(Error::Shape(format!(
                "sentence of length {} in a dataset configured for T={}",
                bad.len(),
                cfg.seq_len
            )));
        }
        let references = data.iter().map(|s| decode_ids(&s.ids, &state.vocab)).collect();
        let mut stream = BatchStream::new(
            data,
            state.vocab.size(),
            cfg.batch_size,
            cfg.seed.wrapping_add(seed_offset::DATA),
        )?;
        stream.restore(state.data_stream);
        let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(seed_offset::NOISE));
        noise.set_word_pos(state.noise_word_pos);
        Ok(Trainer {
            state,
            stream,
            noise,
            references,
            trace: None,
        })
    }

    /// Decoded training sentences used as the evaluation reference.
    pub fn references(&self) -> &[String] {
        &self.references
    }

    /// Start recording the order of parameter updates.
    pub fn record_updates(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<Update> {
        self.trace.replace(Vec::new()).unwrap_or_default()
    }

    fn note(&mut self, u: Update) {
        if let Some(t) = &mut self.trace {
            t.push(u);
        }
    }

    /// JSD between character unigrams of generated samples and the training
    /// text, with a fixed evaluation seed so successive values are comparable.
    /// A generator whose samples are all empty scores the maximum, ln 2.
    pub fn unigram_jsd(&self) -> Result<f64> {
        let m = self.state.config.batch_size;
        let n = self.state.config.eval_samples;
        let mut samples = generate_samples(
            &self.state.generator,
            &self.state.vocab,
            n.div_ceil(m),
            m,
            DEFAULT_EVAL_SEED ^ self.state.config.seed,
        )?;
        samples.truncate(n);
        match ngram_jsd(&samples, &self.references, 1) {
            Err(Error::DegenerateCorpus { which: "generated", .. }) => Ok(std::f64::consts::LN_2),
            other => other,
        }
    }

    /// One full iteration. Individual non-finite steps are reported through
    /// the returned record rather than as errors; see [`Trainer::run`].
    pub fn step(&mut self) -> Result<MetricRecord> {
        let it = self.state.iteration;
        let t = self.state.config.seq_len;
        let m = self.state.config.batch_size;
        let z_dim = self.state.config.noise_dim;
        let lambda = self.state.config.lambda as f32;
        let soft = |r: Result<f32>| -> Result<f64> {
            match r {
                Ok(v) => Ok(v as f64),
                Err(Error::Divergence { value, .. }) => Ok(if value.is_finite() { f64::NAN } else { value }),
                Err(e) => Err(e),
            }
        };

        let l_ae = match (&mut self.state.autoencoder, &mut self.state.ae_opt) {
            (Some(ae), Some(opt)) => {
                let x = self.stream.next_batch().one_hot_matrix::<f32>();
                let l = soft(ae.train_step(&x, t, opt, it))?;
                self.note(Update::Autoencoder);
                Some(l)
            }
            _ => None,
        };

        let mut l_d = 0.0;
        for _ in 0..self.state.config.critic_iters {
            let batch = self.stream.next_batch().one_hot_matrix::<f32>();
            let real = match &self.state.autoencoder {
                Some(ae) => ae.reconstruct(&batch, t)?,
                None => batch,
            };
            let z = sample_noise(&mut self.noise, m, z_dim);
            let alphas: Vec<f32> = (0..m).map(|_| self.noise.random::<f32>()).collect();
            let gen = self.state.generator.generate_batch(&z)?;
            let l = self
                .state
                .critic
                .train_step(&real, &gen, &alphas, lambda, &mut self.state.critic_opt, it);
            l_d += soft(l)?;
            self.note(Update::Critic);
        }
        l_d /= self.state.config.critic_iters as f64;

        // The real batch drawn here is unused by the generator objective; it
        // keeps the data stream advancing once per update.
        self.stream.next_indices();
        let z: Tensor<f32> = sample_noise(&mut self.noise, m, z_dim);
        let l_g = soft(
            self.state
                .generator
                .train_step(&self.state.critic, &z, &mut self.state.gen_opt, it),
        )?;
        self.note(Update::Generator);

        self.state.iteration += 1;
        self.state.data_stream = self.stream.state();
        self.state.noise_word_pos = self.noise.get_word_pos();
        let record = MetricRecord {
            iteration: self.state.iteration,
            l_ae,
            l_d: Some(l_d),
            l_g: Some(l_g),
            jsd1: None,
        };
        if record.is_finite() {
            self.state.nonfinite_streak = 0;
        } else {
            self.state.nonfinite_streak += 1;
        }
        Ok(record)
    }

    /// Attaches the current JSD to `record` and appends it to the history.
    fn log_evaluation(&mut self, mut record: MetricRecord) -> Result<MetricRecord> {
        record.jsd1 = Some(self.unigram_jsd()?);
        self.state.history.push(record.clone());
        Ok(record)
    }

    /// Runs until `state.iteration == until`. Evaluates at iteration 0 and
    /// every `eval_every` iterations; checkpoints into `run_dir` every
    /// `checkpoint_every` iterations and at `until`.
    pub fn run(&mut self, until: u64, run_dir: Option<&Path>, mut on_record: impl FnMut(&MetricRecord)) -> Result<()> {
        let metrics = match run_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(MetricsWriter::open(&dir.join("metrics.csv"))?)
            }
            None => None,
        };
        let start = Instant::now();
        if self.state.history.is_empty() {
            self.log_evaluation(MetricRecord {
                iteration: self.state.iteration,
                l_ae: None,
                l_d: None,
                l_g: None,
                jsd1: None,
            })?;
        }
        while self.state.iteration < until {
            let mut record = self.step()?;
            let it = record.iteration;
            if let Some(w) = &metrics {
                w.emit(&record, start.elapsed().as_millis());
            }
            if self.state.nonfinite_streak >= DIVERGENCE_PATIENCE {
                let (term, value) = [("L_AE", record.l_ae), ("L_D", record.l_d), ("L_G", record.l_g)]
                    .into_iter()
                    .find_map(|(t, v)| v.filter(|x| !x.is_finite()).map(|x| (t, x)))
                    .unwrap_or(("L_G", f64::NAN));
                if let Some(dir) = run_dir {
                    checkpoint::save(&self.state, &dir.join(format!("ckpt-{it}-diverged")))?;
                }
                return Err(Error::Divergence {
                    iteration: it,
                    term,
                    value,
                });
            }
            let cfg = &self.state.config;
            let ckpt_due = it % cfg.checkpoint_every == 0 || it == until;
            if it % cfg.eval_every == 0 {
                record = self.log_evaluation(record)?;
            }
            if ckpt_due {
                if let Some(dir) = run_dir {
                    checkpoint::save(&self.state, &dir.join(checkpoint_name(it)))?;
                }
            }
            on_record(&record);
        }
        if let Some(dir) = run_dir {
            if until == 0 {
                checkpoint::save(&self.state, &dir.join(checkpoint_name(0)))?;
            }
        }
        if let Some(w) = metrics {
            w.finish()?;
        }
        Ok(())
    }
}

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt-{iteration}")
}

/// Summary of a finished [`train`] call.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub references: Vec<String>,
}

/// Builds the vocabulary from `sentences`, initialises, and trains for
/// `config.iterations` iterations.
pub fn train(config: TrainConfig, sentences: &[String], run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let vocab = crate::corpus::build_vocab(sentences, config.max_chars)?;
    let data = sentences.iter().map(|s| vocab.encode(s, config.seq_len)).collect();
    let state = TrainState::init(config, vocab)?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(state.config.to_text().as_bytes())
            .map_err(|e| Error::io(&path, e))?;
    }
    let until = state.config.iterations;
    let mut trainer = Trainer::new(state, data)?;
    trainer.run(until, run_dir, |_| {})?;
    Ok(TrainOutcome {
        references: trainer.references.clone(),
        state: trainer.state,
    })
}

/// Continues a checkpointed run up to `until` iterations.
pub fn resume(state: TrainState, sentences: &[String], until: u64, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    let data = sentences
        .iter()
        .map(|s| state.vocab.encode(s, state.config.seq_len))
        .collect();
    let mut trainer = Trainer::new(state, data)?;
    trainer.run(until, run_dir, |_| {})?;
    Ok(TrainOutcome {
        references: trainer.references.clone(),
        state: trainer.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_vocab;

    fn corpus() -> Vec<String> {
        ["ab ab", "ba", "abba ab", "b a", "aab", "bb ab", "a", "ba ba"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn tiny(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            seq_len: 6,
            batch_size: 4,
            critic_iters: 5,
            iterations: 6,
            hidden: 6,
            noise_dim: 4,
            channels: 4,
            res_blocks: 1,
            checkpoint_every: 3,
            eval_every: 2,
            eval_samples: 8,
            seed: 42,
            ..TrainConfig::default()
        }
    }

    fn trainer(cfg: TrainConfig) -> Trainer {
        let vocab = build_vocab(corpus(), cfg.max_chars).unwrap();
        let data = corpus().iter().map(|s| vocab.encode(s, cfg.seq_len)).collect();
        Trainer::new(TrainState::init(cfg, vocab).unwrap(), data).unwrap()
    }

    #[test]
    fn update_order_per_iteration() {
        let mut t = trainer(tiny(Mode::TextKd));
        t.record_updates();
        t.step().unwrap();
        let mut want = vec![Update::Autoencoder];
        want.extend([Update::Critic; 5]);
        want.push(Update::Generator);
        assert_eq!(t.take_trace(), want);

        let mut t = trainer(tiny(Mode::Iwgan));
        t.record_updates();
        let r = t.step().unwrap();
        assert!(r.l_ae.is_none());
        let trace = t.take_trace();
        assert_eq!(trace.iter().filter(|u| **u == Update::Critic).count(), 5);
        assert_eq!(trace.last(), Some(&Update::Generator));
        assert!(t.state.autoencoder.is_none());
    }

    #[test]
    fn each_step_touches_only_its_own_parameters() {
        let mut t = trainer(tiny(Mode::TextKd));
        let before = t.state.clone();
        let (x, m, t_len) = (t.stream.next_batch().one_hot_matrix::<f32>(), 4, 6);
        let z = sample_noise(&mut t.noise, m, 4);
        t.state.generator.train_step(&t.state.critic, &z, &mut t.state.gen_opt, 0).unwrap();
        assert_eq!(t.state.critic, before.critic);
        assert_eq!(t.state.autoencoder, before.autoencoder);
        assert_ne!(t.state.generator, before.generator);

        let g_before = t.state.generator.clone();
        let gen = t.state.generator.generate_batch(&z).unwrap();
        t.state.critic.train_step(&x, &gen, &[0.5; 4], 10.0, &mut t.state.critic_opt, 0).unwrap();
        assert_eq!(t.state.generator, g_before);
        assert_eq!(t.state.autoencoder, before.autoencoder);

        let c_before = t.state.critic.clone();
        let (ae, opt) = (t.state.autoencoder.as_mut().unwrap(), t.state.ae_opt.as_mut().unwrap());
        ae.train_step(&x, t_len, opt, 0).unwrap();
        assert_eq!(t.state.generator, g_before);
        assert_eq!(t.state.critic, c_before);
    }

    #[test]
    fn zero_iterations_checkpoint_is_initialisation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            iterations: 0,
            ..tiny(Mode::TextKd)
        };
        let out = train(cfg.clone(), &corpus(), Some(dir.path())).unwrap();
        let loaded = checkpoint::load(&dir.path().join("ckpt-0")).unwrap();
        let vocab = build_vocab(corpus(), cfg.max_chars).unwrap();
        let mut init = TrainState::init(cfg, vocab).unwrap();
        init.history = loaded.history.clone();
        assert_eq!(loaded, init);
        assert_eq!(out.state, loaded);
        assert!(dir.path().join("config.txt").exists());
    }

    #[test]
    fn same_seed_same_state_and_resume_matches() {
        let cfg = tiny(Mode::TextKd);
        let a = train(cfg.clone(), &corpus(), None).unwrap().state;
        let b = train(cfg.clone(), &corpus(), None).unwrap().state;
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let half = TrainConfig {
            iterations: 3,
            ..cfg.clone()
        };
        train(half, &corpus(), Some(dir.path())).unwrap();
        let mut mid = checkpoint::load(&dir.path().join("ckpt-3")).unwrap();
        mid.config.iterations = cfg.iterations;
        let resumed = resume(mid, &corpus(), 6, None).unwrap().state;
        assert_eq!(resumed, a);
    }

    #[test]
    fn metrics_csv_is_monotone() {
        let dir = tempfile::tempdir().unwrap();
        train(tiny(Mode::Iwgan), &corpus(), Some(dir.path())).unwrap();
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(MetricsWriter::HEADER));
        let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
        assert_eq!(rows.len(), 6);
        let its: Vec<u64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
        assert_eq!(its, (1..=6).collect::<Vec<_>>());
        let ms: Vec<u128> = rows.iter().map(|r| r[4].parse().unwrap()).collect();
        assert!(ms.windows(2).all(|w| w[0] <= w[1]));
        assert!(rows.iter().all(|r| r[1].is_empty()));
    }

    #[test]
    fn huge_learning_rate_is_caught() {
        let cfg = TrainConfig {
            gan_lr: 1e3,
            ae_lr: 1e3,
            iterations: 200,
            eval_every: 1000,
            channels: 8,
            res_blocks: 3,
            ..tiny(Mode::TextKd)
        };
        let err = train(cfg, &corpus(), None).unwrap_err();
        match err {
            Error::Divergence { iteration, .. } => assert!(iteration <= 200),
            other => panic!("expected divergence, got {other}"),
        }
    }
}
