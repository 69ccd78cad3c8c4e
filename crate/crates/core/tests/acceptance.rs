//! Acceptance gate. Each criterion prints one `PASS`/`FAIL` line; the process
//! exits non-zero if any criterion fails.

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use textkd::autoencoder::Autoencoder;
use textkd::checkpoint;
use textkd::config::{Mode, TrainConfig};
use textkd::corpus::{build_vocab, one_hot, Batch, EncodedSentence};
use textkd::diagnostics::{self, AuditConfig, AuditTarget, Geometry, TwoWordConfig};
use textkd::eval::{bleu_n, decode_text, ngram_jsd, BleuOptions, BleuWeights, Granularity};
use textkd::gan::{gradient_penalty, interpolate, interpolate_batch, sample_noise, ConvNetShape, Critic, Generator, LinearCritic};
use textkd::optim::{Adam, AdamConfig};
use textkd::seq::{split_batch, ProbSequence};
use textkd::synthetic::regular_corpus;
use textkd::tensor::Tensor;
use textkd::training::{self, checkpoint_name, MetricsWriter};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Brute-force metric oracles. Counting is by linear scan over n-gram lists so
// they share no code path with the hashed implementations.

fn grams<T: Clone>(toks: &[T], n: usize) -> Vec<Vec<T>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= toks.len() {
        out.push(toks[i..i + n].to_vec());
        i += 1;
    }
    out
}

fn occurrences<T: PartialEq>(list: &[Vec<T>], g: &[T]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn oracle_bleu(cands: &[String], refs: &[String], max_n: usize, opts: BleuOptions) -> f64 {
    let split = |s: &String| -> Vec<String> {
        match opts.granularity {
            Granularity::Word => s.split_whitespace().map(String::from).collect(),
            Granularity::Char => s.chars().map(|c| c.to_string()).collect(),
        }
    };
    let ref_toks: Vec<Vec<String>> = refs.iter().map(split).collect();
    let mut sum = 0.0;
    for c in cands {
        let toks = split(c);
        let mut score = 1.0;
        for n in 1..=max_n {
            let cg = grams(&toks, n);
            let mut distinct: Vec<Vec<String>> = Vec::new();
            for g in &cg {
                if !distinct.contains(g) {
                    distinct.push(g.clone());
                }
            }
            let mut clipped = 0;
            for g in &distinct {
                let bound = ref_toks
                    .iter()
                    .map(|r| occurrences(&grams(r, n), g))
                    .max()
                    .unwrap_or(0);
                clipped += occurrences(&cg, g).min(bound);
            }
            if clipped == 0 {
                score = 0.0;
                break;
            }
            let w = match opts.weights {
                BleuWeights::Uniform => 1.0 / max_n as f64,
                BleuWeights::Inverse => 1.0 / n as f64,
            };
            score *= (clipped as f64 / cg.len() as f64).powf(w);
        }
        sum += score;
    }
    sum / cands.len() as f64
}

/// `None` when either corpus has no n-grams of order `n`.
fn oracle_jsd(p: &[String], q: &[String], n: usize) -> Option<f64> {
    let collect = |c: &[String]| -> Vec<Vec<char>> {
        c.iter()
            .flat_map(|s| grams(&s.chars().collect::<Vec<_>>(), n))
            .collect()
    };
    let (gp, gq) = (collect(p), collect(q));
    if gp.is_empty() || gq.is_empty() {
        return None;
    }
    let mut support: Vec<Vec<char>> = Vec::new();
    for g in gp.iter().chain(&gq) {
        if !support.contains(g) {
            support.push(g.clone());
        }
    }
    let mut total = 0.0;
    for g in &support {
        let a = occurrences(&gp, g) as f64 / gp.len() as f64;
        let b = occurrences(&gq, g) as f64 / gq.len() as f64;
        let m = (a + b) / 2.0;
        if a > 0.0 {
            total += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            total += 0.5 * b * (b / m).ln();
        }
    }
    Some(total)
}

fn random_corpus(rng: &mut ChaCha8Rng, alphabet: &[&str], joiner: &str) -> Vec<String> {
    let sentences = rng.random_range(1..=20);
    (0..sentences)
        .map(|_| {
            let len = rng.random_range(0..=8);
            (0..len)
                .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                .collect::<Vec<_>>()
                .join(joiner)
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    const SYMBOLS: [&str; 10] = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"];
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let vocab = &SYMBOLS[..rng.random_range(1..=10)];
        let (joiner, granularity) = if case % 2 == 0 { (" ", Granularity::Word) } else { ("", Granularity::Char) };
        let weights = if case % 4 < 2 { BleuWeights::Uniform } else { BleuWeights::Inverse };
        let opts = BleuOptions { granularity, weights };
        let mut cands = random_corpus(&mut rng, vocab, joiner);
        let refs = random_corpus(&mut rng, vocab, joiner);
        // Seed some verbatim candidates so non-zero scores are common.
        cands.extend(refs.iter().take(3).cloned());
        for n in 1..=4 {
            let got = bleu_n(&cands, &refs, n, opts).map_err(err)?;
            let want = oracle_bleu(&cands, &refs, n, opts);
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= 1e-12, || format!("corpus {case}: BLEU-{n} {got} vs oracle {want}"))?;

            let gen = random_corpus(&mut rng, vocab, "");
            let train = random_corpus(&mut rng, vocab, "");
            match (ngram_jsd(&gen, &train, n), oracle_jsd(&gen, &train, n)) {
                (Ok(got), Some(want)) => {
                    worst = worst.max((got - want).abs());
                    ensure((got - want).abs() <= 1e-12, || format!("corpus {case}: JSD-{n} {got} vs oracle {want}"))?;
                }
                (Err(textkd::Error::DegenerateCorpus { .. }), None) => {}
                (got, want) => return Err(format!("corpus {case}: JSD-{n} {got:?} vs oracle {want:?}")),
            }
        }
    }

    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    let tight = |a: f64, b: f64| (a - b).abs() <= 4.0 * f64::EPSILON;
    let b = bleu_n(&s(&["a b c"]), &s(&["a b d"]), 2, BleuOptions::default()).map_err(err)?;
    ensure(tight(b, (1.0f64 / 3.0).sqrt()), || format!("BLEU hand case gave {b}"))?;
    let j = ngram_jsd(&s(&["aaaa"]), &s(&["bbbb"]), 2).map_err(err)?;
    ensure(j == LN_2, || format!("disjoint JSD gave {j}"))?;
    let j = ngram_jsd(&s(&["ab", "ab", "cd"]), &s(&["ab", "cd", "cd"]), 2).map_err(err)?;
    let hand = (2.0 / 3.0) * (4.0f64 / 3.0).ln() + (1.0 / 3.0) * (2.0f64 / 3.0).ln();
    ensure(tight(j, hand), || format!("hand-count JSD gave {j}, expected {hand}"))?;
    Ok(format!("100 corpora, max |Δ| = {worst:.1e}; hand cases exact"))
}

// ---------------------------------------------------------------------------

fn gradient_audit() -> Outcome {
    let report = diagnostics::grad_audit(&AuditTarget::ALL, &AuditConfig::default()).map_err(err)?;
    let max = report.max_rel_error();
    ensure(report.passed() && max < 1e-4, || {
        format!("failing groups {:?}, max rel error {max:.2e}", report.failing_groups())
    })?;
    Ok(format!(
        "{} groups, max rel error {max:.2e}, {} kink entries skipped",
        report.groups.len(),
        report.skipped()
    ))
}

// ---------------------------------------------------------------------------

const PROPERTY_CASES: u32 = 10_000;

fn run_property<S: Strategy>(
    name: &str,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(PropConfig {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    runner.run(&strategy, test).map_err(|e| format!("{name}: {e}"))
}

fn small_shape() -> ConvNetShape {
    ConvNetShape {
        seq_len: 4,
        vocab_size: 5,
        channels: 8,
        res_blocks: 1,
        kernel_size: 3,
        residual_scale: 0.3,
    }
}

fn corpus_strategy() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec("[a-e ]{0,6}", 1..8)
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = small_shape();
    let generator = Generator::<f64>::new(shape, 8, &mut rng).map_err(err)?;
    let critic = Critic::<f64>::new(shape, &mut rng).map_err(err)?;
    let tv = shape.seq_len * shape.vocab_size;

    run_property("row normalization", any::<u64>(), |seed| {
        let z = sample_noise::<f64, _>(&mut ChaCha8Rng::seed_from_u64(seed), 2, 8);
        let out = generator.generate_batch(&z).map_err(|e| TestCaseError::fail(e.to_string()))?;
        for p in split_batch(&out, shape.seq_len) {
            let m = p.into_matrix();
            ProbSequence::new(m.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            for r in 0..m.rows() {
                let s: f64 = m.row(r).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12, "row sums to {s}");
            }
        }
        Ok(())
    })?;

    let vocab = build_vocab(["abcde "], 100).map_err(err)?;
    run_property("one-hot round trip", "[a-e ]{0,8}", |s| {
        let enc = vocab.encode(&s, 8);
        let oh = one_hot(&enc, vocab.size()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let p = ProbSequence::new(oh.to_matrix::<f64>()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert_eq!(decode_text(&p, &vocab), s);
        Ok(())
    })?;

    let pair = (
        prop::collection::vec(0.0f64..1.0, 2 * tv),
        prop::collection::vec(0.0f64..1.0, 2 * tv),
    );
    run_property("interpolation endpoints", pair, |(r, g)| {
        let real = Tensor::from_vec(2 * shape.seq_len, shape.vocab_size, r);
        let gen = Tensor::from_vec(2 * shape.seq_len, shape.vocab_size, g);
        let fail = |e: textkd::Error| TestCaseError::fail(e.to_string());
        prop_assert_eq!(&interpolate(&real, &gen, 1.0).map_err(fail)?, &real);
        prop_assert_eq!(&interpolate(&real, &gen, 0.0).map_err(fail)?, &gen);
        let mixed = interpolate_batch(&real, &gen, &[1.0, 0.0], shape.seq_len).map_err(fail)?;
        prop_assert_eq!(&mixed.data()[..tv], &real.data()[..tv]);
        prop_assert_eq!(&mixed.data()[tv..], &gen.data()[tv..]);
        Ok(())
    })?;

    let gp_case = (
        prop::collection::vec(-3.0f64..3.0, tv),
        prop::collection::vec(0.0f64..1.0, 2 * tv),
        0.01f64..100.0,
    );
    run_property("gradient penalty", gp_case, |(w, x, lambda)| {
        let x_hat = Tensor::from_vec(2 * shape.seq_len, shape.vocab_size, x);
        let fail = |e: textkd::Error| TestCaseError::fail(e.to_string());
        let linear = LinearCritic {
            seq_len: shape.seq_len,
            weights: Tensor::from_vec(tv, 1, w.clone()),
            bias: 0.0,
        };
        let gp = gradient_penalty(&|_| linear.clone(), &x_hat, lambda).map_err(fail)?;
        prop_assert!(gp >= 0.0);
        let gp = gradient_penalty(&|g| critic.bind(g), &x_hat, lambda).map_err(fail)?;
        prop_assert!(gp >= 0.0);
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(norm > 1e-3);
        let unit = LinearCritic {
            seq_len: shape.seq_len,
            weights: Tensor::from_vec(tv, 1, w.iter().map(|v| v / norm).collect()),
            bias: 0.0,
        };
        let gp = gradient_penalty(&|_| unit.clone(), &x_hat, lambda).map_err(fail)?;
        prop_assert!(gp.abs() < 1e-20 * lambda.max(1.0), "unit-norm critic gave {gp}");
        Ok(())
    })?;

    run_property("metric ranges and JSD symmetry", (corpus_strategy(), corpus_strategy(), 1usize..5), |(a, b, n)| {
        let b_score = bleu_n(&a, &b, n, BleuOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!((0.0..=1.0).contains(&b_score));
        match (ngram_jsd(&a, &b, n), ngram_jsd(&b, &a, n)) {
            (Ok(x), Ok(y)) => {
                prop_assert!((0.0..=LN_2).contains(&x));
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
            (Err(_), Err(_)) => {}
            (x, y) => return Err(TestCaseError::fail(format!("asymmetric errors {x:?} / {y:?}"))),
        }
        Ok(())
    })?;
    Ok(format!("5 properties × {PROPERTY_CASES} cases, 0 failures"))
}

// ---------------------------------------------------------------------------

const OVERFIT_SENTENCES: [&str; 10] = [
    "the cat sat.",
    "a dog ran home",
    "birds can fly",
    "we like tea",
    "it is cold",
    "rain fell all day",
    "she reads books",
    "he sings",
    "time flies",
    "ok, go now!",
];

fn ae_overfit() -> Outcome {
    let t = 16;
    let vocab = build_vocab(OVERFIT_SENTENCES, 100).map_err(err)?;
    let enc: Vec<EncodedSentence> = OVERFIT_SENTENCES.iter().map(|s| vocab.encode(s, t)).collect();
    let refs: Vec<&EncodedSentence> = enc.iter().collect();
    let x = Batch::new(&refs, vocab.size()).map_err(err)?.one_hot_matrix::<f32>();
    let target = x.argmax_rows();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ae = Autoencoder::<f32>::new(vocab.size(), 64, vocab.pad_id(), &mut rng);
    let mut opt = Adam::new(AdamConfig::new(3e-3, 0.9, 0.9), &ae.params);
    let mut best = (0.0, 0.0);
    for step in 1..=5000u64 {
        ae.train_step(&x, t, &mut opt, step - 1).map_err(err)?;
        if step % 100 != 0 {
            continue;
        }
        let got = ae.reconstruct(&x, t).map_err(err)?.argmax_rows();
        let all = got.iter().zip(&target).filter(|(a, b)| a == b).count() as f64 / target.len() as f64;
        let (mut hit, mut total) = (0, 0);
        for (a, b) in got.iter().zip(&target) {
            if *b != vocab.pad_id() {
                total += 1;
                hit += usize::from(a == b);
            }
        }
        let text = hit as f64 / total as f64;
        best = (all, text);
        if all >= 0.99 && text >= 0.99 {
            return Ok(format!("{:.2}% of positions ({:.2}% of text characters) after {step} steps", all * 100.0, text * 100.0));
        }
    }
    Err(format!("accuracy {:.2}% / {:.2}% after 5000 steps", best.0 * 100.0, best.1 * 100.0))
}

// ---------------------------------------------------------------------------

fn desk_config(mode: Mode, iterations: u64) -> TrainConfig {
    let mut c = TrainConfig::default();
    for kv in [
        "seq_len=16",
        "batch_size=64",
        "critic_iters=5",
        "hidden=64",
        "noise_dim=32",
        "channels=32",
        "res_blocks=2",
        "gan_lr=1e-3",
        "eval_every=100",
        "eval_samples=640",
        "checkpoint_every=1000",
    ] {
        c.apply_override(kv).expect("desk override");
    }
    c.mode = mode;
    c.iterations = iterations;
    c
}

fn desk_corpus() -> Vec<String> {
    regular_corpus(2000, 16, 7)
}

fn metrics_rows(path: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = fs::read_to_string(path).map_err(err)?;
    let mut lines = text.lines();
    ensure(lines.next() == Some(MetricsWriter::HEADER), || "metrics header".into())?;
    Ok(lines
        .map(|l| l.split(',').map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        .collect())
}

fn desk_trend(results: &mut BTreeMap<&'static str, f64>) -> Outcome {
    let corpus = desk_corpus();
    let mut lines = Vec::new();
    for mode in Mode::ALL {
        let dir = tempfile::tempdir().map_err(err)?;
        let cfg = desk_config(mode, 2000);
        let out = training::train(cfg, &corpus, Some(dir.path())).map_err(err)?;
        let rows = metrics_rows(&dir.path().join("metrics.csv"))?;
        ensure(rows.len() == 2000, || format!("{mode}: {} metric rows", rows.len()))?;
        for r in &rows {
            // l_ae is empty in iwgan mode and parses as NaN; skip that column there.
            let cols: Vec<f64> = match mode {
                Mode::TextKd => r.clone(),
                Mode::Iwgan => vec![r[0], r[2], r[3]],
            };
            ensure(cols.iter().all(|v| v.is_finite()), || format!("{mode}: non-finite row {r:?}"))?;
        }
        let final_ckpt = checkpoint::load(&dir.path().join(checkpoint_name(2000))).map_err(err)?;
        let hist = &final_ckpt.history;
        let first = hist.first().and_then(|r| r.jsd1).ok_or("missing initial JSD")?;
        let last = hist.last().filter(|r| r.iteration == 2000).and_then(|r| r.jsd1).ok_or("missing final JSD")?;
        ensure(out.state.history == *hist, || "final checkpoint history differs from the run".into())?;
        let drop = 1.0 - last / first;
        results.insert(mode.as_str(), last);
        lines.push(format!("{mode} JSD-1 {first:.4} → {last:.4} ({:.0}% drop)", drop * 100.0));
        ensure(drop >= 0.5, || format!("{mode}: JSD-1 {first:.4} → {last:.4} is only a {:.0}% drop", drop * 100.0))?;
    }
    let (tk, iw) = (results["textkd"], results["iwgan"]);
    lines.push(format!(
        "final JSD-1 textkd {tk:.4} vs iwgan {iw:.4} ({} lower; recorded only)",
        if tk < iw { "textkd" } else { "iwgan" }
    ));
    Ok(lines.join("; "))
}

// ---------------------------------------------------------------------------

fn dir_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).map_err(err)? {
        let e = e.map_err(err)?;
        out.insert(e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).map_err(err)?);
    }
    Ok(out)
}

fn determinism_and_resume() -> Outcome {
    let corpus = desk_corpus();
    let mut cfg = desk_config(Mode::TextKd, 100);
    cfg.checkpoint_every = 50;
    cfg.eval_every = 25;
    let (a, b, c) = (
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
    );
    training::train(cfg.clone(), &corpus, Some(a.path())).map_err(err)?;
    training::train(cfg.clone(), &corpus, Some(b.path())).map_err(err)?;
    let ckpt_a = dir_bytes(&a.path().join(checkpoint_name(100)))?;
    ensure(ckpt_a == dir_bytes(&b.path().join(checkpoint_name(100)))?, || {
        "two identical runs produced different checkpoints at iteration 100".into()
    })?;
    let mid = checkpoint::load(&a.path().join(checkpoint_name(50))).map_err(err)?;
    training::resume(mid, &corpus, 100, Some(c.path())).map_err(err)?;
    ensure(ckpt_a == dir_bytes(&c.path().join(checkpoint_name(100)))?, || {
        "resuming from iteration 50 diverged from the uninterrupted run".into()
    })?;
    Ok(format!("{} checkpoint files bit-identical across reruns and resume from 50", ckpt_a.len()))
}

// ---------------------------------------------------------------------------

fn two_word() -> Outcome {
    let cfg = TwoWordConfig::default();
    let report = diagnostics::two_word_experiment(&cfg).map_err(err)?;
    let bayes = diagnostics::bayes_accuracy(Geometry::SoftenedVsSegment, cfg.radius, 1 << 16);
    let (one_hot, soft, control) = (report.one_hot.accuracy, report.softened.accuracy, report.control.accuracy);
    let summary = format!("one-hot {one_hot:.4}, softened {soft:.4} (Bayes {bayes:.4}), control {control:.4}");
    ensure((one_hot - 1.0).abs() <= 0.01, || summary.clone())?;
    ensure((soft - bayes).abs() <= 0.05, || summary.clone())?;
    ensure((control - 0.5).abs() <= 0.05, || summary.clone())?;
    Ok(summary)
}

// ---------------------------------------------------------------------------

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut desk = BTreeMap::new();
    type Check<'a> = Box<dyn FnMut() -> Outcome + 'a>;
    let criteria: Vec<(&str, &str, Duration, Check)> = vec![
        ("1", "metric oracle equivalence", Duration::from_secs(10), Box::new(metric_oracles)),
        ("2", "gradient audit", Duration::from_secs(120), Box::new(gradient_audit)),
        ("3", "structural invariants", Duration::from_secs(60), Box::new(structural_invariants)),
        ("4", "autoencoder overfit", Duration::from_secs(300), Box::new(ae_overfit)),
        ("5", "desk-scale training trend", Duration::from_secs(1800), Box::new(|| desk_trend(&mut desk))),
        ("6", "determinism and resume", Duration::from_secs(300), Box::new(determinism_and_resume)),
        ("7", "two-word diagnostic", Duration::from_secs(120), Box::new(two_word)),
    ];
    let mut failed = 0;
    for (id, name, budget, mut check) in criteria {
        if filter.as_deref().is_some_and(|f| !name.contains(f) && f != id) {
            continue;
        }
        let start = Instant::now();
        let result = check();
        let took = start.elapsed();
        let verdict = match result {
            Ok(detail) if took <= budget => format!("PASS criterion {id} ({name}): {detail} [{took:.1?}]"),
            Ok(detail) => format!("FAIL criterion {id} ({name}): {detail}, but took {took:.1?} > {budget:?}"),
            Err(why) => format!("FAIL criterion {id} ({name}): {why} [{took:.1?}]"),
        };
        if verdict.starts_with("FAIL") {
            failed += 1;
        }
        println!("{verdict}");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
