use proptest::prelude::*;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use textkd::eval::{bleu_n, ngram_jsd, BleuOptions};
use textkd::synthetic::regular_corpus;

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

#[test]
fn self_sample_scores_as_real_text() {
    let refs: Vec<String> = regular_corpus(8000, 32, 11)
        .into_iter()
        .filter(|x| x.split(' ').count() >= 4)
        .collect();
    assert!(refs.len() > 1000);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cands: Vec<String> = refs.choose_multiple(&mut rng, 640).cloned().collect();
    let b2 = bleu_n(&cands, &refs, 2, BleuOptions::default()).unwrap();
    let j1 = ngram_jsd(&cands, &refs, 1).unwrap();
    assert!(b2 > 0.99, "{b2}");
    assert!(j1 < 0.05, "{j1}");
}

#[test]
fn more_references_can_raise_higher_orders() {
    // Unigrams clip against one reference at a time, bigrams against another.
    let c = s(&["a b a b"]);
    let r = s(&["a b", "b a"]);
    let b1 = bleu_n(&c, &r, 1, BleuOptions::default()).unwrap();
    let b2 = bleu_n(&c, &r, 2, BleuOptions::default()).unwrap();
    assert!((b1 - 0.5).abs() < 1e-15);
    assert!((b2 - (0.5f64 * (2.0 / 3.0)).sqrt()).abs() < 1e-15);
    assert!(b2 > b1);
}

fn sentence(min_words: usize) -> impl Strategy<Value = String> {
    prop::collection::vec("[a-f]{1,3}", min_words..min_words + 5).prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn verbatim_candidates_score_one(
        refs in prop::collection::vec(sentence(4), 1..10),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 1..10),
        n in 1usize..=4,
    ) {
        let cands: Vec<String> = picks.iter().map(|i| i.get(&refs).clone()).collect();
        prop_assert_eq!(bleu_n(&cands, &refs, n, BleuOptions::default()).unwrap(), 1.0);
    }

    #[test]
    fn jsd_is_zero_only_for_identical_distributions(
        a in prop::collection::vec("[a-c]{1,6}", 1..6),
        b in prop::collection::vec("[a-c]{1,6}", 1..6),
    ) {
        let doubled: Vec<String> = a.iter().chain(&a).cloned().collect();
        prop_assert_eq!(ngram_jsd(&a, &doubled, 1).unwrap(), 0.0);
        let j = ngram_jsd(&a, &b, 1).unwrap();
        let mut ca: Vec<char> = a.concat().chars().collect();
        let mut cb: Vec<char> = b.concat().chars().collect();
        ca.sort();
        cb.sort();
        let same = ['a', 'b', 'c'].iter().all(|x| {
            let fa = ca.iter().filter(|c| *c == x).count() as f64 / ca.len() as f64;
            let fb = cb.iter().filter(|c| *c == x).count() as f64 / cb.len() as f64;
            fa == fb
        });
        prop_assert_eq!(j == 0.0, same, "jsd {}", j);
    }
}
