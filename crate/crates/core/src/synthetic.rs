//! A small regular language over `{a, b, c, d, ' '}` for end-to-end checks.
//!
//! A sentence is one or more words separated by single spaces, where a word
//! matches `ab+ | cd | dac | bca*`, and the whole sentence fits in `max_len`
//! characters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ALPHABET: [char; 5] = ['a', 'b', 'c', 'd', ' '];

fn word(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..10) {
        0..=3 => format!("a{}", "b".repeat(rng.random_range(1..=3))),
        4..=6 => "cd".to_owned(),
        7..=8 => "dac".to_owned(),
        _ => format!("bc{}", "a".repeat(rng.random_range(0..=2))),
    }
}

/// Whether `s` is a sentence of the language (ignoring the length bound).
pub fn is_sentence(s: &str) -> bool {
    !s.is_empty() && s.split(' ').all(is_word)
}

fn is_word(w: &str) -> bool {
    if let Some(rest) = w.strip_prefix("ab") {
        return rest.chars().all(|c| c == 'b');
    }
    if let Some(rest) = w.strip_prefix("bc") {
        return rest.chars().all(|c| c == 'a');
    }
    w == "cd" || w == "dac"
}

/// `n` sentences of at most `max_len` characters, deterministic in `seed`.
pub fn regular_corpus(n: usize, max_len: usize, seed: u64) -> Vec<String> {
    assert!(max_len >= 4, "the longest word needs 4 characters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let target = rng.random_range(1..=4);
            let mut s = word(&mut rng);
            while s.len() > max_len {
                s = word(&mut rng);
            }
            for _ in 1..target {
                let w = word(&mut rng);
                if s.len() + 1 + w.len() > max_len {
                    break;
                }
                s.push(' ');
                s.push_str(&w);
            }
            s
        })
        .collect()
}
