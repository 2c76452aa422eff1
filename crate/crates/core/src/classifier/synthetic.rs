//! Seeded, linearly separable corpus used for smoke training and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Threat vocabulary; appears only in positive documents.
pub const IOC_LEXICON: [&str; 10] = [
    "ransomware",
    "botnet",
    "exploit",
    "payload",
    "phishing",
    "malware",
    "backdoor",
    "trojan",
    "beacon",
    "exfiltration",
];

/// Appears only in negative documents.
pub const BENIGN_LEXICON: [&str; 10] = [
    "recipe", "holiday", "football", "garden", "concert", "weather", "novel", "museum", "coffee",
    "puppy",
];

/// Shared by both classes, carries no signal.
const FILLER: [&str; 12] = [
    "the", "a", "today", "new", "about", "we", "saw", "this", "and", "very", "people", "post",
];

/// `n` documents alternating positive and negative, deterministic in `seed`.
pub fn separable_corpus(n: usize, seed: u64) -> Vec<(String, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let positive = i % 2 == 0;
            let lex: &[&str] = if positive {
                &IOC_LEXICON
            } else {
                &BENIGN_LEXICON
            };
            let len = rng.gen_range(6..=14);
            let mut words: Vec<&str> = (0..len)
                .map(|_| *FILLER.choose(&mut rng).unwrap())
                .collect();
            for _ in 0..rng.gen_range(2..=4) {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, lex.choose(&mut rng).unwrap());
            }
            (words.join(" "), positive)
        })
        .collect()
}
