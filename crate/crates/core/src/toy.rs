//! A seeded synthetic evaluation task with a known quality signal.
//!
//! Sources and references are random word sequences related by a fixed
//! one-to-one word map that preserves order. Hypotheses come from the corpus
//! synthesizer, so their quality is measured exactly by how much of the
//! reference survives: `noise = 1 − LCS(hyp, ref)/|ref|`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{synthesize_corpus, DegradePolicy, RawTriplet, Vocab, SPECIAL_TOKENS};
use crate::error::Result;
use crate::labeling::z_normalize;

/// Target-side and source-side word types; with the specials this fills a
/// 512-entry vocabulary.
pub const WORDS_PER_SIDE: usize = 254;
pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 14;

fn target_word(i: usize) -> String {
    format!("t{i:03}")
}

/// Source word aligned with target word `i`. The map is a fixed bijection.
fn source_word(i: usize) -> String {
    format!("s{:03}", (i * 97 + 31) % WORDS_PER_SIDE)
}

/// The full toy vocabulary, independent of any sampled corpus.
pub fn toy_vocab() -> Vocab {
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain((0..WORDS_PER_SIDE).map(target_word))
        .chain((0..WORDS_PER_SIDE).map(|i| format!("s{i:03}")))
        .collect();
    Vocab::from_tokens(tokens).expect("specials lead the list")
}

/// `n` seeded `(source, reference)` pairs.
pub fn toy_parallel(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(MIN_LEN..=MAX_LEN);
            let ids: Vec<usize> = (0..len).map(|_| rng.gen_range(0..WORDS_PER_SIDE)).collect();
            let src: Vec<String> = ids.iter().map(|&i| source_word(i)).collect();
            let reference: Vec<String> = ids.iter().map(|&i| target_word(i)).collect();
            (src.join(" "), reference.join(" "))
        })
        .collect()
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Fraction of the reference lost in the hypothesis.
pub fn noise_level(hyp: &str, reference: &str) -> f64 {
    let h: Vec<&str> = hyp.split_whitespace().collect();
    let r: Vec<&str> = reference.split_whitespace().collect();
    if r.is_empty() {
        return 0.0;
    }
    1.0 - lcs_len(&h, &r) as f64 / r.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyTask {
    pub triplets: Vec<RawTriplet>,
    pub noise: Vec<f64>,
    /// Z-normalized negative noise: higher is better.
    pub gold: Vec<f64>,
}

/// Synthesizes `n` triplets with the default degradation policy.
pub fn toy_task(n: usize, seed: u64) -> Result<ToyTask> {
    let policy = DegradePolicy {
        seed,
        ..DegradePolicy::default()
    };
    let triplets = synthesize_corpus(&toy_parallel(n, seed), &policy)?;
    let noise: Vec<f64> = triplets.iter().map(|t| noise_level(&t.hyp, &t.reference)).collect();
    let neg: Vec<f64> = noise.iter().map(|v| -v).collect();
    let gold = z_normalize(&neg);
    Ok(ToyTask { triplets, noise, gold })
}
