//! Deterministic toy text encoder over a closed vocabulary.
//!
//! Token embeddings are frozen pseudo-random vectors derived from the token
//! id; a prompt embedding is their mean. The trainable part (a projection
//! into the denoiser width) lives in the denoiser itself.

use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const UNKNOWN_TOKEN: usize = 0;

const VOCAB: &[&str] = &[
    "<unk>", "a", "person", "walks", "in", "straight", "line", "circle", "and", "raises",
    "their", "hand", "stands", "waves", "jumps", "forward", "sits", "down", "slowly",
    "quickly", "the", "while", "walking",
];

/// Fixed word list shared by the dataset prompts and the encoder.
#[derive(Debug, Clone)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn token_id(word: &str) -> Option<usize> {
        VOCAB.iter().position(|w| *w == word)
    }

    pub fn contains(word: &str) -> bool {
        Self::token_id(word).is_some()
    }

    pub fn size() -> usize {
        VOCAB.len()
    }
}

/// Tokenized prompt with its frozen embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextCondition {
    pub token_ids: Vec<usize>,
    pub embedding: Array1<f64>,
}

impl TextCondition {
    pub fn is_null(&self) -> bool {
        self.token_ids.is_empty()
    }
}

fn token_embedding(token_id: usize, dim: usize) -> Array1<f64> {
    // Frozen per-token vector; the seed ties it to the id only.
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e87_0000 + token_id as u64);
    Array1::from_shape_fn(dim, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Encode a whitespace-separated prompt. Unknown words fall back to the
/// unknown-token id; the empty prompt yields the all-zero null embedding.
pub fn encode_text(prompt: &str, embed_dim: usize) -> TextCondition {
    let token_ids: Vec<usize> = prompt
        .split_whitespace()
        .map(|w| Vocabulary::token_id(&w.to_lowercase()).unwrap_or(UNKNOWN_TOKEN))
        .collect();
    if token_ids.is_empty() {
        return TextCondition { token_ids, embedding: Array1::zeros(embed_dim) };
    }
    let mut embedding = Array1::zeros(embed_dim);
    for &id in &token_ids {
        embedding += &token_embedding(id, embed_dim);
    }
    embedding /= token_ids.len() as f64;
    TextCondition { token_ids, embedding }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_is_deterministic() {
        let a = encode_text("a person walks in a circle", 16);
        let b = encode_text("a person walks in a circle", 16);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_prompts_differ() {
        let a = encode_text("a person walks in a circle", 16);
        let b = encode_text("a person jumps forward", 16);
        assert!(a.embedding.iter().zip(b.embedding.iter()).any(|(x, y)| x != y));
    }

    #[test]
    fn empty_prompt_is_null_embedding() {
        let e = encode_text("", 16);
        assert!(e.is_null());
        assert!(e.embedding.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unknown_words_fall_back_to_unk() {
        let e = encode_text("a person moonwalks", 16);
        assert_eq!(e.token_ids[2], UNKNOWN_TOKEN);
    }
}
