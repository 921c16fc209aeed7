//! Text embedding behind a pluggable interface.
//!
//! The default encoder hashes the content words of a prompt into a fixed-size
//! signed bag and L2-normalizes it. It is deterministic and needs no network
//! or weights; a real vision-language text tower can be slotted in behind the
//! same trait.

use ndarray::Array2;

use crate::{Error, Result};

/// Words excluded from the hashed bag (the prompt template plus glue).
const STOPWORDS: &[&str] = &[
    "a", "an", "the", "of", "photo", "is", "are", "on", "in", "at", "with", "and",
];

pub trait TextEncoder {
    /// Embedding dimension of every row this encoder produces.
    fn dim(&self) -> usize;

    /// Deterministic embedding; identical strings map to identical rows.
    fn embed(&self, prompt: &str) -> Result<Vec<f64>>;
}

/// Deterministic feature-hashing bag-of-content-words encoder.
#[derive(Debug, Clone)]
pub struct HashedBagEncoder {
    dim: usize,
}

impl HashedBagEncoder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }
}

impl TextEncoder for HashedBagEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &str) -> Result<Vec<f64>> {
        let mut acc = vec![0.0f64; self.dim];
        for word in prompt.split_whitespace() {
            let word = word.to_lowercase();
            if STOPWORDS.contains(&word.as_str()) {
                continue;
            }
            let h = fnv1a64(word.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            acc[idx] += sign;
        }
        if acc.iter().all(|&v| v == 0.0) {
            acc[0] = 1.0;
        }
        normalize(&mut acc);
        Ok(acc)
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
    if norm > 0.0 {
        for e in v.iter_mut() {
            *e /= norm;
        }
    }
}

/// 64-bit FNV-1a; stable across platforms and releases, unlike the std hasher.
fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Embed a batch of prompts into an `[n x dim]` matrix of L2-normalized rows.
pub fn embed_texts(prompts: &[String], encoder: &dyn TextEncoder) -> Result<Array2<f64>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("embed_texts needs at least one prompt".into()));
    }
    let dim = encoder.dim();
    let mut out = Array2::zeros((prompts.len(), dim));
    for (i, prompt) in prompts.iter().enumerate() {
        let mut row = encoder.embed(prompt).map_err(|e| Error::TextEncoder {
            prompt: prompt.clone(),
            msg: e.to_string(),
        })?;
        if row.len() != dim {
            return Err(Error::TextEncoder {
                prompt: prompt.clone(),
                msg: format!("encoder returned {} dims, expected {dim}", row.len()),
            });
        }
        normalize(&mut row);
        for (j, v) in row.into_iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_prompts_map_to_identical_rows() {
        let enc = HashedBagEncoder::new(64);
        let rows = embed_texts(
            &["a photo of man drive car".into(), "a photo of man drive car".into()],
            &enc,
        )
        .unwrap();
        for j in 0..64 {
            assert_eq!(rows[[0, j]], rows[[1, j]]);
        }
    }

    #[test]
    fn rows_are_unit_norm() {
        let enc = HashedBagEncoder::new(64);
        let rows = embed_texts(&["a photo of person ride horse".into()], &enc).unwrap();
        let norm: f64 = rows.row(0).iter().map(|e| e * e).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_content_words_raise_cosine() {
        // On a fixed 20-prompt corpus, prompts sharing 2 of 3 content words
        // score strictly higher than prompts sharing none.
        let enc = HashedBagEncoder::new(64);
        let corpus: Vec<String> = [
            ("man", "drive", "car"),
            ("man", "drive", "truck"),
            ("man", "ride", "horse"),
            ("woman", "ride", "horse"),
            ("woman", "hold", "cup"),
            ("boy", "throw", "ball"),
            ("girl", "catch", "ball"),
            ("person", "eat", "pizza"),
            ("person", "drink", "coffee"),
            ("man", "carry", "bag"),
            ("woman", "carry", "bag"),
            ("boy", "kick", "ball"),
            ("girl", "read", "book"),
            ("man", "wash", "car"),
            ("woman", "cut", "cake"),
            ("person", "open", "door"),
            ("man", "push", "cart"),
            ("girl", "pet", "dog"),
            ("boy", "fly", "kite"),
            ("woman", "paint", "wall"),
        ]
        .iter()
        .map(|(h, v, o)| format!("a photo of {h} {v} {o}"))
        .collect();
        let rows = embed_texts(&corpus, &enc).unwrap();
        let cos = |i: usize, j: usize| {
            cosine(rows.row(i).as_slice().unwrap(), rows.row(j).as_slice().unwrap())
        };
        // (man drive car, man drive truck): share 2 of 3.
        let share2 = cos(0, 1);
        // (man drive car, woman paint wall): share 0.
        let share0 = cos(0, 19);
        assert!(share2 > share0, "share2={share2} share0={share0}");
        // And again on a different pair.
        let share2b = cos(2, 3); // man ride horse / woman ride horse
        let share0b = cos(2, 8); // man ride horse / person drink coffee
        assert!(share2b > share0b);
    }
}
