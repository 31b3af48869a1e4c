//! Frozen text encoder: character n-gram feature hashing followed by a fixed
//! Gaussian random projection and L2 normalization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::splitmix64;

/// Gradient dimensions of the soft prompts in the reference models, usable as `dim`.
pub const PRESET_DIM_T5_BASE: usize = 768;
pub const PRESET_DIM_T5_XXL: usize = 4096;
pub const PRESET_DIM_PALM_62B: usize = 8192;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub ngram: usize,
    pub buckets: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            ngram: 3,
            buckets: 4096,
            seed: 0x5eed,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("encoder.dim", self.dim),
            ("encoder.ngram", self.ngram),
            ("encoder.buckets", self.buckets),
        ] {
            if v == 0 {
                return Err(Error::invalid(field, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Unit-norm embedding (or the zero vector for texts without any n-gram).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Character n-grams of ` text ` (one space of padding on each side).
pub fn char_ngrams(text: &str, n: usize) -> Vec<String> {
    let chars: Vec<char> = std::iter::once(' ')
        .chain(text.chars())
        .chain(std::iter::once(' '))
        .collect();
    if chars.len() < n {
        return Vec::new();
    }
    chars.windows(n).map(|w| w.iter().collect()).collect()
}

pub fn bucket_of(ngram: &str, buckets: usize) -> usize {
    (fnv1a(ngram.as_bytes()) % buckets as u64) as usize
}

#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    /// `buckets x dim`, row-major.
    projection: Vec<f64>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, 1.0 / (config.dim as f64).sqrt()).expect("finite std");
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(config.seed));
        let projection = (0..config.buckets * config.dim)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Ok(Encoder { config, projection })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn projection_row(&self, bucket: usize) -> &[f64] {
        let d = self.config.dim;
        &self.projection[bucket * d..(bucket + 1) * d]
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingVector {
        let d = self.config.dim;
        let mut counts: Vec<(usize, f64)> = Vec::new();
        for gram in char_ngrams(text, self.config.ngram) {
            let b = bucket_of(&gram, self.config.buckets);
            match counts.iter_mut().find(|(k, _)| *k == b) {
                Some((_, c)) => *c += 1.0,
                None => counts.push((b, 1.0)),
            }
        }
        let mut v = vec![0.0; d];
        for (b, c) in counts {
            for (vi, &w) in v.iter_mut().zip(self.projection_row(b)) {
                *vi += c * w;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector(v)
    }

    pub fn embed_batch<S: AsRef<str>>(&self, texts: &[S]) -> Vec<EmbeddingVector> {
        texts.iter().map(|t| self.embed_text(t.as_ref())).collect()
    }
}
