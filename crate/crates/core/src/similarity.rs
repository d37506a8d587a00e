//! Sentence embeddings and cosine similarity.
//!
//! Each token id maps to a pseudo-random unit vector determined by
//! `(hash_seed, token id)`; a sentence embedding is the normalized weighted
//! sum of its token vectors. Two scorers with different seeds and weighting
//! stand in for the filter/reward similarity model and the evaluation model.

use rand_distr::{Distribution, StandardNormal};

use crate::corpus::{ParallelPair, TokenId};
use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Cosine similarity; zero when either side is the zero vector.
    pub fn cosine(&self, other: &EmbeddingVector) -> f64 {
        if self.is_zero() || other.is_zero() {
            return 0.0;
        }
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Weighting {
    Uniform,
    /// Smoothed inverse document frequency from per-token counts.
    InverseFrequency { token_freq: Vec<u64> },
}

#[derive(Clone, Debug)]
pub struct SimScorer {
    dimension: usize,
    hash_seed: u64,
    weighting: Weighting,
    token_vectors: Vec<Vec<f64>>,
    token_weights: Vec<f64>,
}

impl SimScorer {
    pub fn new(
        dimension: usize,
        hash_seed: u64,
        weighting: Weighting,
        vocab_size: usize,
    ) -> Result<Self> {
        if dimension < 8 {
            return Err(Error::Config(format!(
                "embedding dimension must be >= 8, got {dimension}"
            )));
        }
        let token_weights = match &weighting {
            Weighting::Uniform => vec![1.0; vocab_size],
            Weighting::InverseFrequency { token_freq } => {
                if token_freq.len() != vocab_size {
                    return Err(Error::Config(format!(
                        "token_freq has {} entries for a vocabulary of {vocab_size}",
                        token_freq.len()
                    )));
                }
                let total: u64 = token_freq.iter().sum();
                token_freq
                    .iter()
                    .map(|&c| (1.0 + total as f64 / (1.0 + c as f64)).ln())
                    .collect()
            }
        };
        let token_vectors = (0..vocab_size)
            .map(|id| {
                let mut r = rng::stream(hash_seed, &[tag::SIM_TOKEN, id as u64]);
                let v: Vec<f64> = (0..dimension)
                    .map(|_| StandardNormal.sample(&mut r))
                    .collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect()
            })
            .collect();
        Ok(SimScorer {
            dimension,
            hash_seed,
            weighting,
            token_vectors,
            token_weights,
        })
    }

    /// Uniform-weight scorer.
    pub fn uniform(dimension: usize, hash_seed: u64, vocab_size: usize) -> Result<Self> {
        Self::new(dimension, hash_seed, Weighting::Uniform, vocab_size)
    }

    /// Inverse-frequency scorer with counts taken from `sentences`.
    pub fn inverse_frequency<'a>(
        dimension: usize,
        hash_seed: u64,
        vocab_size: usize,
        sentences: impl IntoIterator<Item = &'a [TokenId]>,
    ) -> Result<Self> {
        let mut token_freq = vec![0u64; vocab_size];
        for s in sentences {
            for &t in s {
                if let Some(c) = token_freq.get_mut(t as usize) {
                    *c += 1;
                }
            }
        }
        Self::new(
            dimension,
            hash_seed,
            Weighting::InverseFrequency { token_freq },
            vocab_size,
        )
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn hash_seed(&self) -> u64 {
        self.hash_seed
    }

    pub fn weighting(&self) -> &Weighting {
        &self.weighting
    }

    pub fn token_vector(&self, id: TokenId) -> &[f64] {
        &self.token_vectors[id as usize]
    }

    /// Bag-of-tokens embedding. Out-of-range ids are ignored; an empty
    /// sentence embeds to the zero vector.
    pub fn embed(&self, s: &[TokenId]) -> EmbeddingVector {
        let mut acc = vec![0.0; self.dimension];
        for &t in s {
            let Some(v) = self.token_vectors.get(t as usize) else {
                continue;
            };
            let w = self.token_weights[t as usize];
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            for a in &mut acc {
                *a /= n;
            }
        }
        EmbeddingVector(acc)
    }

    pub fn sim(&self, a: &[TokenId], b: &[TokenId]) -> f64 {
        self.embed(a).cosine(&self.embed(b))
    }
}

/// Keeps pairs whose toxic/reference similarity is at least `alpha`, in order.
pub fn filter_pairs(scorer: &SimScorer, pairs: &[ParallelPair], alpha: f64) -> Vec<ParallelPair> {
    pairs
        .iter()
        .filter(|p| scorer.sim(&p.toxic, &p.reference) >= alpha)
        .cloned()
        .collect()
}
