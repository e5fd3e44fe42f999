//! Toy text encoder: a seeded hash of the prompt into a fixed-width
//! embedding. Keeps every external model out of the test path while giving
//! distinct prompts distinct embeddings with probability ~1.

use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        ToyTextEncoder { dim, seed }
    }

    pub fn embed(&self, prompt: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let stream = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha12Rng::seed_from_u64(stream);
        Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(&mut rng))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embeddings_are_deterministic_and_prompt_sensitive() {
        let enc = ToyTextEncoder::new(16, 7);
        assert_eq!(enc.embed("a dog"), enc.embed("a dog"));
        assert_ne!(enc.embed("a dog"), enc.embed("a cat"));
        assert_ne!(enc.embed("a dog"), ToyTextEncoder::new(16, 8).embed("a dog"));
        assert_eq!(enc.embed("a dog").len(), 16);
    }
}
