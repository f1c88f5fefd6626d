use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Embedder, EmbeddingVector, GatewayError};
use crate::retriever::tokenize;

/// Deterministic pseudo-embeddings for tests and offline runs.
///
/// Each token maps to a fixed pseudo-random direction derived from a hash of
/// `(seed, token)`; a text embeds as the normalized sum of its token
/// directions. Identical texts therefore get identical vectors, and texts
/// sharing vocabulary land close together. Specific texts can be pinned to
/// hand-chosen vectors to script similarity in fixtures.
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
    model: String,
    pinned: HashMap<String, Vec<f64>>,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self {
            dim,
            seed,
            model: format!("hash-bow-{dim}"),
            pinned: HashMap::new(),
        }
    }

    /// Pin `text` to a fixed vector (normalized on use).
    pub fn pin(mut self, text: impl Into<String>, vector: Vec<f64>) -> Self {
        assert_eq!(vector.len(), self.dim, "pinned vector has wrong dimension");
        self.pinned.insert(text.into(), vector);
        self
    }

    fn token_direction(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn embed_one(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        if text.trim().is_empty() {
            return Err(GatewayError::InvalidInput("cannot embed empty text".into()));
        }
        let mut acc = match self.pinned.get(text) {
            Some(v) => v.clone(),
            None => {
                let mut tokens = tokenize(text);
                if tokens.is_empty() {
                    tokens.push(text.trim().to_string());
                }
                let mut acc = vec![0.0; self.dim];
                for token in &tokens {
                    for (a, d) in acc.iter_mut().zip(self.token_direction(token)) {
                        *a += d;
                    }
                }
                acc
            }
        };
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm.is_nan() || norm <= 0.0 || !norm.is_finite() {
            return Err(GatewayError::InvalidInput(format!(
                "degenerate embedding for {text:?}"
            )));
        }
        acc.iter_mut().for_each(|x| *x /= norm);
        Ok(acc)
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.is_empty() {
            return Err(GatewayError::InvalidInput("no texts to embed".into()));
        }
        texts
            .iter()
            .map(|t| {
                Ok(EmbeddingVector {
                    values: self.embed_one(t)?,
                    model: self.model.clone(),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn identical_text_identical_vector() {
        let e = HashEmbedder::new(64, 7);
        let out = e.embed(&["a".into(), "a".into()]).unwrap();
        assert_eq!(out[0], out[1]);
        assert_eq!(out[0].values.len(), 64);
    }

    #[test]
    fn unit_norm() {
        let e = HashEmbedder::new(64, 7);
        for text in ["a", "real leather cap", "Battery life!!", "???"] {
            let v = &e.embed(&[text.to_string()]).unwrap()[0].values;
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9, "{text}: {n}");
        }
    }

    #[test]
    fn empty_input_rejected() {
        let e = HashEmbedder::new(8, 1);
        assert!(matches!(e.embed(&[]), Err(GatewayError::InvalidInput(_))));
        assert!(matches!(
            e.embed(&["  ".into()]),
            Err(GatewayError::InvalidInput(_))
        ));
    }

    #[test]
    fn cosine_metric_properties() {
        let e = HashEmbedder::new(64, 3);
        let v = e
            .embed(&[
                "leather cap".into(),
                "leather hat".into(),
                "usb battery".into(),
            ])
            .unwrap();
        assert!((cos(&v[0].values, &v[0].values) - 1.0).abs() < 1e-12);
        assert_eq!(
            cos(&v[0].values, &v[1].values),
            cos(&v[1].values, &v[0].values)
        );
        assert!(cos(&v[0].values, &v[1].values) > cos(&v[0].values, &v[2].values));
    }

    #[test]
    fn pinned_vectors_override() {
        let mut p = vec![0.0; 4];
        p[2] = 2.0;
        let e = HashEmbedder::new(4, 0).pin("special", p);
        let v = &e.embed(&["special".into()]).unwrap()[0].values;
        assert_eq!(v, &vec![0.0, 0.0, 1.0, 0.0]);
    }
}
