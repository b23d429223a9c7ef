//! Deterministic offline embedder.
//!
//! Each lowercased alphanumeric token `t` is hashed with 64-bit FNV-1a over
//! its UTF-8 bytes. Bucket = `h % dim`; the token adds `+1` when bit 63 of
//! `h` is clear and `-1` when it is set. The accumulated vector is
//! L2-normalized in f64 and rounded to f32, so output is bit-identical on
//! every platform. Text without tokens embeds to the zero vector.

use crate::client::{ClientError, Embedder};
use crate::text::{fnv1a64, tokens};

pub const MOCK_EMBEDDER_ID: &str = "mock-hash-embedder-v1";
pub const DEFAULT_MOCK_DIM: usize = 384;

#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
}

impl MockEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        MockEmbedder { dim }
    }

    pub fn embed_one(&self, text: &str) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.dim];
        for tok in tokens(text) {
            let h = fnv1a64(tok.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            acc[bucket] += if h >> 63 == 0 { 1.0 } else { -1.0 };
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return vec![0.0; self.dim];
        }
        acc.iter().map(|x| (x / n) as f32).collect()
    }
}

impl Default for MockEmbedder {
    fn default() -> Self {
        MockEmbedder::new(DEFAULT_MOCK_DIM)
    }
}

impl Embedder for MockEmbedder {
    fn model_id(&self) -> &str {
        MOCK_EMBEDDER_ID
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}
