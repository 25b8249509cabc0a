use rand::Rng;
use rand_distr::StandardNormal;

use crate::dataset::View;
use crate::error::Result;
use crate::rng;

const TABLE_SEED: u64 = 0x5341_585f_4c41_5821;

/// Fixed view embeddings: orthonormal vectors, `tokens` per view, built from a
/// constant seed and never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTable {
    dim: usize,
    tokens: usize,
    sax: Vec<f64>,
    lax: Vec<f64>,
}

impl PromptTable {
    /// Requires `2 * tokens <= dim`.
    pub fn new(dim: usize, tokens: usize) -> Self {
        assert!(tokens >= 1 && 2 * tokens <= dim, "{tokens} prompt tokens per view need dim >= {}", 2 * tokens);
        let mut r = rng::stream(TABLE_SEED, &[dim as u64, tokens as u64]);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(2 * tokens);
        while basis.len() < 2 * tokens {
            let mut v: Vec<f64> = (0..dim).map(|_| r.sample(StandardNormal)).collect();
            for u in &basis {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        let lax = basis.split_off(tokens).concat();
        Self { dim, tokens, sax: basis.concat(), lax }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// `tokens x dim` row-major embedding of `view`.
    pub fn embed(&self, view: View) -> &[f64] {
        match view {
            View::Sax => &self.sax,
            View::Lax => &self.lax,
        }
    }

    /// Looks up a keyword; anything but `"SAX"` or `"LAX"` is rejected.
    pub fn embed_keyword(&self, keyword: &str) -> Result<&[f64]> {
        Ok(self.embed(keyword.parse()?))
    }
}
