use serde::{Deserialize, Serialize};

use crate::error::DomainError;

pub const DEFAULT_EMBEDDING_DIM: usize = 64;

/// Seeded feature-hashing embedding onto the unit sphere.
///
/// Features are lowercase word unigrams, word bigrams and character
/// trigrams. Each feature hashes to a coordinate and a sign; the summed
/// vector is L2-normalized. The hash is FNV-1a followed by a splitmix64
/// finalizer, so values do not depend on platform or std hasher seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: DEFAULT_EMBEDDING_DIM, seed: 0x9e37_79b9_7f4a_7c15 }
    }
}

fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, DomainError> {
        if text.trim().is_empty() {
            return Err(DomainError::Invalid("cannot embed empty text".into()));
        }
        if self.dim == 0 {
            return Err(DomainError::Invalid("embedding dimension must be positive".into()));
        }
        let lower = text.to_lowercase();
        let mut v = vec![0.0f64; self.dim];
        let mut add = |feature: &str, weight: f64| {
            let h = fnv1a(self.seed, feature.as_bytes());
            let idx = (h % self.dim as u64) as usize;
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            v[idx] += sign * weight;
        };

        let words: Vec<&str> =
            lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        for w in &words {
            add(&format!("w:{w}"), 1.0);
        }
        for pair in words.windows(2) {
            add(&format!("b:{} {}", pair[0], pair[1]), 0.5);
        }
        let chars: Vec<char> = format!(" {} ", lower.trim()).chars().collect();
        for tri in chars.windows(3) {
            let s: String = tri.iter().collect();
            add(&format!("c:{s}"), 0.25);
        }

        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // Features cancelled exactly; fall back to a single hashed axis.
            let mut e = vec![0.0; self.dim];
            e[(fnv1a(self.seed, lower.as_bytes()) % self.dim as u64) as usize] = 1.0;
            return Ok(e);
        }
        Ok(v.into_iter().map(|x| x / norm).collect())
    }
}

/// Cosine similarity, clamped to [-1, 1] against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
