//! Text encoder backends.
//!
//! Production deployments would plug a sentence-embedding service in behind
//! [`TextEncoder`]; the bundled [`HashEncoder`] is a deterministic signed
//! feature-hashing encoder that keeps the whole pipeline runnable offline.
//! Rows are unit L2 norm, so downstream attention scores stay well scaled.

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Vec<f64>;
}

/// Lowercased runs of `[a-z0-9_]`. Underscores bind, so tokens like
/// `cat_03` or `item_0042` survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_ascii_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            tokens.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

// FNV-1a; the std hasher is not stable across toolchains, and encoded
// vectors end up inside committed golden files.
pub(crate) fn fnv1a(bytes: &[u8], seed: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ seed;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Signed feature hashing over tokens, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "encoder dim must be at least 1");
        HashEncoder { dim, seed }
    }
}

impl TextEncoder for HashEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let mut tokens = tokenize(text);
        if tokens.is_empty() {
            // Keep the unit-norm contract even for token-free text.
            tokens.push(String::new());
        }
        for tok in &tokens {
            let h = fnv1a(tok.as_bytes(), self.seed);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 1 { -1.0 } else { 1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in &mut v {
                *x /= norm;
            }
        } else {
            // All tokens cancelled in one bucket; fall back to a fixed axis.
            v[0] = 1.0;
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_keeps_underscore_tokens() {
        assert_eq!(tokenize("Cat_03, beta! item_0042"), vec!["cat_03", "beta", "item_0042"]);
        assert!(tokenize(" ,.;").is_empty());
    }

    #[test]
    fn encoded_rows_are_unit_norm_and_deterministic() {
        let enc = HashEncoder::new(64, 7);
        let a = enc.encode("the user likes cat_03 content");
        let b = enc.encode("the user likes cat_03 content");
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let norm_empty: f64 = enc.encode("").iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm_empty - 1.0).abs() < 1e-12);
    }

    #[test]
    fn different_seeds_give_different_embeddings() {
        let a = HashEncoder::new(64, 1).encode("cat_00 cat_01");
        let b = HashEncoder::new(64, 2).encode("cat_00 cat_01");
        assert_ne!(a, b);
    }

    #[test]
    fn repeating_a_token_shifts_the_direction() {
        let enc = HashEncoder::new(64, 7);
        let once = enc.encode("alpha beta gamma");
        let twice = enc.encode("alpha alpha alpha beta gamma");
        let dot: f64 = once.iter().zip(&twice).map(|(a, b)| a * b).sum();
        assert!(dot < 1.0 - 1e-6, "repetition must change the normalized direction");
    }
}
