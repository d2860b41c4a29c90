use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hashed bag-of-words settings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerConfig {
    pub dim: usize,
    /// Keep only the first `max_tokens` tokens of each text.
    #[serde(default)]
    pub max_tokens: Option<usize>,
    #[serde(default = "yes")]
    pub l2_normalize: bool,
}

fn yes() -> bool {
    true
}

impl FeaturizerConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            max_tokens: None,
            l2_normalize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::input("featurizer dimension must be >= 2"));
        }
        Ok(())
    }
}

/// Lowercased runs of alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

// 64-bit FNV-1a: stable across platforms and toolchains, unlike std's hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn featurize(text: &str, config: &FeaturizerConfig) -> Vec<f64> {
    let mut v = vec![0.0; config.dim];
    let limit = config.max_tokens.unwrap_or(usize::MAX);
    for token in tokenize(text).take(limit) {
        v[(fnv1a(token.as_bytes()) % config.dim as u64) as usize] += 1.0;
    }
    if config.l2_normalize {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
    }
    v
}
