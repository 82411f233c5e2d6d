use serde::{Deserialize, Serialize};

/// Sparse feature vector: strictly increasing indices with their values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVector {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, &v)| (i as usize, v))
    }

    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (0, 0);
        let mut sum = 0.0;
        while a < self.indices.len() && b < other.indices.len() {
            match self.indices[a].cmp(&other.indices[b]) {
                std::cmp::Ordering::Less => a += 1,
                std::cmp::Ordering::Greater => b += 1,
                std::cmp::Ordering::Equal => {
                    sum += self.values[a] * other.values[b];
                    a += 1;
                    b += 1;
                }
            }
        }
        sum
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Hashed n-gram featurizer. Values are term counts scaled by `1/sqrt(nnz)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Featurizer {
    pub min_order: usize,
    pub max_order: usize,
    pub dim: usize,
    pub lowercase: bool,
    pub strip_punctuation: bool,
}

impl Default for Featurizer {
    fn default() -> Self {
        Featurizer {
            min_order: 1,
            max_order: 2,
            dim: 1 << 18,
            lowercase: true,
            strip_punctuation: true,
        }
    }
}

impl Featurizer {
    pub fn with_dim(dim: usize) -> Self {
        Featurizer {
            dim,
            ..Default::default()
        }
    }

    pub fn tokens(&self, text: &str) -> Vec<String> {
        let normalized: String = text
            .chars()
            .map(|c| {
                if self.strip_punctuation && !c.is_alphanumeric() && !c.is_whitespace() {
                    ' '
                } else {
                    c
                }
            })
            .collect();
        let normalized = if self.lowercase {
            normalized.to_lowercase()
        } else {
            normalized
        };
        normalized.split_whitespace().map(str::to_string).collect()
    }

    pub fn featurize(&self, text: &str) -> SparseVector {
        let tokens = self.tokens(text);
        let mut hashed: Vec<u32> = Vec::new();
        for order in self.min_order.max(1)..=self.max_order {
            for window in tokens.windows(order) {
                let h = fnv1a(order as u64, window);
                hashed.push((h % self.dim as u64) as u32);
            }
        }
        hashed.sort_unstable();

        let mut indices = Vec::new();
        let mut counts: Vec<f64> = Vec::new();
        for idx in hashed {
            if indices.last() == Some(&idx) {
                *counts.last_mut().unwrap() += 1.0;
            } else {
                indices.push(idx);
                counts.push(1.0);
            }
        }
        if !indices.is_empty() {
            let scale = 1.0 / (indices.len() as f64).sqrt();
            counts.iter_mut().for_each(|c| *c *= scale);
        }
        SparseVector {
            indices,
            values: counts,
        }
    }
}

// 64-bit FNV-1a over the n-gram's tokens, separated by a unit separator byte.
fn fnv1a(order: u64, tokens: &[String]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0100_0000_01b3;
    let mut hash = OFFSET ^ order;
    for (i, token) in tokens.iter().enumerate() {
        if i > 0 {
            hash ^= 0x1f;
            hash = hash.wrapping_mul(PRIME);
        }
        for byte in token.bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(PRIME);
        }
    }
    hash
}
