use std::collections::HashMap;

use crate::data::{Vocabulary, RESERVED_TOKENS};

/// TF-IDF bag-of-words over a fixed vocabulary. Each comment counts as one
/// document for the IDF statistics; the smoothed form keeps every weight
/// strictly positive.
#[derive(Debug, Clone)]
pub struct TfIdf {
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit<'a, I, D>(vocab: &Vocabulary, documents: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = &'a String>,
    {
        let mut df = vec![0u64; vocab.len()];
        let mut n_docs = 0u64;
        let mut seen: Vec<usize> = Vec::new();
        for doc in documents {
            n_docs += 1;
            seen.clear();
            for tok in doc {
                let id = vocab.id(tok);
                if id >= RESERVED_TOKENS.len() && !seen.contains(&id) {
                    seen.push(id);
                }
            }
            for &id in &seen {
                df[id] += 1;
            }
        }
        let idf = df
            .iter()
            .map(|&d| ((1 + n_docs) as f64 / (1 + d) as f64).ln() + 1.0)
            .collect();
        TfIdf { idf }
    }

    /// Sparse TF-IDF vector of a token bag; out-of-vocabulary and reserved
    /// tokens contribute nothing.
    pub fn vector(&self, vocab: &Vocabulary, tokens: &[String]) -> HashMap<usize, f64> {
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for tok in tokens {
            let id = vocab.id(tok);
            if id >= RESERVED_TOKENS.len() {
                *tf.entry(id).or_insert(0.0) += 1.0;
            }
        }
        for (id, w) in tf.iter_mut() {
            *w *= self.idf[*id];
        }
        tf
    }

    pub fn cosine(a: &HashMap<usize, f64>, b: &HashMap<usize, f64>) -> f64 {
        let dot: f64 = a
            .iter()
            .filter_map(|(id, wa)| b.get(id).map(|wb| wa * wb))
            .sum();
        let na: f64 = a.values().map(|w| w * w).sum::<f64>().sqrt();
        let nb: f64 = b.values().map(|w| w * w).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}
