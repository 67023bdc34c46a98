use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const BOS_ID: usize = 2;
pub const EOS_ID: usize = 3;
pub const MASK_ID: usize = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[BOS]", "[EOS]", "[MASK]"];

/// Bidirectional token↔id map. Ids 0–4 are reserved and never reassigned;
/// regular tokens start at id 5 in frequency rank order.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Keep tokens with count ≥ `min_freq`, highest frequency first (ties
    /// lexicographic), truncated so the total id count stays ≤ `max_size`.
    pub fn build<'a, I>(tokens: I, min_freq: u64, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if min_freq < 1 {
            return Err(Error::Config("min_freq must be >= 1".into()));
        }
        if max_size <= RESERVED_TOKENS.len() {
            return Err(Error::Config(format!(
                "max_size must exceed the {} reserved ids",
                RESERVED_TOKENS.len()
            )));
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for tok in tokens {
            any = true;
            *freq.entry(tok).or_insert(0) += 1;
        }
        if !any {
            return Err(Error::Corpus("empty corpus: no tokens to build from".into()));
        }
        let mut ranked: Vec<(&str, u64)> =
            freq.into_iter().filter(|&(_, c)| c >= min_freq).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        ranked.truncate(max_size - RESERVED_TOKENS.len());
        Ok(Self::from_ranked(
            ranked.into_iter().map(|(t, c)| (t.to_string(), c)),
        ))
    }

    fn from_ranked(ranked: impl Iterator<Item = (String, u64)>) -> Self {
        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut counts = vec![0u64; RESERVED_TOKENS.len()];
        for (tok, count) in ranked {
            id_to_token.push(tok);
            counts.push(count);
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
            counts,
        }
    }

    /// Total id count, reserved ids included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        *self.token_to_id.get(token).unwrap_or(&UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                what: "vocabulary id",
                index: id,
                size: self.id_to_token.len(),
            })
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Encode pre-tokenized words; out-of-vocabulary words map to UNK.
    pub fn encode(&self, words: &[String]) -> Vec<usize> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// FNV-1a over the ranked token/count lines; identifies a vocabulary in
    /// checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for id in RESERVED_TOKENS.len()..self.id_to_token.len() {
            eat(self.id_to_token[id].as_bytes());
            eat(b"\t");
            eat(self.counts[id].to_string().as_bytes());
            eat(b"\n");
        }
        h
    }

    /// Line-delimited `token<TAB>count` in rank order; reserved tokens are
    /// implicit and not written.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for id in RESERVED_TOKENS.len()..self.id_to_token.len() {
            writeln!(out, "{}\t{}", self.id_to_token[id], self.counts[id])?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut ranked = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected token<TAB>count", lineno + 1),
            })?;
            let count: u64 = count.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: bad count {count:?}", lineno + 1),
            })?;
            ranked.push((tok.to_string(), count));
        }
        if ranked.is_empty() {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: "vocabulary file has no entries".into(),
            });
        }
        Ok(Self::from_ranked(ranked.into_iter()))
    }
}
