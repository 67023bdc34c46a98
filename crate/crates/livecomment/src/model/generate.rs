use super::forward::EncodedContext;
use super::Model;
use crate::data::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};

/// Decoding strategy for comment generation. Beam search ranks hypotheses
/// by length-normalized log-probability; `Beam { width: 1 }` reduces to
/// greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStrategy {
    Greedy,
    Beam { width: usize },
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Next-token log-probabilities for a prefix (BOS + generated tokens).
fn next_token_logprobs(model: &Model, ctx: &EncodedContext, prefix: &[usize]) -> Result<Vec<f64>> {
    let logits = model.decoder_forward(prefix, ctx)?;
    let v = logits.cols();
    let row = prefix.len() - 1;
    Ok(log_softmax(&logits.data[row * v..(row + 1) * v]))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn generate(
    model: &Model,
    ctx: &EncodedContext,
    strategy: DecodeStrategy,
    max_len: usize,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    // the decoder window holds BOS plus at most p_response - 1 tokens
    let cap = max_len.min(model.config.p_response - 1);
    match strategy {
        DecodeStrategy::Greedy => greedy(model, ctx, cap),
        DecodeStrategy::Beam { width } => {
            if width < 1 {
                return Err(Error::Config("beam width must be >= 1".into()));
            }
            beam(model, ctx, width, cap)
        }
    }
}

fn greedy(model: &Model, ctx: &EncodedContext, cap: usize) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS_ID];
    for _ in 0..cap {
        let lp = next_token_logprobs(model, ctx, &prefix)?;
        let next = argmax(&lp);
        if next == EOS_ID {
            break;
        }
        prefix.push(next);
    }
    Ok(prefix[1..].to_vec())
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<usize>,
    logprob: f64,
    /// Number of scored terms (tokens plus the EOS that closed it).
    terms: usize,
    finished: bool,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        if self.terms == 0 {
            0.0
        } else {
            self.logprob / self.terms as f64
        }
    }
}

fn beam(model: &Model, ctx: &EncodedContext, width: usize, cap: usize) -> Result<Vec<usize>> {
    let mut beams = vec![Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        terms: 0,
        finished: false,
    }];
    loop {
        if beams.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &beams {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(BOS_ID);
            prefix.extend_from_slice(&hyp.tokens);
            let lp = next_token_logprobs(model, ctx, &prefix)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap().then(a.cmp(&b)));
            for &tok in order.iter().take(width) {
                let mut child = hyp.clone();
                child.logprob += lp[tok];
                child.terms += 1;
                if tok == EOS_ID {
                    child.finished = true;
                } else {
                    child.tokens.push(tok);
                    if child.tokens.len() >= cap {
                        child.finished = true;
                    }
                }
                candidates.push(child);
            }
        }
        candidates.sort_by(|a, b| {
            b.normalized()
                .partial_cmp(&a.normalized())
                .unwrap()
                .then(a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        beams = candidates;
    }
    let best = beams
        .into_iter()
        .max_by(|a, b| {
            a.normalized()
                .partial_cmp(&b.normalized())
                .unwrap()
                .then(b.tokens.cmp(&a.tokens))
        })
        .expect("beam never empty");
    Ok(best.tokens)
}
