use super::{AttentionParams, BoundAttention, Mode};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Tid};

/// Which query→key pairs may attend. Row-major `[n_queries × n_keys]`,
/// `true` = allowed.
#[derive(Debug, Clone)]
pub struct AttentionMask {
    pub n_queries: usize,
    pub n_keys: usize,
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n_queries: usize, n_keys: usize) -> Self {
        AttentionMask {
            n_queries,
            n_keys,
            allowed: vec![true; n_queries * n_keys],
        }
    }

    /// Lower-triangular: query i sees keys 0..=i.
    pub fn causal(len: usize) -> Self {
        let mut allowed = vec![false; len * len];
        for i in 0..len {
            for j in 0..=i {
                allowed[i * len + j] = true;
            }
        }
        AttentionMask {
            n_queries: len,
            n_keys: len,
            allowed,
        }
    }

    /// Every query sees exactly the keys flagged `true` in `key_keep`.
    pub fn key_padding(n_queries: usize, key_keep: &[bool]) -> Self {
        let mut allowed = Vec::with_capacity(n_queries * key_keep.len());
        for _ in 0..n_queries {
            allowed.extend_from_slice(key_keep);
        }
        AttentionMask {
            n_queries,
            n_keys: key_keep.len(),
            allowed,
        }
    }
}

/// Scaled dot-product multi-head attention on the tape. Masked key
/// positions get exactly zero weight, so they can never leak into outputs.
pub(crate) fn multi_head_attention_on(
    tape: &mut Tape,
    queries: Tid,
    keys_values: Tid,
    mask: &AttentionMask,
    p: &BoundAttention,
    n_heads: usize,
    mode: &mut Mode,
) -> Result<Tid> {
    let (lq, d) = (tape.shape(queries)[0], tape.shape(queries)[1]);
    let (lk, dk_in) = (tape.shape(keys_values)[0], tape.shape(keys_values)[1]);
    if d != dk_in {
        return Err(Error::ShapeMismatch {
            op: "multi_head_attention",
            lhs: tape.shape(queries).to_vec(),
            rhs: tape.shape(keys_values).to_vec(),
        });
    }
    if mask.n_queries != lq || mask.n_keys != lk {
        return Err(Error::ShapeMismatch {
            op: "attention_mask",
            lhs: vec![lq, lk],
            rhs: vec![mask.n_queries, mask.n_keys],
        });
    }
    let d_head = d / n_heads;
    let q = tape.matmul(queries, p.wq)?;
    let q = tape.add_row(q, p.bq)?;
    let k = tape.matmul(keys_values, p.wk)?;
    let k = tape.add_row(k, p.bk)?;
    let v = tape.matmul(keys_values, p.wv)?;
    let v = tape.add_row(v, p.bv)?;

    let scale = 1.0 / (d_head as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kh_t = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kh_t)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax_rows(scores, &mask.allowed)?;
        let weights = mode.apply_dropout(tape, weights)?;
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, p.wo)?;
    tape.add_row(out, p.bo)
}

/// Standalone evaluation-mode attention over plain tensors.
pub fn multi_head_attention(
    queries: &Tensor,
    keys_values: &Tensor,
    mask: &AttentionMask,
    params: &AttentionParams,
    n_heads: usize,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let q = tape.input(queries);
    let kv = tape.input(keys_values);
    let bound = BoundAttention {
        wq: tape.input(&params.wq),
        bq: tape.input(&params.bq),
        wk: tape.input(&params.wk),
        bk: tape.input(&params.bk),
        wv: tape.input(&params.wv),
        bv: tape.input(&params.bv),
        wo: tape.input(&params.wo),
        bo: tape.input(&params.bo),
    };
    let mut mode = Mode::Eval;
    let out = multi_head_attention_on(&mut tape, q, kv, mask, &bound, n_heads, &mut mode)?;
    Ok(tape.tensor(out))
}
