use super::attention::{multi_head_attention_on, AttentionMask};
use super::{BoundEncoderStack, BoundFfn, BoundLn, BoundParams, Mode, Model, ModelConfig};
use crate::data::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Tid};

const LN_EPS: f64 = 1e-5;

/// Which text encoder an MLM example flows through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextStream {
    Audio,
    Comment,
}

/// Encoded context as plain tensors: V' `[T1×d]`, A' `[p_a×d]`,
/// C' `[n_c×d]`, plus keep-masks (false = padding, excluded from
/// downstream cross-attention).
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub video: Tensor,
    pub audio: Tensor,
    pub comments: Tensor,
    pub video_keep: Vec<bool>,
    pub audio_keep: Vec<bool>,
    pub comment_keep: Vec<bool>,
}

/// Tape-resident encoded context.
pub(crate) struct EncodedIds {
    pub video: Tid,
    pub audio: Tid,
    pub comments: Tid,
    pub video_keep: Vec<bool>,
    pub audio_keep: Vec<bool>,
    pub comment_keep: Vec<bool>,
}

/// `[BOS] w₁ … [EOS]` padded to `cap`; words beyond `cap-2` are truncated.
/// Returns the id sequence and its keep mask.
pub(crate) fn framed_sequence(word_ids: &[usize], cap: usize) -> (Vec<usize>, Vec<bool>) {
    let n = word_ids.len().min(cap - 2);
    let mut ids = Vec::with_capacity(cap);
    ids.push(BOS_ID);
    ids.extend_from_slice(&word_ids[..n]);
    ids.push(EOS_ID);
    let used = ids.len();
    ids.resize(cap, PAD_ID);
    let mut keep = vec![true; used];
    keep.resize(cap, false);
    (ids, keep)
}

/// Teacher-forcing pair: decoder input `[BOS] r₁…r_n` and labels
/// `r₁…r_n [EOS]`, both padded to `p_response` (PAD positions are ignored
/// by the loss).
pub(crate) fn teacher_pair(word_ids: &[usize], p_response: usize) -> (Vec<usize>, Vec<usize>) {
    let n = word_ids.len().min(p_response - 1);
    let mut input = Vec::with_capacity(p_response);
    input.push(BOS_ID);
    input.extend_from_slice(&word_ids[..n]);
    input.resize(p_response, PAD_ID);
    let mut labels = Vec::with_capacity(p_response);
    labels.extend_from_slice(&word_ids[..n]);
    labels.push(EOS_ID);
    labels.resize(p_response, PAD_ID);
    (input, labels)
}

/// Validate a frame matrix and produce a `[rows × d_frame]` tensor.
pub(crate) fn frames_tensor(frames: &[Vec<f64>], cfg: &ModelConfig) -> Result<Tensor> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("frames"));
    }
    if let Some(row) = frames.iter().find(|r| r.len() != cfg.d_frame) {
        return Err(Error::ShapeMismatch {
            op: "frames",
            lhs: vec![frames.len(), row.len()],
            rhs: vec![cfg.t1 as usize, cfg.d_frame],
        });
    }
    Tensor::new(
        vec![frames.len(), cfg.d_frame],
        frames.iter().flatten().copied().collect(),
    )
}

fn ffn_on(tape: &mut Tape, x: Tid, p: &BoundFfn) -> Result<Tid> {
    let h = tape.matmul(x, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, p.w2)?;
    tape.add_row(out, p.b2)
}

fn layer_norm_on(tape: &mut Tape, x: Tid, ln: &BoundLn) -> Result<Tid> {
    tape.layer_norm(x, ln.gamma, ln.beta, LN_EPS)
}

/// Pre-norm encoder stack: x += Attn(LN(x)); x += FFN(LN(x)); final LN.
fn encoder_stack_on(
    tape: &mut Tape,
    mut x: Tid,
    keep: &[bool],
    stack: &BoundEncoderStack,
    cfg: &ModelConfig,
    mode: &mut Mode,
) -> Result<Tid> {
    let len = tape.shape(x)[0];
    let mask = AttentionMask::key_padding(len, keep);
    for layer in &stack.layers {
        let h = layer_norm_on(tape, x, &layer.ln_attn)?;
        let a = multi_head_attention_on(tape, h, h, &mask, &layer.attn, cfg.n_heads, mode)?;
        let a = mode.apply_dropout(tape, a)?;
        x = tape.add(x, a)?;
        let h = layer_norm_on(tape, x, &layer.ln_ffn)?;
        let f = ffn_on(tape, h, &layer.ffn)?;
        let f = mode.apply_dropout(tape, f)?;
        x = tape.add(x, f)?;
    }
    layer_norm_on(tape, x, &stack.ln_final)
}

/// Project frames to d_model, add frame positions, encode → (V', keep).
/// Streams shorter than T1 are padded with zero vectors and masked.
pub(crate) fn encode_video_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    frames: &Tensor,
    mode: &mut Mode,
) -> Result<(Tid, Vec<bool>)> {
    let t1 = cfg.t1 as usize;
    if frames.shape.len() != 2 || frames.cols() != cfg.d_frame || frames.rows() > t1 {
        return Err(Error::ShapeMismatch {
            op: "encode_video",
            lhs: frames.shape.clone(),
            rhs: vec![t1, cfg.d_frame],
        });
    }
    let n = frames.rows();
    let mut data = frames.data.clone();
    data.resize(t1 * cfg.d_frame, 0.0);
    let mut keep = vec![true; n];
    keep.resize(t1, false);

    let f = tape.leaf(vec![t1, cfg.d_frame], data, false)?;
    let x = tape.matmul(f, bound.frame_proj_w)?;
    let x = tape.add_row(x, bound.frame_proj_b)?;
    let x = tape.add(x, bound.pos_frames)?;
    let x = mode.apply_dropout(tape, x)?;
    let v = encoder_stack_on(tape, x, &keep, &bound.video_encoder, cfg, mode)?;
    Ok((v, keep))
}

/// Frame, embed, and encode audio word ids → (A', keep). An empty
/// transcript degenerates to `[BOS][EOS]` plus padding.
pub(crate) fn encode_audio_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    word_ids: &[usize],
    mode: &mut Mode,
) -> Result<(Tid, Vec<bool>)> {
    let (ids, keep) = framed_sequence(word_ids, cfg.p_audio);
    let emb = tape.embedding(bound.token_embedding, &ids)?;
    let x = tape.add(emb, bound.pos_audio)?;
    let x = mode.apply_dropout(tape, x)?;
    let a = encoder_stack_on(tape, x, &keep, &bound.audio_encoder, cfg, mode)?;
    Ok((a, keep))
}

/// Encode each comment slot independently and pool its first position
/// (the leading [BOS]) → C' `[n_c×d]`. `None` slots are encoded from the
/// empty sentinel and masked out downstream.
pub(crate) fn encode_comments_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    slots: &[Option<Vec<usize>>],
    mode: &mut Mode,
) -> Result<(Tid, Vec<bool>)> {
    if slots.is_empty() {
        return Err(Error::EmptyInput("comment slots"));
    }
    let empty: Vec<usize> = Vec::new();
    let mut pooled = Vec::with_capacity(slots.len());
    let mut slot_keep = Vec::with_capacity(slots.len());
    for slot in slots {
        let words = slot.as_ref().unwrap_or(&empty);
        let (ids, keep) = framed_sequence(words, cfg.p_comment);
        let emb = tape.embedding(bound.token_embedding, &ids)?;
        let x = tape.add(emb, bound.pos_comment)?;
        let x = mode.apply_dropout(tape, x)?;
        let enc = encoder_stack_on(tape, x, &keep, &bound.comment_encoder, cfg, mode)?;
        pooled.push(tape.slice_rows(enc, 0, 1)?);
        slot_keep.push(slot.is_some());
    }
    let c = tape.concat_rows(&pooled)?;
    Ok((c, slot_keep))
}

pub(crate) fn encode_context_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    frames: &Tensor,
    audio_word_ids: &[usize],
    comment_slots: &[Option<Vec<usize>>],
    mode: &mut Mode,
) -> Result<EncodedIds> {
    let (video, video_keep) = encode_video_on(tape, bound, cfg, frames, mode)?;
    let (audio, audio_keep) = encode_audio_on(tape, bound, cfg, audio_word_ids, mode)?;
    let (comments, comment_keep) = encode_comments_on(tape, bound, cfg, comment_slots, mode)?;
    Ok(EncodedIds {
        video,
        audio,
        comments,
        video_keep,
        audio_keep,
        comment_keep,
    })
}

/// Re-register an already-encoded context on a fresh tape.
pub(crate) fn rebind_context(tape: &mut Tape, ctx: &EncodedContext) -> Result<EncodedIds> {
    Ok(EncodedIds {
        video: tape.input(&ctx.video),
        audio: tape.input(&ctx.audio),
        comments: tape.input(&ctx.comments),
        video_keep: ctx.video_keep.clone(),
        audio_keep: ctx.audio_keep.clone(),
        comment_keep: ctx.comment_keep.clone(),
    })
}

/// Decoder: masked self-attention, then cross-attention over V', A', C' in
/// turn, then the feed-forward block, each as a pre-norm residual sublayer;
/// a final linear maps to vocabulary logits `[p_response × V]`.
pub(crate) fn decoder_logits_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    enc: &EncodedIds,
    response_tokens: &[usize],
    mode: &mut Mode,
) -> Result<Tid> {
    if response_tokens.is_empty() {
        return Err(Error::EmptyInput("decoder response tokens"));
    }
    if response_tokens[0] != BOS_ID {
        return Err(Error::Config(format!(
            "decoder input must begin with [BOS] (id {BOS_ID}), got id {}",
            response_tokens[0]
        )));
    }
    if response_tokens.len() > cfg.p_response {
        return Err(Error::IndexOutOfRange {
            what: "decoder input length",
            index: response_tokens.len(),
            size: cfg.p_response,
        });
    }
    let p_r = cfg.p_response;
    let mut ids = response_tokens.to_vec();
    ids.resize(p_r, PAD_ID);

    let emb = tape.embedding(bound.token_embedding, &ids)?;
    let mut x = tape.add(emb, bound.pos_response)?;
    x = mode.apply_dropout(tape, x)?;

    let causal = AttentionMask::causal(p_r);
    let video_mask = AttentionMask::key_padding(p_r, &enc.video_keep);
    let audio_mask = AttentionMask::key_padding(p_r, &enc.audio_keep);
    let comment_mask = AttentionMask::key_padding(p_r, &enc.comment_keep);

    for layer in &bound.decoder.layers {
        let h = layer_norm_on(tape, x, &layer.ln_self)?;
        let a = multi_head_attention_on(tape, h, h, &causal, &layer.self_attn, cfg.n_heads, mode)?;
        let a = mode.apply_dropout(tape, a)?;
        x = tape.add(x, a)?;

        let h = layer_norm_on(tape, x, &layer.ln_video)?;
        let a = multi_head_attention_on(
            tape, h, enc.video, &video_mask, &layer.cross_video, cfg.n_heads, mode,
        )?;
        let a = mode.apply_dropout(tape, a)?;
        x = tape.add(x, a)?;

        let h = layer_norm_on(tape, x, &layer.ln_audio)?;
        let a = multi_head_attention_on(
            tape, h, enc.audio, &audio_mask, &layer.cross_audio, cfg.n_heads, mode,
        )?;
        let a = mode.apply_dropout(tape, a)?;
        x = tape.add(x, a)?;

        let h = layer_norm_on(tape, x, &layer.ln_comment)?;
        let a = multi_head_attention_on(
            tape, h, enc.comments, &comment_mask, &layer.cross_comment, cfg.n_heads, mode,
        )?;
        let a = mode.apply_dropout(tape, a)?;
        x = tape.add(x, a)?;

        let h = layer_norm_on(tape, x, &layer.ln_ffn)?;
        let f = ffn_on(tape, h, &layer.ffn)?;
        let f = mode.apply_dropout(tape, f)?;
        x = tape.add(x, f)?;
    }
    let h = layer_norm_on(tape, x, &bound.decoder.ln_final)?;
    let logits = tape.matmul(h, bound.output_w)?;
    tape.add_row(logits, bound.output_b)
}

/// Teacher-forced training loss for one clip (mean token cross-entropy).
pub(crate) fn clip_loss_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    frames: &Tensor,
    audio_word_ids: &[usize],
    comment_slots: &[Option<Vec<usize>>],
    response_word_ids: &[usize],
    mode: &mut Mode,
) -> Result<Tid> {
    let enc = encode_context_on(tape, bound, cfg, frames, audio_word_ids, comment_slots, mode)?;
    let (input, labels) = teacher_pair(response_word_ids, cfg.p_response);
    let logits = decoder_logits_on(tape, bound, cfg, &enc, &input, mode)?;
    tape.cross_entropy_masked(logits, &labels, PAD_ID)
}

/// Masked-LM loss for one framed, masked sequence through the chosen text
/// encoder, with the output head weight-tied to the token embedding.
pub(crate) fn mlm_loss_on(
    tape: &mut Tape,
    bound: &BoundParams,
    cfg: &ModelConfig,
    stream: TextStream,
    masked_ids: &[usize],
    labels: &[usize],
    keep: &[bool],
    mode: &mut Mode,
) -> Result<Tid> {
    let (pos, stack) = match stream {
        TextStream::Audio => (bound.pos_audio, &bound.audio_encoder),
        TextStream::Comment => (bound.pos_comment, &bound.comment_encoder),
    };
    let emb = tape.embedding(bound.token_embedding, masked_ids)?;
    let x = tape.add(emb, pos)?;
    let x = mode.apply_dropout(tape, x)?;
    let h = encoder_stack_on(tape, x, keep, stack, cfg, mode)?;
    let tied = tape.transpose(bound.token_embedding)?;
    let logits = tape.matmul(h, tied)?;
    tape.cross_entropy_masked(logits, labels, PAD_ID)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Mean per-token log-probability of `[BOS] c₁…c_n [EOS]` under the
/// decoder (length-normalized conditional log-likelihood).
pub(crate) fn score_candidate(
    model: &Model,
    candidate_word_ids: &[usize],
    ctx: &EncodedContext,
) -> Result<f64> {
    if candidate_word_ids.is_empty() {
        return Err(Error::EmptyInput("candidate"));
    }
    let p_r = model.config.p_response;
    let (input, labels) = teacher_pair(candidate_word_ids, p_r);
    let logits = model.decoder_forward(&input, ctx)?;
    let v = logits.cols();
    let mut total = 0.0;
    let mut count = 0usize;
    for (pos, &label) in labels.iter().enumerate() {
        if label == PAD_ID {
            continue;
        }
        let row = &logits.data[pos * v..(pos + 1) * v];
        total += log_softmax_row(row)[label];
        count += 1;
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn tiny_model(seed: u64) -> Model {
        let cfg = ModelConfig {
            d_model: 8,
            d_frame: 5,
            layers_encoder: 1,
            layers_decoder: 1,
            n_heads: 2,
            d_ff: 16,
            dropout: 0.0,
            p_audio: 6,
            p_comment: 5,
            p_response: 6,
            n_context: 2,
            t1: 3,
            t2: 5,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Model::init(cfg, 17, &mut rng).unwrap()
    }

    fn sample_ctx(model: &Model, seed: u64) -> EncodedContext {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        model
            .encode_context(&frames, &[5, 6, 7], &[None, Some(vec![8, 9])])
            .unwrap()
    }

    #[test]
    fn framed_sequence_pads_and_truncates() {
        let (ids, keep) = framed_sequence(&[], 5);
        assert_eq!(ids, vec![BOS_ID, EOS_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(keep, vec![true, true, false, false, false]);
        let (ids, _) = framed_sequence(&[10, 11, 12, 13, 14], 5);
        assert_eq!(ids, vec![BOS_ID, 10, 11, 12, EOS_ID]);
    }

    #[test]
    fn teacher_pair_shifts_and_frames() {
        let (input, labels) = teacher_pair(&[7, 8], 6);
        assert_eq!(input, vec![BOS_ID, 7, 8, PAD_ID, PAD_ID, PAD_ID]);
        assert_eq!(labels, vec![7, 8, EOS_ID, PAD_ID, PAD_ID, PAD_ID]);
    }

    #[test]
    fn encode_video_shapes_and_errors() {
        let model = tiny_model(1);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let v = model.encode_video(&frames).unwrap();
        assert_eq!(v.shape, vec![3, 8]);

        let bad = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        assert!(matches!(
            model.encode_video(&bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn encode_video_is_position_sensitive() {
        let model = tiny_model(3);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let mut swapped = frames.clone();
        for j in 0..5 {
            swapped.data.swap(j, 5 + j);
        }
        let a = model.encode_video(&frames).unwrap();
        let b = model.encode_video(&swapped).unwrap();
        let diff: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "swapping frames did not change the encoding");
    }

    #[test]
    fn encode_video_zero_frames_zero_params_is_finite() {
        let mut model = tiny_model(5);
        model.params.visit_mut(&mut |_, _, t| {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        });
        let frames = Tensor::zeros(vec![3, 5]);
        let v = model.encode_video(&frames).unwrap();
        assert!(v.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_audio_shapes_and_degenerate_input() {
        let model = tiny_model(6);
        let a = model.encode_audio(&[]).unwrap();
        assert_eq!(a.shape, vec![6, 8]);
        let a = model.encode_audio(&[5, 6, 7, 8]).unwrap();
        assert_eq!(a.shape, vec![6, 8]);
        assert!(matches!(
            model.encode_audio(&[99]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn encode_audio_padding_is_inert() {
        let model = tiny_model(7);
        // 2 words -> positions 0..=3 used, 4..=5 padding
        let base = model.encode_audio(&[5, 6]).unwrap();
        // perturbing what sits in the padded positions means comparing
        // against a longer transcript's first rows; instead check the
        // identical prefix again for determinism and masked-key exclusion
        // via a direct perturbation of the padded ids:
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &model.params);
        let (ids, keep) = framed_sequence(&[5, 6], model.config.p_audio);
        let mut perturbed = ids.clone();
        perturbed[4] = 9; // padded position, different id
        perturbed[5] = 10;
        let emb = tape.embedding(bound.token_embedding, &perturbed).unwrap();
        let x = tape.add(emb, bound.pos_audio).unwrap();
        let mut mode = Mode::Eval;
        let enc = encoder_stack_on(
            &mut tape,
            x,
            &keep,
            &bound.audio_encoder,
            &model.config,
            &mut mode,
        )
        .unwrap();
        let out = tape.tensor(enc);
        let d = model.config.d_model;
        for pos in 0..4 {
            for j in 0..d {
                let diff = (base.data[pos * d + j] - out.data[pos * d + j]).abs();
                assert!(diff <= 1e-12, "unmasked row {pos} changed by {diff}");
            }
        }
    }

    #[test]
    fn encode_comments_pools_independently() {
        let model = tiny_model(8);
        let c = model
            .encode_comments(&[Some(vec![5, 6]), Some(vec![7]), None, Some(vec![5, 6]), None])
            .unwrap();
        assert_eq!(c.shape, vec![5, 8]);
        // identical comments in different slots pool identically
        let d = 8;
        for j in 0..d {
            assert!((c.data[j] - c.data[3 * d + j]).abs() <= 1e-12);
        }
        // comments longer than p_comment are truncated, not an error
        let long: Vec<usize> = vec![5; 40];
        model.encode_comments(&[Some(long)]).unwrap();
    }

    #[test]
    fn decoder_output_shape_and_input_validation() {
        let model = tiny_model(9);
        let ctx = sample_ctx(&model, 10);
        let logits = model.decoder_forward(&[BOS_ID, 5, 6], &ctx).unwrap();
        assert_eq!(logits.shape, vec![6, 17]);
        assert!(model.decoder_forward(&[], &ctx).is_err());
        assert!(model.decoder_forward(&[5, 6], &ctx).is_err());
    }

    #[test]
    fn decoder_is_causal() {
        let model = tiny_model(11);
        let ctx = sample_ctx(&model, 12);
        let base = model.decoder_forward(&[BOS_ID, 5, 6, 7], &ctx).unwrap();
        let pert = model.decoder_forward(&[BOS_ID, 5, 6, 8], &ctx).unwrap();
        let v = 17;
        // positions 0..=2 predict from tokens ≤ their index; changing token 3
        // must leave those rows bit-identical
        for pos in 0..3 {
            for j in 0..v {
                let diff = (base.data[pos * v + j] - pert.data[pos * v + j]).abs();
                assert!(diff <= 1e-12, "row {pos} changed by {diff}");
            }
        }
        // and the later row must actually differ
        let moved: f64 = (3 * v..4 * v)
            .map(|i| (base.data[i] - pert.data[i]).abs())
            .sum();
        assert!(moved > 1e-9);
    }

    #[test]
    fn padding_slots_are_invisible_to_the_decoder() {
        let model = tiny_model(13);
        let mut rng = ChaCha12Rng::seed_from_u64(14);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let slots = [None, Some(vec![8, 9])];
        let ctx = model.encode_context(&frames, &[5, 6], &slots).unwrap();
        let base = model.decoder_forward(&[BOS_ID, 5], &ctx).unwrap();

        // scribble over every masked row of every modality
        let mut hacked = ctx.clone();
        let d = model.config.d_model;
        let scribble = |t: &mut Tensor, keep: &[bool]| {
            for (i, &k) in keep.iter().enumerate() {
                if !k {
                    for v in &mut t.data[i * d..(i + 1) * d] {
                        *v = 1e6;
                    }
                }
            }
        };
        scribble(&mut hacked.video, &hacked.video_keep);
        scribble(&mut hacked.audio, &hacked.audio_keep);
        scribble(&mut hacked.comments, &hacked.comment_keep);
        let pert = model.decoder_forward(&[BOS_ID, 5], &hacked).unwrap();
        for (a, b) in base.data.iter().zip(&pert.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn each_modality_path_is_live() {
        let model = tiny_model(15);
        let ctx = sample_ctx(&model, 16);
        let base = model.decoder_forward(&[BOS_ID, 5, 6], &ctx).unwrap();
        for which in 0..3 {
            let mut ablated = ctx.clone();
            let target = match which {
                0 => &mut ablated.video,
                1 => &mut ablated.audio,
                _ => &mut ablated.comments,
            };
            target.data.iter_mut().for_each(|v| *v = 0.0);
            let out = model.decoder_forward(&[BOS_ID, 5, 6], &ablated).unwrap();
            let diff: f64 = base
                .data
                .iter()
                .zip(&out.data)
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(diff > 1e-9, "zeroing modality {which} changed nothing");
        }
    }

    #[test]
    fn score_is_deterministic_and_uniform_for_zero_params() {
        let model = tiny_model(17);
        let ctx = sample_ctx(&model, 18);
        let s1 = model.score_candidate(&[5, 6], &ctx).unwrap();
        let s2 = model.score_candidate(&[5, 6], &ctx).unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
        assert!(model.score_candidate(&[], &ctx).is_err());

        // zeroed params -> uniform logits -> score == -ln d_Σ
        let mut zero = tiny_model(19);
        zero.params.visit_mut(&mut |_, _, t| {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        });
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let zctx = zero
            .encode_context(&frames, &[5], &[Some(vec![6])])
            .unwrap();
        let s = zero.score_candidate(&[7, 8, 9], &zctx).unwrap();
        assert!((s - (-(17f64).ln())).abs() < 1e-9, "{s}");
    }

    #[test]
    fn clip_loss_near_log_vocab_at_init() {
        let model = tiny_model(21);
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &model.params);
        let mut mode = Mode::Eval;
        let loss = clip_loss_on(
            &mut tape,
            &bound,
            &model.config,
            &frames,
            &[5, 6],
            &[Some(vec![7]), None],
            &[8, 9, 10],
            &mut mode,
        )
        .unwrap();
        let lv = tape.data(loss)[0];
        let anchor = (17f64).ln();
        assert!(
            (lv - anchor).abs() / anchor < 0.10,
            "loss {lv} vs ln(17)={anchor}"
        );
    }

    #[test]
    fn dropout_is_active_in_train_mode_only() {
        let model = tiny_model(23);
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let frames = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let run = |mode_rng: Option<&mut ChaCha12Rng>| -> f64 {
            let mut tape = Tape::new();
            let bound = BoundParams::bind(&mut tape, &model.params);
            let mut mode = match mode_rng {
                Some(rng) => Mode::Train {
                    dropout: 0.5,
                    rng,
                },
                None => Mode::Eval,
            };
            let loss = clip_loss_on(
                &mut tape,
                &bound,
                &model.config,
                &frames,
                &[5, 6],
                &[Some(vec![7])],
                &[8, 9],
                &mut mode,
            )
            .unwrap();
            tape.data(loss)[0]
        };
        let eval1 = run(None);
        let eval2 = run(None);
        assert_eq!(eval1.to_bits(), eval2.to_bits());
        let mut rng_a = ChaCha12Rng::seed_from_u64(100);
        let mut rng_b = ChaCha12Rng::seed_from_u64(101);
        let train_a = run(Some(&mut rng_a));
        let train_b = run(Some(&mut rng_b));
        assert_ne!(train_a.to_bits(), train_b.to_bits());
    }
}
