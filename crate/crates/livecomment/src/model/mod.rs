//! The triple-encoder comment generation model: three modality encoders
//! (video frames, transcribed audio, context comments), a decoder whose
//! layers cross-attend to each modality in turn, candidate scoring, and
//! autoregressive generation.

mod attention;
mod forward;
mod generate;

pub use attention::{multi_head_attention, AttentionMask};
pub use forward::{EncodedContext, TextStream};
pub use generate::DecodeStrategy;

pub(crate) use forward::{clip_loss_on, framed_sequence, frames_tensor, mlm_loss_on};

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{select_context_comments, ClipExample, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Tid};

/// Structural hyperparameters. Defaults mirror the reported setup: 4-layer
/// encoders/decoder, 256 hidden dimensions, dropout 0.1, 5 context comments.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Shared hidden size of all encoders and the decoder.
    pub d_model: usize,
    /// Input frame-feature dimension (2048 for real extractor output).
    pub d_frame: usize,
    pub layers_encoder: usize,
    pub layers_decoder: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    /// Max token counts: audio transcript, single comment, response.
    pub p_audio: usize,
    pub p_comment: usize,
    pub p_response: usize,
    /// Context-comment slot count.
    pub n_context: usize,
    /// Context window seconds; frames are sampled at 1 fps.
    pub t1: u32,
    /// Clip length seconds.
    pub t2: u32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 256,
            d_frame: 2048,
            layers_encoder: 4,
            layers_decoder: 4,
            n_heads: 4,
            d_ff: 1024,
            dropout: 0.1,
            p_audio: 64,
            p_comment: 16,
            p_response: 16,
            n_context: 5,
            t1: 20,
            t2: 30,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.t1 == 0 || self.t1 >= self.t2 {
            return Err(Error::Config(format!(
                "need 0 < T1 < T2, got T1={} T2={}",
                self.t1, self.t2
            )));
        }
        for (name, v) in [
            ("p_audio", self.p_audio),
            ("p_comment", self.p_comment),
            ("p_response", self.p_response),
            ("n_context", self.n_context),
            ("layers_encoder", self.layers_encoder),
            ("layers_decoder", self.layers_decoder),
            ("d_ff", self.d_ff),
            ("d_frame", self.d_frame),
        ] {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.p_audio < 2 || self.p_comment < 2 || self.p_response < 2 {
            return Err(Error::Config(
                "token capacities must fit the [BOS]/[EOS] framing (>= 2)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    /// Closed-form learnable element count for a given vocabulary size.
    pub fn expected_param_count(&self, vocab_size: usize) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ln = 2 * d;
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        let encoder_layer = attn + ffn + 2 * ln;
        let encoder_stack = self.layers_encoder * encoder_layer + ln;
        let decoder_layer = 4 * attn + ffn + 5 * ln;
        let decoder_stack = self.layers_decoder * decoder_layer + ln;
        let positions =
            (self.t1 as usize + self.p_audio + self.p_comment + self.p_response) * d;
        vocab_size * d
            + positions
            + (self.d_frame * d + d)
            + 3 * encoder_stack
            + decoder_stack
            + (d * vocab_size + vocab_size)
    }
}

/// Which slice of the parameters an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    TokenEmbedding,
    PosFrames,
    PosAudio,
    PosComment,
    PosResponse,
    FrameProj,
    VideoEncoder,
    AudioEncoder,
    CommentEncoder,
    Decoder,
    OutputProj,
}

impl ParamGroup {
    /// Groups updated by MLM pretraining: the text encoders plus the shared
    /// embedding that doubles as the tied output head.
    pub fn in_pretrain(self) -> bool {
        matches!(
            self,
            ParamGroup::TokenEmbedding
                | ParamGroup::PosAudio
                | ParamGroup::PosComment
                | ParamGroup::AudioEncoder
                | ParamGroup::CommentEncoder
        )
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeedForwardParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderLayerParams {
    pub ln_attn: LayerNormParams,
    pub attn: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct EncoderStackParams {
    pub layers: Vec<EncoderLayerParams>,
    pub ln_final: LayerNormParams,
}

#[derive(Debug, Clone)]
pub struct DecoderLayerParams {
    pub ln_self: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln_video: LayerNormParams,
    pub cross_video: AttentionParams,
    pub ln_audio: LayerNormParams,
    pub cross_audio: AttentionParams,
    pub ln_comment: LayerNormParams,
    pub cross_comment: AttentionParams,
    pub ln_ffn: LayerNormParams,
    pub ffn: FeedForwardParams,
}

#[derive(Debug, Clone)]
pub struct DecoderStackParams {
    pub layers: Vec<DecoderLayerParams>,
    pub ln_final: LayerNormParams,
}

/// Every learnable array. The token embedding is shared by the audio
/// encoder, the comment encoder, and the decoder, and is weight-tied to the
/// MLM head; the decoder's output projection is its own matrix.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub token_embedding: Tensor,
    pub pos_frames: Tensor,
    pub pos_audio: Tensor,
    pub pos_comment: Tensor,
    pub pos_response: Tensor,
    pub frame_proj_w: Tensor,
    pub frame_proj_b: Tensor,
    pub video_encoder: EncoderStackParams,
    pub audio_encoder: EncoderStackParams,
    pub comment_encoder: EncoderStackParams,
    pub decoder: DecoderStackParams,
    pub output_w: Tensor,
    pub output_b: Tensor,
}

const INIT_STD: f64 = 0.02;

/// Weight factory: Gaussian when an RNG is supplied (training init), zeros
/// otherwise (allocation for checkpoint loading).
struct WeightInit<'a> {
    rng: Option<&'a mut ChaCha12Rng>,
}

impl WeightInit<'_> {
    fn weight(&mut self, shape: Vec<usize>) -> Tensor {
        match &mut self.rng {
            Some(rng) => Tensor::randn(shape, INIT_STD, rng).with_grad(),
            None => Tensor::zeros(shape).with_grad(),
        }
    }
}

fn zeros_grad(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).with_grad()
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        let mut gamma = Tensor::zeros(vec![d]).with_grad();
        gamma.data.iter_mut().for_each(|v| *v = 1.0);
        LayerNormParams {
            gamma,
            beta: zeros_grad(vec![d]),
        }
    }
}

impl AttentionParams {
    fn init(d: usize, w: &mut WeightInit) -> Self {
        AttentionParams {
            wq: w.weight(vec![d, d]),
            bq: zeros_grad(vec![d]),
            wk: w.weight(vec![d, d]),
            bk: zeros_grad(vec![d]),
            wv: w.weight(vec![d, d]),
            bv: zeros_grad(vec![d]),
            wo: w.weight(vec![d, d]),
            bo: zeros_grad(vec![d]),
        }
    }
}

impl FeedForwardParams {
    fn init(d: usize, d_ff: usize, w: &mut WeightInit) -> Self {
        FeedForwardParams {
            w1: w.weight(vec![d, d_ff]),
            b1: zeros_grad(vec![d_ff]),
            w2: w.weight(vec![d_ff, d]),
            b2: zeros_grad(vec![d]),
        }
    }
}

impl EncoderStackParams {
    fn init(cfg: &ModelConfig, w: &mut WeightInit) -> Self {
        EncoderStackParams {
            layers: (0..cfg.layers_encoder)
                .map(|_| EncoderLayerParams {
                    ln_attn: LayerNormParams::init(cfg.d_model),
                    attn: AttentionParams::init(cfg.d_model, w),
                    ln_ffn: LayerNormParams::init(cfg.d_model),
                    ffn: FeedForwardParams::init(cfg.d_model, cfg.d_ff, w),
                })
                .collect(),
            ln_final: LayerNormParams::init(cfg.d_model),
        }
    }
}

impl DecoderStackParams {
    fn init(cfg: &ModelConfig, w: &mut WeightInit) -> Self {
        DecoderStackParams {
            layers: (0..cfg.layers_decoder)
                .map(|_| DecoderLayerParams {
                    ln_self: LayerNormParams::init(cfg.d_model),
                    self_attn: AttentionParams::init(cfg.d_model, w),
                    ln_video: LayerNormParams::init(cfg.d_model),
                    cross_video: AttentionParams::init(cfg.d_model, w),
                    ln_audio: LayerNormParams::init(cfg.d_model),
                    cross_audio: AttentionParams::init(cfg.d_model, w),
                    ln_comment: LayerNormParams::init(cfg.d_model),
                    cross_comment: AttentionParams::init(cfg.d_model, w),
                    ln_ffn: LayerNormParams::init(cfg.d_model),
                    ffn: FeedForwardParams::init(cfg.d_model, cfg.d_ff, w),
                })
                .collect(),
            ln_final: LayerNormParams::init(cfg.d_model),
        }
    }
}

impl ModelParams {
    fn build(cfg: &ModelConfig, vocab_size: usize, w: &mut WeightInit) -> Self {
        let d = cfg.d_model;
        ModelParams {
            token_embedding: w.weight(vec![vocab_size, d]),
            pos_frames: w.weight(vec![cfg.t1 as usize, d]),
            pos_audio: w.weight(vec![cfg.p_audio, d]),
            pos_comment: w.weight(vec![cfg.p_comment, d]),
            pos_response: w.weight(vec![cfg.p_response, d]),
            frame_proj_w: w.weight(vec![cfg.d_frame, d]),
            frame_proj_b: zeros_grad(vec![d]),
            video_encoder: EncoderStackParams::init(cfg, w),
            audio_encoder: EncoderStackParams::init(cfg, w),
            comment_encoder: EncoderStackParams::init(cfg, w),
            decoder: DecoderStackParams::init(cfg, w),
            output_w: w.weight(vec![d, vocab_size]),
            output_b: zeros_grad(vec![vocab_size]),
        }
    }

    pub fn init(cfg: &ModelConfig, vocab_size: usize, rng: &mut ChaCha12Rng) -> Self {
        Self::build(cfg, vocab_size, &mut WeightInit { rng: Some(rng) })
    }

    /// Zero-valued allocation with the exact shapes implied by the config;
    /// used when loading checkpoints.
    pub fn zeros(cfg: &ModelConfig, vocab_size: usize) -> Self {
        Self::build(cfg, vocab_size, &mut WeightInit { rng: None })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embedding.shape[0]
    }

    /// Walk every learnable tensor in a fixed canonical order.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(ParamGroup, String, &'a Tensor)) {
        use ParamGroup as G;
        f(G::TokenEmbedding, "token_embedding".into(), &self.token_embedding);
        f(G::PosFrames, "pos_frames".into(), &self.pos_frames);
        f(G::PosAudio, "pos_audio".into(), &self.pos_audio);
        f(G::PosComment, "pos_comment".into(), &self.pos_comment);
        f(G::PosResponse, "pos_response".into(), &self.pos_response);
        f(G::FrameProj, "frame_proj.w".into(), &self.frame_proj_w);
        f(G::FrameProj, "frame_proj.b".into(), &self.frame_proj_b);
        visit_encoder(G::VideoEncoder, "video_encoder", &self.video_encoder, f);
        visit_encoder(G::AudioEncoder, "audio_encoder", &self.audio_encoder, f);
        visit_encoder(G::CommentEncoder, "comment_encoder", &self.comment_encoder, f);
        visit_decoder(G::Decoder, "decoder", &self.decoder, f);
        f(G::OutputProj, "output.w".into(), &self.output_w);
        f(G::OutputProj, "output.b".into(), &self.output_b);
    }

    /// Mutable variant of [`visit`](Self::visit), same order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(ParamGroup, String, &mut Tensor)) {
        use ParamGroup as G;
        f(G::TokenEmbedding, "token_embedding".into(), &mut self.token_embedding);
        f(G::PosFrames, "pos_frames".into(), &mut self.pos_frames);
        f(G::PosAudio, "pos_audio".into(), &mut self.pos_audio);
        f(G::PosComment, "pos_comment".into(), &mut self.pos_comment);
        f(G::PosResponse, "pos_response".into(), &mut self.pos_response);
        f(G::FrameProj, "frame_proj.w".into(), &mut self.frame_proj_w);
        f(G::FrameProj, "frame_proj.b".into(), &mut self.frame_proj_b);
        visit_encoder_mut(G::VideoEncoder, "video_encoder", &mut self.video_encoder, f);
        visit_encoder_mut(G::AudioEncoder, "audio_encoder", &mut self.audio_encoder, f);
        visit_encoder_mut(G::CommentEncoder, "comment_encoder", &mut self.comment_encoder, f);
        visit_decoder_mut(G::Decoder, "decoder", &mut self.decoder, f);
        f(G::OutputProj, "output.w".into(), &mut self.output_w);
        f(G::OutputProj, "output.b".into(), &mut self.output_b);
    }

    pub fn named(&self) -> Vec<(ParamGroup, String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |g, name, t| out.push((g, name, t)));
        out
    }

    /// Total allocated learnable element count.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, t| n += t.numel());
        n
    }
}

macro_rules! visit_attention {
    ($f:ident, $prefix:expr, $p:expr, $group:expr, $($field:ident),*) => {
        $( $f($group, format!("{}.{}", $prefix, stringify!($field)), &$p.$field); )*
    };
}
macro_rules! visit_attention_mut {
    ($f:ident, $prefix:expr, $p:expr, $group:expr, $($field:ident),*) => {
        $( $f($group, format!("{}.{}", $prefix, stringify!($field)), &mut $p.$field); )*
    };
}

fn visit_attn<'a>(
    group: ParamGroup,
    prefix: &str,
    p: &'a AttentionParams,
    f: &mut impl FnMut(ParamGroup, String, &'a Tensor),
) {
    visit_attention!(f, prefix, p, group, wq, bq, wk, bk, wv, bv, wo, bo);
}

fn visit_attn_mut(
    group: ParamGroup,
    prefix: &str,
    p: &mut AttentionParams,
    f: &mut impl FnMut(ParamGroup, String, &mut Tensor),
) {
    visit_attention_mut!(f, prefix, p, group, wq, bq, wk, bk, wv, bv, wo, bo);
}

fn visit_ln<'a>(
    group: ParamGroup,
    prefix: &str,
    p: &'a LayerNormParams,
    f: &mut impl FnMut(ParamGroup, String, &'a Tensor),
) {
    f(group, format!("{prefix}.gamma"), &p.gamma);
    f(group, format!("{prefix}.beta"), &p.beta);
}

fn visit_ln_mut(
    group: ParamGroup,
    prefix: &str,
    p: &mut LayerNormParams,
    f: &mut impl FnMut(ParamGroup, String, &mut Tensor),
) {
    f(group, format!("{prefix}.gamma"), &mut p.gamma);
    f(group, format!("{prefix}.beta"), &mut p.beta);
}

fn visit_ffn<'a>(
    group: ParamGroup,
    prefix: &str,
    p: &'a FeedForwardParams,
    f: &mut impl FnMut(ParamGroup, String, &'a Tensor),
) {
    visit_attention!(f, prefix, p, group, w1, b1, w2, b2);
}

fn visit_ffn_mut(
    group: ParamGroup,
    prefix: &str,
    p: &mut FeedForwardParams,
    f: &mut impl FnMut(ParamGroup, String, &mut Tensor),
) {
    visit_attention_mut!(f, prefix, p, group, w1, b1, w2, b2);
}

fn visit_encoder<'a>(
    group: ParamGroup,
    prefix: &str,
    p: &'a EncoderStackParams,
    f: &mut impl FnMut(ParamGroup, String, &'a Tensor),
) {
    for (i, layer) in p.layers.iter().enumerate() {
        visit_ln(group, &format!("{prefix}.layer{i}.ln_attn"), &layer.ln_attn, f);
        visit_attn(group, &format!("{prefix}.layer{i}.attn"), &layer.attn, f);
        visit_ln(group, &format!("{prefix}.layer{i}.ln_ffn"), &layer.ln_ffn, f);
        visit_ffn(group, &format!("{prefix}.layer{i}.ffn"), &layer.ffn, f);
    }
    visit_ln(group, &format!("{prefix}.ln_final"), &p.ln_final, f);
}

fn visit_encoder_mut(
    group: ParamGroup,
    prefix: &str,
    p: &mut EncoderStackParams,
    f: &mut impl FnMut(ParamGroup, String, &mut Tensor),
) {
    for (i, layer) in p.layers.iter_mut().enumerate() {
        visit_ln_mut(group, &format!("{prefix}.layer{i}.ln_attn"), &mut layer.ln_attn, f);
        visit_attn_mut(group, &format!("{prefix}.layer{i}.attn"), &mut layer.attn, f);
        visit_ln_mut(group, &format!("{prefix}.layer{i}.ln_ffn"), &mut layer.ln_ffn, f);
        visit_ffn_mut(group, &format!("{prefix}.layer{i}.ffn"), &mut layer.ffn, f);
    }
    visit_ln_mut(group, &format!("{prefix}.ln_final"), &mut p.ln_final, f);
}

fn visit_decoder<'a>(
    group: ParamGroup,
    prefix: &str,
    p: &'a DecoderStackParams,
    f: &mut impl FnMut(ParamGroup, String, &'a Tensor),
) {
    for (i, l) in p.layers.iter().enumerate() {
        let pre = format!("{prefix}.layer{i}");
        visit_ln(group, &format!("{pre}.ln_self"), &l.ln_self, f);
        visit_attn(group, &format!("{pre}.self_attn"), &l.self_attn, f);
        visit_ln(group, &format!("{pre}.ln_video"), &l.ln_video, f);
        visit_attn(group, &format!("{pre}.cross_video"), &l.cross_video, f);
        visit_ln(group, &format!("{pre}.ln_audio"), &l.ln_audio, f);
        visit_attn(group, &format!("{pre}.cross_audio"), &l.cross_audio, f);
        visit_ln(group, &format!("{pre}.ln_comment"), &l.ln_comment, f);
        visit_attn(group, &format!("{pre}.cross_comment"), &l.cross_comment, f);
        visit_ln(group, &format!("{pre}.ln_ffn"), &l.ln_ffn, f);
        visit_ffn(group, &format!("{pre}.ffn"), &l.ffn, f);
    }
    visit_ln(group, &format!("{prefix}.ln_final"), &p.ln_final, f);
}

fn visit_decoder_mut(
    group: ParamGroup,
    prefix: &str,
    p: &mut DecoderStackParams,
    f: &mut impl FnMut(ParamGroup, String, &mut Tensor),
) {
    for (i, l) in p.layers.iter_mut().enumerate() {
        let pre = format!("{prefix}.layer{i}");
        visit_ln_mut(group, &format!("{pre}.ln_self"), &mut l.ln_self, f);
        visit_attn_mut(group, &format!("{pre}.self_attn"), &mut l.self_attn, f);
        visit_ln_mut(group, &format!("{pre}.ln_video"), &mut l.ln_video, f);
        visit_attn_mut(group, &format!("{pre}.cross_video"), &mut l.cross_video, f);
        visit_ln_mut(group, &format!("{pre}.ln_audio"), &mut l.ln_audio, f);
        visit_attn_mut(group, &format!("{pre}.cross_audio"), &mut l.cross_audio, f);
        visit_ln_mut(group, &format!("{pre}.ln_comment"), &mut l.ln_comment, f);
        visit_attn_mut(group, &format!("{pre}.cross_comment"), &mut l.cross_comment, f);
        visit_ln_mut(group, &format!("{pre}.ln_ffn"), &mut l.ln_ffn, f);
        visit_ffn_mut(group, &format!("{pre}.ffn"), &mut l.ffn, f);
    }
    visit_ln_mut(group, &format!("{prefix}.ln_final"), &mut p.ln_final, f);
}

// ── Tape bindings ────────────────────────────────────────────────────

/// Parameter ids registered on one tape, mirroring [`ModelParams`].
pub(crate) struct BoundParams {
    pub token_embedding: Tid,
    pub pos_frames: Tid,
    pub pos_audio: Tid,
    pub pos_comment: Tid,
    pub pos_response: Tid,
    pub frame_proj_w: Tid,
    pub frame_proj_b: Tid,
    pub video_encoder: BoundEncoderStack,
    pub audio_encoder: BoundEncoderStack,
    pub comment_encoder: BoundEncoderStack,
    pub decoder: BoundDecoderStack,
    pub output_w: Tid,
    pub output_b: Tid,
}

pub(crate) struct BoundLn {
    pub gamma: Tid,
    pub beta: Tid,
}

pub(crate) struct BoundAttention {
    pub wq: Tid,
    pub bq: Tid,
    pub wk: Tid,
    pub bk: Tid,
    pub wv: Tid,
    pub bv: Tid,
    pub wo: Tid,
    pub bo: Tid,
}

pub(crate) struct BoundFfn {
    pub w1: Tid,
    pub b1: Tid,
    pub w2: Tid,
    pub b2: Tid,
}

pub(crate) struct BoundEncoderLayer {
    pub ln_attn: BoundLn,
    pub attn: BoundAttention,
    pub ln_ffn: BoundLn,
    pub ffn: BoundFfn,
}

pub(crate) struct BoundEncoderStack {
    pub layers: Vec<BoundEncoderLayer>,
    pub ln_final: BoundLn,
}

pub(crate) struct BoundDecoderLayer {
    pub ln_self: BoundLn,
    pub self_attn: BoundAttention,
    pub ln_video: BoundLn,
    pub cross_video: BoundAttention,
    pub ln_audio: BoundLn,
    pub cross_audio: BoundAttention,
    pub ln_comment: BoundLn,
    pub cross_comment: BoundAttention,
    pub ln_ffn: BoundLn,
    pub ffn: BoundFfn,
}

pub(crate) struct BoundDecoderStack {
    pub layers: Vec<BoundDecoderLayer>,
    pub ln_final: BoundLn,
}

impl BoundLn {
    fn bind(tape: &mut Tape, p: &LayerNormParams) -> Self {
        BoundLn {
            gamma: tape.input(&p.gamma),
            beta: tape.input(&p.beta),
        }
    }
    fn ids(&self, out: &mut Vec<Tid>) {
        out.push(self.gamma);
        out.push(self.beta);
    }
}

impl BoundAttention {
    fn bind(tape: &mut Tape, p: &AttentionParams) -> Self {
        BoundAttention {
            wq: tape.input(&p.wq),
            bq: tape.input(&p.bq),
            wk: tape.input(&p.wk),
            bk: tape.input(&p.bk),
            wv: tape.input(&p.wv),
            bv: tape.input(&p.bv),
            wo: tape.input(&p.wo),
            bo: tape.input(&p.bo),
        }
    }
    fn ids(&self, out: &mut Vec<Tid>) {
        out.extend([
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]);
    }
}

impl BoundFfn {
    fn bind(tape: &mut Tape, p: &FeedForwardParams) -> Self {
        BoundFfn {
            w1: tape.input(&p.w1),
            b1: tape.input(&p.b1),
            w2: tape.input(&p.w2),
            b2: tape.input(&p.b2),
        }
    }
    fn ids(&self, out: &mut Vec<Tid>) {
        out.extend([self.w1, self.b1, self.w2, self.b2]);
    }
}

impl BoundEncoderStack {
    fn bind(tape: &mut Tape, p: &EncoderStackParams) -> Self {
        BoundEncoderStack {
            layers: p
                .layers
                .iter()
                .map(|l| BoundEncoderLayer {
                    ln_attn: BoundLn::bind(tape, &l.ln_attn),
                    attn: BoundAttention::bind(tape, &l.attn),
                    ln_ffn: BoundLn::bind(tape, &l.ln_ffn),
                    ffn: BoundFfn::bind(tape, &l.ffn),
                })
                .collect(),
            ln_final: BoundLn::bind(tape, &p.ln_final),
        }
    }
    fn ids(&self, out: &mut Vec<Tid>) {
        for l in &self.layers {
            l.ln_attn.ids(out);
            l.attn.ids(out);
            l.ln_ffn.ids(out);
            l.ffn.ids(out);
        }
        self.ln_final.ids(out);
    }
}

impl BoundDecoderStack {
    fn bind(tape: &mut Tape, p: &DecoderStackParams) -> Self {
        BoundDecoderStack {
            layers: p
                .layers
                .iter()
                .map(|l| BoundDecoderLayer {
                    ln_self: BoundLn::bind(tape, &l.ln_self),
                    self_attn: BoundAttention::bind(tape, &l.self_attn),
                    ln_video: BoundLn::bind(tape, &l.ln_video),
                    cross_video: BoundAttention::bind(tape, &l.cross_video),
                    ln_audio: BoundLn::bind(tape, &l.ln_audio),
                    cross_audio: BoundAttention::bind(tape, &l.cross_audio),
                    ln_comment: BoundLn::bind(tape, &l.ln_comment),
                    cross_comment: BoundAttention::bind(tape, &l.cross_comment),
                    ln_ffn: BoundLn::bind(tape, &l.ln_ffn),
                    ffn: BoundFfn::bind(tape, &l.ffn),
                })
                .collect(),
            ln_final: BoundLn::bind(tape, &p.ln_final),
        }
    }
    fn ids(&self, out: &mut Vec<Tid>) {
        for l in &self.layers {
            l.ln_self.ids(out);
            l.self_attn.ids(out);
            l.ln_video.ids(out);
            l.cross_video.ids(out);
            l.ln_audio.ids(out);
            l.cross_audio.ids(out);
            l.ln_comment.ids(out);
            l.cross_comment.ids(out);
            l.ln_ffn.ids(out);
            l.ffn.ids(out);
        }
        self.ln_final.ids(out);
    }
}

impl BoundParams {
    /// Register every parameter as a tape leaf, in [`ModelParams::visit`]
    /// order.
    pub fn bind(tape: &mut Tape, p: &ModelParams) -> Self {
        BoundParams {
            token_embedding: tape.input(&p.token_embedding),
            pos_frames: tape.input(&p.pos_frames),
            pos_audio: tape.input(&p.pos_audio),
            pos_comment: tape.input(&p.pos_comment),
            pos_response: tape.input(&p.pos_response),
            frame_proj_w: tape.input(&p.frame_proj_w),
            frame_proj_b: tape.input(&p.frame_proj_b),
            video_encoder: BoundEncoderStack::bind(tape, &p.video_encoder),
            audio_encoder: BoundEncoderStack::bind(tape, &p.audio_encoder),
            comment_encoder: BoundEncoderStack::bind(tape, &p.comment_encoder),
            decoder: BoundDecoderStack::bind(tape, &p.decoder),
            output_w: tape.input(&p.output_w),
            output_b: tape.input(&p.output_b),
        }
    }

    /// Tape ids in the same canonical order as [`ModelParams::visit`].
    pub fn ids(&self) -> Vec<Tid> {
        let mut out = Vec::new();
        out.extend([
            self.token_embedding,
            self.pos_frames,
            self.pos_audio,
            self.pos_comment,
            self.pos_response,
            self.frame_proj_w,
            self.frame_proj_b,
        ]);
        self.video_encoder.ids(&mut out);
        self.audio_encoder.ids(&mut out);
        self.comment_encoder.ids(&mut out);
        self.decoder.ids(&mut out);
        out.push(self.output_w);
        out.push(self.output_b);
        out
    }
}

/// Forward-pass mode: evaluation is deterministic; training applies seeded
/// inverted-scaling dropout.
pub enum Mode<'a> {
    Eval,
    Train { dropout: f64, rng: &'a mut ChaCha12Rng },
}

impl Mode<'_> {
    pub(crate) fn apply_dropout(&mut self, tape: &mut Tape, x: Tid) -> Result<Tid> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, rng } => {
                if *dropout == 0.0 {
                    return Ok(x);
                }
                use rand::Rng;
                let p = *dropout;
                let keep_scale = 1.0 / (1.0 - p);
                let shape = tape.shape(x).to_vec();
                let numel: usize = shape.iter().product();
                let mask: Vec<f64> = (0..numel)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
                    .collect();
                let m = tape.constant(shape, mask)?;
                tape.mul(x, m)
            }
        }
    }
}

/// Configuration plus parameters; the unit that is trained, checkpointed,
/// and evaluated.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, vocab_size: usize, rng: &mut ChaCha12Rng) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, vocab_size, rng);
        Ok(Model { config, params })
    }

    /// Encode all three modalities of a clip in evaluation mode.
    pub fn encode_clip(
        &self,
        clip: &ClipExample,
        vocab: &Vocabulary,
        n_context: usize,
    ) -> Result<EncodedContext> {
        let frames = forward::frames_tensor(&clip.frames, &self.config)?;
        let audio_ids = vocab.encode(&clip.audio_tokens);
        let slots: Vec<Option<Vec<usize>>> = select_context_comments(clip, n_context)
            .into_iter()
            .map(|s| s.map(|c| vocab.encode(&c.tokens())))
            .collect();
        self.encode_context(&frames, &audio_ids, &slots)
    }

    /// Encode pre-tokenized inputs: frame matrix (rows ≤ T1), audio word
    /// ids, and `n_c` comment-slot word-id sequences (`None` = padding slot).
    pub fn encode_context(
        &self,
        frames: &Tensor,
        audio_word_ids: &[usize],
        comment_slots: &[Option<Vec<usize>>],
    ) -> Result<EncodedContext> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let mut mode = Mode::Eval;
        let enc = forward::encode_context_on(
            &mut tape,
            &bound,
            &self.config,
            frames,
            audio_word_ids,
            comment_slots,
            &mut mode,
        )?;
        Ok(EncodedContext {
            video: tape.tensor(enc.video),
            audio: tape.tensor(enc.audio),
            comments: tape.tensor(enc.comments),
            video_keep: enc.video_keep,
            audio_keep: enc.audio_keep,
            comment_keep: enc.comment_keep,
        })
    }

    /// Project, position-embed, and encode a frame matrix into V'.
    pub fn encode_video(&self, frames: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let mut mode = Mode::Eval;
        let (v, _) =
            forward::encode_video_on(&mut tape, &bound, &self.config, frames, &mut mode)?;
        Ok(tape.tensor(v))
    }

    /// Embed and encode audio transcript word ids into A'.
    pub fn encode_audio(&self, word_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let mut mode = Mode::Eval;
        let (a, _) =
            forward::encode_audio_on(&mut tape, &bound, &self.config, word_ids, &mut mode)?;
        Ok(tape.tensor(a))
    }

    /// Encode comment slots into C' (first-token pooling per comment).
    pub fn encode_comments(&self, slots: &[Option<Vec<usize>>]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let mut mode = Mode::Eval;
        let (c, _) =
            forward::encode_comments_on(&mut tape, &bound, &self.config, slots, &mut mode)?;
        Ok(tape.tensor(c))
    }

    /// Teacher-forced decoder pass over an already-encoded context. The
    /// response token ids must start with BOS; output is `[p_response × V]`
    /// vocabulary logits.
    pub fn decoder_forward(&self, response_tokens: &[usize], ctx: &EncodedContext) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &self.params);
        let enc = forward::rebind_context(&mut tape, ctx)?;
        let mut mode = Mode::Eval;
        let logits = forward::decoder_logits_on(
            &mut tape,
            &bound,
            &self.config,
            &enc,
            response_tokens,
            &mut mode,
        )?;
        Ok(tape.tensor(logits))
    }

    /// Length-normalized log-likelihood of a candidate (word ids, no
    /// BOS/EOS framing) under the decoder. Deterministic in eval mode.
    pub fn score_candidate(&self, candidate_word_ids: &[usize], ctx: &EncodedContext) -> Result<f64> {
        forward::score_candidate(self, candidate_word_ids, ctx)
    }

    /// Autoregressive generation from BOS; see [`DecodeStrategy`].
    pub fn generate(
        &self,
        ctx: &EncodedContext,
        strategy: DecodeStrategy,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        generate::generate(self, ctx, strategy, max_len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
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
        }
    }

    #[test]
    fn default_config_matches_reported_setup() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.layers_encoder, 4);
        assert_eq!(cfg.layers_decoder, 4);
        assert_eq!(cfg.d_model, 256);
        assert!((cfg.dropout - 0.1).abs() < 1e-12);
        assert_eq!(cfg.n_context, 5);
        assert_eq!(cfg.t1, 20);
        assert_eq!(cfg.t2, 30);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = tiny_config();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.t1 = cfg.t2;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_config();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn param_count_formula_matches_allocation() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for (cfg, vocab) in [
            (tiny_config(), 17),
            (
                ModelConfig {
                    d_model: 16,
                    d_frame: 7,
                    layers_encoder: 2,
                    layers_decoder: 3,
                    n_heads: 4,
                    d_ff: 20,
                    ..tiny_config()
                },
                101,
            ),
        ] {
            let params = ModelParams::init(&cfg, vocab, &mut rng);
            assert_eq!(params.param_count(), cfg.expected_param_count(vocab));
        }
    }

    #[test]
    fn bound_ids_align_with_visit_order() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let cfg = tiny_config();
        let params = ModelParams::init(&cfg, 11, &mut rng);
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&mut tape, &params);
        let ids = bound.ids();
        let named = params.named();
        assert_eq!(ids.len(), named.len());
        for (id, (_, name, tensor)) in ids.iter().zip(&named) {
            assert_eq!(
                tape.shape(*id),
                tensor.shape.as_slice(),
                "misaligned binding at {name}"
            );
        }
    }

    #[test]
    fn all_params_require_grad_and_are_finite() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let params = ModelParams::init(&tiny_config(), 11, &mut rng);
        for (_, name, t) in params.named() {
            assert!(t.requires_grad, "{name} must require grad");
            assert!(t.data.iter().all(|v| v.is_finite()), "{name} not finite");
        }
    }
}
