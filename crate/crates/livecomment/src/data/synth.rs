use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use super::corpus::{ClipExample, CommentRecord, CorpusManifest};
use crate::error::{Error, Result};

/// Knobs for the synthetic corpus generator.
#[derive(Debug, Clone)]
pub struct SynthParams {
    pub n_streams: usize,
    pub clips_per_stream: usize,
    pub n_topics: usize,
    pub vocab_per_topic: usize,
    pub d_frame: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub t1: u32,
    pub t2: u32,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_streams: 4,
            clips_per_stream: 50,
            n_topics: 8,
            vocab_per_topic: 40,
            d_frame: 64,
            noise_sigma: 0.1,
            seed: 0,
            t1: 20,
            t2: 30,
        }
    }
}

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-12);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn round_to(x: f64, places: i32) -> f64 {
    let k = 10f64.powi(places);
    (x * k).round() / k
}

/// Zipf-weighted word index: weight(j) ∝ 1/(j+1).
fn zipf_index(rng: &mut ChaCha12Rng, n: usize) -> usize {
    let total: f64 = (0..n).map(|j| 1.0 / (j + 1) as f64).sum();
    let mut u = rng.gen::<f64>() * total;
    for j in 0..n {
        u -= 1.0 / (j + 1) as f64;
        if u <= 0.0 {
            return j;
        }
    }
    n - 1
}

/// Generate a corpus with a planted cross-modal signal: each clip draws a
/// latent topic; frames are the topic embedding plus Gaussian noise, and all
/// text (transcript, context comments, responses) comes from that topic's
/// unigram vocabulary. The response is therefore predictable from every
/// modality. Deterministic under `seed`.
pub fn synthesize_corpus(params: &SynthParams) -> Result<(Vec<ClipExample>, CorpusManifest)> {
    for (name, v) in [
        ("n_streams", params.n_streams),
        ("clips_per_stream", params.clips_per_stream),
        ("n_topics", params.n_topics),
        ("vocab_per_topic", params.vocab_per_topic),
        ("d_frame", params.d_frame),
    ] {
        if v < 1 {
            return Err(Error::Config(format!("{name} must be >= 1, got {v}")));
        }
    }
    if params.t1 >= params.t2 {
        return Err(Error::Config(format!(
            "T1={} must be shorter than T2={}",
            params.t1, params.t2
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(params.seed);
    let topic_emb: Vec<Vec<f64>> = (0..params.n_topics)
        .map(|_| (0..params.d_frame).map(|_| normal(&mut rng)).collect())
        .collect();
    let word = |z: usize, j: usize| format!("t{z}w{j}");
    let draw_words = |rng: &mut ChaCha12Rng, z: usize, n: usize| -> String {
        (0..n)
            .map(|_| word(z, zipf_index(rng, params.vocab_per_topic)))
            .collect::<Vec<_>>()
            .join(" ")
    };

    let mut clips = Vec::with_capacity(params.n_streams * params.clips_per_stream);
    for s in 0..params.n_streams {
        for k in 0..params.clips_per_stream {
            let t = (k as u32 * params.t2) as f64;
            let z = rng.gen_range(0..params.n_topics);
            let frames: Vec<Vec<f64>> = (0..params.t1)
                .map(|_| {
                    topic_emb[z]
                        .iter()
                        .map(|&e| round_to(e + params.noise_sigma * normal(&mut rng), 6))
                        .collect()
                })
                .collect();
            let n_audio = rng.gen_range(4..=10);
            let audio_text = draw_words(&mut rng, z, n_audio);
            // rounding may land on the half-open upper bound; clamp back in
            let n_ctx = rng.gen_range(2..=5);
            let ctx_max = t + params.t1 as f64 - 1e-3;
            let mut context_comments: Vec<CommentRecord> = (0..n_ctx)
                .map(|_| {
                    let n_words = rng.gen_range(1..=5);
                    CommentRecord {
                        t: round_to(t + rng.gen::<f64>() * params.t1 as f64, 3).min(ctx_max),
                        text: draw_words(&mut rng, z, n_words),
                    }
                })
                .collect();
            context_comments.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
            let n_resp = rng.gen_range(1..=3);
            let resp_span = (params.t2 - params.t1) as f64;
            let resp_max = t + params.t2 as f64 - 1e-3;
            let mut response_comments: Vec<CommentRecord> = (0..n_resp)
                .map(|_| {
                    let n_words = rng.gen_range(2..=5);
                    CommentRecord {
                        t: round_to(t + params.t1 as f64 + rng.gen::<f64>() * resp_span, 3)
                            .min(resp_max),
                        text: draw_words(&mut rng, z, n_words),
                    }
                })
                .collect();
            response_comments.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
            clips.push(ClipExample {
                clip_id: format!("synth{s}/{k}"),
                category: format!("topic{z}"),
                t,
                frames,
                audio_tokens: audio_text.split_whitespace().map(String::from).collect(),
                context_comments,
                response_comments,
            });
        }
    }
    let manifest = CorpusManifest {
        d_frame: params.d_frame,
        t1: params.t1,
        t2: params.t2,
        n_clips: clips.len(),
    };
    Ok((clips, manifest))
}
