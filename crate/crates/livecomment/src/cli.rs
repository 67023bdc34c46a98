//! Command-line pipeline: synthesize or preprocess a corpus, build the
//! vocabulary, pretrain/train, evaluate retrieval, compute stats, and
//! generate comments. All randomness flows from explicit seeds, so any
//! subcommand run twice with the same inputs produces identical artifacts.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    self, read_corpus, read_streams, write_corpus, Corpus, CorpusManifest, SynthParams,
    Vocabulary, VOCAB_FILE,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_corpus, CandidateStrategy, CANDIDATES_PER_QUERY};
use crate::model::{DecodeStrategy, Model, ModelConfig};
use crate::train::{load_checkpoint, pretrain_mlm, save_checkpoint, train, TrainConfig};

/// All run settings: model structure, training hyperparameters, and the
/// context-comment counts used in training vs evaluation. Loaded from a
/// JSON config file with exactly these keys (unknown keys are rejected);
/// omitted keys fall back to the reported-setup defaults.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub d_model: usize,
    pub d_frame: usize,
    pub layers_encoder: usize,
    pub layers_decoder: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub p_audio: usize,
    pub p_comment: usize,
    pub p_response: usize,
    pub n_context_train: usize,
    pub n_context_eval: usize,
    pub t1: u32,
    pub t2: u32,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs_pretrain: usize,
    pub epochs_train: usize,
    pub p_mask: f64,
    pub augmentation: bool,
    pub seed: u64,
    pub grad_clip: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            d_model: m.d_model,
            d_frame: m.d_frame,
            layers_encoder: m.layers_encoder,
            layers_decoder: m.layers_decoder,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            dropout: m.dropout,
            p_audio: m.p_audio,
            p_comment: m.p_comment,
            p_response: m.p_response,
            n_context_train: m.n_context,
            n_context_eval: 15,
            t1: m.t1,
            t2: m.t2,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs_pretrain: t.epochs_pretrain,
            epochs_train: t.epochs_train,
            p_mask: t.p_mask,
            augmentation: t.augmentation,
            seed: t.seed,
            grad_clip: t.grad_clip,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, n_context: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_frame: self.d_frame,
            layers_encoder: self.layers_encoder,
            layers_decoder: self.layers_decoder,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            dropout: self.dropout,
            p_audio: self.p_audio,
            p_comment: self.p_comment,
            p_response: self.p_response,
            n_context,
            t1: self.t1,
            t2: self.t2,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs_pretrain: self.epochs_pretrain,
            epochs_train: self.epochs_train,
            p_mask: self.p_mask,
            augmentation: self.augmentation,
            seed: self.seed,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(self.n_context_train).validate()?;
        if self.n_context_eval < 1 {
            return Err(Error::Config("n_context_eval must be >= 1".into()));
        }
        self.train_config().validate()
    }
}

#[derive(Parser)]
#[command(name = "livecomment", version, about = "Multimodal live-comment generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic clip corpus with a planted cross-modal topic signal
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        streams: usize,
        /// Clips per stream
        #[arg(long, default_value_t = 50)]
        clips: usize,
        #[arg(long, default_value_t = 8)]
        topics: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 40)]
        vocab_per_topic: usize,
        #[arg(long, default_value_t = 64)]
        d_frame: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_sigma: f64,
        /// Context window seconds
        #[arg(long, default_value_t = 20)]
        t1: u32,
        /// Clip length seconds
        #[arg(long, default_value_t = 30)]
        t2: u32,
    },
    /// Crop raw streams to the densest comment window and slice into clips
    Preprocess {
        /// Raw stream file (JSON lines)
        #[arg(long = "in")]
        input: PathBuf,
        /// Densest-window length in seconds
        #[arg(long, default_value_t = 1800)]
        window: u32,
        /// Clip length T2 in seconds
        #[arg(long = "clip-len", default_value_t = 30)]
        clip_len: u32,
        /// Context window T1 in seconds
        #[arg(long, default_value_t = 20)]
        context: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a frequency-ranked vocabulary from a clip corpus
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_freq: u64,
        #[arg(long, default_value_t = 50000)]
        max_size: usize,
        /// Output file (default: <corpus>/vocab.tsv)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Masked-LM pretraining of the text encoders
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Enable response-window augmentation (overrides config)
        #[arg(long)]
        augment: bool,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Teacher-forced training of the full model
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a (pretrained) checkpoint instead of fresh init
        #[arg(long)]
        init: Option<PathBuf>,
        /// Enable response-window augmentation (overrides config)
        #[arg(long)]
        augment: bool,
        /// Override the config seed
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank candidate responses and write a retrieval report
    Evaluate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// cosine | popularity | random
        #[arg(long)]
        strategy: String,
        /// Candidate-set size (the harness is defined for 10)
        #[arg(long, default_value_t = 10)]
        candidates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Corpus supplying IDF statistics for the cosine strategy
        /// (default: the eval corpus itself)
        #[arg(long = "idf-corpus")]
        idf_corpus: Option<PathBuf>,
        /// Context comments per query
        #[arg(long = "n-context", default_value_t = 15)]
        n_context: usize,
    },
    /// Print corpus statistics as JSON
    Stats {
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Generate a comment for one clip
    Generate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "clip-id")]
        clip_id: String,
        /// greedy | beam
        #[arg(long, default_value = "greedy")]
        strategy: String,
        #[arg(long = "beam-width", default_value_t = 4)]
        beam_width: usize,
        /// Maximum generated tokens (default: p_response)
        #[arg(long = "max-len")]
        max_len: Option<usize>,
        /// Context comments supplied to the model
        #[arg(long = "n-context", default_value_t = 15)]
        n_context: usize,
    },
}

/// Parse and dispatch. Exit codes: 0 success (including `--help`),
/// 1 runtime failure, 2 usage error.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_vocab(corpus_dir: &Path) -> Result<Vocabulary> {
    Vocabulary::load(&corpus_dir.join(VOCAB_FILE))
}

fn corpus_tokens(corpus: &Corpus) -> Vec<String> {
    let mut tokens = Vec::new();
    for clip in &corpus.clips {
        tokens.extend(clip.audio_tokens.iter().cloned());
        for c in clip.context_comments.iter().chain(&clip.response_comments) {
            tokens.extend(c.tokens());
        }
    }
    tokens
}

fn check_corpus_matches(cfg: &RunConfig, manifest: &CorpusManifest) -> Result<()> {
    if manifest.d_frame != cfg.d_frame || manifest.t1 != cfg.t1 || manifest.t2 != cfg.t2 {
        return Err(Error::Config(format!(
            "corpus manifest (d_frame={}, T1={}, T2={}) does not match config \
             (d_frame={}, T1={}, T2={})",
            manifest.d_frame, manifest.t1, manifest.t2, cfg.d_frame, cfg.t1, cfg.t2
        )));
    }
    Ok(())
}

fn load_run_config(
    path: Option<&PathBuf>,
    augment: bool,
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if augment {
        cfg.augmentation = true;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_log_lines(stage: &str, curve: &[f64]) {
    for (epoch, loss) in curve.iter().enumerate() {
        println!(
            "{}",
            serde_json::json!({"stage": stage, "epoch": epoch + 1, "mean_loss": loss})
        );
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            streams,
            clips,
            topics,
            seed,
            vocab_per_topic,
            d_frame,
            noise_sigma,
            t1,
            t2,
        } => {
            let params = SynthParams {
                n_streams: streams,
                clips_per_stream: clips,
                n_topics: topics,
                vocab_per_topic,
                d_frame,
                noise_sigma,
                seed,
                t1,
                t2,
            };
            let (clips, manifest) = data::synthesize_corpus(&params)?;
            write_corpus(&out, &clips, &manifest)?;
            println!("wrote {} clips to {}", manifest.n_clips, out.display());
            Ok(())
        }
        Command::Preprocess {
            input,
            window,
            clip_len,
            context,
            out,
        } => {
            let streams = read_streams(&input)?;
            if streams.is_empty() {
                return Err(Error::Corpus(format!(
                    "no streams in {}",
                    input.display()
                )));
            }
            let d_frame = streams
                .iter()
                .flat_map(|s| s.frames.first())
                .map(|f| f.len())
                .next()
                .ok_or_else(|| Error::Corpus("no stream has any frames".into()))?;
            for s in &streams {
                if let Some(f) = s.frames.iter().find(|f| f.len() != d_frame) {
                    return Err(Error::Corpus(format!(
                        "stream {} has a frame of dim {}, expected {}",
                        s.stream_id,
                        f.len(),
                        d_frame
                    )));
                }
            }
            let mut clips = Vec::new();
            for s in &streams {
                clips.extend(data::preprocess_stream(s, window, context, clip_len)?);
            }
            let manifest = CorpusManifest {
                d_frame,
                t1: context,
                t2: clip_len,
                n_clips: clips.len(),
            };
            write_corpus(&out, &clips, &manifest)?;
            println!(
                "wrote {} clips from {} streams to {}",
                manifest.n_clips,
                streams.len(),
                out.display()
            );
            Ok(())
        }
        Command::BuildVocab {
            corpus,
            min_freq,
            max_size,
            out,
        } => {
            let loaded = read_corpus(&corpus)?;
            let tokens = corpus_tokens(&loaded);
            let vocab = Vocabulary::build(tokens.iter().map(String::as_str), min_freq, max_size)?;
            let path = out.unwrap_or_else(|| corpus.join(VOCAB_FILE));
            vocab.save(&path)?;
            println!("vocabulary of {} ids written to {}", vocab.len(), path.display());
            Ok(())
        }
        Command::Pretrain {
            corpus,
            config,
            augment,
            seed,
            out,
        } => {
            let cfg = load_run_config(config.as_ref(), augment, seed)?;
            let loaded = read_corpus(&corpus)?;
            check_corpus_matches(&cfg, &loaded.manifest)?;
            let vocab = load_vocab(&corpus)?;
            let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
            let mut model = Model::init(
                cfg.model_config(cfg.n_context_train),
                vocab.len(),
                &mut rng,
            )?;
            let train_cfg = cfg.train_config();
            let curve = pretrain_mlm(&mut model, &loaded, &vocab, &train_cfg)?;
            print_log_lines("pretrain", &curve);
            save_checkpoint(&out, &model, &train_cfg, vocab.fingerprint())?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Train {
            corpus,
            config,
            init,
            augment,
            seed,
            out,
        } => {
            let cfg = load_run_config(config.as_ref(), augment, seed)?;
            let loaded = read_corpus(&corpus)?;
            check_corpus_matches(&cfg, &loaded.manifest)?;
            let vocab = load_vocab(&corpus)?;
            let train_cfg = cfg.train_config();
            let mut model = match init {
                Some(ckpt) => {
                    let (model, _) = load_checkpoint(&ckpt, Some(vocab.fingerprint()))?;
                    model
                }
                None => {
                    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
                    Model::init(
                        cfg.model_config(cfg.n_context_train),
                        vocab.len(),
                        &mut rng,
                    )?
                }
            };
            let curve = train(&mut model, &loaded, &vocab, &train_cfg)?;
            print_log_lines("train", &curve);
            save_checkpoint(&out, &model, &train_cfg, vocab.fingerprint())?;
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Command::Evaluate {
            corpus,
            ckpt,
            strategy,
            candidates,
            seed,
            out,
            idf_corpus,
            n_context,
        } => {
            if candidates != CANDIDATES_PER_QUERY {
                return Err(Error::Config(format!(
                    "the retrieval harness is defined for {CANDIDATES_PER_QUERY} candidates, got {candidates}"
                )));
            }
            let strategy: CandidateStrategy = strategy.parse()?;
            let loaded = read_corpus(&corpus)?;
            let vocab = load_vocab(&corpus)?;
            let (model, train_cfg) = load_checkpoint(&ckpt, Some(vocab.fingerprint()))?;
            let idf = idf_corpus.map(|p| read_corpus(&p)).transpose()?;
            let report = evaluate_corpus(
                &model,
                &vocab,
                &loaded,
                strategy,
                seed,
                n_context,
                train_cfg.augmentation,
                idf.as_ref(),
            )?;
            let json = serde_json::to_string(&report).map_err(std::io::Error::from)?;
            std::fs::write(&out, format!("{json}\n"))?;
            println!("{json}");
            Ok(())
        }
        Command::Stats { corpus } => {
            let loaded = read_corpus(&corpus)?;
            let stats = loaded.stats()?;
            let json = serde_json::to_string(&stats).map_err(std::io::Error::from)?;
            println!("{json}");
            Ok(())
        }
        Command::Generate {
            corpus,
            ckpt,
            clip_id,
            strategy,
            beam_width,
            max_len,
            n_context,
        } => {
            let loaded = read_corpus(&corpus)?;
            let vocab = load_vocab(&corpus)?;
            let (model, _) = load_checkpoint(&ckpt, Some(vocab.fingerprint()))?;
            let clip = loaded
                .clips
                .iter()
                .find(|c| c.clip_id == clip_id)
                .ok_or_else(|| Error::Corpus(format!("no clip with id {clip_id:?}")))?;
            let decode = match strategy.as_str() {
                "greedy" => DecodeStrategy::Greedy,
                "beam" => DecodeStrategy::Beam { width: beam_width },
                other => {
                    return Err(Error::Config(format!(
                        "unknown decode strategy {other:?} (expected greedy|beam)"
                    )))
                }
            };
            let ctx = model.encode_clip(clip, &vocab, n_context)?;
            let max_len = max_len.unwrap_or(model.config.p_response);
            let ids = model.generate(&ctx, decode, max_len)?;
            let words: Result<Vec<&str>> = ids.iter().map(|&id| vocab.token(id)).collect();
            println!("{}", words?.join(" "));
            Ok(())
        }
    }
}
