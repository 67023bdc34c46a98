use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenize::tokenize;
use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.tsv";

/// One timestamped chat comment (usernames already removed upstream).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CommentRecord {
    /// Seconds from stream start.
    pub t: f64,
    pub text: String,
}

impl CommentRecord {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

/// A timestamped transcript utterance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TimedText {
    pub t: f64,
    pub text: String,
}

/// One 30-second clip: frame features and text for the context window plus
/// the response-window comments the model learns to produce.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipExample {
    pub clip_id: String,
    pub category: String,
    /// Clip start, seconds from stream start.
    pub t: f64,
    /// T1 frame-feature vectors (1 fps over the context window).
    pub frames: Vec<Vec<f64>>,
    /// Transcript tokens for the context window.
    pub audio_tokens: Vec<String>,
    pub context_comments: Vec<CommentRecord>,
    pub response_comments: Vec<CommentRecord>,
}

impl ClipExample {
    /// Stream this clip was cut from (`clip_id` is `<stream>/<index>`).
    pub fn stream_id(&self) -> &str {
        match self.clip_id.rsplit_once('/') {
            Some((stream, _)) => stream,
            None => &self.clip_id,
        }
    }
}

/// Sidecar manifest describing a clip corpus.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub d_frame: usize,
    #[serde(rename = "T1")]
    pub t1: u32,
    #[serde(rename = "T2")]
    pub t2: u32,
    pub n_clips: usize,
}

/// A loaded clip corpus: the manifest plus every clip record.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub clips: Vec<ClipExample>,
}

/// An unprocessed stream: frame features at 1 fps from time zero, the
/// transcript, and the raw chat log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawStream {
    pub stream_id: String,
    pub category: String,
    pub frames: Vec<Vec<f64>>,
    pub transcript: Vec<TimedText>,
    pub comments: Vec<TimedText>,
}

impl RawStream {
    /// Stream length in seconds (frames are sampled at 1 fps).
    pub fn duration(&self) -> f64 {
        self.frames.len() as f64
    }
}

pub fn write_corpus(dir: &Path, clips: &[ClipExample], manifest: &CorpusManifest) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join(CORPUS_FILE))?);
    for clip in clips {
        serde_json::to_writer(&mut out, clip).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    let manifest_json = serde_json::to_string(manifest).map_err(std::io::Error::from)?;
    std::fs::write(dir.join(MANIFEST_FILE), manifest_json)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
        .map_err(|e| Error::Format {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let corpus_path = dir.join(CORPUS_FILE);
    let file = std::fs::File::open(&corpus_path)?;
    let mut clips = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let clip: ClipExample = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: corpus_path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        if clip.frames.len() != manifest.t1 as usize {
            return Err(Error::Corpus(format!(
                "clip {} has {} frames, manifest T1 is {}",
                clip.clip_id,
                clip.frames.len(),
                manifest.t1
            )));
        }
        if let Some(f) = clip.frames.iter().find(|f| f.len() != manifest.d_frame) {
            return Err(Error::Corpus(format!(
                "clip {} has a frame of dim {}, manifest d_frame is {}",
                clip.clip_id,
                f.len(),
                manifest.d_frame
            )));
        }
        clips.push(clip);
    }
    if clips.len() != manifest.n_clips {
        return Err(Error::Corpus(format!(
            "corpus has {} clips but manifest declares {}",
            clips.len(),
            manifest.n_clips
        )));
    }
    Ok(Corpus { manifest, clips })
}

pub fn write_streams(path: &Path, streams: &[RawStream]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for s in streams {
        serde_json::to_writer(&mut out, s).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_streams(path: &Path) -> Result<Vec<RawStream>> {
    let file = std::fs::File::open(path)?;
    let mut streams = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let s: RawStream = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        streams.push(s);
    }
    Ok(streams)
}

/// Aggregate corpus statistics; comment counts cover context and response
/// windows, word counts use the shared tokenizer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats {
    pub n_videos: usize,
    pub n_comments: usize,
    pub duration_s: f64,
    pub avg_duration_s: f64,
    pub avg_comments_per_video: f64,
    pub avg_words_per_comment: f64,
    pub comment_density_cps: f64,
    pub vocab_size_unique_words: usize,
}

impl Corpus {
    pub fn stats(&self) -> Result<CorpusStats> {
        if self.clips.is_empty() {
            return Err(Error::Corpus("empty corpus: no clips".into()));
        }
        let videos: HashSet<&str> = self.clips.iter().map(|c| c.stream_id()).collect();
        let n_videos = videos.len();
        let mut n_comments = 0usize;
        let mut n_words = 0usize;
        let mut unique: HashSet<String> = HashSet::new();
        for clip in &self.clips {
            for c in clip.context_comments.iter().chain(&clip.response_comments) {
                n_comments += 1;
                for tok in c.tokens() {
                    n_words += 1;
                    unique.insert(tok);
                }
            }
        }
        if n_comments == 0 {
            return Err(Error::Corpus("empty corpus: no comments".into()));
        }
        let duration_s = (self.clips.len() * self.manifest.t2 as usize) as f64;
        Ok(CorpusStats {
            n_videos,
            n_comments,
            duration_s,
            avg_duration_s: duration_s / n_videos as f64,
            avg_comments_per_video: n_comments as f64 / n_videos as f64,
            avg_words_per_comment: n_words as f64 / n_comments as f64,
            comment_density_cps: n_comments as f64 / duration_s,
            vocab_size_unique_words: unique.len(),
        })
    }
}
