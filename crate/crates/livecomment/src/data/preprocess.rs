use super::corpus::{ClipExample, CommentRecord, RawStream};
use super::tokenize::tokenize;
use crate::error::{Error, Result};

/// Earliest window start (taken from the timestamps themselves) maximizing
/// the number of comments in `[start, start+window_len)`. Two-pointer O(n);
/// `timestamps` must be sorted ascending.
pub fn densest_window(timestamps: &[f64], window_len: f64) -> Result<(f64, usize)> {
    if timestamps.is_empty() {
        return Err(Error::EmptyInput("densest_window timestamps"));
    }
    if !(window_len > 0.0) {
        return Err(Error::Config(format!(
            "window length must be positive, got {window_len}"
        )));
    }
    debug_assert!(timestamps.windows(2).all(|w| w[0] <= w[1]));
    let mut best_start = timestamps[0];
    let mut best_count = 0usize;
    let mut j = 0usize;
    for i in 0..timestamps.len() {
        if j < i {
            j = i;
        }
        while j < timestamps.len() && timestamps[j] < timestamps[i] + window_len {
            j += 1;
        }
        let count = j - i;
        if count > best_count {
            best_count = count;
            best_start = timestamps[i];
        }
    }
    Ok((best_start, best_count))
}

/// Slice a stream into non-overlapping clips at stride `t2`. Comments fall
/// into half-open windows: `[t, t+t1)` is context, `[t+t1, t+t2)` response.
/// Clips whose response window is empty are dropped.
pub fn slice_clips(stream: &RawStream, t1: u32, t2: u32) -> Result<Vec<ClipExample>> {
    if t1 >= t2 {
        return Err(Error::Config(format!(
            "context window T1={t1} must be shorter than clip length T2={t2}"
        )));
    }
    let duration = stream.frames.len();
    let n_slots = duration / t2 as usize;
    let mut clips: Vec<ClipExample> = (0..n_slots)
        .map(|k| {
            let start = k * t2 as usize;
            ClipExample {
                clip_id: format!("{}/{}", stream.stream_id, k),
                category: stream.category.clone(),
                t: start as f64,
                frames: stream.frames[start..start + t1 as usize].to_vec(),
                audio_tokens: Vec::new(),
                context_comments: Vec::new(),
                response_comments: Vec::new(),
            }
        })
        .collect();

    let slot_of = |t: f64| -> Option<usize> {
        if t < 0.0 {
            return None;
        }
        let k = (t / t2 as f64).floor() as usize;
        (k < n_slots).then_some(k)
    };
    for c in &stream.comments {
        if let Some(k) = slot_of(c.t) {
            let offset = c.t - (k * t2 as usize) as f64;
            let record = CommentRecord {
                t: c.t,
                text: c.text.clone(),
            };
            if offset < t1 as f64 {
                clips[k].context_comments.push(record);
            } else {
                clips[k].response_comments.push(record);
            }
        }
    }
    for u in &stream.transcript {
        if let Some(k) = slot_of(u.t) {
            let offset = u.t - (k * t2 as usize) as f64;
            if offset < t1 as f64 {
                clips[k].audio_tokens.extend(tokenize(&u.text));
            }
        }
    }
    clips.retain(|c| !c.response_comments.is_empty());
    Ok(clips)
}

/// Crop a stream to its densest `window_len`-second span of comments
/// (frame-aligned), rebase timestamps, and slice into clips.
pub fn preprocess_stream(
    stream: &RawStream,
    window_len: u32,
    t1: u32,
    t2: u32,
) -> Result<Vec<ClipExample>> {
    if stream.comments.is_empty() {
        return Ok(Vec::new());
    }
    let mut ts: Vec<f64> = stream.comments.iter().map(|c| c.t).collect();
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (start, _) = densest_window(&ts, window_len as f64)?;
    let crop_start = (start.floor() as usize).min(stream.frames.len());
    let crop_len = (window_len as usize).min(stream.frames.len() - crop_start);
    let keep = |t: f64| t >= crop_start as f64 && t < (crop_start + crop_len) as f64;
    let rebased = RawStream {
        stream_id: stream.stream_id.clone(),
        category: stream.category.clone(),
        frames: stream.frames[crop_start..crop_start + crop_len].to_vec(),
        transcript: stream
            .transcript
            .iter()
            .filter(|u| keep(u.t))
            .map(|u| super::corpus::TimedText {
                t: u.t - crop_start as f64,
                text: u.text.clone(),
            })
            .collect(),
        comments: stream
            .comments
            .iter()
            .filter(|c| keep(c.t))
            .map(|c| super::corpus::TimedText {
                t: c.t - crop_start as f64,
                text: c.text.clone(),
            })
            .collect(),
    };
    slice_clips(&rebased, t1, t2)
}

/// The `n_c` most recent context comments in chronological order. When fewer
/// exist the leading slots are `None` (masked downstream).
pub fn select_context_comments(clip: &ClipExample, n_c: usize) -> Vec<Option<CommentRecord>> {
    let mut sorted = clip.context_comments.clone();
    sorted.sort_by(|a, b| a.t.partial_cmp(&b.t).unwrap());
    let keep = sorted.len().min(n_c);
    let mut slots: Vec<Option<CommentRecord>> = vec![None; n_c - keep];
    slots.extend(sorted[sorted.len() - keep..].iter().cloned().map(Some));
    slots
}
