//! Retrieval evaluation: assemble 10-candidate sets with three selection
//! strategies, rank the ground-truth response by model score, and reduce
//! ranks to Recall@{1,2,5}, Mean Rank, and MRR.

mod tfidf;

pub use tfidf::TfIdf;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, CommentRecord, Corpus, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{EncodedContext, Model};
use crate::train::select_target;

/// Candidate pools always hold 1 positive + 9 distractors.
pub const CANDIDATES_PER_QUERY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateStrategy {
    Cosine,
    Popularity,
    Random,
}

impl fmt::Display for CandidateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateStrategy::Cosine => "cosine",
            CandidateStrategy::Popularity => "popularity",
            CandidateStrategy::Random => "random",
        })
    }
}

impl FromStr for CandidateStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(CandidateStrategy::Cosine),
            "popularity" => Ok(CandidateStrategy::Popularity),
            "random" => Ok(CandidateStrategy::Random),
            other => Err(Error::Config(format!(
                "unknown candidate strategy {other:?} (expected cosine|popularity|random)"
            ))),
        }
    }
}

/// One query's candidates: the ground-truth response plus 9 distractors,
/// none textually equal to the positive.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub clip_id: String,
    pub positive: String,
    pub distractors: Vec<String>,
    pub strategy: CandidateStrategy,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        1 + self.distractors.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn check_pool(distinct: usize) -> Result<()> {
    if distinct < CANDIDATES_PER_QUERY {
        return Err(Error::PoolTooSmall {
            need: CANDIDATES_PER_QUERY,
            got: distinct,
        });
    }
    Ok(())
}

/// Distinct, lexicographically sorted response texts of a corpus; texts
/// that tokenize to nothing are unusable as candidates and are dropped.
pub fn response_pool(corpus: &Corpus) -> Vec<String> {
    let mut texts: Vec<String> = corpus
        .clips
        .iter()
        .flat_map(|c| c.response_comments.iter())
        .filter(|c| !c.tokens().is_empty())
        .map(|c| c.text.clone())
        .collect();
    texts.sort();
    texts.dedup();
    texts
}

/// Every comment text (with repetition) from one stream.
pub fn stream_texts(corpus: &Corpus, stream_id: &str) -> Vec<String> {
    corpus
        .clips
        .iter()
        .filter(|c| c.stream_id() == stream_id)
        .flat_map(|c| c.context_comments.iter().chain(&c.response_comments))
        .filter(|c| !c.tokens().is_empty())
        .map(|c| c.text.clone())
        .collect()
}

/// Distractors = the 9 pool texts whose TF-IDF vector is most cosine-similar
/// to the concatenated chat context; ties break lexicographically.
pub fn candidates_cosine(
    clip_id: &str,
    context_comments: &[CommentRecord],
    positive: &str,
    pool: &[String],
    tfidf: &TfIdf,
    vocab: &Vocabulary,
) -> Result<CandidateSet> {
    check_pool(pool.len())?;
    let context_tokens: Vec<String> = context_comments.iter().flat_map(|c| c.tokens()).collect();
    let query_vec = tfidf.vector(vocab, &context_tokens);
    let mut scored: Vec<(f64, &String)> = pool
        .iter()
        .filter(|t| t.as_str() != positive)
        .map(|t| {
            let v = tfidf.vector(vocab, &tokenize(t));
            (TfIdf::cosine(&query_vec, &v), t)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
    Ok(CandidateSet {
        clip_id: clip_id.to_string(),
        positive: positive.to_string(),
        distractors: scored
            .into_iter()
            .take(CANDIDATES_PER_QUERY - 1)
            .map(|(_, t)| t.clone())
            .collect(),
        strategy: CandidateStrategy::Cosine,
    })
}

/// Distractors = the 9 most frequent distinct comment texts in the query's
/// stream, positive excluded; frequency ties break lexicographically.
pub fn candidates_popularity(
    clip_id: &str,
    stream_pool: &[String],
    positive: &str,
) -> Result<CandidateSet> {
    let mut freq: HashMap<&str, u64> = HashMap::new();
    for t in stream_pool {
        *freq.entry(t.as_str()).or_insert(0) += 1;
    }
    check_pool(freq.len())?;
    let mut ranked: Vec<(&str, u64)> = freq
        .into_iter()
        .filter(|&(t, _)| t != positive)
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(CandidateSet {
        clip_id: clip_id.to_string(),
        positive: positive.to_string(),
        distractors: ranked
            .into_iter()
            .take(CANDIDATES_PER_QUERY - 1)
            .map(|(t, _)| t.to_string())
            .collect(),
        strategy: CandidateStrategy::Popularity,
    })
}

/// Distractors = 9 distinct texts drawn uniformly without replacement
/// (seeded), positive excluded.
pub fn candidates_random(
    clip_id: &str,
    pool: &[String],
    positive: &str,
    seed: u64,
) -> Result<CandidateSet> {
    check_pool(pool.len())?;
    let eligible: Vec<&String> = pool.iter().filter(|t| t.as_str() != positive).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let chosen =
        rand::seq::index::sample(&mut rng, eligible.len(), CANDIDATES_PER_QUERY - 1);
    Ok(CandidateSet {
        clip_id: clip_id.to_string(),
        positive: positive.to_string(),
        distractors: chosen.iter().map(|i| eligible[i].clone()).collect(),
        strategy: CandidateStrategy::Random,
    })
}

/// 1-based rank of the positive under conservative tie-breaking: the
/// positive ranks after every distractor whose score is ≥ its own.
pub fn rank_of_positive(positive_score: f64, distractor_scores: &[f64]) -> usize {
    1 + distractor_scores
        .iter()
        .filter(|&&s| s >= positive_score)
        .count()
}

/// Score all 10 candidates against an encoded context and rank the positive.
pub fn rank_candidates(
    model: &Model,
    vocab: &Vocabulary,
    ctx: &EncodedContext,
    cands: &CandidateSet,
) -> Result<usize> {
    let pos_score = model.score_candidate(&vocab.encode(&tokenize(&cands.positive)), ctx)?;
    let mut distractor_scores = Vec::with_capacity(cands.distractors.len());
    for d in &cands.distractors {
        distractor_scores.push(model.score_candidate(&vocab.encode(&tokenize(d)), ctx)?);
    }
    Ok(rank_of_positive(pos_score, &distractor_scores))
}

/// Retrieval metrics over one (strategy × augmentation) cell.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalReport {
    pub n_queries: usize,
    pub recall_at_1: f64,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
    pub mean_rank: f64,
    pub mrr: f64,
    pub strategy: CandidateStrategy,
    pub augmentation: bool,
}

/// Recall@K = 100·|{r ≤ K}|/n for K ∈ {1,2,5}; MR = mean rank;
/// MRR = mean reciprocal rank. Ranks must lie in [1, 10].
pub fn retrieval_metrics(
    ranks: &[usize],
    strategy: CandidateStrategy,
    augmentation: bool,
) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("ranks"));
    }
    if let Some(&bad) = ranks
        .iter()
        .find(|&&r| r < 1 || r > CANDIDATES_PER_QUERY)
    {
        return Err(Error::RankOutOfRange {
            rank: bad,
            max: CANDIDATES_PER_QUERY,
        });
    }
    let n = ranks.len() as f64;
    let recall =
        |k: usize| -> f64 { 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n };
    Ok(RetrievalReport {
        n_queries: ranks.len(),
        recall_at_1: recall(1),
        recall_at_2: recall(2),
        recall_at_5: recall(5),
        mean_rank: ranks.iter().sum::<usize>() as f64 / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        strategy,
        augmentation,
    })
}

/// Run the full retrieval evaluation over a corpus. The ground truth of
/// each clip is its earliest response comment; `idf_corpus` supplies the
/// IDF statistics for the cosine strategy (defaults to the eval corpus).
pub fn evaluate_corpus(
    model: &Model,
    vocab: &Vocabulary,
    corpus: &Corpus,
    strategy: CandidateStrategy,
    seed: u64,
    n_context: usize,
    augmentation: bool,
    idf_corpus: Option<&Corpus>,
) -> Result<RetrievalReport> {
    let pool = response_pool(corpus);
    let tfidf = match strategy {
        CandidateStrategy::Cosine => {
            let source = idf_corpus.unwrap_or(corpus);
            let docs: Vec<Vec<String>> = source
                .clips
                .iter()
                .flat_map(|c| c.context_comments.iter().chain(&c.response_comments))
                .map(|c| c.tokens())
                .collect();
            Some(TfIdf::fit(vocab, docs.iter()))
        }
        _ => None,
    };
    let mut ranks = Vec::new();
    for (qi, clip) in corpus.clips.iter().enumerate() {
        let positive = select_target(&clip.response_comments, false, 0)?;
        if positive.tokens().is_empty() {
            continue;
        }
        let cands = match strategy {
            CandidateStrategy::Cosine => candidates_cosine(
                &clip.clip_id,
                &clip.context_comments,
                &positive.text,
                &pool,
                tfidf.as_ref().unwrap(),
                vocab,
            )?,
            CandidateStrategy::Popularity => {
                let texts = stream_texts(corpus, clip.stream_id());
                candidates_popularity(&clip.clip_id, &texts, &positive.text)?
            }
            CandidateStrategy::Random => candidates_random(
                &clip.clip_id,
                &pool,
                &positive.text,
                seed.wrapping_add(qi as u64),
            )?,
        };
        let ctx = model.encode_clip(clip, vocab, n_context)?;
        ranks.push(rank_candidates(model, vocab, &ctx, &cands)?);
    }
    retrieval_metrics(&ranks, strategy, augmentation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn metrics_hand_case() {
        let r = retrieval_metrics(&[1, 2, 3, 6], CandidateStrategy::Random, false).unwrap();
        assert_eq!(r.recall_at_1, 25.0);
        assert_eq!(r.recall_at_2, 50.0);
        assert_eq!(r.recall_at_5, 75.0);
        assert_eq!(r.mean_rank, 3.0);
        assert_eq!(r.mrr, 0.5);
        assert_eq!(r.n_queries, 4);
    }

    #[test]
    fn metrics_all_rank_one() {
        let r = retrieval_metrics(&[1, 1, 1], CandidateStrategy::Cosine, true).unwrap();
        assert_eq!(r.recall_at_1, 100.0);
        assert_eq!(r.recall_at_5, 100.0);
        assert_eq!(r.mean_rank, 1.0);
        assert_eq!(r.mrr, 1.0);
    }

    #[test]
    fn metrics_input_validation() {
        assert!(retrieval_metrics(&[], CandidateStrategy::Random, false).is_err());
        assert!(matches!(
            retrieval_metrics(&[0], CandidateStrategy::Random, false),
            Err(Error::RankOutOfRange { .. })
        ));
        assert!(matches!(
            retrieval_metrics(&[11], CandidateStrategy::Random, false),
            Err(Error::RankOutOfRange { .. })
        ));
    }

    /// Naive loop recomputation used as the metrics oracle.
    fn brute_force(ranks: &[usize]) -> (f64, f64, f64, f64, f64) {
        let mut hits1 = 0.0;
        let mut hits2 = 0.0;
        let mut hits5 = 0.0;
        let mut sum = 0.0;
        let mut rsum = 0.0;
        for &r in ranks {
            if r <= 1 {
                hits1 += 1.0;
            }
            if r <= 2 {
                hits2 += 1.0;
            }
            if r <= 5 {
                hits5 += 1.0;
            }
            sum += r as f64;
            rsum += 1.0 / r as f64;
        }
        let n = ranks.len() as f64;
        (
            100.0 * hits1 / n,
            100.0 * hits2 / n,
            100.0 * hits5 / n,
            sum / n,
            rsum / n,
        )
    }

    #[test]
    fn metrics_match_brute_force_and_are_monotone() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(1..50);
            let ranks: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=10)).collect();
            let r = retrieval_metrics(&ranks, CandidateStrategy::Random, false).unwrap();
            let (r1, r2, r5, mr, mrr) = brute_force(&ranks);
            assert_eq!(r.recall_at_1, r1);
            assert_eq!(r.recall_at_2, r2);
            assert_eq!(r.recall_at_5, r5);
            assert_eq!(r.mean_rank, mr);
            assert_eq!(r.mrr, mrr);
            assert!(r.recall_at_1 <= r.recall_at_2 && r.recall_at_2 <= r.recall_at_5);
            assert!((1.0..=10.0).contains(&r.mean_rank));
            assert!((0.1..=1.0).contains(&r.mrr));
        }
    }

    #[test]
    fn rank_ties_go_against_the_positive() {
        assert_eq!(rank_of_positive(0.5, &[0.4; 9]), 1);
        assert_eq!(rank_of_positive(0.5, &[0.5; 9]), 10);
        assert_eq!(rank_of_positive(0.5, &[0.6, 0.5, 0.4, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1]), 3);
    }

    #[test]
    fn rank_is_invariant_under_increasing_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        for _ in 0..100 {
            let pos: f64 = rng.gen_range(-3.0..3.0);
            let ds: Vec<f64> = (0..9).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let base = rank_of_positive(pos, &ds);
            let f = |x: f64| 2.0 * x + 1.0;
            let g = |x: f64| x.exp();
            let ds_f: Vec<f64> = ds.iter().map(|&x| f(x)).collect();
            let ds_g: Vec<f64> = ds.iter().map(|&x| g(x)).collect();
            assert_eq!(rank_of_positive(f(pos), &ds_f), base);
            assert_eq!(rank_of_positive(g(pos), &ds_g), base);
        }
    }

    fn pool_of(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("text{i:02}")).collect()
    }

    #[test]
    fn cosine_hand_case_and_dedup() {
        let mut texts = vec![
            "cat".to_string(),
            "dog".to_string(),
            "fish and chips".to_string(),
        ];
        texts.extend(pool_of(8));
        texts.sort();
        let vocab = Vocabulary::build(
            texts
                .iter()
                .flat_map(|t| tokenize(t))
                .collect::<Vec<_>>()
                .iter()
                .map(String::as_str),
            1,
            1000,
        )
        .unwrap();
        let docs: Vec<Vec<String>> = texts.iter().map(|t| tokenize(t)).collect();
        let tfidf = TfIdf::fit(&vocab, docs.iter());
        let context = vec![CommentRecord {
            t: 0.0,
            text: "cat cat".into(),
        }];
        let cands =
            candidates_cosine("q/0", &context, "positive", &texts, &tfidf, &vocab).unwrap();
        assert_eq!(cands.len(), 10);
        assert_eq!(cands.distractors[0], "cat");

        // the positive's copies are never selected as distractors
        let mut dup_pool = pool_of(12);
        dup_pool.extend(std::iter::repeat("the positive".to_string()).take(5));
        dup_pool.sort();
        dup_pool.dedup();
        let cands =
            candidates_cosine("q/0", &context, "the positive", &dup_pool, &tfidf, &vocab).unwrap();
        assert!(cands.distractors.iter().all(|d| d != "the positive"));
    }

    #[test]
    fn popularity_orders_by_frequency_then_text() {
        let mut stream = Vec::new();
        stream.extend(std::iter::repeat("a".to_string()).take(5));
        stream.extend(std::iter::repeat("b".to_string()).take(3));
        stream.push("c".to_string());
        stream.extend(pool_of(9));
        let cands = candidates_popularity("q/0", &stream, "d").unwrap();
        assert_eq!(cands.distractors[0], "a");
        assert_eq!(cands.distractors[1], "b");
        assert_eq!(cands.distractors[2], "c");
        assert_eq!(cands.len(), 10);

        // positive is the most frequent -> excluded
        let cands = candidates_popularity("q/0", &stream, "a").unwrap();
        assert!(cands.distractors.iter().all(|d| d != "a"));
        assert_eq!(cands.distractors[0], "b");

        // tie a:3 vs b:3 -> a first
        let mut tied = Vec::new();
        tied.extend(std::iter::repeat("b".to_string()).take(3));
        tied.extend(std::iter::repeat("a".to_string()).take(3));
        tied.extend(pool_of(9));
        let cands = candidates_popularity("q/0", &tied, "zzz").unwrap();
        assert_eq!(cands.distractors[0], "a");
        assert_eq!(cands.distractors[1], "b");
    }

    #[test]
    fn popularity_pool_too_small_errors() {
        let stream = pool_of(9);
        assert!(matches!(
            candidates_popularity("q/0", &stream, "x"),
            Err(Error::PoolTooSmall { .. })
        ));
    }

    #[test]
    fn random_candidates_are_seeded_and_distinct() {
        let pool = pool_of(20);
        let a = candidates_random("q/0", &pool, "text00", 42).unwrap();
        let b = candidates_random("q/0", &pool, "text00", 42).unwrap();
        assert_eq!(a.distractors, b.distractors);
        let c = candidates_random("q/0", &pool, "text00", 43).unwrap();
        assert_ne!(a.distractors, c.distractors);
        let mut seen = a.distractors.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(a.distractors.iter().all(|d| d != "text00"));
    }

    #[test]
    fn random_selection_frequencies_are_hypergeometric() {
        let pool = pool_of(20);
        let positive = "text00";
        let mut counts: HashMap<String, usize> = HashMap::new();
        let draws = 1000;
        for seed in 0..draws {
            let c = candidates_random("q/0", &pool, positive, seed).unwrap();
            for d in c.distractors {
                *counts.entry(d).or_insert(0) += 1;
            }
        }
        let p = 9.0 / 19.0;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for t in pool.iter().filter(|t| t.as_str() != positive) {
            let c = *counts.get(t).unwrap_or(&0) as f64;
            assert!(
                (c - draws as f64 * p).abs() <= 3.0 * sigma,
                "{t}: {c} vs {}±{}",
                draws as f64 * p,
                3.0 * sigma
            );
        }
    }
}
