//! Retrieval-style evaluation: 100-comment candidate sets ranked by model
//! log-likelihood, summarized as Recall@k, mean rank and MRR.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Batcher, ContextWindow, CorpusError, CorpusStore, LiveComment, Splits, Vocabulary, WindowParams};
use crate::models::{score_candidates, ModelBundle, ModelError, ModelInput};

pub const CANDIDATES: usize = 100;
pub const PLAUSIBLE: usize = 30;
pub const PLAUSIBLE_POOL: usize = 50;
pub const POPULAR: usize = 20;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("training split has no comments")]
    EmptyTraining,
    #[error("only {available} distinct comments available, a candidate set needs {needed}")]
    TooFewCandidates { available: usize, needed: usize },
    #[error("rank {rank} outside [1, {max}]")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("no ranks to summarize")]
    NoRanks,
    #[error("scorer returned {found} scores for {expected} candidates")]
    ScoreCount { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T> = std::result::Result<T, RankingError>;

/// Sparse tf-idf weights, sorted by term.
pub type SparseVector = Vec<(u32, f64)>;

/// Cosine similarity of two sparse vectors; zero when either is empty.
pub fn cosine(a: &SparseVector, b: &SparseVector) -> f64 {
    let (mut i, mut j, mut dot) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                dot += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    let norm = |v: &SparseVector| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

/// Document frequencies over a set of token sequences, with
/// `idf = ln(N / (1 + df)) + 1` and raw-count term frequency.
#[derive(Debug, Clone)]
pub struct TfIdf {
    terms: HashMap<String, u32>,
    df: Vec<usize>,
    docs: usize,
}

impl TfIdf {
    pub fn fit<'a, I, S>(documents: I) -> Self
    where
        I: IntoIterator<Item = &'a [S]>,
        S: AsRef<str> + 'a,
    {
        let mut terms = HashMap::new();
        let mut df = Vec::new();
        let mut docs = 0;
        for doc in documents {
            docs += 1;
            let mut seen = HashSet::new();
            for t in doc {
                let next = terms.len() as u32;
                let id = *terms.entry(t.as_ref().to_string()).or_insert(next);
                if id as usize == df.len() {
                    df.push(0);
                }
                if seen.insert(id) {
                    df[id as usize] += 1;
                }
            }
        }
        Self { terms, df, docs }
    }

    pub fn num_documents(&self) -> usize {
        self.docs
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.terms.get(term).map_or(0, |&i| self.df[i as usize])
    }

    pub fn idf(&self, term: &str) -> f64 {
        (self.docs as f64 / (1 + self.document_frequency(term)) as f64).ln() + 1.0
    }

    /// Weights of the known terms of `tokens`; unseen terms match nothing and are dropped.
    pub fn vector<S: AsRef<str>>(&self, tokens: &[S]) -> SparseVector {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for t in tokens {
            if let Some(&id) = self.terms.get(t.as_ref()) {
                *counts.entry(id).or_default() += 1;
            }
        }
        counts
            .into_iter()
            .map(|(id, tf)| {
                let idf = (self.docs as f64 / (1 + self.df[id as usize]) as f64).ln() + 1.0;
                (id, tf as f64 * idf)
            })
            .collect()
    }

    pub fn similarity<A: AsRef<str>, B: AsRef<str>>(&self, a: &[A], b: &[B]) -> f64 {
        cosine(&self.vector(a), &self.vector(b))
    }
}

/// Distinct training comments (by raw text) with their frequencies.
#[derive(Debug, Clone)]
pub struct CommentPool {
    entries: Vec<PoolEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolEntry {
    pub raw: String,
    pub tokens: Vec<String>,
    pub count: usize,
}

impl CommentPool {
    pub fn new<'a, I: IntoIterator<Item = &'a LiveComment>>(comments: I) -> Self {
        let mut map: BTreeMap<&str, PoolEntry> = BTreeMap::new();
        for c in comments {
            map.entry(c.raw_text.as_str())
                .or_insert_with(|| PoolEntry {
                    raw: c.raw_text.clone(),
                    tokens: c.tokens.clone(),
                    count: 0,
                })
                .count += 1;
        }
        Self {
            entries: map.into_values().collect(),
        }
    }

    /// Entries sorted by raw text.
    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tf-idf retrieval index over the training comments. Document frequencies
/// count every training comment; retrieval returns distinct comments.
#[derive(Debug, Clone)]
pub struct TfIdfIndex {
    tfidf: TfIdf,
    pool: CommentPool,
    vectors: Vec<SparseVector>,
    postings: HashMap<u32, Vec<(usize, f64)>>,
    norms: Vec<f64>,
}

impl TfIdfIndex {
    pub fn build(training: &[&LiveComment]) -> Result<Self> {
        if training.is_empty() {
            return Err(RankingError::EmptyTraining);
        }
        let tfidf = TfIdf::fit(training.iter().map(|c| c.tokens.as_slice()));
        let pool = CommentPool::new(training.iter().copied());
        let vectors: Vec<SparseVector> = pool.entries.iter().map(|e| tfidf.vector(&e.tokens)).collect();
        let mut postings: HashMap<u32, Vec<(usize, f64)>> = HashMap::new();
        for (doc, v) in vectors.iter().enumerate() {
            for &(term, w) in v {
                postings.entry(term).or_default().push((doc, w));
            }
        }
        let norms = vectors.iter().map(|v| v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt()).collect();
        Ok(Self {
            tfidf,
            pool,
            vectors,
            postings,
            norms,
        })
    }

    pub fn tfidf(&self) -> &TfIdf {
        &self.tfidf
    }

    pub fn pool(&self) -> &CommentPool {
        &self.pool
    }

    pub fn vector(&self, entry: usize) -> &SparseVector {
        &self.vectors[entry]
    }

    /// The `k` pool entries most similar to `query`, by cosine descending
    /// then raw text. Entries with zero similarity are not returned.
    pub fn top_k<S: AsRef<str>>(&self, query: &[S], k: usize) -> Vec<(usize, f64)> {
        let q = self.tfidf.vector(query);
        let qn = q.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if qn == 0.0 {
            return Vec::new();
        }
        let mut dots: HashMap<usize, f64> = HashMap::new();
        for &(term, qw) in &q {
            for &(doc, dw) in self.postings.get(&term).map_or(&[][..], Vec::as_slice) {
                *dots.entry(doc).or_default() += qw * dw;
            }
        }
        let mut hits: Vec<(usize, f64)> = dots.into_iter().map(|(d, dot)| (d, dot / (qn * self.norms[d]))).collect();
        // Pool entries are sorted by raw text, so the index breaks ties lexicographically.
        hits.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        hits.truncate(k);
        hits
    }
}

/// Up to 30 comments most similar to the title, drawn from the top 50 after
/// dropping the correct comment.
pub fn retrieve_plausible<S: AsRef<str>>(title: &[S], index: &TfIdfIndex, correct_raw: &str) -> Vec<usize> {
    index
        .top_k(title, PLAUSIBLE_POOL)
        .into_iter()
        .map(|(e, _)| e)
        .filter(|&e| index.pool.entries[e].raw != correct_raw)
        .take(PLAUSIBLE)
        .collect()
}

/// The `k` most frequent comments (ties by raw text) and whether the pool
/// had fewer than `k` distinct comments.
pub fn popular_comments(pool: &CommentPool, k: usize) -> (Vec<usize>, bool) {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| pool.entries[b].count.cmp(&pool.entries[a].count).then(a.cmp(&b)));
    order.truncate(k);
    let short = order.len() < k;
    (order, short)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Correct,
    Plausible,
    Popular,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub raw: String,
    pub tokens: Vec<String>,
    pub source: Source,
}

/// Exactly [`CANDIDATES`] distinct comments; the correct one comes first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn correct(&self) -> &Candidate {
        &self.candidates[0]
    }

    pub fn count(&self, source: Source) -> usize {
        self.candidates.iter().filter(|c| c.source == source).count()
    }
}

/// Correct, then plausible, then popular, de-duplicated by raw text in that
/// priority, then seeded random training comments up to 100.
pub fn build_candidate_set(
    correct: &LiveComment,
    plausible: &[usize],
    popular: &[usize],
    pool: &CommentPool,
    seed: u64,
) -> Result<CandidateSet> {
    let in_pool = pool.entries.binary_search_by(|e| e.raw.as_str().cmp(&correct.raw_text)).is_ok();
    let available = pool.len() + usize::from(!in_pool);
    if available < CANDIDATES {
        return Err(RankingError::TooFewCandidates {
            available,
            needed: CANDIDATES,
        });
    }
    let mut seen: HashSet<&str> = HashSet::with_capacity(CANDIDATES);
    let mut candidates = Vec::with_capacity(CANDIDATES);
    seen.insert(&correct.raw_text);
    candidates.push(Candidate {
        raw: correct.raw_text.clone(),
        tokens: correct.tokens.clone(),
        source: Source::Correct,
    });
    for &e in plausible {
        push(&pool.entries[e], Source::Plausible, &mut seen, &mut candidates);
    }
    for &e in popular {
        push(&pool.entries[e], Source::Popular, &mut seen, &mut candidates);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while candidates.len() < CANDIDATES {
        let e = rng.gen_range(0..pool.len());
        push(&pool.entries[e], Source::Random, &mut seen, &mut candidates);
    }
    Ok(CandidateSet { candidates })
}

fn push<'a>(entry: &'a PoolEntry, source: Source, seen: &mut HashSet<&'a str>, candidates: &mut Vec<Candidate>) {
    if candidates.len() < CANDIDATES && seen.insert(&entry.raw) {
        candidates.push(Candidate {
            raw: entry.raw.clone(),
            tokens: entry.tokens.clone(),
            source,
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// Summed token log-probabilities.
    #[default]
    Sum,
    /// Summed log-probability divided by the number of scored tokens.
    PerToken,
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Normalization::Sum => "sum",
            Normalization::PerToken => "per-token",
        })
    }
}

impl FromStr for Normalization {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sum" => Ok(Normalization::Sum),
            "per-token" | "per_token" => Ok(Normalization::PerToken),
            other => Err(format!("unknown normalization {other:?} (expected sum or per-token)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub log_likelihood: f64,
    /// Scored positions, including EOS.
    pub tokens: usize,
}

impl CandidateScore {
    pub fn value(&self, norm: Normalization) -> f64 {
        match norm {
            Normalization::Sum => self.log_likelihood,
            Normalization::PerToken => self.log_likelihood / self.tokens.max(1) as f64,
        }
    }
}

/// One evaluation instance handed to a scorer.
#[derive(Debug, Clone)]
pub struct Query<'a> {
    pub index: usize,
    pub window: &'a ContextWindow,
}

pub trait Scorer: Sync {
    fn score(&self, query: &Query, candidates: &[Candidate]) -> Result<Vec<CandidateScore>>;
}

/// Teacher-forced log-likelihood under a trained model.
pub struct ModelScorer<'a> {
    pub bundle: &'a ModelBundle,
    pub vocab: &'a Vocabulary,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, query: &Query, candidates: &[Candidate]) -> Result<Vec<CandidateScore>> {
        let input = ModelInput::from_window(query.window, self.vocab, self.bundle.config())?;
        let ys: Vec<Vec<u32>> = candidates.iter().map(|c| self.vocab.encode_target(&c.tokens)).collect();
        Ok(score_candidates(self.bundle, &input, &ys)?
            .into_iter()
            .map(|s| CandidateScore {
                log_likelihood: s.log_likelihood,
                tokens: s.token_log_probs.len(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Candidate indices, best first.
    pub order: Vec<usize>,
    /// 1-based rank of the correct candidate.
    pub rank: usize,
}

/// Sorts candidates by normalized score, descending, ties by raw text.
pub fn rank_candidates(set: &CandidateSet, scores: &[CandidateScore], norm: Normalization) -> Result<Ranking> {
    if scores.len() != set.candidates.len() {
        return Err(RankingError::ScoreCount {
            expected: set.candidates.len(),
            found: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .value(norm)
            .total_cmp(&scores[a].value(norm))
            .then_with(|| set.candidates[a].raw.cmp(&set.candidates[b].raw))
    });
    let rank = order.iter().position(|&i| set.candidates[i].source == Source::Correct).map_or(0, |p| p + 1);
    Ok(Ranking { order, rank })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub mean_rank: f64,
    pub mrr: f64,
    pub count: usize,
}

impl RankingMetrics {
    /// Recall@1/5/10 as percentages, then MR and MRR.
    pub fn table_row(&self, label: &str) -> String {
        format!(
            "{label:<24} {:>8.2} {:>8.2} {:>9.2} {:>7.2} {:>7.4}",
            100.0 * self.recall_at_1,
            100.0 * self.recall_at_5,
            100.0 * self.recall_at_10,
            self.mean_rank,
            self.mrr
        )
    }

    pub fn table_header() -> String {
        format!("{:<24} {:>8} {:>8} {:>9} {:>7} {:>7}", "", "R@1", "R@5", "R@10", "MR", "MRR")
    }
}

pub fn compute_metrics(ranks: &[usize]) -> Result<RankingMetrics> {
    if ranks.is_empty() {
        return Err(RankingError::NoRanks);
    }
    let mut hits = [0usize; 3];
    let (mut sum, mut recip) = (0.0, 0.0);
    for &r in ranks {
        if !(1..=CANDIDATES).contains(&r) {
            return Err(RankingError::RankOutOfRange { rank: r, max: CANDIDATES });
        }
        for (h, k) in hits.iter_mut().zip([1, 5, 10]) {
            *h += usize::from(r <= k);
        }
        sum += r as f64;
        recip += 1.0 / r as f64;
    }
    let n = ranks.len() as f64;
    Ok(RankingMetrics {
        recall_at_1: hits[0] as f64 / n,
        recall_at_5: hits[1] as f64 / n,
        recall_at_10: hits[2] as f64 / n,
        mean_rank: sum / n,
        mrr: recip / n,
        count: ranks.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankConfig {
    pub seed: u64,
    pub normalization: Normalization,
    /// Frames and comments given to the scorer; zero hides a modality.
    pub window: WindowParams,
    /// Evaluates a seeded sample of this many test comments (all when unset).
    pub limit: Option<usize>,
}

impl Default for RankConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            normalization: Normalization::Sum,
            window: WindowParams::default(),
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRank {
    pub video_id: String,
    pub time: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub config: RankConfig,
    pub metrics: RankingMetrics,
    pub instances: Vec<InstanceRank>,
}

fn instance_seed(seed: u64, index: usize) -> u64 {
    let mut x = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Shared, read-only pieces of the protocol.
pub struct Protocol {
    pub index: TfIdfIndex,
    pub popular: Vec<usize>,
}

impl Protocol {
    pub fn build(store: &CorpusStore, splits: &Splits) -> Result<Self> {
        let training = store.split_comments(&splits.train)?;
        let index = TfIdfIndex::build(&training)?;
        let (popular, _) = popular_comments(index.pool(), POPULAR);
        Ok(Self { index, popular })
    }

    pub fn candidate_set(&self, store: &CorpusStore, correct: &LiveComment, seed: u64) -> Result<CandidateSet> {
        let title = &store.video(&correct.video_id)?.title;
        let plausible = retrieve_plausible(title, &self.index, &correct.raw_text);
        build_candidate_set(correct, &plausible, &self.popular, self.index.pool(), seed)
    }
}

/// Ranks every (or a sample of) test comment against its candidate set.
pub fn evaluate_ranking(store: &CorpusStore, splits: &Splits, scorer: &dyn Scorer, config: &RankConfig) -> Result<RankingReport> {
    let protocol = Protocol::build(store, splits)?;
    let batcher = Batcher::new(store, &splits.test, config.window, 1, config.seed)?;
    let mut refs = batcher.instances().to_vec();
    if let Some(limit) = config.limit {
        if limit < refs.len() {
            refs = batcher.epoch_order(0);
            refs.truncate(limit);
            refs.sort();
        }
    }
    let instances: Vec<InstanceRank> = refs
        .par_iter()
        .enumerate()
        .map(|(i, r)| {
            let correct = store.comment(*r);
            let set = protocol.candidate_set(store, correct, instance_seed(config.seed, i))?;
            let window = batcher.window(*r)?;
            let scores = scorer.score(&Query { index: i, window: &window }, &set.candidates)?;
            let ranking = rank_candidates(&set, &scores, config.normalization)?;
            Ok(InstanceRank {
                video_id: correct.video_id.clone(),
                time: correct.time,
                rank: ranking.rank,
            })
        })
        .collect::<Result<_>>()?;
    let ranks: Vec<usize> = instances.iter().map(|r| r.rank).collect();
    Ok(RankingReport {
        config: config.clone(),
        metrics: compute_metrics(&ranks)?,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lc(raw: &str) -> LiveComment {
        LiveComment {
            video_id: "v".into(),
            time: 0.0,
            tokens: raw.split(' ').map(String::from).collect(),
            raw_text: raw.into(),
        }
    }

    #[test]
    fn idf_formula() {
        let docs: Vec<Vec<&str>> = vec![vec!["a", "b"], vec!["a"], vec!["c"]];
        let t = TfIdf::fit(docs.iter().map(Vec::as_slice));
        assert!((t.idf("a") - ((3.0f64 / 3.0).ln() + 1.0)).abs() < 1e-12);
        assert!((t.idf("c") - ((3.0f64 / 2.0).ln() + 1.0)).abs() < 1e-12);
        assert!((t.idf("zzz") - (3.0f64.ln() + 1.0)).abs() < 1e-12);
        let v = t.vector(&["a", "a", "c"]);
        assert_eq!(v.len(), 2);
        assert!((v[0].1 - 2.0 * t.idf("a")).abs() < 1e-12);
    }

    #[test]
    fn identical_and_disjoint_documents() {
        let docs: Vec<Vec<&str>> = vec![vec!["x", "y"], vec!["z"]];
        let t = TfIdf::fit(docs.iter().map(Vec::as_slice));
        assert!((t.similarity(&["x", "y"], &["x", "y"]) - 1.0).abs() < 1e-12);
        assert_eq!(t.similarity(&["x", "y"], &["z"]), 0.0);
    }

    #[test]
    fn popular_tie_rule() {
        let mut comments = Vec::new();
        for (raw, n) in [("233", 5), ("great", 3), ("x", 1)] {
            comments.extend(std::iter::repeat_n(lc(raw), n));
        }
        let pool = CommentPool::new(&comments);
        let (top, short) = popular_comments(&pool, 2);
        let raws: Vec<&str> = top.iter().map(|&i| pool.entries()[i].raw.as_str()).collect();
        assert_eq!(raws, ["233", "great"]);
        assert!(!short);

        let unique: Vec<LiveComment> = (0..30).rev().map(|i| lc(&format!("c{i:02}"))).collect();
        let pool = CommentPool::new(&unique);
        let (top, _) = popular_comments(&pool, 20);
        let raws: Vec<String> = top.iter().map(|&i| pool.entries()[i].raw.clone()).collect();
        assert_eq!(raws, (0..20).map(|i| format!("c{i:02}")).collect::<Vec<_>>());
        assert!(popular_comments(&pool, 40).1);
    }

    #[test]
    fn metrics_examples() {
        let m = compute_metrics(&[1]).unwrap();
        assert_eq!((m.recall_at_1, m.mean_rank, m.mrr), (1.0, 1.0, 1.0));
        let m = compute_metrics(&[2, 4]).unwrap();
        assert_eq!((m.recall_at_1, m.recall_at_5, m.mean_rank, m.mrr), (0.0, 1.0, 3.0, 0.375));
        assert!(compute_metrics(&[]).is_err());
        assert!(compute_metrics(&[0]).is_err());
        assert!(compute_metrics(&[101]).is_err());
    }

    #[test]
    fn normalization_parsing() {
        assert_eq!("per-token".parse::<Normalization>().unwrap(), Normalization::PerToken);
        assert_eq!(Normalization::PerToken.to_string(), "per-token");
        assert!("mean".parse::<Normalization>().is_err());
    }
}
