//! Corpus statistics, comment length histograms and similarity of
//! neighboring comments by time interval.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStore, DatasetSplit, Result, Splits};
use crate::ranking::{cosine, SparseVector, TfIdf};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub videos: usize,
    pub comments: usize,
    pub words: usize,
    pub avg_words: f64,
    pub duration_hours: f64,
}

impl SplitStats {
    fn finish(mut self) -> Self {
        self.avg_words = if self.comments == 0 {
            0.0
        } else {
            self.words as f64 / self.comments as f64
        };
        self
    }

    fn add(self, other: SplitStats) -> Self {
        SplitStats {
            videos: self.videos + other.videos,
            comments: self.comments + other.comments,
            words: self.words + other.words,
            avg_words: 0.0,
            duration_hours: self.duration_hours + other.duration_hours,
        }
        .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: SplitStats,
    pub test: SplitStats,
    pub dev: SplitStats,
    pub total: SplitStats,
}

fn split_stats(store: &CorpusStore, split: &DatasetSplit) -> Result<SplitStats> {
    let mut s = SplitStats::default();
    for id in &split.video_ids {
        let slot = store.video_slot(id)?;
        s.videos += 1;
        s.duration_hours += store.videos()[slot].duration / 3600.0;
        for c in store.comments_of(slot) {
            s.comments += 1;
            s.words += c.tokens.len();
        }
    }
    Ok(s.finish())
}

pub fn corpus_stats(store: &CorpusStore, splits: &Splits) -> Result<CorpusStats> {
    let train = split_stats(store, &splits.train)?;
    let test = split_stats(store, &splits.test)?;
    let dev = split_stats(store, &splits.dev)?;
    Ok(CorpusStats {
        train,
        test,
        dev,
        total: train.add(test).add(dev),
    })
}

impl CorpusStats {
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8} {:>8} {:>10} {:>11} {:>10} {:>10}\n",
            "split", "#videos", "#comments", "#words", "avg words", "hours"
        );
        for (name, s) in [("train", &self.train), ("test", &self.test), ("dev", &self.dev), ("total", &self.total)] {
            let _ = writeln!(
                out,
                "{name:<8} {:>8} {:>10} {:>11} {:>10.2} {:>10.2}",
                s.videos, s.comments, s.words, s.avg_words, s.duration_hours
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthLevel {
    Word,
    Character,
}

/// Comment count per length, in tokens or in characters of the raw text.
pub fn length_distribution(store: &CorpusStore, level: LengthLevel) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    for slot in 0..store.num_videos() {
        for c in store.comments_of(slot) {
            let len = match level {
                LengthLevel::Word => c.tokens.len(),
                LengthLevel::Character => c.raw_text.chars().count(),
            };
            *hist.entry(len).or_insert(0) += 1;
        }
    }
    hist
}

pub fn histogram_csv(hist: &BTreeMap<usize, usize>) -> String {
    let mut out = String::from("length,count\n");
    for (len, count) in hist {
        let _ = writeln!(out, "{len},{count}");
    }
    out
}

/// Character-level Levenshtein distance with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Half-open interval bounds in seconds: [0,1), [1,3), [3,5), [5,10), [10,inf).
pub const BUCKETS: [(f64, f64); 5] = [(0.0, 1.0), (1.0, 3.0), (3.0, 5.0), (5.0, 10.0), (10.0, f64::INFINITY)];

pub fn bucket_of(dt: f64) -> usize {
    BUCKETS.iter().position(|&(lo, hi)| dt >= lo && dt < hi).unwrap_or(BUCKETS.len() - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketStats {
    pub label: String,
    pub pairs: usize,
    pub mean_edit_distance: Option<f64>,
    pub mean_tfidf: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub neighbors: usize,
    pub total_pairs: usize,
    pub buckets: Vec<BucketStats>,
}

fn bucket_label(i: usize) -> String {
    let (lo, hi) = BUCKETS[i];
    if hi.is_infinite() {
        format!(">{lo}s")
    } else {
        format!("{lo}-{hi}s")
    }
}

#[derive(Clone, Copy, Default)]
struct Acc {
    pairs: usize,
    edit: f64,
    tfidf: f64,
}

/// Pairs every comment with its `neighbors` nearest comments in the same
/// video (by |dt|, earlier first on ties) and averages character edit
/// distance and tf-idf cosine per interval bucket. Each comment contributes
/// its own pairs, so a pair of mutual neighbors is counted from both sides.
/// Tf-idf statistics are fitted on all comments of the store.
pub fn neighbor_similarity(store: &CorpusStore, neighbors: usize) -> SimilarityReport {
    let all: Vec<&[String]> = (0..store.num_videos())
        .flat_map(|s| store.comments_of(s).iter().map(|c| c.tokens.as_slice()))
        .collect();
    let tfidf = TfIdf::fit(all);
    let per_video: Vec<[Acc; 5]> = (0..store.num_videos())
        .into_par_iter()
        .map(|slot| {
            let mut acc = [Acc::default(); 5];
            let comments = store.comments_of(slot);
            if comments.len() < 2 {
                return acc;
            }
            let times: Vec<f64> = comments.iter().map(|c| c.time).collect();
            let vectors: Vec<SparseVector> = comments.iter().map(|c| tfidf.vector(&c.tokens)).collect();
            for (i, c) in comments.iter().enumerate() {
                for j in crate::corpus::nearest_indices(&times, c.time, neighbors, Some(i)) {
                    let b = &mut acc[bucket_of((times[j] - c.time).abs())];
                    b.pairs += 1;
                    b.edit += edit_distance(&c.raw_text, &comments[j].raw_text) as f64;
                    b.tfidf += cosine(&vectors[i], &vectors[j]);
                }
            }
            acc
        })
        .collect();
    let mut total = [Acc::default(); 5];
    for video in &per_video {
        for (t, a) in total.iter_mut().zip(video) {
            t.pairs += a.pairs;
            t.edit += a.edit;
            t.tfidf += a.tfidf;
        }
    }
    let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    SimilarityReport {
        neighbors,
        total_pairs: total.iter().map(|a| a.pairs).sum(),
        buckets: total
            .iter()
            .enumerate()
            .map(|(i, a)| BucketStats {
                label: bucket_label(i),
                pairs: a.pairs,
                mean_edit_distance: mean(a.edit, a.pairs),
                mean_tfidf: mean(a.tfidf, a.pairs),
            })
            .collect(),
    }
}

impl SimilarityReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8} {:>10} {:>14} {:>8}\n", "interval", "pairs", "edit distance", "tf-idf");
        let cell = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |x| format!("{x:.digits$}"));
        for b in &self.buckets {
            let _ = writeln!(
                out,
                "{:<8} {:>10} {:>14} {:>8}",
                b.label,
                b.pairs,
                cell(b.mean_edit_distance, 2),
                cell(b.mean_tfidf, 3)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kitten_sitting() {
        assert_eq!(edit_distance("kitten", "sitting"), 3);
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("哈哈哈", "哈哈"), 1);
    }

    #[test]
    fn bucket_edges_are_half_open() {
        assert_eq!(bucket_of(0.0), 0);
        assert_eq!(bucket_of(0.999), 0);
        assert_eq!(bucket_of(1.0), 1);
        assert_eq!(bucket_of(3.0), 2);
        assert_eq!(bucket_of(5.0), 3);
        assert_eq!(bucket_of(10.0), 4);
        assert_eq!(bucket_of(1e9), 4);
    }

    #[test]
    fn csv_format() {
        let hist = BTreeMap::from([(2, 2), (5, 1)]);
        assert_eq!(histogram_csv(&hist), "length,count\n2,2\n5,1\n");
    }
}
