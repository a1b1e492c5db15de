//! Timestamped comment + frame-feature corpus: loading, validation,
//! vocabulary, context windows, video-level splits and batching.

mod batches;
mod context;
pub mod frames;
mod io;
mod split;
mod vocab;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batches::{Batcher, WindowParams};
pub use context::{extract_context, ContextWindow};
pub(crate) use context::nearest_indices;
pub use io::{load_corpus, read_comments, read_features, read_manifest, write_comments, write_manifest, FeatureWriter, FEATURE_MAGIC, FEATURE_VERSION};
pub use split::{split_by_video, DatasetSplit, SplitCounts, SplitName, Splits};
pub use vocab::{Vocabulary, BOS, EOS, MAX_TARGET_LEN, PAD, SEP, SPECIALS, UNK};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{file}:{line}: malformed record: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },

    #[error("timestamp out of range: {time} not in [0, {duration}] for video {video_id}")]
    TimestampOutOfRange {
        video_id: String,
        time: f64,
        duration: f64,
    },

    #[error("dim mismatch: expected {expected} values, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("unknown video_id {0:?}")]
    UnknownVideo(String),

    #[error("duplicate video_id {0:?}")]
    DuplicateVideo(String),

    #[error("invalid record for video {video_id}: {message}")]
    Invalid { video_id: String, message: String },

    #[error("insufficient videos: requested {requested}, available {available}")]
    InsufficientVideos { requested: usize, available: usize },

    #[error("training split has no comments")]
    EmptyTrainingSplit,

    #[error("invalid feature file: {0}")]
    FeatureFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Video metadata as it appears in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub video_id: String,
    #[serde(rename = "title_tokens")]
    pub title: Vec<String>,
    pub duration: f64,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    pub title: Vec<String>,
    pub duration: f64,
    pub category: String,
    /// Strictly increasing frame timestamps in seconds.
    pub frame_times: Vec<f64>,
    pub frame_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveComment {
    pub video_id: String,
    pub time: f64,
    pub tokens: Vec<String>,
    #[serde(rename = "raw")]
    pub raw_text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeature {
    pub video_id: String,
    pub time: f64,
    pub vector: Vec<f32>,
}

/// Position of a comment inside a [`CorpusStore`]: video slot and index in
/// that video's time-sorted comment list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CommentRef {
    pub video: usize,
    pub index: usize,
}

/// Immutable in-memory corpus. Comments and frames are sorted by time per video.
#[derive(Debug, Clone)]
pub struct CorpusStore {
    videos: Vec<VideoRecord>,
    index: HashMap<String, usize>,
    comments: Vec<Vec<LiveComment>>,
    frames: Vec<Vec<FrameFeature>>,
    frame_dim: usize,
}

impl CorpusStore {
    /// Validates and assembles a store. `frame_dim` is the feature width every
    /// frame vector must have.
    pub fn new(
        videos: Vec<VideoMeta>,
        comments: Vec<LiveComment>,
        features: Vec<FrameFeature>,
        frame_dim: usize,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(videos.len());
        for (i, v) in videos.iter().enumerate() {
            if !(v.duration.is_finite() && v.duration >= 0.0) {
                return Err(CorpusError::Invalid {
                    video_id: v.video_id.clone(),
                    message: format!("duration {} must be a non-negative number", v.duration),
                });
            }
            if index.insert(v.video_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateVideo(v.video_id.clone()));
            }
        }

        let mut by_video: Vec<Vec<LiveComment>> = vec![Vec::new(); videos.len()];
        for c in comments {
            let slot = *index
                .get(&c.video_id)
                .ok_or_else(|| CorpusError::UnknownVideo(c.video_id.clone()))?;
            let duration = videos[slot].duration;
            if !(c.time.is_finite() && c.time >= 0.0 && c.time <= duration) {
                return Err(CorpusError::TimestampOutOfRange {
                    video_id: c.video_id,
                    time: c.time,
                    duration,
                });
            }
            if c.tokens.is_empty() {
                return Err(CorpusError::Invalid {
                    video_id: c.video_id,
                    message: format!("comment at {}s has no tokens", c.time),
                });
            }
            by_video[slot].push(c);
        }
        for list in &mut by_video {
            // Ties on time fall back to token order so the layout is deterministic.
            list.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.tokens.cmp(&b.tokens)));
        }

        let mut frames: Vec<Vec<FrameFeature>> = vec![Vec::new(); videos.len()];
        for f in features {
            let slot = *index
                .get(&f.video_id)
                .ok_or_else(|| CorpusError::UnknownVideo(f.video_id.clone()))?;
            if f.vector.len() != frame_dim {
                return Err(CorpusError::DimMismatch {
                    expected: frame_dim,
                    found: f.vector.len(),
                });
            }
            if !f.vector.iter().all(|v| v.is_finite()) {
                return Err(CorpusError::Invalid {
                    video_id: f.video_id,
                    message: format!("non-finite feature value at {}s", f.time),
                });
            }
            let duration = videos[slot].duration;
            if !(f.time.is_finite() && f.time >= 0.0 && f.time <= duration) {
                return Err(CorpusError::TimestampOutOfRange {
                    video_id: f.video_id,
                    time: f.time,
                    duration,
                });
            }
            frames[slot].push(f);
        }
        for (slot, list) in frames.iter_mut().enumerate() {
            list.sort_by(|a, b| a.time.total_cmp(&b.time));
            if list.windows(2).any(|w| w[0].time >= w[1].time) {
                return Err(CorpusError::Invalid {
                    video_id: videos[slot].video_id.clone(),
                    message: "frame timestamps must be strictly increasing".into(),
                });
            }
        }

        let videos = videos
            .into_iter()
            .zip(&frames)
            .map(|(m, fs)| VideoRecord {
                video_id: m.video_id,
                title: m.title,
                duration: m.duration,
                category: m.category,
                frame_times: fs.iter().map(|f| f.time).collect(),
                frame_dim,
            })
            .collect();

        Ok(Self {
            videos,
            index,
            comments: by_video,
            frames,
            frame_dim,
        })
    }

    pub fn videos(&self) -> &[VideoRecord] {
        &self.videos
    }

    pub fn video_slot(&self, video_id: &str) -> Result<usize> {
        self.index
            .get(video_id)
            .copied()
            .ok_or_else(|| CorpusError::UnknownVideo(video_id.to_string()))
    }

    pub fn video(&self, video_id: &str) -> Result<&VideoRecord> {
        Ok(&self.videos[self.video_slot(video_id)?])
    }

    pub fn comments_of(&self, slot: usize) -> &[LiveComment] {
        &self.comments[slot]
    }

    pub fn frames_of(&self, slot: usize) -> &[FrameFeature] {
        &self.frames[slot]
    }

    pub fn comment(&self, r: CommentRef) -> &LiveComment {
        &self.comments[r.video][r.index]
    }

    pub fn frame_dim(&self) -> usize {
        self.frame_dim
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn num_comments(&self) -> usize {
        self.comments.iter().map(Vec::len).sum()
    }

    pub fn num_frames(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Every comment of the given videos, video by video in `video_ids` order.
    pub fn comment_refs<'a, I>(&self, video_ids: I) -> Result<Vec<CommentRef>>
    where
        I: IntoIterator<Item = &'a String>,
    {
        let mut refs = Vec::new();
        for id in video_ids {
            let video = self.video_slot(id)?;
            refs.extend((0..self.comments[video].len()).map(|index| CommentRef { video, index }));
        }
        Ok(refs)
    }

    /// Comments of all videos in a split.
    pub fn split_comments(&self, split: &DatasetSplit) -> Result<Vec<&LiveComment>> {
        Ok(self
            .comment_refs(&split.video_ids)?
            .into_iter()
            .map(|r| self.comment(r))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn meta(id: &str, duration: f64) -> VideoMeta {
        VideoMeta {
            video_id: id.into(),
            title: vec!["t".into()],
            duration,
            category: "c".into(),
        }
    }

    pub(crate) fn comment(id: &str, time: f64, tokens: &[&str]) -> LiveComment {
        LiveComment {
            video_id: id.into(),
            time,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            raw_text: tokens.concat(),
        }
    }

    #[test]
    fn counts_and_sorting() {
        let store = CorpusStore::new(
            vec![meta("v", 10.0)],
            vec![comment("v", 5.0, &["b"]), comment("v", 1.0, &["a"]), comment("v", 5.0, &["a"])],
            (0..4)
                .map(|i| FrameFeature {
                    video_id: "v".into(),
                    time: 3.0 - i as f64,
                    vector: vec![0.0; 2],
                })
                .collect(),
            2,
        )
        .unwrap();
        assert_eq!((store.num_videos(), store.num_comments(), store.num_frames()), (1, 3, 4));
        let toks: Vec<_> = store.comments_of(0).iter().map(|c| c.tokens[0].as_str()).collect();
        assert_eq!(toks, ["a", "a", "b"]);
        assert_eq!(store.videos()[0].frame_times, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn negative_timestamp_rejected() {
        let err = CorpusStore::new(vec![meta("v", 10.0)], vec![comment("v", -1.0, &["a"])], vec![], 2)
            .unwrap_err();
        assert!(err.to_string().contains("timestamp out of range"), "{err}");
    }

    #[test]
    fn unknown_video_rejected() {
        let err = CorpusStore::new(vec![meta("v", 10.0)], vec![comment("w", 1.0, &["a"])], vec![], 2)
            .unwrap_err();
        assert!(matches!(err, CorpusError::UnknownVideo(_)));
    }

    #[test]
    fn short_feature_vector_rejected() {
        let err = CorpusStore::new(
            vec![meta("v", 10.0)],
            vec![],
            vec![FrameFeature {
                video_id: "v".into(),
                time: 1.0,
                vector: vec![0.0; 3],
            }],
            4,
        )
        .unwrap_err();
        assert!(err.to_string().contains("dim mismatch"), "{err}");
    }

    #[test]
    fn duplicate_frame_times_rejected() {
        let f = |t| FrameFeature {
            video_id: "v".into(),
            time: t,
            vector: vec![0.0],
        };
        assert!(CorpusStore::new(vec![meta("v", 10.0)], vec![], vec![f(1.0), f(1.0)], 1).is_err());
    }
}
