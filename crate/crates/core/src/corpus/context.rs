use std::cmp::Ordering;

use super::{CommentRef, CorpusStore, LiveComment, Result};

/// Model input around one timestamp: the `m` nearest frames and `n` nearest
/// other comments. Missing slots are zero/empty with a false mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub video_id: String,
    pub timestamp: f64,
    /// `m` vectors of the corpus frame dim, time-ascending, padding last.
    pub frames: Vec<Vec<f32>>,
    pub frame_times: Vec<f64>,
    pub frame_mask: Vec<bool>,
    /// `n` token sequences, time-ascending, padding last.
    pub comments: Vec<Vec<String>>,
    pub comment_times: Vec<f64>,
    pub comment_mask: Vec<bool>,
    pub target: Option<LiveComment>,
}

impl ContextWindow {
    pub fn num_frames(&self) -> usize {
        self.frame_mask.iter().filter(|m| **m).count()
    }

    pub fn num_comments(&self) -> usize {
        self.comment_mask.iter().filter(|m| **m).count()
    }
}

/// Indices of the `k` entries of the sorted `times` closest to `t`, ordered
/// by `(|time - t|, time, index)`, returned in ascending index order.
pub(crate) fn nearest_indices(times: &[f64], t: f64, k: usize, exclude: Option<usize>) -> Vec<usize> {
    let dist = |i: usize| (times[i] - t).abs();
    let usable = |i: usize| Some(i) != exclude;
    let split = times.partition_point(|&x| x < t);
    let (mut left, mut right) = (split, split);
    let mut picked = Vec::with_capacity(k);

    let next_left = |mut l: usize| {
        while l > 0 {
            l -= 1;
            if usable(l) {
                return Some(l);
            }
        }
        None
    };
    let next_right = |mut r: usize| {
        while r < times.len() {
            if usable(r) {
                return Some(r);
            }
            r += 1;
        }
        None
    };

    // Take the k closest by distance, then pull in everything tied with the
    // k-th distance so the final sort can apply the full tie-break.
    let mut bound = None;
    loop {
        let l = next_left(left);
        let r = next_right(right);
        let choice = match (l, r) {
            (None, None) => break,
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (Some(l), Some(r)) => {
                if dist(l) <= dist(r) {
                    l
                } else {
                    r
                }
            }
        };
        if picked.len() >= k {
            match bound {
                Some(b) if dist(choice) <= b => {}
                _ => break,
            }
        }
        if choice < split {
            left = choice;
        } else {
            right = choice + 1;
        }
        picked.push(choice);
        if picked.len() == k {
            bound = Some(dist(choice));
        }
    }
    picked.sort_by(|&a, &b| {
        dist(a)
            .partial_cmp(&dist(b))
            .unwrap_or(Ordering::Equal)
            .then(times[a].total_cmp(&times[b]))
            .then(a.cmp(&b))
    });
    picked.truncate(k);
    picked.sort_unstable();
    picked
}

/// Builds the context window at time `t`. When `target` is given its own
/// comment is never placed among the context comments.
pub fn extract_context(
    store: &CorpusStore,
    video_id: &str,
    t: f64,
    m: usize,
    n: usize,
    target: Option<CommentRef>,
) -> Result<ContextWindow> {
    let slot = store.video_slot(video_id)?;
    window_at(store, slot, t, m, n, target)
}

pub(crate) fn window_at(
    store: &CorpusStore,
    slot: usize,
    t: f64,
    m: usize,
    n: usize,
    target: Option<CommentRef>,
) -> Result<ContextWindow> {
    let video = &store.videos()[slot];
    let dim = store.frame_dim();

    let frames = store.frames_of(slot);
    let picked = nearest_indices(&video.frame_times, t, m, None);
    let mut frame_vecs: Vec<Vec<f32>> = picked.iter().map(|&i| frames[i].vector.clone()).collect();
    let mut frame_times: Vec<f64> = picked.iter().map(|&i| frames[i].time).collect();
    let mut frame_mask = vec![true; picked.len()];
    frame_vecs.resize(m, vec![0.0; dim]);
    frame_times.resize(m, 0.0);
    frame_mask.resize(m, false);

    let comments = store.comments_of(slot);
    let times: Vec<f64> = comments.iter().map(|c| c.time).collect();
    let exclude = target.filter(|r| r.video == slot).map(|r| r.index);
    let picked = nearest_indices(&times, t, n, exclude);
    let mut ctx: Vec<Vec<String>> = picked.iter().map(|&i| comments[i].tokens.clone()).collect();
    let mut ctx_times: Vec<f64> = picked.iter().map(|&i| comments[i].time).collect();
    let mut ctx_mask = vec![true; picked.len()];
    ctx.resize(n, Vec::new());
    ctx_times.resize(n, 0.0);
    ctx_mask.resize(n, false);

    Ok(ContextWindow {
        video_id: video.video_id.clone(),
        timestamp: t,
        frames: frame_vecs,
        frame_times,
        frame_mask,
        comments: ctx,
        comment_times: ctx_times,
        comment_mask: ctx_mask,
        target: target.map(|r| store.comment(r).clone()),
    })
}
