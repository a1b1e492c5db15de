use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::context::window_at;
use super::{CommentRef, ContextWindow, CorpusStore, DatasetSplit, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowParams {
    /// Frames per window.
    pub m: usize,
    /// Surrounding comments per window.
    pub n: usize,
}

impl Default for WindowParams {
    fn default() -> Self {
        Self { m: 5, n: 5 }
    }
}

/// One training instance per comment of a split: the comment is the target
/// and its neighbors form the context.
#[derive(Debug, Clone)]
pub struct Batcher<'a> {
    store: &'a CorpusStore,
    instances: Vec<CommentRef>,
    params: WindowParams,
    batch_size: usize,
    seed: u64,
}

impl<'a> Batcher<'a> {
    pub fn new(
        store: &'a CorpusStore,
        split: &DatasetSplit,
        params: WindowParams,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            store,
            instances: store.comment_refs(&split.video_ids)?,
            params,
            batch_size: batch_size.max(1),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.instances.len().div_ceil(self.batch_size)
    }

    pub fn instances(&self) -> &[CommentRef] {
        &self.instances
    }

    /// Instance order for `epoch`; a pure function of `(seed, epoch)`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<CommentRef> {
        let mut order = self.instances.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    pub fn window(&self, r: CommentRef) -> Result<ContextWindow> {
        let t = self.store.comment(r).time;
        window_at(self.store, r.video, t, self.params.m, self.params.n, Some(r))
    }

    /// Shuffled batches of windows for one epoch; the last batch may be short.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Vec<ContextWindow>>> + '_ {
        let order = self.epoch_order(epoch);
        let chunks: Vec<Vec<CommentRef>> = order.chunks(self.batch_size).map(<[_]>::to_vec).collect();
        chunks
            .into_iter()
            .map(move |chunk| chunk.into_iter().map(|r| self.window(r)).collect())
    }

    /// Unshuffled windows for every instance.
    pub fn all_windows(&self) -> Result<Vec<ContextWindow>> {
        self.instances.iter().map(|r| self.window(*r)).collect()
    }
}
