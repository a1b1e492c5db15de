use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, CorpusStore, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub video_ids: BTreeSet<String>,
}

impl DatasetSplit {
    pub fn new<I: IntoIterator<Item = String>>(name: SplitName, ids: I) -> Self {
        Self {
            name,
            video_ids: ids.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }

    pub fn num_comments(&self, store: &CorpusStore) -> Result<usize> {
        self.video_ids
            .iter()
            .map(|id| store.video_slot(id).map(|s| store.comments_of(s).len()))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub dev: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: DatasetSplit,
    pub dev: DatasetSplit,
    pub test: DatasetSplit,
}

impl Splits {
    pub fn all(&self) -> [&DatasetSplit; 3] {
        [&self.train, &self.dev, &self.test]
    }
}

/// Assigns whole videos to train/test/dev with a seeded shuffle.
pub fn split_by_video(store: &CorpusStore, counts: SplitCounts, seed: u64) -> Result<Splits> {
    let requested = counts.train + counts.test + counts.dev;
    if requested > store.num_videos() {
        return Err(CorpusError::InsufficientVideos {
            requested,
            available: store.num_videos(),
        });
    }
    let mut ids: Vec<String> = store.videos().iter().map(|v| v.video_id.clone()).collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = ids.into_iter();
    let train = DatasetSplit::new(SplitName::Train, it.by_ref().take(counts.train));
    let test = DatasetSplit::new(SplitName::Test, it.by_ref().take(counts.test));
    let dev = DatasetSplit::new(SplitName::Dev, it.by_ref().take(counts.dev));
    Ok(Splits { train, dev, test })
}

#[cfg(test)]
mod tests {
    use super::super::VideoMeta;
    use super::*;
    use proptest::prelude::*;

    fn store(n: usize) -> CorpusStore {
        let videos = (0..n)
            .map(|i| VideoMeta {
                video_id: format!("v{i:04}"),
                title: vec![],
                duration: 1.0,
                category: "c".into(),
            })
            .collect();
        CorpusStore::new(videos, vec![], vec![], 1).unwrap()
    }

    #[test]
    fn full_scale_sizes() {
        let s = split_by_video(&store(2361), SplitCounts { train: 2161, test: 100, dev: 100 }, 1).unwrap();
        assert_eq!((s.train.len(), s.test.len(), s.dev.len()), (2161, 100, 100));
    }

    #[test]
    fn same_seed_same_assignment() {
        let st = store(50);
        let c = SplitCounts { train: 30, test: 10, dev: 10 };
        assert_eq!(split_by_video(&st, c, 9).unwrap(), split_by_video(&st, c, 9).unwrap());
        assert_ne!(split_by_video(&st, c, 9).unwrap(), split_by_video(&st, c, 10).unwrap());
    }

    #[test]
    fn over_allocation_rejected() {
        let err = split_by_video(&store(5), SplitCounts { train: 4, test: 1, dev: 1 }, 0).unwrap_err();
        assert!(matches!(err, CorpusError::InsufficientVideos { requested: 6, available: 5 }));
    }

    proptest! {
        #[test]
        fn splits_are_disjoint(n in 1usize..40, seed: u64, a in 0usize..40, b in 0usize..40) {
            let train = a.min(n);
            let test = b.min(n - train);
            let dev = n - train - test;
            let s = split_by_video(&store(n), SplitCounts { train, test, dev }, seed).unwrap();
            prop_assert!(s.train.video_ids.is_disjoint(&s.test.video_ids));
            prop_assert!(s.train.video_ids.is_disjoint(&s.dev.video_ids));
            prop_assert!(s.dev.video_ids.is_disjoint(&s.test.video_ids));
            prop_assert_eq!(s.train.len() + s.test.len() + s.dev.len(), n);
        }
    }
}
