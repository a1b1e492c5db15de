//! Small generated corpora with known structure, for smoke runs and tests.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{CorpusStore, DatasetSplit, FrameFeature, LiveComment, Result, SplitName, Splits, VideoMeta};

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub store: CorpusStore,
    pub splits: Splits,
}

fn word(prefix: &str, i: usize) -> String {
    format!("{prefix}{i:02}")
}

fn comment(video_id: &str, time: f64, tokens: Vec<String>) -> LiveComment {
    LiveComment {
        video_id: video_id.to_string(),
        time,
        raw_text: tokens.join(" "),
        tokens,
    }
}

fn meta(video_id: &str, duration: f64, rng: &mut ChaCha8Rng) -> VideoMeta {
    VideoMeta {
        video_id: video_id.to_string(),
        title: (0..3).map(|_| word("w", rng.gen_range(0..40))).collect(),
        duration,
        category: "synthetic".into(),
    }
}

fn noise(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn split_ids(name: SplitName, prefix: &str, count: usize) -> DatasetSplit {
    DatasetSplit::new(name, (0..count).map(|i| format!("{prefix}{i:03}")))
}

/// `train_instances` training comments spread over videos of eight comments
/// each, plus two held-out dev videos drawn the same way. Every comment is a
/// random 3-6 word phrase with a random frame at its timestamp.
pub fn overfit_corpus(train_instances: usize, frame_dim: usize, seed: u64) -> Result<SyntheticCorpus> {
    const PER_VIDEO: usize = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train_videos = train_instances.div_ceil(PER_VIDEO);
    let mut videos = Vec::new();
    let mut comments = Vec::new();
    let mut frames = Vec::new();
    let mut emit = |id: String, count: usize, rng: &mut ChaCha8Rng| {
        let duration = 10.0 * PER_VIDEO as f64;
        videos.push(meta(&id, duration, rng));
        for k in 0..count {
            let t = 5.0 + 10.0 * k as f64;
            let len = rng.gen_range(3..=6);
            let tokens = (0..len).map(|_| word("w", rng.gen_range(0..40))).collect();
            comments.push(comment(&id, t, tokens));
            frames.push(FrameFeature {
                video_id: id.clone(),
                time: t,
                vector: noise(rng, frame_dim),
            });
        }
    };
    for v in 0..train_videos {
        let count = PER_VIDEO.min(train_instances - v * PER_VIDEO);
        emit(format!("train{v:03}"), count, &mut rng);
    }
    for v in 0..2 {
        emit(format!("dev{v:03}"), PER_VIDEO, &mut rng);
    }
    let store = CorpusStore::new(videos, comments, frames, frame_dim)?;
    Ok(SyntheticCorpus {
        store,
        splits: Splits {
            train: split_ids(SplitName::Train, "train", train_videos),
            dev: split_ids(SplitName::Dev, "dev", 2),
            test: DatasetSplit::new(SplitName::Test, Vec::new()),
        },
    })
}

/// Layout of a scene-structured corpus. Scenes are far apart in time, so a
/// window of `frames_per_scene` frames and `comments_per_scene - 1` comments
/// around any comment sees only its own scene.
#[derive(Debug, Clone, Copy)]
pub struct SceneLayout {
    pub train_videos: usize,
    pub dev_videos: usize,
    pub test_videos: usize,
    pub scenes_per_video: usize,
    pub frames_per_scene: usize,
    pub comments_per_scene: usize,
    pub frame_dim: usize,
    pub seed: u64,
}

impl Default for SceneLayout {
    fn default() -> Self {
        Self {
            train_videos: 40,
            dev_videos: 4,
            test_videos: 10,
            scenes_per_video: 3,
            frames_per_scene: 3,
            comments_per_scene: 4,
            frame_dim: 12,
            seed: 0,
        }
    }
}

const SCENE_GAP: f64 = 100.0;

/// Builds a corpus from `scene(rng, split, index) -> (frame vectors, phrase)`,
/// where every comment of a scene is the scene's phrase.
fn scene_corpus(layout: SceneLayout, mut scene: impl FnMut(&mut ChaCha8Rng, SplitName, usize) -> (Vec<Vec<f32>>, Vec<String>)) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let mut videos = Vec::new();
    let mut comments = Vec::new();
    let mut frames = Vec::new();
    let groups = [
        (SplitName::Train, "train", layout.train_videos),
        (SplitName::Dev, "dev", layout.dev_videos),
        (SplitName::Test, "test", layout.test_videos),
    ];
    for (name, prefix, count) in groups {
        let mut index = 0;
        for v in 0..count {
            let id = format!("{prefix}{v:03}");
            videos.push(meta(&id, SCENE_GAP * layout.scenes_per_video as f64, &mut rng));
            for s in 0..layout.scenes_per_video {
                let centre = SCENE_GAP * (s as f64 + 0.5);
                let (vectors, phrase) = scene(&mut rng, name, index);
                index += 1;
                for (k, vector) in vectors.into_iter().enumerate() {
                    frames.push(FrameFeature {
                        video_id: id.clone(),
                        time: centre - 1.0 + k as f64 * 0.5,
                        vector,
                    });
                }
                for k in 0..layout.comments_per_scene {
                    comments.push(comment(&id, centre + k as f64 * 0.25, phrase.clone()));
                }
            }
        }
    }
    let store = CorpusStore::new(videos, comments, frames, layout.frame_dim)?;
    Ok(SyntheticCorpus {
        store,
        splits: Splits {
            train: split_ids(SplitName::Train, "train", layout.train_videos),
            dev: split_ids(SplitName::Dev, "dev", layout.dev_videos),
            test: split_ids(SplitName::Test, "test", layout.test_videos),
        },
    })
}

/// Every comment repeats the phrase of the other comments in its scene;
/// frames are noise. Only the comment channel predicts the target.
pub fn copy_corpus(layout: SceneLayout) -> Result<SyntheticCorpus> {
    scene_corpus(layout, |rng, _, _| {
        let frames = (0..layout.frames_per_scene).map(|_| noise(rng, layout.frame_dim)).collect();
        let phrase = (0..2).map(|_| word("w", rng.gen_range(0..30))).collect();
        (frames, phrase)
    })
}

/// Each scene's frames encode two codes `(a, b)` as one-hot blocks and every
/// comment reads `a{a} b{b}`; each scene holds a single comment, so the
/// comment channel carries only other scenes. Only the frames predict the target.
pub fn visual_corpus(layout: SceneLayout) -> Result<SyntheticCorpus> {
    let codes = layout.frame_dim / 2;
    assert!(codes >= 2, "frame_dim must be at least 4");
    let mut combos: Vec<(usize, usize)> = (0..codes).flat_map(|a| (0..codes).map(move |b| (a, b))).collect();
    combos.shuffle(&mut ChaCha8Rng::seed_from_u64(layout.seed ^ 0x5eed));
    let layout = SceneLayout {
        comments_per_scene: 1,
        ..layout
    };
    scene_corpus(layout, |rng, split, index| {
        // Training scenes walk a shuffled list of every combination so the
        // training targets are as varied as possible.
        let (a, b) = match split {
            SplitName::Train => combos[index % combos.len()],
            _ => (rng.gen_range(0..codes), rng.gen_range(0..codes)),
        };
        let frames = (0..layout.frames_per_scene)
            .map(|_| {
                let mut v: Vec<f32> = (0..layout.frame_dim).map(|_| rng.gen_range(-0.1f32..0.1)).collect();
                v[a] += 1.0;
                v[codes + b] += 1.0;
                v
            })
            .collect();
        (frames, vec![word("a", a), word("b", b)])
    })
}

/// One video of `comments` comments every half second whose token sets slide
/// along a shared sequence, so comments far apart in time share fewer tokens.
pub fn decaying_corpus(comments: usize) -> Result<CorpusStore> {
    const WIDTH: usize = 24;
    let video = VideoMeta {
        video_id: "drift".into(),
        title: vec![],
        duration: comments as f64 * 0.5,
        category: "synthetic".into(),
    };
    let list = (0..comments)
        .map(|i| {
            let t = i as f64 * 0.5;
            let start = t.floor() as usize;
            comment("drift", t, (start..start + WIDTH).map(|k| word("d", k)).collect())
        })
        .collect();
    CorpusStore::new(vec![video], list, vec![], 1)
}
