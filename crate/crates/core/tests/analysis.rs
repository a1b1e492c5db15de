use danmaku_core::analysis::*;
use danmaku_core::corpus::{CorpusStore, DatasetSplit, LiveComment, SplitName, Splits, VideoMeta};
use danmaku_core::synthetic::decaying_corpus;
use proptest::prelude::*;

fn video(id: &str, duration: f64) -> VideoMeta {
    VideoMeta {
        video_id: id.into(),
        title: vec![],
        duration,
        category: "c".into(),
    }
}

fn comment(video: &str, time: f64, raw: &str) -> LiveComment {
    LiveComment {
        video_id: video.into(),
        time,
        tokens: raw.split(' ').map(String::from).collect(),
        raw_text: raw.into(),
    }
}

fn splits(train: &[&str], test: &[&str], dev: &[&str]) -> Splits {
    let s = |name, ids: &[&str]| DatasetSplit::new(name, ids.iter().map(|s| s.to_string()));
    Splits {
        train: s(SplitName::Train, train),
        dev: s(SplitName::Dev, dev),
        test: s(SplitName::Test, test),
    }
}

#[test]
fn stats_average_words() {
    let store = CorpusStore::new(
        vec![video("a", 7200.0), video("b", 3600.0)],
        vec![comment("a", 1.0, "x y z"), comment("a", 2.0, "p q r s t"), comment("b", 1.0, "k")],
        vec![],
        1,
    )
    .unwrap();
    let s = corpus_stats(&store, &splits(&["a"], &["b"], &[])).unwrap();
    assert_eq!((s.train.comments, s.train.words, s.train.avg_words), (2, 8, 4.0));
    assert_eq!(s.train.duration_hours, 2.0);
    assert_eq!(s.dev, SplitStats::default());
    assert_eq!(s.total.comments, 3);
    assert_eq!(s.total.videos, 2);
    assert!((s.total.avg_words - 3.0).abs() < 1e-12);
    assert!(s.to_table().lines().count() == 5);
}

#[test]
fn length_histograms() {
    let store = CorpusStore::new(
        vec![video("a", 10.0)],
        vec![comment("a", 1.0, "x y"), comment("a", 2.0, "p q"), comment("a", 3.0, "a b c d e")],
        vec![],
        1,
    )
    .unwrap();
    let words = length_distribution(&store, LengthLevel::Word);
    assert_eq!(words.into_iter().collect::<Vec<_>>(), vec![(2, 2), (5, 1)]);
    let chars = length_distribution(&store, LengthLevel::Character);
    assert_eq!(chars.values().sum::<usize>(), 3);
    assert_eq!(chars[&3], 2);
}

#[test]
fn identical_adjacent_comments() {
    let store = CorpusStore::new(vec![video("a", 10.0)], vec![comment("a", 1.0, "hello there"), comment("a", 1.5, "hello there")], vec![], 1).unwrap();
    let r = neighbor_similarity(&store, 20);
    assert_eq!(r.total_pairs, 2);
    assert_eq!(r.buckets[0].pairs, 2);
    assert_eq!(r.buckets[0].mean_edit_distance, Some(0.0));
    assert!((r.buckets[0].mean_tfidf.unwrap() - 1.0).abs() < 1e-12);
    assert!(r.buckets[1..].iter().all(|b| b.pairs == 0 && b.mean_tfidf.is_none()));
}

#[test]
fn pair_accounting() {
    let comments: Vec<LiveComment> = (0..50).map(|i| comment("a", i as f64 * 0.7, &format!("c{}", i % 7))).collect();
    let mut all = comments.clone();
    all.push(comment("b", 1.0, "alone"));
    let store = CorpusStore::new(vec![video("a", 100.0), video("b", 5.0)], all, vec![], 1).unwrap();
    let r = neighbor_similarity(&store, 20);
    assert_eq!(r.total_pairs, 50 * 20);
    assert_eq!(r.buckets.iter().map(|b| b.pairs).sum::<usize>(), r.total_pairs);
    let few = neighbor_similarity(&store, 100);
    assert_eq!(few.total_pairs, 50 * 49);
}

#[test]
fn decaying_similarity_is_monotone() {
    let store = decaying_corpus(200).unwrap();
    let r = neighbor_similarity(&store, 20);
    let means: Vec<f64> = r.buckets.iter().map(|b| b.mean_tfidf.unwrap()).collect();
    assert!(means.windows(2).all(|w| w[0] >= w[1]), "{means:?}");
    assert!(means[0] > means[4]);
}

#[test]
fn analysis_is_deterministic() {
    let store = decaying_corpus(120).unwrap();
    assert_eq!(neighbor_similarity(&store, 20), neighbor_similarity(&store, 20));
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in "[abc]{0,8}", b in "[abc]{0,8}", c in "[abc]{0,8}") {
        let d = edit_distance;
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &b) <= a.len() + b.len());
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert_eq!(d(&a, &a), 0);
    }
}
