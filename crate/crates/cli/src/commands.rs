use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use danmaku_core::analysis::{corpus_stats, histogram_csv, length_distribution, neighbor_similarity, LengthLevel};
use danmaku_core::corpus::frames::{raw_patch_from_file, RAW_PATCH_DIM};
use danmaku_core::corpus::{
    extract_context, load_corpus, read_comments, read_manifest, split_by_video, write_comments, write_manifest, CorpusStore,
    DatasetSplit, FeatureWriter, FrameFeature, SplitCounts, SplitName, Splits, VideoMeta, Vocabulary, WindowParams,
    MAX_TARGET_LEN,
};
use danmaku_core::models::{build_model, generate as decode, load_bundle, DecodeMode, ModelConfig, ModelInput, SavedModel};
use danmaku_core::ranking::{evaluate_ranking, ModelScorer, RankConfig, RankingMetrics};
use danmaku_core::training::Trainer;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub fn prepare_run_dir(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.run_dir).with_context(|| format!("creating {}", config.run_dir.display()))?;
    write_json(&config.run_dir.join("config.json"), config)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_store(config: &RunConfig) -> Result<CorpusStore> {
    let manifest = config.require(&config.manifest, "data.manifest")?;
    let comments = config.require(&config.comments, "data.comments")?;
    let features = config.require(&config.features, "data.features")?;
    load_corpus(manifest, comments, features).context("loading corpus")
}

#[derive(Deserialize)]
struct SplitFile {
    train: Vec<String>,
    dev: Vec<String>,
    test: Vec<String>,
}

/// Splits from `data.splits` when given, otherwise a seeded split by video
/// with 1/20 of the videos (at least one) each for test and dev.
fn load_splits(config: &RunConfig, store: &CorpusStore) -> Result<Splits> {
    if let Some(path) = &config.splits {
        let file: SplitFile = serde_json::from_reader(BufReader::new(
            File::open(path).with_context(|| format!("opening {}", path.display()))?,
        ))
        .with_context(|| format!("parsing {}", path.display()))?;
        let splits = Splits {
            train: DatasetSplit::new(SplitName::Train, file.train),
            dev: DatasetSplit::new(SplitName::Dev, file.dev),
            test: DatasetSplit::new(SplitName::Test, file.test),
        };
        for split in splits.all() {
            for id in &split.video_ids {
                store.video_slot(id).with_context(|| format!("{} split in {}", split.name, path.display()))?;
            }
        }
        return Ok(splits);
    }
    let total = store.num_videos();
    let held_out = (total / 20).max(1);
    let test = config.test_videos.unwrap_or(held_out);
    let dev = config.dev_videos.unwrap_or(held_out);
    if test + dev >= total {
        bail!("{total} videos cannot be split into {test} test, {dev} dev and a non-empty training set");
    }
    let counts = SplitCounts {
        train: total - test - dev,
        test,
        dev,
    };
    Ok(split_by_video(store, counts, config.seed)?)
}

fn load_checkpoint(config: &RunConfig) -> Result<(SavedModel, Vocabulary)> {
    let path = match &config.checkpoint {
        Some(p) => p.clone(),
        None => {
            let dir = config.run_dir.join("checkpoints");
            ["best.ckpt", "last.ckpt"]
                .iter()
                .map(|f| dir.join(f))
                .find(|p| p.exists())
                .with_context(|| format!("no checkpoint given and none found in {}", dir.display()))?
        }
    };
    let file = File::open(&path).with_context(|| format!("unknown checkpoint {}", path.display()))?;
    let mut saved = load_bundle(BufReader::new(file)).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let vocab = saved
        .vocab
        .take()
        .with_context(|| format!("checkpoint {} carries no vocabulary", path.display()))?;
    Ok((saved, vocab))
}

/// The requested window, capped by the slots the model was built with.
fn window_for(config: &RunConfig, model: &ModelConfig) -> WindowParams {
    WindowParams {
        m: config.m.min(model.m),
        n: config.n.min(model.n),
    }
}

fn frame_images(dir: &Path, videos: &[VideoMeta]) -> Result<Vec<FrameFeature>> {
    let mut out = Vec::new();
    for v in videos {
        let video_dir = dir.join(&v.video_id);
        if !video_dir.is_dir() {
            continue;
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&video_dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        paths.retain(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")));
        paths.sort();
        for path in paths {
            let time: f64 = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .with_context(|| format!("frame file {} is not named <seconds>.png", path.display()))?;
            let vector = raw_patch_from_file(&path).with_context(|| format!("decoding {}", path.display()))?;
            out.push(FrameFeature {
                video_id: v.video_id.clone(),
                time,
                vector,
            });
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct IngestReport {
    videos: usize,
    comments: usize,
    frames: usize,
    frame_dim: usize,
}

pub fn ingest(config: &RunConfig) -> Result<()> {
    let store = match &config.frame_images {
        Some(dir) => {
            let videos = read_manifest(config.require(&config.manifest, "data.manifest")?)?;
            let comments = read_comments(config.require(&config.comments, "data.comments")?)?;
            let frames = frame_images(dir, &videos)?;
            CorpusStore::new(videos, comments, frames, RAW_PATCH_DIM)?
        }
        None => load_store(config)?,
    };
    let out = config.run_dir.join("corpus");
    fs::create_dir_all(&out)?;
    let videos: Vec<VideoMeta> = store
        .videos()
        .iter()
        .map(|v| VideoMeta {
            video_id: v.video_id.clone(),
            title: v.title.clone(),
            duration: v.duration,
            category: v.category.clone(),
        })
        .collect();
    write_manifest(&out.join("manifest.jsonl"), &videos)?;
    let comments: Vec<_> = (0..store.num_videos()).flat_map(|s| store.comments_of(s).iter().cloned()).collect();
    write_comments(&out.join("comments.jsonl"), &comments)?;
    let mut writer = FeatureWriter::create(&out.join("features.bin"), store.frame_dim())?;
    for slot in 0..store.num_videos() {
        for f in store.frames_of(slot) {
            writer.write(&f.video_id, f.time as f32, &f.vector)?;
        }
    }
    writer.finish()?;
    let report = IngestReport {
        videos: store.num_videos(),
        comments: store.num_comments(),
        frames: store.num_frames(),
        frame_dim: store.frame_dim(),
    };
    write_json(&config.run_dir.join("report.json"), &report)?;
    println!(
        "{} videos, {} comments, {} frames of dim {} -> {}",
        report.videos,
        report.comments,
        report.frames,
        report.frame_dim,
        out.display()
    );
    Ok(())
}

pub fn stats(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let splits = load_splits(config, &store)?;
    let stats = corpus_stats(&store, &splits)?;
    let words = length_distribution(&store, LengthLevel::Word);
    let chars = length_distribution(&store, LengthLevel::Character);
    fs::write(config.run_dir.join("words.csv"), histogram_csv(&words))?;
    fs::write(config.run_dir.join("chars.csv"), histogram_csv(&chars))?;
    write_json(
        &config.run_dir.join("report.json"),
        &serde_json::json!({ "stats": stats, "word_lengths": words, "char_lengths": chars }),
    )?;
    print!("{}", stats.to_table());
    Ok(())
}

pub fn analyze(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let report = neighbor_similarity(&store, config.neighbors);
    write_json(&config.run_dir.join("report.json"), &report)?;
    print!("{}", report.to_table());
    Ok(())
}

pub fn train(config: &RunConfig) -> Result<()> {
    let store = load_store(config)?;
    let splits = load_splits(config, &store)?;
    let tc = config.train_config();
    let mut trainer = match &config.checkpoint {
        Some(path) => Trainer::resume(path, &store, &splits, tc).with_context(|| format!("resuming from {}", path.display()))?,
        None => {
            let vocab = Vocabulary::build(&store, &splits.train, config.vocab_size)?;
            let mut mc = ModelConfig::new(config.kind, vocab.len(), store.frame_dim())
                .with_dim(config.dim)
                .with_window(config.m, config.n);
            mc.heads = config.heads;
            mc.layers = config.layers;
            mc.dropout = config.dropout;
            let bundle = build_model(mc, config.seed)?;
            Trainer::new(bundle, vocab, &store, &splits, tc)?
        }
    };
    eprintln!(
        "{}: {} parameters, vocabulary {}, {} steps",
        config.kind,
        trainer.bundle().num_parameters(),
        trainer.vocab().len(),
        trainer.total_steps()?
    );
    let report = trainer.run(|p| eprintln!("{p}"))?;
    write_json(&config.run_dir.join("report.json"), &report)?;
    match report.best {
        Some(best) => println!("best dev-nll {:.4} at step {}", best.loss, best.step),
        None => println!("trained {} steps", trainer.step()),
    }
    Ok(())
}

pub fn rank(config: &RunConfig) -> Result<()> {
    let (saved, vocab) = load_checkpoint(config)?;
    let store = load_store(config)?;
    let splits = load_splits(config, &store)?;
    let window = window_for(config, saved.bundle.config());
    let scorer = ModelScorer {
        bundle: &saved.bundle,
        vocab: &vocab,
    };
    let rc = RankConfig {
        seed: config.seed,
        normalization: config.norm,
        window,
        limit: config.rank_limit,
    };
    let report = evaluate_ranking(&store, &splits, &scorer, &rc)?;
    write_json(&config.run_dir.join("report.json"), &report)?;
    let label = format!("{} #I{} #C{}", saved.bundle.config().kind, window.m, window.n);
    println!("{}", RankingMetrics::table_header());
    println!("{}", report.metrics.table_row(&label));
    Ok(())
}

#[derive(Serialize)]
struct Generated {
    video_id: String,
    time: f64,
    tokens: Vec<String>,
}

pub fn generate(config: &RunConfig, at: &[String]) -> Result<()> {
    let (saved, vocab) = load_checkpoint(config)?;
    let store = load_store(config)?;
    let window = window_for(config, saved.bundle.config());
    let mode = match config.beam {
        None | Some(1) => DecodeMode::Greedy,
        Some(w) => DecodeMode::Beam(w),
    };
    let mut out = Vec::with_capacity(at.len());
    for query in at {
        let (video_id, time) = query
            .rsplit_once('@')
            .and_then(|(v, t)| Some((v, t.parse::<f64>().ok()?)))
            .with_context(|| format!("expected VIDEO_ID@SECONDS, got {query:?}"))?;
        let ctx = extract_context(&store, video_id, time, window.m, window.n, None)?;
        let input = ModelInput::from_window(&ctx, &vocab, saved.bundle.config())?;
        let ids = decode(&saved.bundle, &input, mode, MAX_TARGET_LEN)?;
        let g = Generated {
            video_id: video_id.to_string(),
            time,
            tokens: vocab.decode(&ids),
        };
        println!("{}", serde_json::to_string(&g)?);
        out.push(g);
    }
    write_json(&config.run_dir.join("report.json"), &out)
}
