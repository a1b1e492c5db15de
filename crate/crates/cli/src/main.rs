mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::{Map, Value};

use config::{parse_assignment, RunConfig};

#[derive(Parser)]
#[command(name = "danmaku", version, about = "Live comment generation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Overrides,
}

#[derive(Subcommand)]
enum Command {
    /// Validate raw corpus files and write them in normalized form under <run_dir>/corpus.
    Ingest,
    /// Corpus statistics and comment length histograms.
    Stats,
    /// Similarity of neighboring comments by time interval.
    Analyze,
    /// Train a model; checkpoints go to <run_dir>/checkpoints.
    Train,
    /// Rank 100 candidate comments per test comment and report Recall@k, MR and MRR.
    Rank,
    /// Generate comments at VIDEO_ID@SECONDS positions.
    Generate {
        #[arg(long = "at", value_name = "VIDEO_ID@SECONDS", required = true)]
        at: Vec<String>,
    },
}

#[derive(Args)]
struct Overrides {
    /// JSON object with flat dotted keys, e.g. {"model.dim": 256}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Any configuration key, KEY=VALUE; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// fusional | transformer | s2s-i | s2s-c | s2s-ic
    #[arg(long, global = true)]
    model: Option<String>,
    /// Frames per context window (0 hides the video).
    #[arg(long, global = true)]
    frames: Option<usize>,
    /// Surrounding comments per context window (0 hides them).
    #[arg(long, global = true)]
    comments: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// sum | per-token
    #[arg(long, global = true)]
    norm: Option<String>,
    #[arg(long, global = true)]
    beam: Option<usize>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    comment_file: Option<PathBuf>,
    #[arg(long, global = true)]
    features: Option<PathBuf>,
    #[arg(long, global = true)]
    splits: Option<PathBuf>,
    #[arg(long, global = true)]
    frame_images: Option<PathBuf>,
}

impl Overrides {
    fn to_map(&self) -> Result<Map<String, Value>> {
        let mut map = Map::new();
        for s in &self.set {
            let (k, v) = parse_assignment(s)?;
            map.insert(k, v);
        }
        let path = |p: &PathBuf| Value::from(p.display().to_string());
        let mut put = |key: &str, value: Option<Value>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        put("run_dir", self.run_dir.as_ref().map(path));
        put("model.kind", self.model.clone().map(Value::from));
        put("model.m", self.frames.map(Value::from));
        put("model.n", self.comments.map(Value::from));
        put("seed", self.seed.map(Value::from));
        put("checkpoint", self.checkpoint.as_ref().map(path));
        put("rank.norm", self.norm.clone().map(Value::from));
        put("generate.beam", self.beam.map(Value::from));
        put("data.manifest", self.manifest.as_ref().map(path));
        put("data.comments", self.comment_file.as_ref().map(path));
        put("data.features", self.features.as_ref().map(path));
        put("data.splits", self.splits.as_ref().map(path));
        put("data.frame_images", self.frame_images.as_ref().map(path));
        Ok(map)
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::resolve(cli.opts.config.as_deref(), cli.opts.to_map()?)?;
    commands::prepare_run_dir(&config)?;
    match cli.command {
        Command::Ingest => commands::ingest(&config),
        Command::Stats => commands::stats(&config),
        Command::Analyze => commands::analyze(&config),
        Command::Train => commands::train(&config),
        Command::Rank => commands::rank(&config),
        Command::Generate { at } => commands::generate(&config, &at),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
