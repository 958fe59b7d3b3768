use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sbvqa_core::datagen::{self, SynthSpec};
use sbvqa_core::metrics::{self, EvalReport};
use sbvqa_core::pgc::{self, HeatmapSeries};
use sbvqa_core::stacker::{self, DatasetManifest, Ensemble, Split};
use sbvqa_core::video::{ingest_video, IngestionPolicy};

mod config;

use config::{load_document, RunConfig};

const CACHE_ENV: &str = "SBVQA_CACHE";

#[derive(Parser)]
#[command(name = "sbvqa", version, about = "No-reference video quality assessment")]
struct Cli {
    /// Worker threads for copy training and batch prediction (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic distorted-clip dataset.
    Synth(SynthArgs),
    /// Train a stacked ensemble.
    Train(TrainArgs),
    /// Score an ensemble on one split of a manifest.
    Eval(EvalArgs),
    /// Print the predicted score of one or more videos.
    Predict(PredictArgs),
    /// Bitrate-ladder and heatmap studies.
    Pgc(PgcArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset spec (JSON or TOML); defaults are used when omitted.
    #[arg(long = "config", alias = "spec")]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<Split>,
    /// Directory for report.json and items.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ensemble: PathBuf,
    #[arg(required = true)]
    videos: Vec<PathBuf>,
}

#[derive(Args)]
struct PgcArgs {
    #[arg(long)]
    ensemble: PathBuf,
    /// Ladder CSV: clip_id,resolution,level,video_path.
    #[arg(long)]
    ladder: Option<PathBuf>,
    /// Heatmap JSON for `--video`.
    #[arg(long, requires = "video")]
    heatmap: Option<PathBuf>,
    #[arg(long, requires = "heatmap")]
    video: Option<PathBuf>,
    #[arg(long, default_value_t = pgc::DEFAULT_SEGMENT_SECS)]
    segment_secs: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Exit code 2: bad configuration or unreadable inputs. Exit code 3: the
/// data itself could not be processed.
#[derive(Debug)]
enum Failure {
    Input(anyhow::Error),
    Data(anyhow::Error),
}

type CmdResult<T> = std::result::Result<T, Failure>;

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

/// Failures while processing videos are data errors unless the
/// configuration was at fault.
fn processing(e: sbvqa_core::Error) -> Failure {
    match e {
        sbvqa_core::Error::BadConfig(_) => Failure::Input(e.into()),
        other => Failure::Data(other.into()),
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(input)?;
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(input)
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .map_err(input)
}

fn load_ensemble(dir: &Path) -> CmdResult<Ensemble> {
    Ensemble::load(dir)
        .with_context(|| format!("loading ensemble from {}", dir.display()))
        .map_err(input)
}

fn cmd_synth(args: SynthArgs) -> CmdResult<()> {
    let mut spec: SynthSpec = match &args.config {
        Some(p) => load_document(p).map_err(input)?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(input)?;
    let ds = datagen::generate(&spec, &args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))
        .map_err(input)?;
    log::info!("wrote {} clips", ds.manifest.entries.len());
    println!("{}", args.out.join("manifest.jsonl").display());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    branches: usize,
    folds: usize,
    checkpoints: usize,
    trained: Vec<(usize, usize)>,
    resumed: Vec<(usize, usize)>,
    oof: Option<EvalReport>,
    meta_degenerate: bool,
}

fn cmd_train(args: TrainArgs) -> CmdResult<()> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p).map_err(input)?,
        None => RunConfig::default(),
    };
    run.apply_flags(args.manifest, args.out, args.seed);
    let stack = run.resolved_stack();
    stack.validate().map_err(input)?;
    let manifest_path = run.manifest.clone().ok_or_else(|| input(anyhow!("no manifest given")))?;
    let out = run.out_dir.clone().ok_or_else(|| input(anyhow!("no output directory given")))?;
    let manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))
        .map_err(input)?;
    create_dir(&out)?;
    write_json(&out.join("run_config.json"), &run)?;

    let policy = IngestionPolicy::for_fragment(stack.sampler.grid_count, stack.sampler.patch_size)
        .with_cache(cache_dir());
    let train = stacker::load_items(&manifest.split(Split::Train), &policy).map_err(processing)?;
    log::info!(
        "training {} branches x {} folds on {} clips",
        stack.k(),
        stack.folds,
        train.len()
    );
    let outcome = stacker::train_ensemble(&stack, &train, manifest.mos_range, Some(&out)).map_err(processing)?;
    let labels: Vec<f64> = outcome.oof.labels.clone();
    let mean_feature: Vec<f64> = outcome
        .oof
        .features
        .iter()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect();
    let summary = TrainSummary {
        branches: stack.k(),
        folds: stack.folds,
        checkpoints: outcome.ensemble.checkpoint_count(),
        trained: outcome
            .records
            .iter()
            .map(|r| (r.branch, r.fold))
            .filter(|bf| !outcome.resumed.contains(bf))
            .collect(),
        resumed: outcome.resumed.clone(),
        oof: EvalReport::from_pairs(&mean_feature, &labels).ok(),
        meta_degenerate: outcome.ensemble.meta.degenerate,
    };
    write_json(&out.join("train_summary.json"), &summary)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> CmdResult<()> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p).map_err(input)?,
        None => RunConfig::default(),
    };
    run.apply_flags(args.manifest, args.out, None);
    let split = args.split.unwrap_or(run.eval.split);
    let manifest_path = run.manifest.clone().ok_or_else(|| input(anyhow!("no manifest given")))?;
    let manifest = DatasetManifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))
        .map_err(input)?;
    let ensemble = load_ensemble(&args.ensemble)?;
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(input(anyhow!("split {split} of {} is empty", manifest_path.display())));
    }
    let cache = cache_dir();
    let predictor = |_: &str, path: &Path| ensemble.predict_path(path, cache.clone());
    let report = metrics::evaluate(&entries, &predictor, true).map_err(processing)?;
    print!("{}", report.table());
    if let Some(out) = &run.out_dir {
        create_dir(out)?;
        let mut summary = report.clone();
        if !run.eval.per_item_in_json {
            summary.per_item = None;
        }
        summary.write_json(&out.join("report.json")).map_err(input)?;
        report.write_items_csv(&out.join("items.csv")).map_err(input)?;
    }
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> CmdResult<()> {
    let ensemble = load_ensemble(&args.ensemble)?;
    let cache = cache_dir();
    let scores = {
        use rayon::prelude::*;
        args.videos
            .par_iter()
            .map(|p| {
                ensemble
                    .predict_path(p, cache.clone())
                    .map_err(|e| sbvqa_core::Error::for_item(p.display().to_string(), e))
            })
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| match e {
                sbvqa_core::Error::Item { .. } => Failure::Data(e.into()),
                other => processing(other),
            })?
    };
    if let [score] = scores.as_slice() {
        println!("{score:.6}");
    } else {
        for (p, s) in args.videos.iter().zip(&scores) {
            println!("{}\t{s:.6}", p.display());
        }
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct HeatmapReport {
    video_id: String,
    segments: pgc::SegmentScoreSeries,
    correlation: pgc::HeatmapCorrelation,
}

fn cmd_pgc(args: PgcArgs) -> CmdResult<()> {
    if args.ladder.is_none() && args.heatmap.is_none() {
        return Err(input(anyhow!("nothing to do: pass --ladder and/or --heatmap with --video")));
    }
    let ladder = match &args.ladder {
        Some(p) => Some(
            pgc::load_ladder(p)
                .with_context(|| format!("loading ladder {}", p.display()))
                .map_err(input)?,
        ),
        None => None,
    };
    let heatmap = match &args.heatmap {
        Some(p) => Some(
            HeatmapSeries::load(p)
                .with_context(|| format!("loading heatmap {}", p.display()))
                .map_err(input)?,
        ),
        None => None,
    };
    let ensemble = load_ensemble(&args.ensemble)?;
    create_dir(&args.out)?;
    let cache = cache_dir();

    if let Some(entries) = ladder {
        let report = pgc::ladder_study(&entries, |p| ensemble.predict_path(p, cache.clone())).map_err(processing)?;
        write_json(&args.out.join("ladder_report.json"), &report)?;
        std::fs::write(args.out.join("ladder.svg"), pgc::ladder_svg(&report)).map_err(input)?;
        println!(
            "ladder: {}/{} clips with positive level-score SRCC ({:.3})",
            report.positive,
            report.clips.len(),
            report.fraction_positive
        );
    }
    if let (Some(hm), Some(video_path)) = (heatmap, &args.video) {
        let policy = ensemble.ingestion_policy().with_cache(cache);
        let video = ingest_video(video_path, &policy).map_err(processing)?;
        let series = pgc::score_segments(&hm.video_id, &video, args.segment_secs, |seg| {
            ensemble.predict(seg)
        })
        .map_err(processing)?;
        let correlation = pgc::correlate_heatmap(&series, &hm).map_err(processing)?;
        std::fs::write(
            args.out.join(format!("heatmap_{}.svg", hm.video_id)),
            pgc::heatmap_svg(&series, &hm),
        )
        .map_err(input)?;
        println!(
            "heatmap {}: srcc {:.4} plcc {:.4} over {} segments",
            hm.video_id, correlation.srcc, correlation.plcc, correlation.n
        );
        write_json(
            &args.out.join("heatmap_report.json"),
            &HeatmapReport {
                video_id: hm.video_id.clone(),
                segments: series,
                correlation,
            },
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult<()> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(input)?;
    }
    match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Pgc(a) => cmd_pgc(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
