//! `depthscape`: dataset build, training, two-phase inference, evaluation,
//! serving and depth analysis. Every command writes `run.json` into its
//! output directory.

mod manifest;

use std::fs::File;
use std::io::BufWriter;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use depthscape::checkpoint::{load_checkpoint, save_checkpoint};
use depthscape::data::{build_dataset, load_dataset, png_io};
use depthscape::depth_ops::depth_distribution;
use depthscape::metrics::{evaluate_model, write_eval_csv, EvalConfig};
use depthscape::pipeline::{two_phase, DepthEdit, TwoPhaseRequest};
use depthscape::training::LossLog;
use depthscape::{Mode, ModelConfig, TrainState};
use depthscape_service::ServeConfig;
use serde::Serialize;
use serde_json::json;

use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "depthscape", version, about = "Segmentation- and depth-conditioned landscape synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthetic dataset operations.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train a model and write a checkpoint plus a per-step loss CSV.
    Train(TrainArgs),
    /// Two-phase generation: depth candidates, pick, edit, images.
    Infer(InferArgs),
    /// Evaluate checkpoints on a dataset into one CSV.
    Eval(EvalArgs),
    /// Run the HTTP studio service.
    Serve(ServeArgs),
    /// Per-label depth histograms of a dataset.
    AnalyzeDepth(AnalyzeArgs),
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Render synthetic triplets to disk.
    Build(BuildArgs),
}

#[derive(Debug, Args, Serialize)]
struct BuildArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    mode: Mode,
    /// Model configuration JSON; fields left out take 64×64 defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 2000)]
    steps: u64,
    /// Seeds batch order and per-step latents.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; `--steps` more steps are run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also save `checkpoint-<step>.dsck` every this many steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Add a wall-clock column to the loss CSV (not reproducible).
    #[arg(long)]
    wall_time: bool,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    s2d: PathBuf,
    /// SD2I (or S2I) checkpoint.
    #[arg(long)]
    sd2i: PathBuf,
    #[arg(long)]
    seg: PathBuf,
    #[arg(long, default_value_t = 4)]
    n_depths: usize,
    #[arg(long, default_value_t = 0)]
    pick: usize,
    /// `label:delta`, e.g. `sky:+0.05`; repeatable, applied in order.
    #[arg(long = "shift", allow_hyphen_values = true)]
    shifts: Vec<String>,
    #[arg(long, default_value_t = 4)]
    n_images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Repeatable; one CSV row per checkpoint, named by file stem.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    diversity_k: usize,
    #[arg(long, default_value_t = 4)]
    diversity_items: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long, env = "DEPTHSCAPE_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long, env = "DEPTHSCAPE_S2D")]
    s2d: PathBuf,
    #[arg(long, env = "DEPTHSCAPE_SD2I")]
    sd2i: PathBuf,
    #[arg(long, env = "DEPTHSCAPE_WORKERS", default_value_t = 2)]
    workers: usize,
    #[arg(long, env = "DEPTHSCAPE_PERSIST_DIR")]
    persist_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct AnalyzeArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Dataset {
            command: DatasetCommand::Build(a),
        } => dataset_build(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Serve(a) => serve(a),
        Command::AnalyzeDepth(a) => analyze_depth(a),
    }
}

fn out_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn dataset_build(a: BuildArgs) -> Result<()> {
    let report = build_dataset(a.seed, a.count, a.resolution, &a.out)?;
    tracing::info!(
        "{} triplets in {} ({} files written)",
        report.manifest.ids.len(),
        a.out.display(),
        report.files_written
    );
    let mut m = RunManifest::new("dataset build", &a, json!({ "dataset": a.seed }))?;
    m.add_output(&a.out, "manifest.json")?;
    m.write(&a.out)
}

fn read_model_config(path: Option<&Path>, mode: Mode) -> Result<ModelConfig> {
    let mut config = match path {
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_slice::<ModelConfig>(&bytes).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => ModelConfig::desk64(mode),
    };
    config.mode = mode;
    config.validate()?;
    Ok(config)
}

fn train(a: TrainArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let mut state = match &a.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            if ck.config().mode != a.mode {
                bail!("checkpoint {} has mode {}, not {}", p.display(), ck.config().mode, a.mode);
            }
            let mut s = ck.into_train_state()?;
            s.seed = a.seed;
            s
        }
        None => TrainState::new(&read_model_config(a.config.as_deref(), a.mode)?, a.seed)?,
    };
    let config = state.config().clone();
    if config.output_resolution != dataset.manifest.resolution {
        bail!(
            "model resolution {} does not match dataset resolution {}",
            config.output_resolution,
            dataset.manifest.resolution
        );
    }
    if config.label_set != dataset.manifest.label_set {
        bail!("model and dataset label sets differ");
    }
    out_dir(&a.out)?;
    let csv_path = a.out.join("losses.csv");
    let mut log = LossLog::new(BufWriter::new(File::create(&csv_path)?), a.wall_time)?;
    let start = state.step;
    for _ in 0..a.steps {
        let batch = dataset.batch_for_step(a.mode, config.optim.batch, a.seed, state.step)?;
        let r = state.train_step(&batch)?;
        log.append(&r)?;
        if state.step % 50 == 0 {
            tracing::info!(
                "step {} adv_g {:.4} adv_d {:.4} rec_l1 {:.4}",
                state.step,
                r.adv_g,
                r.adv_d,
                r.reconstruction_l1
            );
        }
        if let Some(k) = a.checkpoint_every.filter(|&k| k > 0) {
            if state.step % k == 0 {
                save_checkpoint(&a.out.join(format!("checkpoint-{}.dsck", state.step)), &state)?;
            }
        }
    }
    drop(log);
    save_checkpoint(&a.out.join("checkpoint.dsck"), &state)?;
    let mut m = RunManifest::new(
        "train",
        &config,
        json!({ "train": a.seed, "init": config.init_seed, "dataset": dataset.manifest.seed, "start_step": start }),
    )?;
    m.add_output(&a.out, "checkpoint.dsck")?;
    m.add_output(&a.out, "losses.csv")?;
    m.write(&a.out)
}

fn infer(a: InferArgs) -> Result<()> {
    let s2d = load_checkpoint(&a.s2d)?.generator;
    let image = load_checkpoint(&a.sd2i)?.generator;
    let labels = s2d.config().label_set.clone();
    let seg_bytes = std::fs::read(&a.seg).with_context(|| format!("reading {}", a.seg.display()))?;
    let seg = png_io::decode_segmentation(&seg_bytes, &labels).with_context(|| format!("decoding {}", a.seg.display()))?;
    let edits = a
        .shifts
        .iter()
        .map(|s| DepthEdit::parse(s, &labels))
        .collect::<depthscape::Result<Vec<_>>>()?;
    let req = TwoPhaseRequest {
        n_depths: a.n_depths,
        pick: a.pick,
        edits: edits.clone(),
        n_images: a.n_images,
        seed: a.seed,
    };
    let out = two_phase(&s2d, &image, &seg, &req)?;
    out_dir(&a.out)?;
    let mut files = Vec::new();
    let mut write = |name: String, bytes: Vec<u8>| -> Result<()> {
        std::fs::write(a.out.join(&name), bytes).with_context(|| format!("writing {name}"))?;
        files.push(name);
        Ok(())
    };
    for (i, d) in out.candidates.iter().enumerate() {
        write(format!("depth_{i}.png"), png_io::encode_depth(d))?;
    }
    write("depth_selected.png".into(), png_io::encode_depth(&out.depth))?;
    for (i, img) in out.images.iter().enumerate() {
        write(format!("image_{i}.png"), png_io::encode_image(img))?;
    }
    let config = json!({
        "s2d": s2d.config(),
        "image": image.config(),
        "n_depths": a.n_depths,
        "pick": a.pick,
        "edits": edits,
        "n_images": a.n_images,
        "segmentation_sha256": manifest::sha256_hex(&seg_bytes),
    });
    let mut m = RunManifest::new(
        "infer",
        &config,
        json!({ "phase1": a.seed, "phase2": depthscape::pipeline::phase2_seed(a.seed) }),
    )?;
    for f in &files {
        m.add_output(&a.out, f)?;
    }
    m.write(&a.out)
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let cfg = EvalConfig {
        seed: a.seed,
        diversity_k: a.diversity_k,
        diversity_items: a.diversity_items,
    };
    let mut reports = Vec::new();
    let mut configs = Vec::new();
    for p in &a.checkpoints {
        let g = load_checkpoint(p)?.generator;
        let name = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into());
        reports.push(evaluate_model(&name, &g, &dataset.triplets, &cfg)?);
        configs.push(g.config().clone());
    }
    out_dir(&a.out)?;
    write_eval_csv(BufWriter::new(File::create(a.out.join("eval.csv"))?), &reports)?;
    let config = json!({
        "models": configs,
        "diversity_k": a.diversity_k,
        "diversity_items": a.diversity_items,
        "dataset_ids": dataset.manifest.ids,
    });
    let mut m = RunManifest::new("eval", &config, json!({ "eval": a.seed, "dataset": dataset.manifest.seed }))?;
    m.add_output(&a.out, "eval.csv")?;
    m.write(&a.out)
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServeConfig {
        bind: a.bind,
        depth_checkpoint: a.s2d,
        image_checkpoint: a.sd2i,
        workers: a.workers,
        persist_dir: a.persist_dir,
    };
    let state = cfg.load_state()?;
    if let Some(dir) = &cfg.persist_dir {
        let config = json!({
            "bind": cfg.bind.to_string(),
            "s2d": cfg.depth_checkpoint,
            "sd2i": cfg.image_checkpoint,
            "workers": cfg.workers,
        });
        RunManifest::new("serve", &config, json!({}))?.write(dir)?;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(depthscape_service::serve(cfg.bind, state))?;
    Ok(())
}

fn analyze_depth(a: AnalyzeArgs) -> Result<()> {
    let dataset = load_dataset(&a.dataset)?;
    let dist = depth_distribution(
        dataset.triplets.iter().map(|t| (&t.seg, &t.depth)),
        &dataset.manifest.label_set,
        a.bins,
    )?;
    out_dir(&a.out)?;
    dist.write_csv(BufWriter::new(File::create(a.out.join("depth_distribution.csv"))?))?;
    std::fs::write(a.out.join("depth_distribution.png"), dist.plot_png(640, 360))?;
    let config = json!({ "bins": a.bins, "dataset_ids": dataset.manifest.ids });
    let mut m = RunManifest::new("analyze-depth", &config, json!({ "dataset": dataset.manifest.seed }))?;
    m.add_output(&a.out, "depth_distribution.csv")?;
    m.add_output(&a.out, "depth_distribution.png")?;
    m.write(&a.out)
}
