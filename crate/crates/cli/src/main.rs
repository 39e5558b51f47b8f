//! `dpn`: train, run and evaluate the detail-preserving network.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "dpn", version, about = "Detail-preserving network for retinal vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

/// Settings shared by every command. Each overrides the key of the same
/// name in the `--config` file.
#[derive(Args, Debug, Default)]
struct Opts {
    /// Line-based `key = value` settings file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// drive, chase or hrf
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// CHASE_DB1 partition: 20/8 or 14/14
    #[arg(long, global = true)]
    chase_split: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Training iterations (default: the dataset's budget)
    #[arg(long, global = true)]
    iters: Option<usize>,
    /// Training crop side (default: the dataset's)
    #[arg(long, global = true)]
    crop: Option<usize>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint_every: Option<usize>,
    /// Continue training from the checkpoint
    #[arg(long, global = true)]
    resume: bool,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Binarization threshold (default: pooled optimum when evaluating, 0.5 when predicting)
    #[arg(long, global = true)]
    threshold: Option<f32>,
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// pooled or per-image
    #[arg(long, global = true)]
    eval_mode: Option<String>,
    /// Train with the final head only
    #[arg(long, global = true)]
    no_aux: bool,
    /// Blocks followed by an auxiliary head, e.g. 2,4,6
    #[arg(long, global = true)]
    aux_positions: Option<String>,
    /// Active branches, e.g. os1,os2,os4
    #[arg(long, global = true)]
    branches: Option<String>,
    /// Branch widths C0,C1,C2
    #[arg(long, global = true)]
    filters: Option<String>,
    #[arg(long, global = true)]
    stem: Option<usize>,
    #[arg(long, global = true)]
    blocks: Option<usize>,
    /// Disable random horizontal mirroring of training crops
    #[arg(long, global = true)]
    no_mirror: bool,
    /// Train on the originals only
    #[arg(long, global = true)]
    no_augment: bool,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    weight_decay: Option<f64>,
}

impl Opts {
    fn pairs(&self) -> Vec<(&'static str, String)> {
        let mut v = Vec::new();
        let mut put = |k: &'static str, val: Option<String>| {
            if let Some(val) = val {
                v.push((k, val));
            }
        };
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        put("dataset", self.dataset.clone());
        put("data_root", path(&self.data_root));
        put("chase_split", self.chase_split.clone());
        put("seed", self.seed.map(|s| s.to_string()));
        put("iters", self.iters.map(|s| s.to_string()));
        put("crop", self.crop.map(|s| s.to_string()));
        put("checkpoint", path(&self.checkpoint));
        put("checkpoint_every", self.checkpoint_every.map(|s| s.to_string()));
        put("resume", self.resume.then(|| "true".into()));
        put("out", path(&self.out));
        put("threshold", self.threshold.map(|s| s.to_string()));
        put("threads", self.threads.map(|s| s.to_string()));
        put("eval_mode", self.eval_mode.clone());
        put("aux", self.no_aux.then(|| "false".into()));
        put("aux_positions", self.aux_positions.clone());
        put("branches", self.branches.clone());
        put("filters", self.filters.clone());
        put("stem", self.stem.map(|s| s.to_string()));
        put("blocks", self.blocks.map(|s| s.to_string()));
        put("mirror", self.no_mirror.then(|| "false".into()));
        put("augment", self.no_augment.then(|| "false".into()));
        put("lr", self.lr.map(|s| s.to_string()));
        put("weight_decay", self.weight_decay.map(|s| s.to_string()));
        v
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        if let Some(p) = &self.config {
            c.apply_file(p)?;
        }
        for (k, v) in self.pairs() {
            c.set(k, &v).with_context(|| format!("--{}", k.replace('_', "-")))?;
        }
        Ok(c)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch (or resume) and write checkpoints and a loss log
    Train,
    /// Segment images (files or directories) with a trained checkpoint
    Predict { images: Vec<PathBuf> },
    /// Score a checkpoint, or saved `<id>_prob.png` maps, on the test split
    Evaluate {
        /// Directory of probability maps to score instead of running the model
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Write the 11x augmented training set to disk
    Augment,
    /// Print the per-block parameter table
    CountParams,
    /// Finite-difference check of every kernel and of the whole network
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Side of the square network input
        #[arg(long, default_value_t = 16)]
        size: usize,
        /// Coordinates sampled per parameter tensor
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Disk-to-disk inference timing over the test images
    Benchmark {
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 20)]
        runs: usize,
    },
    /// Write a synthetic dataset in the expected layout
    Synth {
        /// Image size as HEIGHTxWIDTH (default: the dataset's native size)
        #[arg(long)]
        size: Option<String>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = cli.opts.resolve()?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build_global()
        .context("starting the worker pool")?;
    for line in cfg.to_string().lines() {
        log::info!("config: {line}");
    }
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Predict { images } => commands::predict(&cfg, &images),
        Command::Evaluate { predictions } => commands::evaluate(&cfg, predictions.as_deref()),
        Command::Augment => commands::augment(&cfg),
        Command::CountParams => commands::count_params(&cfg),
        Command::Gradcheck { seeds, size, samples } => commands::gradcheck(&cfg, seeds, size, samples),
        Command::Benchmark { images, runs } => commands::benchmark(&cfg, &images, runs),
        Command::Synth { size } => commands::synth(&cfg, size.as_deref()),
    }
}

/// Keeps freed memory in the heap. Every layer allocates tens of megabytes,
/// and by default glibc maps and unmaps such blocks on each call, paying a
/// page fault per 4 KiB every time.
fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables and is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

fn main() -> ExitCode {
    retain_freed_memory();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
