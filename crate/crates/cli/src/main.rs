//! `boxseg` command line.
//!
//! ```text
//! boxseg generate   --manifest M --out O      # O/masks
//! boxseg partition  --out O                   # O/partition/{valid,invalid,partition.json}
//! boxseg stats      --out O                   # O/stats/{stats.json,stats_histogram.csv}
//! boxseg fuse       --manifest M --out O      # O/small_branch, O/fused
//! boxseg eval       --manifest M --out O      # O/eval/eval.json
//! boxseg efpn-check --out O                   # O/efpn/graph.json
//! boxseg render     --manifest M --out O      # O/overlays
//! ```

mod commands;
mod logging;
mod staging;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use boxseg::grabcut::GrabCutConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "boxseg", version, about = "Box-supervised pseudo-masks, size routing and mask metrics")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Corpus manifest (JSON).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output root; each subcommand writes its own subdirectory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// GrabCut smoothness weight.
    #[arg(long, global = true, default_value_t = 50.0)]
    gamma: f64,
    /// Mixture components per side.
    #[arg(long = "gmm-k", global = true, default_value_t = 5)]
    gmm_k: usize,
    #[arg(long = "max-iters", global = true, default_value_t = 5)]
    max_iters: usize,
    /// Box-IoU threshold for a valid pseudo-mask.
    #[arg(long = "validity-iou", global = true, default_value_t = boxseg::pipeline::DEFAULT_VALIDITY_IOU)]
    validity_iou: f64,
    /// Box area below which an instance is small.
    #[arg(long = "size-area", global = true, default_value_t = boxseg::pipeline::DEFAULT_SIZE_AREA)]
    size_area: u64,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// GrabCut pseudo-masks for every annotated box.
    Generate,
    /// Split generated masks into valid and invalid groups.
    Partition {
        /// Defaults to OUT/masks.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Invalid-mask statistics and the size histogram.
    Stats {
        /// Defaults to OUT/partition.
        #[arg(long)]
        partition: Option<PathBuf>,
    },
    /// Route masks by size: large objects from one branch, small from the other.
    Fuse {
        /// Large-branch masks; defaults to OUT/partition/valid.
        #[arg(long)]
        large: Option<PathBuf>,
        /// Small-branch masks; when omitted the small branch runs on the
        /// manifest detections and writes OUT/small_branch.
        #[arg(long)]
        small: Option<PathBuf>,
    },
    /// mAP at mask IoU 0.5 and 0.75, and ABO, against ground-truth masks.
    Eval {
        /// Defaults to OUT/fused.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
    /// Build the Enhanced-FPN graph, infer shapes and run a random-weight forward.
    EfpnCheck {
        /// Image side for the shape report.
        #[arg(long, default_value_t = 256)]
        side: usize,
        /// Image side for the forward pass.
        #[arg(long = "forward-side", default_value_t = 64)]
        forward_side: usize,
        #[arg(long = "backbone-channels", value_delimiter = ',', default_value = "256,512,1024,2048")]
        backbone_channels: Vec<usize>,
        #[arg(long = "out-channels", default_value_t = 256)]
        out_channels: usize,
        /// Flat little-endian f32 weight file instead of random weights.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Overlay masks on their images.
    Render {
        /// Defaults to OUT/fused.
        #[arg(long)]
        pred: Option<PathBuf>,
    },
}

impl GlobalArgs {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.validity_iou) {
            bail!("--validity-iou must lie in [0, 1], got {}", self.validity_iou);
        }
        if self.size_area == 0 {
            bail!("--size-area must be >= 1");
        }
        if self.workers == Some(0) {
            bail!("--workers must be >= 1");
        }
        self.grabcut().validate()?;
        Ok(())
    }

    pub fn grabcut(&self) -> GrabCutConfig {
        GrabCutConfig {
            k: self.gmm_k,
            gamma: self.gamma,
            max_iters: self.max_iters,
            seed: self.seed,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn manifest(&self) -> Result<&PathBuf> {
        match &self.manifest {
            Some(m) => Ok(m),
            None => bail!("--manifest is required for this subcommand"),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    cli.global.validate()?;
    let g = &cli.global;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(g.workers()).build()?;
    pool.install(|| match cli.command {
        Command::Generate => commands::generate(g),
        Command::Partition { masks } => commands::partition(g, masks),
        Command::Stats { partition } => commands::stats(g, partition),
        Command::Fuse { large, small } => commands::fuse(g, large, small),
        Command::Eval { pred } => commands::eval(g, pred),
        Command::EfpnCheck {
            side,
            forward_side,
            backbone_channels,
            out_channels,
            weights,
        } => commands::efpn_check(g, side, forward_side, &backbone_channels, out_channels, weights),
        Command::Render { pred } => commands::render(g, pred),
    })
}

fn main() -> ExitCode {
    logging::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
