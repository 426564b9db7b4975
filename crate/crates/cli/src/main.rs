//! `art`: layout, layered-image, attention-cost and toy-training tools.
//!
//! Exit codes: 0 ok, 1 validation or usage error, 2 I/O error, 3 numeric
//! failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use art_core::attention::SchemeKind;
use art_core::planner::Template;

#[derive(Parser)]
#[command(name = "art", version, about = "Layered transparent image toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check layouts and dump token position ids
    #[command(subcommand)]
    Layout(LayoutCmd),
    /// Plan an anonymous region layout (JSON on stdout)
    Plan(PlanArgs),
    /// Composite a layered image described by a manifest into one PNG
    Composite(CompositeArgs),
    /// Gray-background transparency codec
    #[command(subcommand)]
    Transparency(TransparencyCmd),
    /// Rotary embedding tables
    #[command(subcommand)]
    Rope(RopeCmd),
    /// Attention cost model
    #[command(subcommand)]
    Cost(CostCmd),
    /// Token sequence dumps
    #[command(subcommand)]
    Latent(LatentCmd),
    /// Toy decoder training
    #[command(subcommand)]
    Train(TrainCmd),
    /// Reconstruction metrics
    #[command(subcommand)]
    Metrics(MetricsCmd),
}

#[derive(Args)]
struct LayoutInput {
    /// Layout JSON file, or `-` for stdin
    #[arg(long)]
    layout: PathBuf,
    /// Canvas size
    #[arg(long, value_name = "WxH", value_parser = commands::parse_dims)]
    canvas: (usize, usize),
}

#[derive(Subcommand)]
enum LayoutCmd {
    /// Print `ok` or one line per violation (exit 1 on violations)
    Validate(LayoutInput),
    /// Print token ids as CSV `token,layer,row,col`
    Ids {
        #[command(flatten)]
        input: LayoutInput,
        /// Prepend a full-canvas merged reference stream
        #[arg(long)]
        reference: bool,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_name = "WxH", value_parser = commands::parse_dims, default_value = "1024x1024")]
    canvas: (usize, usize),
    /// Number of foreground boxes (drawn from 5..=15 when omitted)
    #[arg(long)]
    elements: Option<usize>,
    #[arg(long, env = "ART_SEED", default_value_t = 0)]
    seed: u64,
    /// poster, banner, scatter or grid
    #[arg(long, default_value = "poster")]
    template: Template,
    /// Cap on accent-box overlap as a fraction of the smaller box
    #[arg(long)]
    max_overlap: Option<f64>,
    /// Single-line JSON
    #[arg(long)]
    compact: bool,
}

#[derive(Args)]
struct CompositeArgs {
    /// Manifest JSON pairing layer PNGs with a layout
    #[arg(long)]
    manifest: PathBuf,
    /// Output RGB PNG
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum TransparencyCmd {
    /// RGBA PNG to gray-background RGB PNG
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Gray-background RGB PNG plus alpha source to RGBA PNG
    Decode {
        #[arg(long)]
        gray: PathBuf,
        /// PNG whose last channel is the alpha
        #[arg(long)]
        alpha: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Coefficient threshold below which colour decodes to 0
        #[arg(long, default_value_t = art_core::transparency::DEFAULT_DECODE_EPS)]
        eps: f64,
    },
}

#[derive(Subcommand)]
enum RopeCmd {
    /// Cos/sin tables as CSV `token,layer,row,col,channel,cos,sin`
    Dump {
        /// Token id `layer,row,col` (repeatable)
        #[arg(long = "id", value_parser = commands::parse_id)]
        ids: Vec<[i64; 3]>,
        /// Take ids from a layout instead
        #[arg(long, requires = "canvas")]
        layout: Option<PathBuf>,
        #[arg(long, value_name = "WxH", value_parser = commands::parse_dims)]
        canvas: Option<(usize, usize)>,
        /// Channels per axis
        #[arg(long, value_parser = commands::parse_axes, default_value = "4,6,6")]
        axes: [usize; 3],
        #[arg(long, default_value_t = art_core::rope::DEFAULT_THETA)]
        theta: f64,
    },
}

#[derive(Subcommand)]
enum CostCmd {
    /// CSV `k,tokens,pairs,est_memory_bytes` over a range of region counts
    Sweep {
        /// regional, full or spatial-temporal
        #[arg(long, default_value = "regional")]
        scheme: SchemeKind,
        /// `A..B` (inclusive), `A..B:STEP` or a comma list
        #[arg(long, default_value = "10..50", value_parser = commands::parse_k_range)]
        k: commands::KValues,
        #[arg(long, value_name = "WxH", value_parser = commands::parse_dims, default_value = "64x64")]
        region: (usize, usize),
        #[arg(long, value_name = "WxH", value_parser = commands::parse_dims, default_value = "1024x1024")]
        canvas: (usize, usize),
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Context (text) tokens joined to every attention call
        #[arg(long, default_value_t = 0)]
        context: usize,
        /// Worker threads; output order does not depend on it
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Subcommand)]
enum LatentCmd {
    /// Encode a manifest with the toy encoder and write the binary dump
    Dump {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise a binary dump
    Info {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Overfit the toy decoder on synthetic layered images
    Toy(TrainArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Foreground layers per sample
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Square canvas side in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, env = "ART_SEED", default_value_t = 0)]
    seed: u64,
    /// Also supervise the merged stream
    #[arg(long)]
    condition_merged: bool,
    /// Also supervise the background stream
    #[arg(long)]
    condition_background: bool,
    /// Loss trace CSV `step,l1,wall_ms`
    #[arg(long, default_value = "trace.csv")]
    trace: PathBuf,
    /// Checkpoint JSON index (payload written next to it as .bin)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// PSNR/SSIM of a reference vs recomposited image plus per-layer PSNR
    Compare {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        composed: PathBuf,
        /// Predicted RGBA layer (repeatable, paired with --gt in order)
        #[arg(long)]
        pred: Vec<PathBuf>,
        /// Ground-truth RGBA layer (repeatable)
        #[arg(long)]
        gt: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(command: Command) -> Result<(), commands::CliError> {
    use commands as c;
    match command {
        Command::Layout(LayoutCmd::Validate(i)) => c::layout_validate(&i.layout, i.canvas),
        Command::Layout(LayoutCmd::Ids { input, reference }) => c::layout_ids(&input.layout, input.canvas, reference),
        Command::Plan(a) => c::plan(a.canvas, a.elements, a.seed, a.template, a.max_overlap, a.compact),
        Command::Composite(a) => c::composite(&a.manifest, &a.out),
        Command::Transparency(TransparencyCmd::Encode { input, out }) => c::transparency_encode(&input, &out),
        Command::Transparency(TransparencyCmd::Decode { gray, alpha, out, eps }) => {
            c::transparency_decode(&gray, &alpha, &out, eps)
        }
        Command::Rope(RopeCmd::Dump { ids, layout, canvas, axes, theta }) => {
            c::rope_dump(ids, layout.as_deref().zip(canvas), axes, theta)
        }
        Command::Cost(CostCmd::Sweep { scheme, k, region, canvas, heads, context, jobs }) => {
            c::cost_sweep(scheme, &k.0, region, canvas, heads, context, jobs)
        }
        Command::Latent(LatentCmd::Dump { manifest, out }) => c::latent_dump(&manifest, &out),
        Command::Latent(LatentCmd::Info { input }) => c::latent_info(&input),
        Command::Train(TrainCmd::Toy(a)) => c::train_toy(c::TrainOptions {
            samples: a.samples,
            layers: a.layers,
            size: a.size,
            steps: a.steps,
            lr: a.lr,
            seed: a.seed,
            condition_merged: a.condition_merged,
            condition_background: a.condition_background,
            trace: a.trace,
            checkpoint: a.checkpoint,
        }),
        Command::Metrics(MetricsCmd::Compare { reference, composed, pred, gt, json }) => {
            c::metrics_compare(&reference, &composed, &pred, &gt, json)
        }
    }
}
