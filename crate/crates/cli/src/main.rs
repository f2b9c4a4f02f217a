//! `tritransport` command-line tool.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numerical.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use error::{CliError, Kind};

#[derive(Parser, Debug)]
#[command(
    name = "tritransport",
    version,
    about = "Triangle-token neural renderer, path tracer and trainer"
)]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample random scenes and trace their reference images.
    GenData(GenDataArgs),
    /// Path-trace one view of a scene to PFM.
    Trace(TraceArgs),
    /// Train a model on a dataset manifest.
    Train(TrainArgs),
    /// Render a scene with a trained checkpoint.
    Render(RenderArgs),
    /// Per-record PSNR and L1 report against reference images.
    Eval(EvalArgs),
    /// Export the cross-attention one ray bundle puts on every triangle.
    InspectAttn(InspectArgs),
    /// Weighted per-channel sum of single-light renders.
    Compose(ComposeArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Generator configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per pixel for the reference images.
    #[arg(long, default_value_t = 1024)]
    pub spp: u32,
    #[arg(long, env = "RF_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TraceArgs {
    pub scene: PathBuf,
    #[arg(long, default_value_t = 256)]
    pub spp: u32,
    #[arg(long, env = "RF_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Camera index within the scene file.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Maximum path length.
    #[arg(long)]
    pub max_depth: Option<u32>,
    /// Also write the per-pixel variance of the mean as PFM.
    #[arg(long)]
    pub variance: Option<PathBuf>,
    #[arg(long)]
    pub png: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Preset name (`desk`, `large`) or model configuration JSON.
    #[arg(long, default_value = "desk")]
    pub model: String,
    /// Training configuration JSON; defaults apply to missing fields.
    #[arg(long = "train")]
    pub train_config: Option<PathBuf>,
    /// Checkpoint to write (and to update periodically).
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Continue from this checkpoint, appending to the metrics file.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this step as if interrupted.
    #[arg(long)]
    pub stop_after: Option<u64>,
    /// Overrides the seed of the training configuration.
    #[arg(long, env = "RF_SEED")]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub png: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    /// Expected model configuration; a checkpoint that differs is rejected.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Manifest of scenes and reference images.
    pub sceneset: PathBuf,
    /// Render predictions with this checkpoint.
    #[arg(
        long,
        conflicts_with = "pred_manifest",
        required_unless_present = "pred_manifest"
    )]
    pub ckpt: Option<PathBuf>,
    /// Manifest whose images are the predictions, record for record.
    #[arg(long)]
    pub pred_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Bundle row and column, e.g. `1,2`.
    #[arg(long)]
    pub bundle: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub view: usize,
}

#[derive(Args, Debug)]
pub struct ComposeArgs {
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Per-image RGB weight `r,g,b`, repeated once per image; unit weights
    /// when omitted.
    #[arg(long = "weight")]
    pub weights: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Trace(a) => commands::trace(&a),
        Command::Train(a) => commands::train(&a),
        Command::Render(a) => commands::render(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::InspectAttn(a) => commands::inspect_attn(&a),
        Command::Compose(a) => commands::compose(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Kind::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
