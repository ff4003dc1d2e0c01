use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Slimmable split-inference experiments: data, training, distillation,
/// codec tools and tradeoff sweeps.
#[derive(Debug, Parser)]
#[command(name = "slimsplit", version)]
struct Cli {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory receiving every output file.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(flatten)]
    keys: KeyFlags,
    #[command(subcommand)]
    command: Command,
}

/// Flags mirroring config keys.
#[derive(Debug, Args)]
struct KeyFlags {
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    train_size: Option<String>,
    #[arg(long, global = true)]
    val_size: Option<String>,
    /// Dataset file written by gen-data; generated on the fly when unset.
    #[arg(long, global = true)]
    data: Option<String>,
    #[arg(long, global = true)]
    teacher: Option<String>,
    #[arg(long, global = true)]
    student: Option<String>,
    /// bandwidth_only or full_config.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// sru_cru, last_layer_pair or decompressor_only.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Bottleneck channels at full width.
    #[arg(long, global = true)]
    bottleneck: Option<String>,
    /// Comma-separated width multipliers.
    #[arg(long, global = true)]
    widths: Option<String>,
    /// Comma-separated bit depths.
    #[arg(long, global = true)]
    bits: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<String>,
    #[arg(long, global = true)]
    batch_size: Option<String>,
    #[arg(long, global = true)]
    n_sandwich: Option<String>,
    #[arg(long, global = true)]
    lr: Option<String>,
    /// Halve the learning rate every this many epochs.
    #[arg(long, global = true)]
    lr_halving: Option<String>,
    #[arg(long, global = true)]
    momentum: Option<String>,
    #[arg(long, global = true)]
    post_bn_recalibrate: Option<String>,
    #[arg(long, global = true)]
    tap_weights: Option<String>,
    #[arg(long, global = true)]
    teacher_epochs: Option<String>,
    #[arg(long, global = true)]
    teacher_lr: Option<String>,
    #[arg(long, global = true)]
    pretrained_encoder: Option<String>,
    #[arg(long, global = true)]
    near_identity: Option<String>,
    #[arg(long, global = true)]
    allow_extrapolation: Option<String>,
    #[arg(long, global = true)]
    alpha: Option<String>,
    /// Validation image used by encode and simulate.
    #[arg(long, global = true)]
    index: Option<String>,
    /// Link bandwidth in bytes per second.
    #[arg(long, global = true)]
    bandwidth: Option<String>,
    /// Round-trip time in seconds.
    #[arg(long, global = true)]
    rtt: Option<String>,
    /// Client compute in MAC per second.
    #[arg(long, global = true)]
    compute_rate: Option<String>,
    #[arg(long, global = true)]
    max_bytes: Option<String>,
    #[arg(long, global = true)]
    max_mac: Option<String>,
}

impl KeyFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all = [
            ("seed", &self.seed),
            ("train_size", &self.train_size),
            ("val_size", &self.val_size),
            ("data", &self.data),
            ("teacher", &self.teacher),
            ("student", &self.student),
            ("mode", &self.mode),
            ("variant", &self.variant),
            ("bottleneck", &self.bottleneck),
            ("widths", &self.widths),
            ("bits", &self.bits),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("n_sandwich", &self.n_sandwich),
            ("lr", &self.lr),
            ("lr_halving", &self.lr_halving),
            ("momentum", &self.momentum),
            ("post_bn_recalibrate", &self.post_bn_recalibrate),
            ("tap_weights", &self.tap_weights),
            ("teacher_epochs", &self.teacher_epochs),
            ("teacher_lr", &self.teacher_lr),
            ("pretrained_encoder", &self.pretrained_encoder),
            ("near_identity", &self.near_identity),
            ("allow_extrapolation", &self.allow_extrapolation),
            ("alpha", &self.alpha),
            ("index", &self.index),
            ("bandwidth", &self.bandwidth),
            ("rtt", &self.rtt),
            ("compute_rate", &self.compute_rate),
            ("max_bytes", &self.max_bytes),
            ("max_mac", &self.max_mac),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic dataset to a file.
    GenData {
        #[arg(long, default_value = "dataset.ckpt")]
        output: PathBuf,
    },
    /// Train the teacher detector.
    TrainTeacher,
    /// Distill a slimmable split student from the teacher.
    Distill,
    /// Accuracy and feature error at every width, with and without quantization.
    Eval {
        #[arg(long, default_value = "eval.ndjson")]
        output: PathBuf,
        /// Also report ToyAP after re-estimating BN statistics at each width.
        #[arg(long)]
        recalibrated: bool,
    },
    /// Quantize a tensor file (or the student's bottleneck for one image)
    /// into a feature packet.
    Encode {
        /// Tensor file; without it the student encodes validation image `--index`.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value = "bottleneck.pkt")]
        output: PathBuf,
        /// Full-width channel count recorded in the header; defaults to the
        /// tensor's channel count.
        #[arg(long)]
        c_max: Option<usize>,
    },
    /// Decode a feature packet into a tensor file.
    Decode {
        #[arg(long, default_value = "bottleneck.pkt")]
        input: PathBuf,
        #[arg(long, default_value = "decoded.ckpt")]
        output: PathBuf,
    },
    /// Evaluate every (width, bits) pair and write the tradeoff CSV.
    Sweep {
        #[arg(long, default_value = "tradeoff.csv")]
        output: PathBuf,
    },
    /// One split inference over the network model; picks the width from
    /// the budget when one is set.
    Simulate {
        #[arg(long, default_value = "simulate.json")]
        output: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Eval { .. } => "eval",
            Command::Encode { .. } => "encode",
            Command::Decode { .. } => "decode",
            Command::Sweep { .. } => "sweep",
            Command::Simulate { .. } => "simulate",
        }
    }
}

const USAGE_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn resolve(cli: &Cli) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        cfg.apply_text(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    }
    for (k, v) in cli.keys.pairs() {
        cfg.set(k, v).map_err(|e| format!("--{}: {e}", k.replace('_', "-")))?;
    }
    Ok(cfg)
}

/// The error chain on one line, skipping causes their parent already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !prev.contains(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(USAGE_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE_ERROR);
        }
    };
    match commands::run(&cli.command, &cfg, &cli.out_dir) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            if e.is::<commands::UsageError>() {
                ExitCode::from(USAGE_ERROR)
            } else {
                ExitCode::from(RUNTIME_ERROR)
            }
        }
    }
}
