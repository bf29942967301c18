//! `wastegan` command line: the four pipeline phases plus grasp tooling.
//!
//! Every subcommand that reads a configuration writes under
//! `<runs>/<config hash prefix>/`. Errors print one line
//! `error kind=<kind> msg=<text>` on stderr and exit with 2 (missing input),
//! 3 (validation failure) or 4 (internal invariant breach).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use wastegan::grasp::ScoreKind;
use wastegan::Error;

#[derive(Parser, Debug)]
#[command(name = "wastegan", version, about = "GAN data augmentation, segmentation sweeps and grasp-point inference")]
pub struct Cli {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root of the run directories.
    #[arg(long, global = true, default_value = "runs")]
    pub runs: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic scene corpus into <run>/corpus.
    GenData,
    /// Train the GAN on the corpus training split; checkpoints in <run>/gan.
    TrainGan(TrainGanArgs),
    /// Draw samples from a trained generator into <run>/samples.
    Sample(SampleArgs),
    /// Train one segmenter on real plus ratio x synthetic data and score it.
    TrainSeg(TrainSegArgs),
    /// Run the augmentation-ratio sweep; CSV and summary in <run>/sweep-<hash>.
    Sweep(SweepArgs),
    /// Rank suction grasp points on a mask or logits file.
    Grasp(GraspArgs),
    /// Tabulate sweep results found under a directory.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct TrainGanArgs {
    /// Continue from <run>/gan/latest.wtk.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// GAN checkpoint; defaults to <run>/gan/latest.wtk.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainSegArgs {
    /// Synthetic samples per real training image.
    #[arg(long, default_value_t = 0)]
    pub ratio: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// GAN checkpoint; defaults to <run>/gan/latest.wtk.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// Comma-separated augmentation ratios; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<usize>>,
    /// Comma-separated segmenter seeds; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Parallel sweep cells; results do not depend on it.
    #[arg(long, env = "WASTEGAN_THREADS", default_value_t = 1)]
    pub jobs: usize,
    /// GAN checkpoint; defaults to <run>/gan/latest.wtk.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScoreArg {
    Logit,
    Probability,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Logit => ScoreKind::Logit,
            ScoreArg::Probability => ScoreKind::Probability,
        }
    }
}

#[derive(Args, Debug)]
pub struct GraspArgs {
    /// 8-bit index raster (PNG), used as one-hot logits.
    #[arg(long, required_unless_present = "logits", conflicts_with = "logits")]
    pub mask: Option<PathBuf>,
    /// WTK1 file holding one [C, H, W] score tensor.
    #[arg(long)]
    pub logits: Option<PathBuf>,
    /// Contaminant class to pick, 1..C-1.
    #[arg(long)]
    pub class: u8,
    #[arg(long, default_value_t = 2)]
    pub radius_px: usize,
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "logit")]
    pub score: ScoreArg,
    /// Pinhole intrinsics `fx,fy,cx,cy` in pixels; needs --depth.
    #[arg(long, value_parser = parse_intrinsics, requires = "depth")]
    pub intrinsics: Option<[f64; 4]>,
    /// WTK1 file holding one [H, W] depth tensor in meters; needs --intrinsics.
    #[arg(long, requires = "intrinsics")]
    pub depth: Option<PathBuf>,
}

fn parse_intrinsics(s: &str) -> Result<[f64; 4], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|v: Vec<f64>| format!("expected fx,fy,cx,cy, got {} values", v.len()))
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory searched recursively for sweep outputs; defaults to the run directory.
    #[arg(long)]
    pub dir: Option<PathBuf>,
}

fn kind(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Io { .. } => ("missing_input", 2),
        Error::Config(_) => ("config", 3),
        Error::Format(_) => ("format", 3),
        Error::Dimension { .. } => ("dimension", 3),
        Error::ProjectionFailed { .. } => ("projection_failed", 3),
        Error::Contract(_) => ("contract", 4),
        Error::NonFinite { .. } => ("non_finite", 4),
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("bad arguments");
            eprintln!("error kind=usage msg={}", one_line(first.trim_start_matches("error:")));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (k, code) = kind(&e);
            eprintln!("error kind={k} msg={}", one_line(&e.to_string()));
            ExitCode::from(code)
        }
    }
}
