use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(
    name = "isoclip",
    version,
    about = "Training-free projector alignment for CLIP-style models"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GlobalArgs {
    /// Seed for fixture generation and gradient-check instances.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Similarity accumulation precision; also the dtype of written tensors.
    #[arg(long, global = true, value_enum, default_value_t = PrecisionArg::F32)]
    pub precision: PrecisionArg,
    /// Worker threads. 1 forces serial execution.
    #[arg(long, global = true, env = "ISOCLIP_THREADS")]
    pub threads: Option<usize>,
    /// Directory for outputs and the config echo. Relative --out paths resolve here.
    #[arg(long, global = true, default_value = ".")]
    pub output_dir: PathBuf,
}

impl GlobalArgs {
    pub fn out(&self, given: &Option<PathBuf>, default: &str) -> PathBuf {
        match given {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => self.output_dir.join(p),
            None => self.output_dir.join(default),
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(ValueEnum, Debug, Clone, Copy, Serialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum ModalityArg {
    Image,
    Text,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(untagged)]
enum Command {
    /// Singular values of the inter-modal operator as CSV.
    Spectrum(SpectrumArgs),
    /// Write band-aligned projectors.
    Align(AlignArgs),
    /// Replace a projector by its polar factor.
    Whiten(WhitenArgs),
    /// mAP and precision@K report.
    Retrieve(RetrieveArgs),
    /// Nearest-class-mean classification.
    Classify(ClassifyArgs),
    /// mAP over a (k_t, k_b) grid.
    Sweep(SweepArgs),
    /// Positive/negative similarity histograms and their IoU.
    Overlap(OverlapArgs),
    /// Finite-difference check of the similarity and loss gradients.
    Gradcheck(GradcheckArgs),
    /// Collapse an MLP head into one effective linear projector.
    Linearize(LinearizeArgs),
    /// Generate a planted-spectrum fixture.
    Synth(SynthArgs),
    /// Compare top, middle and bottom bands of equal width.
    Bands(BandsArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Spectrum(_) => "spectrum",
            Command::Align(_) => "align",
            Command::Whiten(_) => "whiten",
            Command::Retrieve(_) => "retrieve",
            Command::Classify(_) => "classify",
            Command::Sweep(_) => "sweep",
            Command::Overlap(_) => "overlap",
            Command::Gradcheck(_) => "gradcheck",
            Command::Linearize(_) => "linearize",
            Command::Synth(_) => "synth",
            Command::Bands(_) => "bands",
        }
    }
}

#[derive(Args, Debug, Serialize)]
pub struct PairArgs {
    /// Image projector, d × d_i.
    #[arg(long)]
    pub wi: PathBuf,
    /// Text projector, d × d_t.
    #[arg(long)]
    pub wt: PathBuf,
}

#[derive(Args, Debug, Serialize)]
pub struct SpectrumArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct AlignArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pair: PairArgs,
    /// Top singular directions to drop.
    #[arg(long)]
    pub kt: usize,
    /// Bottom singular directions to drop.
    #[arg(long)]
    pub kb: usize,
    /// Output directory for wi_hat.iso, wt_hat.iso and band.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct WhitenArgs {
    #[arg(long)]
    pub w: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ProjectorArgs {
    /// A projector tensor file, or an aligned directory written by `align`.
    #[arg(long)]
    pub projector: PathBuf,
    #[arg(long, value_enum, default_value_t = ModalityArg::Image)]
    pub modality: ModalityArg,
}

#[derive(Args, Debug, Serialize)]
pub struct RetrieveArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub projector: ProjectorArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated cutoffs.
    #[arg(long, value_delimiter = ',')]
    pub p_at_k: Vec<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct ClassifyArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub projector: ProjectorArgs,
    /// Manifest of the samples that define the class means.
    #[arg(long)]
    pub train: PathBuf,
    /// Manifest of the samples to classify.
    #[arg(long)]
    pub test: PathBuf,
    /// Also write the prototypes to this directory.
    #[arg(long)]
    pub prototypes: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ModalityArg::Image)]
    pub modality: ModalityArg,
    /// start:stop:step (stop exclusive) or a comma-separated list.
    #[arg(long)]
    pub kt: String,
    /// start:stop:step (stop exclusive) or a comma-separated list.
    #[arg(long)]
    pub kb: String,
    /// Grid CSV; the argmax summary goes next to it as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct OverlapArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub projector: ProjectorArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub bins: usize,
    /// Histogram CSV; the summary goes next to it as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    #[arg(long, default_value_t = 7)]
    pub negatives: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct LinearizeArgs {
    /// Directory with w1, b1, w2, b2, gamma, beta tensors and head.json.
    #[arg(long)]
    pub head: PathBuf,
    /// Effective projector `[A | c]`, d × (d_i + 1).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct SynthArgs {
    /// Override the per-entry feature noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Override the nuisance-to-signal energy ratio.
    #[arg(long)]
    pub nuisance: Option<f64>,
    /// Override samples per class.
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct BandsArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub pair: PairArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value_t = ModalityArg::Image)]
    pub modality: ModalityArg,
    #[arg(long)]
    pub width: usize,
    /// Extensions of the middle band by top directions, as start:stop:step or a list.
    #[arg(long)]
    pub extend: Option<String>,
    /// Band CSV; the summary goes next to it as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ConfigEcho<'a> {
    command: &'static str,
    version: &'static str,
    global: &'a GlobalArgs,
    args: &'a Command,
}

fn write_config(cli: &Cli) -> anyhow::Result<()> {
    let path = cli
        .global
        .output_dir
        .join(format!("{}.config.json", cli.command.name()));
    let echo = ConfigEcho {
        command: cli.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        global: &cli.global,
        args: &cli.command,
    };
    output::write_json(&path, &echo)
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Spectrum(a) => commands::spectrum(g, a),
        Command::Align(a) => commands::align(g, a),
        Command::Whiten(a) => commands::whiten(g, a),
        Command::Retrieve(a) => commands::retrieve(g, a),
        Command::Classify(a) => commands::classify(g, a),
        Command::Sweep(a) => commands::sweep(g, a),
        Command::Overlap(a) => commands::overlap(g, a),
        Command::Gradcheck(a) => commands::gradcheck(g, a),
        Command::Linearize(a) => commands::linearize(g, a),
        Command::Synth(a) => commands::synth(g, a),
        Command::Bands(a) => commands::bands(g, a),
    }
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if cli.global.threads == Some(0) {
        return Err(isoclip::Error::InvalidParameter("--threads must be at least 1".into()).into());
    }
    std::fs::create_dir_all(&cli.global.output_dir)
        .map_err(|e| anyhow::anyhow!("creating {}: {e}", cli.global.output_dir.display()))?;
    write_config(cli)?;
    with_pool(cli.global.threads, || dispatch(cli))
}

#[cfg(feature = "parallel")]
fn with_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> anyhow::Result<T> + Send,
) -> anyhow::Result<T> {
    match threads {
        Some(n) if n > 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()?
            .install(f),
        _ => f(),
    }
}

#[cfg(not(feature = "parallel"))]
fn with_pool<T>(
    _threads: Option<usize>,
    f: impl FnOnce() -> anyhow::Result<T>,
) -> anyhow::Result<T> {
    f()
}

fn category(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<isoclip::Error>())
        .map(|e| e.category())
        .unwrap_or_else(|| {
            if err
                .chain()
                .any(|e| e.is::<std::io::Error>() || e.is::<csv::Error>())
            {
                "io"
            } else {
                "internal"
            }
        })
}

/// The error chain joined by ": ", skipping causes a parent already quotes.
fn message(err: &anyhow::Error) -> String {
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !parts.last().is_some_and(|prev| prev.contains(&text)) {
            parts.push(text);
        }
    }
    parts.join(": ")
}

fn report(err: &anyhow::Error) {
    let msg = serde_json::json!({
        "category": category(err),
        "message": message(err),
    });
    eprintln!("{msg}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
