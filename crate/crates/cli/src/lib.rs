//! `fluentcap` command line: one pipeline stage per subcommand.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand};
use fluentcap::guidance::StrategyKind;
use fluentcap::metrics::CiderVariant;
use serde::Serialize;

mod commands;
pub mod config;

pub const MANIFEST: &str = "run.json";
pub const DATA_ENV: &str = "FLUENTCAP_DATA";

#[derive(Debug, Parser)]
#[command(
    name = "fluentcap",
    version,
    about = "Fluency-guided cross-lingual image captioning"
)]
pub struct Cli {
    /// key=value defaults for subcommand flags; flags given on the command line win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Root against which relative paths are resolved.
    #[arg(long, global = true, env = DATA_ENV, default_value = ".")]
    pub data_dir: PathBuf,

    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic bilingual caption corpus with image features.
    Synth(SynthArgs),
    /// Train the four-view fluency classifier on labeled target sentences.
    TrainClassifier(TrainClassifierArgs),
    /// Fill in fluency scores for every target sentence of a caption file.
    Score(ScoreArgs),
    /// Train the caption generator under one of the four strategies.
    TrainCaptioner(TrainCaptionerArgs),
    /// Beam-search captions for images.
    Caption(CaptionArgs),
    /// Reorder candidate captions per image by estimated fluency.
    Rerank(RerankArgs),
    /// BLEU-4, ROUGE-L and CIDEr of top-ranked candidates against references.
    Evaluate(EvaluateArgs),
    /// Finite-difference gradient check of both model families.
    Gradcheck(GradcheckArgs),
    /// Run the annotation service.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub images: usize,
    #[arg(long, default_value_t = 5)]
    pub captions_per_image: usize,
    /// Probability that a target caption is corrupted.
    #[arg(long, default_value_t = 0.4)]
    pub rho: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 24)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub captions: PathBuf,
    /// Image-level train/val/test lists; split by ratio 0.8/0.1/0.1 when absent.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Word-to-tag table for sentences stored without POS tags.
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCaptionerArgs {
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value = "without-fluency")]
    pub strategy: StrategyKind,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// Base SGD learning rate, decayed by 0.999 every 10 epochs.
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 32)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 32)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0.0)]
    pub dropout: f64,
    /// Rescale gradients whose global l2 norm exceeds this.
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub min_count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct CaptionArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long, default_value_t = 30)]
    pub max_len: usize,
    #[arg(long, default_value_t = 1)]
    pub topk: usize,
    /// Caption only the images of one split from this file.
    #[arg(long, requires = "split")]
    pub splits: Option<PathBuf>,
    #[arg(long, value_parser = ["train", "val", "test"])]
    pub split: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RerankArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub references: PathBuf,
    /// Per-image report; defaults to `<candidates>.eval.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = CiderArg::Plain)]
    pub cider: CiderArg,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiderArg {
    Plain,
    D,
}

impl From<CiderArg> for CiderVariant {
    fn from(c: CiderArg) -> Self {
        match c {
            CiderArg::Plain => CiderVariant::Plain,
            CiderArg::D => CiderVariant::D,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 4)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Sentences to grade (target records, paired with sources by sentence id).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub annotators: Vec<String>,
    /// Systems to rate, as `name=candidates.jsonl`; rank-1 captions are shown.
    #[arg(long, value_delimiter = ',')]
    pub systems: Vec<String>,
    /// `image_id`/`description` lines shown in place of pictures.
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub raters: Vec<String>,
    /// Event log and snapshot directory.
    #[arg(long)]
    pub state_dir: PathBuf,
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

pub(crate) struct Ctx {
    data_dir: PathBuf,
}

impl Ctx {
    pub(crate) fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }
}

/// Everything needed to rerun a stage: the subcommand, its resolved flags
/// and the tool version.
#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    command: &'a Command,
}

pub(crate) fn write_manifest(path: &Path, command: &Command) -> Result<()> {
    let m = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
    };
    let text = serde_json::to_string_pretty(&m)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// The `--config` value, found before full parsing so that the file can
/// supply required flags.
fn config_flag(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_str()?;
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(v));
        }
    }
    None
}

/// Parses `argv` (program name first), merging `--config` defaults, and runs
/// the chosen stage.
pub fn run<I, T>(argv: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match config_flag(&argv) {
        None => Cli::try_parse_from(&argv)?,
        Some(path) => {
            let entries = config::read(&path)?;
            Cli::try_parse_from(config::merge(&Cli::command(), &argv, &entries)?)?
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be positive");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let ctx = Ctx {
        data_dir: cli.data_dir.clone(),
    };
    commands::dispatch(&ctx, &cli.command)
}

pub(crate) type Entries = BTreeMap<String, String>;
