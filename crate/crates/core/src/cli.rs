//! Command-line front end. Every subcommand maps onto one library operation;
//! outputs land in `--out` next to a `manifest.json` describing the run.

use std::ffi::OsString;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgAction, ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{self, AnalysisError};
use crate::data::{self, DataError, Dataset};
use crate::decoder::{DecoderConfig, DecoderVariant};
use crate::masking::{MaskError, MaskPlan};
use crate::model::{MaskedAutoencoder, ModelConfig};
use crate::objective::{MetricsLog, OptimConfig};
use crate::params::ParamStore;
use crate::tensor::{load_checkpoint, save_checkpoint, Tensor, TensorError};
use crate::train::{self, PretrainConfig, ProbeConfig, ProbeMode, TrainError, TrainEvent};
use crate::objective::patch_normalize;
use crate::vit::{gather_rows, patchify, unpatchify, EncoderConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MaskError> for CliError {
    fn from(e: MaskError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(format!("manifest: {e}"))
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            e if e.is_numeric() => CliError::Numeric(e.to_string()),
            TrainError::Config(_) | TrainError::Mask(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Unsupported(_) | AnalysisError::Mask(_) => CliError::Usage(e.to_string()),
            e => CliError::Data(e.to_string()),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

/// Fully resolved configuration of a run, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub crate_version: String,
    pub threads: Option<usize>,
    pub seed: u64,
    pub dataset: Option<DatasetRef>,
    pub model: ModelConfig,
    pub pretrain: Option<PretrainConfig>,
    pub probe: Option<ProbeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub sha256: String,
    pub count: usize,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "crossmae", version, about = "Masked-image-modeling lab: cross-attention decoding, partial reconstruction and decoder analysis")]
pub struct Cli {
    /// Worker threads; 1 gives bit-exact reproducibility
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic shape dataset
    GenData(GenDataArgs),
    /// Masked-image pretraining
    Pretrain(PretrainArgs),
    /// Linear probe or full finetune of a pretrained encoder
    Finetune(FinetuneArgs),
    /// Export reconstructions with the visible patches overlaid
    Reconstruct(ReconstructArgs),
    /// Attention-group statistics of a self-attention decoder
    AnalyzeAttn(AnalyzeAttnArgs),
    /// Per-block reconstruction decomposition and inter-block weight map
    Decompose(DecomposeArgs),
    /// Analytical decoder FLOPS / memory report
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub count: usize,
    /// Image height and width in pixels
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Store shape-class labels
    #[arg(long)]
    pub labeled: bool,
    #[arg(long, env = "CMAE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 4)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 64)]
    pub enc_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub enc_depth: usize,
    #[arg(long, default_value_t = 4)]
    pub enc_heads: usize,
    /// self | cross | cross_self
    #[arg(long, visible_alias = "variant", default_value = "cross")]
    pub decoder_variant: DecoderVariant,
    #[arg(long, default_value_t = 32)]
    pub decoder_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub decoder_depth: usize,
    #[arg(long, default_value_t = 4)]
    pub decoder_heads: usize,
    /// Encoder maps fused per decoder block [default: all, i.e. encoder depth + 1]
    #[arg(long)]
    pub fused_maps: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    pub mlp_ratio: f64,
    /// Layer-norm the last encoder map before decoding [default: on for self, off for cross]
    #[arg(long)]
    pub encoder_output_norm: Option<bool>,
    /// Regress per-patch normalized pixels
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub norm_pix: bool,
}

impl ModelArgs {
    pub fn config(&self) -> ModelConfig {
        let encoder = EncoderConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            dim: self.enc_dim,
            depth: self.enc_depth,
            heads: self.enc_heads,
            mlp_ratio: self.mlp_ratio,
        };
        let decoder = DecoderConfig {
            variant: self.decoder_variant,
            dim: self.decoder_dim,
            depth: self.decoder_depth,
            heads: self.decoder_heads,
            mlp_ratio: self.mlp_ratio,
            fused_maps: self.fused_maps.unwrap_or(self.enc_depth + 1),
        };
        let mut cfg = ModelConfig::new(encoder, decoder);
        if let Some(n) = self.encoder_output_norm {
            cfg.encoder_output_norm = n;
        }
        cfg.norm_pix = self.norm_pix;
        cfg
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Dataset file (optional when the manifest names one)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest of an earlier run; explicit flags still take precedence
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 0.75)]
    pub pred_ratio: f64,
    /// Base learning rate; the applied peak is pred_ratio * base_lr * batch / (256 * mask_ratio)
    #[arg(long, default_value_t = 1.5e-4)]
    pub base_lr: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.9, 0.95])]
    pub betas: Vec<f64>,
    #[arg(long, default_value_t = 0.05)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step
    #[arg(long, default_value_t = 1)]
    pub accum_steps: usize,
    #[arg(long, default_value_t = 30.0)]
    pub epochs: f64,
    #[arg(long, default_value_t = 1.0)]
    pub warmup_epochs: f64,
    /// Stop after this many optimizer steps
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub flip: bool,
    #[arg(long, default_value_t = 0)]
    pub crop_pad: usize,
    #[arg(long, env = "CMAE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    /// Run directory (or checkpoint file) of a pretraining run
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Without a checkpoint, use a randomly initialized model built from these flags
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Labeled training dataset
    #[arg(long)]
    pub data: PathBuf,
    /// Labeled test dataset [default: last 20% of --data]
    #[arg(long)]
    pub test_data: Option<PathBuf>,
    /// linear_probe | full
    #[arg(long, default_value = "linear_probe")]
    pub mode: ProbeMode,
    /// [default: 30 for linear_probe, 10 for full]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [default: 1e-2 for linear_probe, 1e-3 for full]
    #[arg(long)]
    pub lr: Option<f64>,
    /// [default: 128 for linear_probe, 64 for full]
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "CMAE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// First image index
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 0.75)]
    pub pred_ratio: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "CMAE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnalyzeAttnArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of images to average over
    #[arg(long, default_value_t = 64)]
    pub images: usize,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    /// Write the report as JSON here
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "CMAE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, env = "CMAE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, default_value_t = 16)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    #[arg(long, default_value_t = 768)]
    pub enc_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub enc_depth: usize,
    #[arg(long, default_value_t = 12)]
    pub enc_heads: usize,
    /// self | cross | cross_self
    #[arg(long, visible_alias = "decoder-variant", default_value = "cross")]
    pub variant: DecoderVariant,
    #[arg(long, default_value_t = 512)]
    pub decoder_dim: usize,
    #[arg(long, default_value_t = 12)]
    pub decoder_depth: usize,
    #[arg(long, default_value_t = 16)]
    pub decoder_heads: usize,
    /// [default: all, i.e. encoder depth + 1]
    #[arg(long)]
    pub fused_maps: Option<usize>,
    #[arg(long, default_value_t = 4.0)]
    pub mlp_ratio: f64,
    #[arg(long, default_value_t = 0.75)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = 0.75)]
    pub pred_ratio: f64,
    /// Depth of the self-attention baseline the report compares against
    #[arg(long, default_value_t = 8)]
    pub baseline_depth: usize,
    /// Emit JSON instead of the text report
    #[arg(long)]
    pub json: bool,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run<I, A>(argv: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let result = with_threads(cli.threads, || dispatch(&cli, &matches));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> CliResult<R> + Send) -> CliResult<R> {
    match threads {
        None => f(),
        Some(0) => Err(CliError::Usage("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?
            .install(f),
    }
}

fn dispatch(cli: &Cli, matches: &ArgMatches) -> CliResult<()> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand required");
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a, sub, cli.threads),
        Command::Finetune(a) => finetune(a, cli.threads),
        Command::Reconstruct(a) => reconstruct(a),
        Command::AnalyzeAttn(a) => analyze_attn(a),
        Command::Decompose(a) => decompose(a),
        Command::Flops(a) => flops(a),
    }
}

fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let ds = data::gen_synthetic(a.count, a.size, a.size, a.channels, a.seed, a.labeled);
    ds.save(&a.out)?;
    println!("wrote {} images ({}x{}x{}) to {} sha256={}", ds.len(), a.size, a.size, a.channels, a.out.display(), ds.digest());
    Ok(())
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Resolves the pretraining configuration: explicit flags, then the
/// manifest, then defaults.
pub fn resolve_pretrain(a: &PretrainArgs, m: &ArgMatches) -> CliResult<(PretrainConfig, Option<PathBuf>)> {
    if a.betas.len() != 2 {
        return Err(CliError::Usage(format!("--betas takes two values, got {}", a.betas.len())));
    }
    let from_flags = PretrainConfig {
        model: a.model.config(),
        optim: OptimConfig {
            base_lr: a.base_lr,
            batch_size: a.batch_size,
            beta1: a.betas[0],
            beta2: a.betas[1],
            weight_decay: a.weight_decay,
            eps: 1e-8,
            warmup_epochs: a.warmup_epochs,
            total_epochs: a.epochs,
        },
        mask_ratio: a.mask_ratio,
        prediction_ratio: a.pred_ratio,
        accum_steps: a.accum_steps,
        seed: a.seed,
        augment_flip: a.flip,
        augment_crop_pad: a.crop_pad,
        max_steps: a.max_steps,
    };
    let Some(path) = &a.manifest else {
        return Ok((from_flags, a.data.clone()));
    };
    let manifest = RunManifest::load(path)?;
    let mut cfg = manifest
        .pretrain
        .ok_or_else(|| CliError::Usage(format!("{} is not a pretraining manifest", path.display())))?;
    let model_flags = [
        "image_size",
        "patch_size",
        "channels",
        "enc_dim",
        "enc_depth",
        "enc_heads",
        "decoder_variant",
        "decoder_dim",
        "decoder_depth",
        "decoder_heads",
        "fused_maps",
        "mlp_ratio",
        "encoder_output_norm",
        "norm_pix",
    ];
    if model_flags.iter().any(|id| explicit(m, id)) {
        let mut merged = a.model.clone();
        let base = &cfg.model;
        macro_rules! keep {
            ($id:literal, $field:ident, $value:expr) => {
                if !explicit(m, $id) {
                    merged.$field = $value;
                }
            };
        }
        keep!("image_size", image_size, base.encoder.image_size);
        keep!("patch_size", patch_size, base.encoder.patch_size);
        keep!("channels", channels, base.encoder.channels);
        keep!("enc_dim", enc_dim, base.encoder.dim);
        keep!("enc_depth", enc_depth, base.encoder.depth);
        keep!("enc_heads", enc_heads, base.encoder.heads);
        keep!("decoder_variant", decoder_variant, base.decoder.variant);
        keep!("decoder_dim", decoder_dim, base.decoder.dim);
        keep!("decoder_depth", decoder_depth, base.decoder.depth);
        keep!("decoder_heads", decoder_heads, base.decoder.heads);
        keep!("fused_maps", fused_maps, Some(base.decoder.fused_maps));
        keep!("mlp_ratio", mlp_ratio, base.encoder.mlp_ratio);
        keep!("encoder_output_norm", encoder_output_norm, Some(base.encoder_output_norm));
        keep!("norm_pix", norm_pix, base.norm_pix);
        cfg.model = merged.config();
    }
    macro_rules! take {
        ($id:literal, $($dst:ident).+ = $value:expr) => {
            if explicit(m, $id) {
                cfg.$($dst).+ = $value;
            }
        };
    }
    take!("base_lr", optim.base_lr = a.base_lr);
    take!("batch_size", optim.batch_size = a.batch_size);
    take!("weight_decay", optim.weight_decay = a.weight_decay);
    take!("warmup_epochs", optim.warmup_epochs = a.warmup_epochs);
    take!("epochs", optim.total_epochs = a.epochs);
    if explicit(m, "betas") {
        cfg.optim.beta1 = a.betas[0];
        cfg.optim.beta2 = a.betas[1];
    }
    take!("mask_ratio", mask_ratio = a.mask_ratio);
    take!("pred_ratio", prediction_ratio = a.pred_ratio);
    take!("accum_steps", accum_steps = a.accum_steps);
    take!("seed", seed = a.seed);
    take!("flip", augment_flip = a.flip);
    take!("crop_pad", augment_crop_pad = a.crop_pad);
    take!("max_steps", max_steps = a.max_steps);
    let data = a.data.clone().or(manifest.dataset.map(|d| d.path));
    Ok((cfg, data))
}

fn pretrain(a: &PretrainArgs, m: &ArgMatches, threads: Option<usize>) -> CliResult<()> {
    let (cfg, data_path) = resolve_pretrain(a, m)?;
    cfg.validate()?;
    let data_path = data_path.ok_or_else(|| CliError::Usage("--data is required without a manifest".into()))?;
    let dataset = Dataset::load(&data_path)?;
    let n = cfg.model.encoder.num_patches();
    if dataset.height != cfg.model.encoder.image_size
        || dataset.width != cfg.model.encoder.image_size
        || dataset.channels != cfg.model.encoder.channels
    {
        return Err(CliError::Data(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            dataset.height,
            dataset.width,
            dataset.channels,
            cfg.model.encoder.image_size,
            cfg.model.encoder.image_size,
            cfg.model.encoder.channels
        )));
    }
    fs::create_dir_all(&a.out)?;
    let manifest = RunManifest {
        command: "pretrain".into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        threads,
        seed: cfg.seed,
        dataset: Some(DatasetRef { path: data_path.clone(), sha256: dataset.digest(), count: dataset.len() }),
        model: cfg.model.clone(),
        pretrain: Some(cfg.clone()),
        probe: None,
    };
    manifest.save(&a.out)?;
    let (model, mut params) = MaskedAutoencoder::new::<f32>(&cfg.model, cfg.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    eprintln!(
        "pretrain: {} images, {} patches, variant {}, peak lr {:e}, {} parameters",
        dataset.len(),
        n,
        cfg.model.decoder.variant.label(),
        cfg.peak_lr(),
        params.num_scalars()
    );
    let mut metrics = MetricsLog::open(&a.out.join("metrics.csv"))?;
    let mut masks = String::from("step,mask_digest\n");
    let mut io_error = None;
    let report = train::pretrain(&cfg, &model, &mut params, &dataset, |event| match event {
        TrainEvent::Step { row, mask_digest } => {
            if let Err(e) = metrics.append(row) {
                io_error.get_or_insert(e);
            }
            masks.push_str(&format!("{},{}\n", row.step, mask_digest));
        }
        TrainEvent::Epoch { epoch, mean_loss } => eprintln!("epoch {epoch}: loss {mean_loss:.5}"),
    });
    fs::write(a.out.join("masks.log"), &masks)?;
    let report = report?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    save_checkpoint(a.out.join(CHECKPOINT_FILE), &params.entries())?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    println!(
        "{} steps, final epoch loss {:.5}, checkpoint {}",
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

/// Model and parameters from a checkpoint, or a fresh model from flags.
fn load_source(src: &CheckpointArgs, seed: u64) -> CliResult<(MaskedAutoencoder, ParamStore<f32>, Option<RunManifest>)> {
    let Some(path) = &src.checkpoint else {
        let cfg = src.model.config();
        let (model, params) = MaskedAutoencoder::new::<f32>(&cfg, seed).map_err(|e| CliError::Usage(e.to_string()))?;
        return Ok((model, params, None));
    };
    let (dir, file) = if path.is_dir() {
        (path.clone(), path.join(CHECKPOINT_FILE))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.clone())
    };
    let manifest = RunManifest::load(&dir.join(MANIFEST_FILE))?;
    let (model, mut params) =
        MaskedAutoencoder::new::<f32>(&manifest.model, 0).map_err(|e| CliError::Data(e.to_string()))?;
    let entries = load_checkpoint::<f32>(&file).map_err(|e| CliError::Data(format!("{}: {e}", file.display())))?;
    let loaded = params.load_entries(&entries)?;
    if loaded != params.len() {
        return Err(CliError::Data(format!("{} holds {loaded} of {} parameters", file.display(), params.len())));
    }
    Ok((model, params, Some(manifest)))
}

fn check_geometry(model: &MaskedAutoencoder, ds: &Dataset) -> CliResult<()> {
    let e = &model.cfg.encoder;
    if ds.height != e.image_size || ds.width != e.image_size || ds.channels != e.channels {
        return Err(CliError::Data(format!(
            "dataset images are {}x{}x{}, model expects {}x{}x{}",
            ds.height, ds.width, ds.channels, e.image_size, e.image_size, e.channels
        )));
    }
    Ok(())
}

fn finetune(a: &FinetuneArgs, threads: Option<usize>) -> CliResult<()> {
    let (model, params, _) = load_source(&a.source, a.seed)?;
    let data = Dataset::load(&a.data)?;
    if data.labels.is_none() {
        return Err(CliError::Data(format!("{} has no labels", a.data.display())));
    }
    check_geometry(&model, &data)?;
    let (train_set, test_set) = match &a.test_data {
        Some(p) => (data.clone(), Dataset::load(p)?),
        None => {
            let cut = data.len() * 4 / 5;
            (data.subset(&(0..cut).collect::<Vec<_>>()), data.subset(&(cut..data.len()).collect::<Vec<_>>()))
        }
    };
    let mut cfg = match a.mode {
        ProbeMode::LinearProbe => ProbeConfig::linear_probe(a.seed),
        ProbeMode::Full => ProbeConfig::full(a.seed),
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    let report = train::finetune(&model.cfg, &params, &train_set, &test_set, &cfg)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("accuracy.csv"), report.to_csv())?;
    RunManifest {
        command: "finetune".into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
        threads,
        seed: a.seed,
        dataset: Some(DatasetRef { path: a.data.clone(), sha256: data.digest(), count: data.len() }),
        model: model.cfg.clone(),
        pretrain: None,
        probe: Some(cfg),
    }
    .save(&a.out)?;
    println!("{:?} test accuracy {:.4}", report.mode, report.test_accuracy);
    Ok(())
}

fn load_images(path: &Path, model: &MaskedAutoencoder, start: usize, count: usize) -> CliResult<(Dataset, Vec<usize>)> {
    let ds = Dataset::load(path)?;
    check_geometry(model, &ds)?;
    if count == 0 || start + count > ds.len() {
        return Err(CliError::Usage(format!("images {start}..{} outside a dataset of {}", start + count, ds.len())));
    }
    Ok((ds, (start..start + count).collect()))
}

fn reconstruct(a: &ReconstructArgs) -> CliResult<()> {
    let (model, params, _) = load_source(&a.source, a.seed)?;
    let (ds, indices) = load_images(&a.data, &model, a.index, a.count)?;
    let enc = &model.cfg.encoder;
    let n = enc.num_patches();
    let plans = indices
        .iter()
        .map(|&i| MaskPlan::new(n, a.mask_ratio, a.pred_ratio, train::mask_seed(a.seed, 0, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let images = ds.batch::<f32>(&indices);
    let pred = model.predict_pixels(&params, &images, &plans)?;
    let images = images.cast::<f64>();
    let patches = patchify(&images, enc.patch_size)?;
    let pd = enc.patch_dim();
    fs::create_dir_all(&a.out)?;
    for (b, (&index, plan)) in indices.iter().zip(&plans).enumerate() {
        let original = &patches.data()[b * n * pd..(b + 1) * n * pd];
        let mut masked = original.to_vec();
        for &t in &plan.masked {
            masked[t * pd..(t + 1) * pd].fill(0.5);
        }
        let mut overlay = masked.clone();
        for (r, &t) in plan.predicted.iter().enumerate() {
            let at = (b * plan.predicted.len() + r) * pd;
            for (dst, src) in overlay[t * pd..(t + 1) * pd].iter_mut().zip(&pred.data()[at..at + pd]) {
                *dst = *src as f64;
            }
        }
        for (name, p) in [("original", original.to_vec()), ("masked", masked), ("reconstruction", overlay)] {
            let img = unpatchify(&Tensor::new(vec![1, n, pd], p)?, enc.patch_size, enc.channels)?;
            let img = img.reshaped(&[enc.image_size, enc.image_size, enc.channels])?;
            data::write_ppm(&img, &a.out.join(format!("{index:05}_{name}.ppm")))?;
        }
    }
    println!("wrote {} reconstructions to {}", indices.len(), a.out.display());
    Ok(())
}

fn analyze_attn(a: &AnalyzeAttnArgs) -> CliResult<()> {
    let (model, params, _) = load_source(&a.source, a.seed)?;
    let (ds, indices) = load_images(&a.data, &model, 0, a.images)?;
    let seeds: Vec<u64> = indices.iter().map(|&i| train::mask_seed(a.seed, 0, i)).collect();
    let report = analysis::attention_stats(&model, &params, &ds.batch::<f32>(&indices), a.mask_ratio, &seeds, 32)?;
    for s in [report.per_pair, report.per_pair_times_seqlen] {
        println!(
            "{:?}: mask->visible {:.6}  mask->mask {:.6}  ({} images)",
            s.normalization, s.mean_mask_to_visible, s.mean_mask_to_mask, s.images_seen
        );
    }
    if let Some(out) = &a.out {
        fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn decompose(a: &DecomposeArgs) -> CliResult<()> {
    let (model, params, _) = load_source(&a.source, a.seed)?;
    let (ds, indices) = load_images(&a.data, &model, a.index, 1)?;
    let n = model.cfg.encoder.num_patches();
    let plan = MaskPlan::new(n, a.mask_ratio, a.mask_ratio, train::mask_seed(a.seed, 0, a.index))?;
    let images = ds.batch::<f32>(&indices);
    let stacks = analysis::per_block_decomposition(&model, &params, &images, std::slice::from_ref(&plan))?;
    let stack = &stacks[0];
    let enc = &model.cfg.encoder;
    let patches = patchify(&images.cast::<f64>(), enc.patch_size)?;
    let (_, row_stats) = patch_normalize(&gather_rows(&patches, &[stack.rows.clone()])?);
    let stats = model.cfg.norm_pix.then_some(&row_stats);
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("term,high_pass_energy,max_abs\n");
    let mut cumulative = stack.base.clone();
    let base_img = stack.render(&stack.base, enc, stats, true, 0.5)?;
    data::write_ppm(&base_img, &a.out.join("term_00_base.ppm"))?;
    csv.push_str(&format!("base,{:.6e},{:.6e}\n", analysis::high_pass_energy(&base_img), max_abs(&stack.base)));
    for (i, c) in stack.contributions.iter().enumerate() {
        let img = stack.render(c, enc, stats, false, 0.0)?;
        csv.push_str(&format!("block_{},{:.6e},{:.6e}\n", i + 1, analysis::high_pass_energy(&img), max_abs(c)));
        let shifted = img.map(|v| v + 0.5);
        data::write_ppm(&shifted, &a.out.join(format!("term_{:02}_block.ppm", i + 1)))?;
        for (s, v) in cumulative.iter_mut().zip(c) {
            *s += v;
        }
        let cum = stack.render(&cumulative, enc, stats, true, 0.5)?;
        data::write_ppm(&cum, &a.out.join(format!("cumulative_{:02}.ppm", i + 1)))?;
    }
    fs::write(a.out.join("decomposition.csv"), csv)?;
    println!(
        "{} blocks; identity error {:.3e}; naive (per-piece head) gap {:.3e}",
        stack.contributions.len(),
        stack.identity_error(),
        stack.naive_gap
    );
    match analysis::interblock_weight_map(&model, &params, false) {
        Ok(map) => {
            let mut csv = Vec::new();
            map.write_csv(&mut csv)?;
            fs::write(a.out.join("interblock_weights.csv"), csv)?;
            data::write_ppm(&map.to_image(8), &a.out.join("interblock_weights.ppm"))?;
        }
        Err(AnalysisError::Unsupported(reason)) => eprintln!("no weight map: {reason}"),
        Err(e) => return Err(e.into()),
    }
    Ok(())
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn flops(a: &FlopsArgs) -> CliResult<()> {
    let enc = EncoderConfig {
        image_size: a.image_size,
        patch_size: a.patch_size,
        channels: a.channels,
        dim: a.enc_dim,
        depth: a.enc_depth,
        heads: a.enc_heads,
        mlp_ratio: a.mlp_ratio,
    };
    enc.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let dec = DecoderConfig {
        variant: a.variant,
        dim: a.decoder_dim,
        depth: a.decoder_depth,
        heads: a.decoder_heads,
        mlp_ratio: a.mlp_ratio,
        fused_maps: a.fused_maps.unwrap_or(a.enc_depth + 1),
    };
    dec.validate(&enc).map_err(|e| CliError::Usage(e.to_string()))?;
    let report = analysis::count_flops(&enc, &dec, a.mask_ratio, a.pred_ratio)?;
    let baseline_cfg = DecoderConfig { variant: DecoderVariant::SelfAttn, depth: a.baseline_depth, ..dec.clone() };
    let baseline = analysis::count_flops(&enc, &baseline_cfg, a.mask_ratio, a.mask_ratio)?;
    let ratio = baseline.decoder_total as f64 / report.decoder_total as f64;
    if a.json {
        let v = serde_json::json!({ "report": report, "baseline_decoder_total": baseline.decoder_total, "baseline_ratio": ratio });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        let mut out = io::stdout().lock();
        report.write_text(&mut out)?;
        println!("baseline_self_depth_{}_decoder_total,{}", a.baseline_depth, baseline.decoder_total);
        println!("baseline_over_this_decoder_ratio,{ratio:.3}");
    }
    Ok(())
}
