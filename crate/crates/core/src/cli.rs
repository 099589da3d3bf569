//! Command-line entry point: corpus synthesis, training, evaluation, and
//! single-image prediction, configured by a flat key = value file with
//! flag overrides on top.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ctc::{Alphabet, CtcError, Decoder};
use crate::data::synth::{synth_dataset, synthesize_captcha, SynthStyle};
use crate::data::{
    class_balance_report, load_dataset_with, mix_seed, oversample_rare, preprocess,
    split_dataset, to_grayscale, DataError, PreprocessOptions, Sample, SplitSpec,
};
use crate::eval::{evaluate, write_eval_details_tsv, write_eval_json, EvalError};
use crate::model::{self, ModelConfig, ModelError, ModelParams, RnnKind};
use crate::train::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::train::{train, MetricsWriter, TrainConfig, TrainError, TrainState};

const TEXT_STREAM: u64 = 0x7e97;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSplit(_) | DataError::InvalidRequest(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Usage(e.to_string()),
            ModelError::Input(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::EmptySplit(_) => CliError::Usage(e.to_string()),
            TrainError::AllInfeasible { .. } => CliError::Data(e.to_string()),
            TrainError::Data(inner) => inner.into(),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::AlphabetMismatch { .. }
            | EvalError::EmptyReferences
            | EvalError::NoReferenceCharacters => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<CtcError> for CliError {
    fn from(e: CtcError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "captcha-ocr",
    version,
    about = "Segmentation-free text captcha recognition: synthesize corpora, train, evaluate, predict",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic captcha corpus on disk.
    Synthesize(SynthesizeArgs),
    /// Train the recognizer and write a checkpoint plus metrics.csv.
    Train(TrainArgs),
    /// Score a checkpoint against a labeled dataset.
    Eval(EvalArgs),
    /// Decode one or more captcha images with a trained checkpoint.
    Predict(PredictArgs),
}

#[derive(Args)]
struct Shared {
    /// Flat `key = value` configuration file (`#` starts a comment line).
    #[arg(long, value_name = "PATH", global = false)]
    config: Option<PathBuf>,
    /// Master seed for everything pseudo-random in this command.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for generated files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[command(flatten)]
    shared: Shared,
    /// Number of images to generate.
    #[arg(long)]
    count: Option<usize>,
    /// Shortest text length to sample.
    #[arg(long)]
    min_len: Option<usize>,
    /// Longest text length to sample.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Directory of labeled images (the file stem is the ground truth).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Train on this many synthesized samples instead of a directory.
    #[arg(long, value_name = "N")]
    synthetic_count: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    early_stop_patience: Option<usize>,
    #[arg(long)]
    gradient_clip_norm: Option<f64>,
    /// Continue training from an existing checkpoint.
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    /// Duplicate samples containing rare characters before training.
    #[arg(long)]
    balance: bool,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum DecoderArg {
    Greedy,
    Beam,
}

#[derive(Debug, Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Val,
    Test,
}

impl SplitArg {
    fn as_str(self) -> &'static str {
        match self {
            SplitArg::All => "all",
            SplitArg::Train => "train",
            SplitArg::Val => "val",
            SplitArg::Test => "test",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    shared: Shared,
    /// Trained checkpoint to score.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    /// Directory of labeled images.
    #[arg(long, value_name = "DIR")]
    data: PathBuf,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Score everything, or reproduce one side of the seeded split.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    shared: Shared,
    /// Trained checkpoint to decode with.
    #[arg(long, value_name = "CKPT")]
    checkpoint: PathBuf,
    #[arg(long, value_enum)]
    decoder: Option<DecoderArg>,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Images to decode, one `path<TAB>text` line each.
    #[arg(value_name = "IMAGE", required = true, num_args = 1..)]
    images: Vec<PathBuf>,
}

/// Fully-resolved configuration: built-in defaults, overlaid by the
/// config file, overlaid by command-line flags.
#[derive(Debug, Clone)]
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    split: SplitSpec,
    alphabet: Alphabet,
    standardize: bool,
    count: usize,
    min_len: usize,
    max_len: usize,
    synthetic_count: Option<usize>,
    decoder: DecoderArg,
    beam_width: usize,
    eval_split: SplitArg,
    balance: bool,
    data_dir: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    resume: Option<PathBuf>,
    out_dir: PathBuf,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitSpec::default(),
            alphabet: Alphabet::standard(),
            standardize: false,
            count: 1000,
            min_len: 4,
            max_len: 6,
            synthetic_count: None,
            decoder: DecoderArg::Greedy,
            beam_width: 10,
            eval_split: SplitArg::All,
            balance: false,
            data_dir: None,
            checkpoint: None,
            resume: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn parse_scalar<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("key `{key}` has unparsable value `{value}`"))
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("key `{key}` expects `low,high`, got `{value}`"));
    }
    Ok((
        parse_scalar::<f64>(key, parts[0])?,
        parse_scalar::<f64>(key, parts[1])?,
    ))
}

impl Settings {
    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let aug = &mut self.train.augmentation;
        match key {
            "input_height" => self.model.input_height = parse_scalar(key, value)?,
            "input_width" => self.model.input_width = parse_scalar(key, value)?,
            "conv_channels" => {
                let channels: Result<Vec<usize>, String> = value
                    .split(',')
                    .map(|p| parse_scalar(key, p.trim()))
                    .collect();
                let channels = channels?;
                if channels.is_empty() {
                    return Err("conv_channels must list at least one layer".into());
                }
                self.model.conv_channels = channels;
            }
            "rnn_hidden" => self.model.rnn_hidden = parse_scalar(key, value)?,
            "rnn_kind" => {
                self.model.rnn_kind = RnnKind::parse(value)
                    .ok_or_else(|| format!("rnn_kind must be `gru` or `simple`, got `{value}`"))?;
            }
            "bidirectional" => self.model.bidirectional = parse_scalar(key, value)?,
            "alphabet" => {
                let chars: Vec<char> = value.chars().collect();
                self.alphabet = Alphabet::new(&chars).map_err(|e| e.to_string())?;
            }
            "epochs" => self.train.epochs = parse_scalar(key, value)?,
            "batch_size" => self.train.batch_size = parse_scalar(key, value)?,
            "learning_rate" => self.train.learning_rate = parse_scalar(key, value)?,
            "beta1" => self.train.beta1 = parse_scalar(key, value)?,
            "beta2" => self.train.beta2 = parse_scalar(key, value)?,
            "epsilon" => self.train.epsilon = parse_scalar(key, value)?,
            "early_stop_patience" => self.train.early_stop_patience = parse_scalar(key, value)?,
            "gradient_clip_norm" => self.train.gradient_clip_norm = parse_scalar(key, value)?,
            "seed" => self.train.seed = parse_scalar(key, value)?,
            "rotation_degrees" => aug.rotation_degrees = parse_pair(key, value)?,
            "translate_frac" => aug.translate_frac = parse_pair(key, value)?,
            "zoom" => aug.zoom = parse_pair(key, value)?,
            "shear_degrees" => aug.shear_degrees = parse_pair(key, value)?,
            "brightness" => aug.brightness = parse_pair(key, value)?,
            "contrast" => aug.contrast = parse_pair(key, value)?,
            "horizontal_flip" => aug.horizontal_flip = parse_scalar(key, value)?,
            "train_frac" => self.split.train_frac = parse_scalar(key, value)?,
            "val_frac" => self.split.val_frac = parse_scalar(key, value)?,
            "test_frac" => self.split.test_frac = parse_scalar(key, value)?,
            "standardize" => self.standardize = parse_scalar(key, value)?,
            "count" => self.count = parse_scalar(key, value)?,
            "min_len" => self.min_len = parse_scalar(key, value)?,
            "max_len" => self.max_len = parse_scalar(key, value)?,
            "synthetic_count" => self.synthetic_count = Some(parse_scalar(key, value)?),
            "decoder" => {
                self.decoder = match value {
                    "greedy" => DecoderArg::Greedy,
                    "beam" => DecoderArg::Beam,
                    other => return Err(format!("decoder must be `greedy` or `beam`, got `{other}`")),
                }
            }
            "beam_width" => self.beam_width = parse_scalar(key, value)?,
            "eval_split" => {
                self.eval_split = match value {
                    "all" => SplitArg::All,
                    "train" => SplitArg::Train,
                    "val" => SplitArg::Val,
                    "test" => SplitArg::Test,
                    other => {
                        return Err(format!(
                            "eval_split must be all, train, val, or test, got `{other}`"
                        ))
                    }
                }
            }
            "balance" => self.balance = parse_scalar(key, value)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "resume" => self.resume = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "config {} line {}: expected `key = value`",
                    path.display(),
                    idx + 1
                ))
            })?;
            self.apply(key.trim(), value.trim()).map_err(|msg| {
                CliError::Usage(format!("config {} line {}: {msg}", path.display(), idx + 1))
            })?;
        }
        Ok(())
    }

    /// Render every setting as a config file that reproduces this run.
    fn render(&self) -> String {
        let pair = |(a, b): (f64, f64)| format!("{a},{b}");
        let mut rows: Vec<(&str, String)> = vec![
            ("alphabet", self.alphabet.chars().iter().collect()),
            ("balance", self.balance.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("beam_width", self.beam_width.to_string()),
            ("beta1", self.train.beta1.to_string()),
            ("beta2", self.train.beta2.to_string()),
            ("bidirectional", self.model.bidirectional.to_string()),
            ("brightness", pair(self.train.augmentation.brightness)),
            ("contrast", pair(self.train.augmentation.contrast)),
            (
                "conv_channels",
                self.model
                    .conv_channels
                    .iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("count", self.count.to_string()),
            (
                "decoder",
                match self.decoder {
                    DecoderArg::Greedy => "greedy".into(),
                    DecoderArg::Beam => "beam".into(),
                },
            ),
            ("early_stop_patience", self.train.early_stop_patience.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("epsilon", self.train.epsilon.to_string()),
            ("eval_split", self.eval_split.as_str().to_string()),
            ("gradient_clip_norm", self.train.gradient_clip_norm.to_string()),
            ("horizontal_flip", self.train.augmentation.horizontal_flip.to_string()),
            ("input_height", self.model.input_height.to_string()),
            ("input_width", self.model.input_width.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("max_len", self.max_len.to_string()),
            ("min_len", self.min_len.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("rnn_hidden", self.model.rnn_hidden.to_string()),
            ("rnn_kind", self.model.rnn_kind.as_str().to_string()),
            ("rotation_degrees", pair(self.train.augmentation.rotation_degrees)),
            ("seed", self.train.seed.to_string()),
            ("shear_degrees", pair(self.train.augmentation.shear_degrees)),
            ("standardize", self.standardize.to_string()),
            ("test_frac", self.split.test_frac.to_string()),
            ("train_frac", self.split.train_frac.to_string()),
            ("translate_frac", pair(self.train.augmentation.translate_frac)),
            ("val_frac", self.split.val_frac.to_string()),
            ("zoom", pair(self.train.augmentation.zoom)),
        ];
        for (key, path) in [
            ("checkpoint", &self.checkpoint),
            ("data_dir", &self.data_dir),
            ("resume", &self.resume),
        ] {
            if let Some(p) = path {
                rows.push((key, p.display().to_string()));
            }
        }
        if let Some(n) = self.synthetic_count {
            rows.push(("synthetic_count", n.to_string()));
        }
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (key, value) in rows {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    fn resolve(shared: &Shared) -> Result<Settings, CliError> {
        let mut settings = Settings::default();
        if let Some(path) = &shared.config {
            settings.apply_file(path)?;
        }
        if let Some(seed) = shared.seed {
            settings.train.seed = seed;
        }
        if let Some(out) = &shared.out {
            settings.out_dir = out.clone();
        }
        Ok(settings)
    }

    fn finalize(&mut self) {
        self.model.alphabet_size = self.alphabet.size();
    }

    fn decoder(&self) -> Result<Decoder, CliError> {
        match self.decoder {
            DecoderArg::Greedy => Ok(Decoder::Greedy),
            DecoderArg::Beam if self.beam_width == 0 => {
                Err(CliError::Usage("beam width must be at least 1".into()))
            }
            DecoderArg::Beam => Ok(Decoder::Beam {
                width: self.beam_width,
            }),
        }
    }

    fn preprocess_options(&self, config: &ModelConfig) -> PreprocessOptions {
        PreprocessOptions {
            target_height: config.input_height,
            target_width: config.input_width,
            standardize: self.standardize,
        }
    }
}

fn prepare_out_dir(settings: &Settings) -> Result<(), CliError> {
    std::fs::create_dir_all(&settings.out_dir).map_err(|e| {
        CliError::Runtime(format!(
            "cannot create output directory {}: {e}",
            settings.out_dir.display()
        ))
    })?;
    std::fs::write(settings.out_dir.join("resolved_config"), settings.render()).map_err(|e| {
        CliError::Runtime(format!("cannot write resolved_config: {e}"))
    })
}

fn save_png(path: &Path, image: &crate::tensor::Tensor) -> Result<(), CliError> {
    let shape = image.shape();
    let (h, w) = (shape[1], shape[2]);
    let pixels: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, pixels)
        .expect("buffer length matches dimensions");
    gray.save(path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn cmd_synthesize(args: &SynthesizeArgs) -> Result<(), CliError> {
    let mut settings = Settings::resolve(&args.shared)?;
    if let Some(count) = args.count {
        settings.count = count;
    }
    if let Some(min_len) = args.min_len {
        settings.min_len = min_len;
    }
    if let Some(max_len) = args.max_len {
        settings.max_len = max_len;
    }
    settings.finalize();

    if settings.min_len == 0 || settings.min_len > settings.max_len {
        return Err(CliError::Usage(format!(
            "invalid length range {}..{}",
            settings.min_len, settings.max_len
        )));
    }
    let capacity = SynthStyle::default().capacity();
    if settings.max_len > capacity {
        return Err(CliError::Usage(format!(
            "max length {} exceeds the canvas capacity of {capacity} characters",
            settings.max_len
        )));
    }
    let k = settings.alphabet.size() as f64;
    let distinct: f64 = (settings.min_len..=settings.max_len)
        .map(|l| k.powi(l as i32))
        .sum();
    if settings.count as f64 > distinct {
        return Err(CliError::Usage(format!(
            "cannot generate {} distinct texts of length {}..{} over {} characters",
            settings.count, settings.min_len, settings.max_len, settings.alphabet.size()
        )));
    }

    prepare_out_dir(&settings)?;
    let images_dir = settings.out_dir.join("images");
    std::fs::create_dir_all(&images_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", images_dir.display())))?;

    let seed = settings.train.seed;
    let mut text_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, TEXT_STREAM));
    let mut seen = HashSet::new();
    let mut manifest = String::from("file\ttext\n");
    for i in 0..settings.count {
        let mut attempts = 0;
        let text = loop {
            let len = text_rng.gen_range(settings.min_len..=settings.max_len);
            let candidate: String = (0..len)
                .map(|_| settings.alphabet.chars()[text_rng.gen_range(0..settings.alphabet.size())])
                .collect();
            if seen.insert(candidate.clone()) {
                break candidate;
            }
            attempts += 1;
            if attempts > 10_000 {
                return Err(CliError::Runtime(
                    "could not find another unused text; lower the count or widen the lengths"
                        .into(),
                ));
            }
        };
        let image = synthesize_captcha(&text, mix_seed(seed, i as u64), &settings.alphabet)?;
        let file = format!("images/{text}.png");
        save_png(&settings.out_dir.join(&file), &image)?;
        let _ = writeln!(manifest, "{file}\t{text}");
    }
    std::fs::write(settings.out_dir.join("manifest.tsv"), manifest)
        .map_err(|e| CliError::Runtime(format!("cannot write manifest.tsv: {e}")))?;
    println!(
        "wrote {} images and manifest.tsv under {}",
        settings.count,
        settings.out_dir.display()
    );
    Ok(())
}

fn resize_if_needed(samples: Vec<Sample>, settings: &Settings) -> Result<Vec<Sample>, CliError> {
    let opts = settings.preprocess_options(&settings.model);
    samples
        .into_iter()
        .map(|mut s| {
            let shape = s.image.shape();
            if shape[1] != opts.target_height || shape[2] != opts.target_width {
                s.image = preprocess(&s.image, &opts)?;
            }
            Ok(s)
        })
        .collect::<Result<Vec<_>, DataError>>()
        .map_err(CliError::from)
}

fn load_directory(
    dir: &Path,
    alphabet: &Alphabet,
    opts: &PreprocessOptions,
) -> Result<Vec<Sample>, CliError> {
    let outcome = load_dataset_with(dir, alphabet, opts)?;
    for (path, reason) in &outcome.skipped {
        eprintln!("skipped {}: {reason}", path.display());
    }
    if outcome.samples.is_empty() {
        return Err(CliError::Data(format!(
            "no usable samples in {} ({} files skipped)",
            dir.display(),
            outcome.skipped.len()
        )));
    }
    Ok(outcome.samples)
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut settings = Settings::resolve(&args.shared)?;
    if let Some(dir) = &args.data {
        settings.data_dir = Some(dir.clone());
    }
    if let Some(n) = args.synthetic_count {
        settings.synthetic_count = Some(n);
    }
    if let Some(v) = args.min_len {
        settings.min_len = v;
    }
    if let Some(v) = args.max_len {
        settings.max_len = v;
    }
    if let Some(v) = args.epochs {
        settings.train.epochs = v;
    }
    if let Some(v) = args.batch_size {
        settings.train.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        settings.train.learning_rate = v;
    }
    if let Some(v) = args.early_stop_patience {
        settings.train.early_stop_patience = v;
    }
    if let Some(v) = args.gradient_clip_norm {
        settings.train.gradient_clip_norm = v;
    }
    if let Some(path) = &args.resume {
        settings.resume = Some(path.clone());
    }
    if args.balance {
        settings.balance = true;
    }
    settings.finalize();
    settings.model.validate()?;
    settings.train.validate()?;

    let seed = settings.train.seed;
    let samples = match (&settings.data_dir, settings.synthetic_count) {
        (Some(dir), _) => {
            let opts = settings.preprocess_options(&settings.model);
            load_directory(dir, &settings.alphabet, &opts)?
        }
        (None, Some(n)) => {
            if n == 0 {
                return Err(CliError::Usage("synthetic_count must be at least 1".into()));
            }
            let raw = synth_dataset(
                &settings.alphabet,
                n,
                (settings.min_len, settings.max_len),
                mix_seed(seed, TEXT_STREAM),
            )?;
            resize_if_needed(raw, &settings)?
        }
        (None, None) => {
            return Err(CliError::Usage(
                "provide --data DIR or --synthetic-count N".into(),
            ))
        }
    };

    let max_label = samples.iter().map(|s| s.label.len()).max().unwrap_or(0);
    if let Some(warning) = settings.model.capacity_warning(max_label) {
        eprintln!("warning: {warning}");
    }

    let split = split_dataset(samples, &settings.split, seed)?;
    eprintln!(
        "split sizes: {} train / {} val / {} test",
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let train_split = if settings.balance {
        let before = split.train.len();
        let balanced = oversample_rare(&split.train, &settings.alphabet);
        let report = class_balance_report(&balanced, &settings.alphabet);
        eprintln!(
            "oversampled rare characters: {before} -> {} samples (imbalance {:.2})",
            balanced.len(),
            report.imbalance_ratio()
        );
        balanced
    } else {
        split.train
    };

    let state = match &settings.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.params.config != settings.model {
                return Err(CliError::Data(format!(
                    "checkpoint {} was trained with a different architecture",
                    path.display()
                )));
            }
            if ckpt.alphabet != settings.alphabet {
                return Err(CliError::Data(format!(
                    "checkpoint {} uses a different alphabet",
                    path.display()
                )));
            }
            eprintln!(
                "resuming from {} at epoch {}",
                path.display(),
                ckpt.epoch
            );
            TrainState::from_checkpoint(ckpt, &settings.train)
        }
        None => TrainState::fresh(ModelParams::build(&settings.model, seed)?, &settings.train),
    };

    prepare_out_dir(&settings)?;
    let metrics_path = settings.out_dir.join("metrics.csv");
    let mut writer = MetricsWriter::create(&metrics_path)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", metrics_path.display())))?;
    let mut sink_error: Option<std::io::Error> = None;
    let outcome = train(state, &train_split, &split.val, &settings.train, |stats| {
        let skipped = if stats.skipped_infeasible > 0 {
            format!(" ({} infeasible skipped)", stats.skipped_infeasible)
        } else {
            String::new()
        };
        eprintln!(
            "epoch {}: train loss {:.4}, val loss {:.4}, val char acc {:.4}, val word acc {:.4}, {:.1}s{}",
            stats.epoch,
            stats.train_loss,
            stats.val_loss,
            stats.val_char_accuracy,
            stats.val_word_accuracy,
            stats.seconds,
            skipped
        );
        if sink_error.is_none() {
            if let Err(e) = writer.append(stats) {
                sink_error = Some(e);
            }
        }
    })?;
    if let Some(e) = sink_error {
        return Err(CliError::Runtime(format!(
            "cannot write {}: {e}",
            metrics_path.display()
        )));
    }

    let checkpoint_path = settings.out_dir.join("model.ckpt");
    let ckpt = Checkpoint {
        params: outcome.params,
        alphabet: settings.alphabet.clone(),
        adam: Some(outcome.adam),
        epoch: outcome.best_epoch as u32,
        best_val_loss: outcome.best_val_loss,
    };
    save_checkpoint(&ckpt, &checkpoint_path)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "best epoch {} with validation loss {}; checkpoint written to {}",
        outcome.best_epoch,
        outcome.best_val_loss,
        checkpoint_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut settings = Settings::resolve(&args.shared)?;
    settings.checkpoint = Some(args.checkpoint.clone());
    settings.data_dir = Some(args.data.clone());
    if let Some(d) = args.decoder {
        settings.decoder = d;
    }
    if let Some(w) = args.beam_width {
        settings.beam_width = w;
    }
    if let Some(s) = args.split {
        settings.eval_split = s;
    }
    settings.finalize();

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let opts = settings.preprocess_options(&ckpt.params.config);
    let samples = load_directory(&args.data, &settings.alphabet, &opts)?;
    let samples = match settings.eval_split {
        SplitArg::All => samples,
        part => {
            let split = split_dataset(samples, &settings.split, settings.train.seed)?;
            let chosen = match part {
                SplitArg::Train => split.train,
                SplitArg::Val => split.val,
                SplitArg::Test => split.test,
                SplitArg::All => unreachable!(),
            };
            if chosen.is_empty() {
                return Err(CliError::Data(format!(
                    "the {} split is empty at these fractions",
                    part.as_str()
                )));
            }
            chosen
        }
    };

    let report = evaluate(&ckpt, &samples, &settings.alphabet, settings.decoder()?)?;

    prepare_out_dir(&settings)?;
    let json_path = settings.out_dir.join("eval.json");
    let tsv_path = settings.out_dir.join("eval_details.tsv");
    write_eval_json(&json_path, &report)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json_path.display())))?;
    write_eval_details_tsv(&tsv_path, &report)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", tsv_path.display())))?;

    println!("char_accuracy = {}", json_num(report.char_accuracy));
    println!("word_accuracy = {}", json_num(report.word_accuracy));
    println!("mean_edit_distance = {}", json_num(report.mean_edit_distance));
    Ok(())
}

/// Render a float exactly as it appears in the JSON report.
fn json_num(v: f64) -> String {
    serde_json::Number::from_f64(v)
        .map(|n| n.to_string())
        .unwrap_or_else(|| v.to_string())
}

fn predict_one(
    ckpt: &Checkpoint,
    decoder: Decoder,
    opts: &PreprocessOptions,
    path: &Path,
) -> Result<String, String> {
    let rgb = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    let gray =
        to_grayscale(rgb.as_raw(), h as usize, w as usize).map_err(|e| e.to_string())?;
    let input = preprocess(&gray, opts).map_err(|e| e.to_string())?;
    let lp = model::log_probs(&ckpt.params, &input).map_err(|e| e.to_string())?;
    let label = decoder
        .decode(&lp, ckpt.alphabet.blank_index())
        .map_err(|e| e.to_string())?;
    ckpt.alphabet.decode(&label).map_err(|e| e.to_string())
}

fn cmd_predict(args: &PredictArgs) -> Result<(), CliError> {
    let mut settings = Settings::resolve(&args.shared)?;
    settings.checkpoint = Some(args.checkpoint.clone());
    if let Some(d) = args.decoder {
        settings.decoder = d;
    }
    if let Some(w) = args.beam_width {
        settings.beam_width = w;
    }
    settings.finalize();

    let ckpt = load_checkpoint(&args.checkpoint)?;
    let decoder = settings.decoder()?;
    let opts = settings.preprocess_options(&ckpt.params.config);
    let mut failures = 0usize;
    for path in &args.images {
        match predict_one(&ckpt, decoder, &opts, path) {
            Ok(text) => println!("{}\t{text}", path.display()),
            Err(reason) => {
                eprintln!("{}: {reason}", path.display());
                failures += 1;
            }
        }
    }
    if failures > 0 {
        return Err(CliError::Data(format!(
            "{failures} of {} images failed",
            args.images.len()
        )));
    }
    Ok(())
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Synthesize(args) => cmd_synthesize(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
