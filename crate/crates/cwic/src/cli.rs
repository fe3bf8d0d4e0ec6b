//! Command-line wiring: train, train-entropy, compress, decompress,
//! eval, curves.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 format/corruption. Every
//! subcommand prints its effective configuration so a run can be
//! reproduced exactly.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::container::{self, CompressOpts, CompressedStream, ContainerError};
use crate::entropy::{self, EntropyModel, EntropyTrainConfig, Predictor};
use crate::metrics::{self, CurveCodec};
use crate::nets::{ModelError, ModelParams};
use crate::train::{self, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "cwic",
    about = "Content-weighted learned image compression",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train a compression model on a directory of PPM images.
    Train(TrainArgs),
    /// Train the entropy predictor on codes from a trained model.
    TrainEntropy(TrainEntropyArgs),
    /// Compress a PPM image into a .cwic stream.
    Compress(CompressArgs),
    /// Decompress a .cwic stream back to a PPM image.
    Decompress(DecompressArgs),
    /// Measure one original/reconstruction pair.
    Eval(EvalArgs),
    /// Emit a rate-distortion CSV over a directory of images.
    Curves(CurvesArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Directory of training PPM images.
    #[arg(long)]
    pub data: PathBuf,
    /// Rate-distortion tradeoff weight.
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    /// Target compression rate r0 in bits per pixel.
    #[arg(long = "bpp", default_value_t = 0.5)]
    pub target_bpp: f64,
    /// Code channels (64 or 128; importance levels follow as 16 or 32).
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    /// Train the ablation baseline without the importance map.
    #[arg(long)]
    pub no_importance_map: bool,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Warm-start from an existing model (e.g. one pre-trained without
    /// the importance map).
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_steps_per_stage: usize,
    #[arg(long, default_value_t = 128)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 50)]
    pub ma_window: usize,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
}

#[derive(Args)]
pub struct TrainEntropyArgs {
    /// Trained compression model.
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of PPM images to harvest contexts from.
    #[arg(long)]
    pub data: PathBuf,
    /// Output entropy-model file.
    #[arg(long)]
    pub out: PathBuf,
    /// Build an adaptive frequency-table model instead of the nets.
    #[arg(long)]
    pub freq_table: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2000)]
    pub steps_per_stage: usize,
    #[arg(long, default_value_t = 128)]
    pub patch_size: usize,
}

#[derive(Args)]
pub struct CompressArgs {
    /// Model file (n, L, and the importance-map setting come from here).
    #[arg(long)]
    pub model: PathBuf,
    /// Entropy-model file (not needed with --no-entropy/--freq-table).
    #[arg(long)]
    pub entropy: Option<PathBuf>,
    /// Skip entropy coding for both payloads.
    #[arg(long, conflicts_with_all = ["codes_only", "imp_only"])]
    pub no_entropy: bool,
    /// Entropy-code only the binary codes.
    #[arg(long, conflicts_with = "imp_only")]
    pub codes_only: bool,
    /// Entropy-code only the importance map.
    #[arg(long)]
    pub imp_only: bool,
    /// Use the small-context adaptive frequency table (CABAC baseline).
    #[arg(long)]
    pub freq_table: bool,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args)]
pub struct DecompressArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub entropy: Option<PathBuf>,
    pub input: PathBuf,
    pub output: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub orig: PathBuf,
    #[arg(long)]
    pub recon: PathBuf,
    #[arg(long)]
    pub stream: PathBuf,
}

#[derive(Args)]
pub struct CurvesArgs {
    /// Directory of PPM images.
    #[arg(long)]
    pub images: PathBuf,
    /// Comma-separated model files; labels are the file stems.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<PathBuf>,
    /// Comma-separated entropy models paired with --models (frequency
    /// tables when omitted).
    #[arg(long, value_delimiter = ',')]
    pub entropy: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// External baseline rows appended unchanged.
    #[arg(long)]
    pub baseline_csv: Option<PathBuf>,
}

/// Errors carrying their process exit code.
pub enum CliError {
    Usage(String),
    Io(String),
    Format(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Format(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Io(m) | CliError::Format(m) => m,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(err: ModelError) -> CliError {
        match err {
            ModelError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<ContainerError> for CliError {
    fn from(err: ContainerError) -> CliError {
        match err {
            ContainerError::Io(e) => CliError::Io(e.to_string()),
            ContainerError::Model(m) => CliError::from(m),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(err: TrainError) -> CliError {
        match err {
            TrainError::Io(e) => CliError::Io(e.to_string()),
            TrainError::EmptyDataset => CliError::Io(err.to_string()),
            TrainError::BadConfig(m) => CliError::Usage(m),
            TrainError::Container(c) => CliError::from(c),
            TrainError::Model(m) => CliError::from(m),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<entropy::EntropyError> for CliError {
    fn from(err: entropy::EntropyError) -> CliError {
        match err {
            entropy::EntropyError::Io(e) => CliError::Io(e.to_string()),
            other => CliError::Format(other.to_string()),
        }
    }
}

impl From<metrics::MetricsError> for CliError {
    fn from(err: metrics::MetricsError) -> CliError {
        match err {
            metrics::MetricsError::Io(e) => CliError::Io(e.to_string()),
            metrics::MetricsError::Container(c) => CliError::from(c),
            other => CliError::Format(other.to_string()),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => run_train(args),
        Command::TrainEntropy(args) => run_train_entropy(args),
        Command::Compress(args) => run_compress(args),
        Command::Decompress(args) => run_decompress(args),
        Command::Eval(args) => run_eval(args),
        Command::Curves(args) => run_curves(args),
    }
}

fn run_train(args: TrainArgs) -> Result<(), CliError> {
    let levels = crate::nets::levels_for(args.n).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = TrainConfig {
        gamma: args.gamma,
        target_bpp: args.target_bpp,
        n: args.n,
        levels,
        batch_size: args.batch_size,
        max_steps_per_stage: args.max_steps_per_stage,
        lr_ladder: vec![1e-4, 1e-5, 1e-6],
        seed: args.seed,
        patch_size: args.patch_size,
        importance_enabled: !args.no_importance_map,
        ma_window: args.ma_window,
        patience: args.patience,
    };
    cfg.validate()?;
    println!("effective-config:");
    println!("cmd = train");
    println!("data = {}", args.data.display());
    println!("out = {}", args.out.display());
    match &args.warm_start {
        Some(p) => println!("warm_start = {}", p.display()),
        None => println!("warm_start ="),
    }
    print!("{}", cfg.to_kv());

    let patches = train::load_patches(&args.data, cfg.patch_size, cfg.seed)?;
    println!("patches = {}", patches.patches.len());
    let start = match &args.warm_start {
        Some(path) => ModelParams::load(path)?,
        None => ModelParams::init(cfg.seed, cfg.n)?,
    };
    let (trained, report) = train::train(&cfg, &patches, start)?;
    trained.save(&args.out)?;
    println!(
        "objective: initial {:.4} final {:.4}",
        report.initial_objective, report.final_objective
    );
    for stage in &report.stages {
        println!(
            "stage lr {:e}: {} steps, objective {:.4}",
            stage.lr, stage.steps, stage.final_objective
        );
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

fn run_train_entropy(args: TrainEntropyArgs) -> Result<(), CliError> {
    println!("effective-config:");
    println!("cmd = train-entropy");
    println!("model = {}", args.model.display());
    println!("data = {}", args.data.display());
    println!("out = {}", args.out.display());
    println!("freq_table = {}", args.freq_table);
    println!("seed = {}", args.seed);
    println!("steps_per_stage = {}", args.steps_per_stage);
    println!("patch_size = {}", args.patch_size);

    let params = ModelParams::load(&args.model)?;
    let patches = train::load_patches(&args.data, args.patch_size, args.seed)?;

    let mut code_corpus = entropy::ContextCorpus::default();
    let mut imp_corpus = entropy::ContextCorpus::default();
    for patch in &patches.patches {
        let image = container::RawImage::from_planes(patches.patch_size, patches.patch_size, patch);
        let bundle = container::analyze(&image, &params)?;
        code_corpus.extend(&entropy::harvest_codes(&bundle));
        if params.importance_enabled {
            imp_corpus.extend(&entropy::harvest_importance(
                &bundle.imp_q,
                bundle.h,
                bundle.w,
                bundle.levels,
            )?);
        }
    }
    println!(
        "harvested {} code bits, {} importance bits",
        code_corpus.len(),
        imp_corpus.len()
    );

    let model = if args.freq_table {
        let mut model = EntropyModel::freq();
        if let Predictor::Freq(t) = &mut model.codes {
            t.absorb(&code_corpus);
        }
        if let Predictor::Freq(t) = &mut model.importance {
            if !imp_corpus.is_empty() {
                t.absorb(&imp_corpus);
            }
        }
        println!(
            "code-table NLL {:.4} bits/bit",
            entropy::nll_bits(&model.codes, &code_corpus)
        );
        model
    } else {
        let cfg = EntropyTrainConfig {
            seed: args.seed,
            steps_per_stage: args.steps_per_stage,
            ..EntropyTrainConfig::default()
        };
        let (codes_net, codes_nll) =
            entropy::train_net(&entropy::EntropyNet::init(cfg.seed), &code_corpus, &cfg)?;
        println!("code-net NLL {codes_nll:.4} bits/bit");
        let importance = if imp_corpus.is_empty() {
            Predictor::Net(entropy::EntropyNet::init(cfg.seed.wrapping_add(1)))
        } else {
            let (imp_net, imp_nll) = entropy::train_net(
                &entropy::EntropyNet::init(cfg.seed.wrapping_add(1)),
                &imp_corpus,
                &cfg,
            )?;
            println!("importance-net NLL {imp_nll:.4} bits/bit");
            Predictor::Net(imp_net)
        };
        EntropyModel {
            codes: Predictor::Net(codes_net),
            importance,
        }
    };
    model.save(&args.out)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn load_stream(path: &Path) -> Result<CompressedStream, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    CompressedStream::from_bytes(&bytes).map_err(CliError::from)
}

fn run_compress(args: CompressArgs) -> Result<(), CliError> {
    let opts = CompressOpts {
        entropy_codes: !args.no_entropy && !args.imp_only,
        entropy_importance: !args.no_entropy && !args.codes_only,
        use_freq_table: args.freq_table,
    };
    println!("effective-config:");
    println!("cmd = compress");
    println!("model = {}", args.model.display());
    match &args.entropy {
        Some(p) => println!("entropy = {}", p.display()),
        None => println!("entropy ="),
    }
    println!("entropy_codes = {}", opts.entropy_codes);
    println!("entropy_importance = {}", opts.entropy_importance);
    println!("freq_table = {}", opts.use_freq_table);
    println!("input = {}", args.input.display());
    println!("output = {}", args.output.display());

    let params = ModelParams::load(&args.model)?;
    let entropy_model = match &args.entropy {
        Some(path) => Some(EntropyModel::load(path)?),
        None => None,
    };
    let image = container::read_ppm(&args.input)?;
    let stream = container::compress(&image, &params, entropy_model.as_ref(), &opts)?;
    let bytes = stream.to_bytes();
    std::fs::write(&args.output, &bytes).map_err(|e| CliError::Io(e.to_string()))?;
    let payload_bytes = stream.imp_payload.len() + stream.code_payload.len();
    println!(
        "wrote {}: {} bytes ({} importance + {} codes + {} header), {:.4} bpp ({:.4} payload-only)",
        args.output.display(),
        bytes.len(),
        stream.imp_payload.len(),
        stream.code_payload.len(),
        bytes.len() - payload_bytes,
        metrics::bpp(bytes.len(), image.width, image.height),
        metrics::bpp(payload_bytes, image.width, image.height),
    );
    Ok(())
}

fn run_decompress(args: DecompressArgs) -> Result<(), CliError> {
    println!("effective-config:");
    println!("cmd = decompress");
    println!("model = {}", args.model.display());
    match &args.entropy {
        Some(p) => println!("entropy = {}", p.display()),
        None => println!("entropy ="),
    }
    println!("input = {}", args.input.display());
    println!("output = {}", args.output.display());

    let params = ModelParams::load(&args.model)?;
    let entropy_model = match &args.entropy {
        Some(path) => Some(EntropyModel::load(path)?),
        None => None,
    };
    let stream = load_stream(&args.input)?;
    let image = container::decompress(&stream, &params, entropy_model.as_ref())?;
    container::write_ppm(&image, &args.output)?;
    println!(
        "wrote {} ({}x{})",
        args.output.display(),
        image.width,
        image.height
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<(), CliError> {
    println!("effective-config:");
    println!("cmd = eval");
    println!("orig = {}", args.orig.display());
    println!("recon = {}", args.recon.display());
    println!("stream = {}", args.stream.display());

    let orig = container::read_ppm(&args.orig)?;
    let recon = container::read_ppm(&args.recon)?;
    let stream_len = std::fs::metadata(&args.stream)
        .map_err(|e| CliError::Io(e.to_string()))?
        .len() as usize;
    let id = args
        .orig
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let row = metrics::rd_point(&id, "cwic", &orig, &recon, stream_len)?;
    println!("{}", metrics::CSV_HEADER);
    println!("{}", metrics::format_row(&row));
    Ok(())
}

fn run_curves(args: CurvesArgs) -> Result<(), CliError> {
    if args.models.is_empty() {
        return Err(CliError::Usage(
            "curves needs at least one --models entry".into(),
        ));
    }
    if !args.entropy.is_empty() && args.entropy.len() != args.models.len() {
        return Err(CliError::Usage(format!(
            "--entropy lists {} files for {} models",
            args.entropy.len(),
            args.models.len()
        )));
    }
    println!("effective-config:");
    println!("cmd = curves");
    println!("images = {}", args.images.display());
    println!(
        "models = {}",
        args.models
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!(
        "entropy = {}",
        args.entropy
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",")
    );
    println!("out = {}", args.out.display());
    match &args.baseline_csv {
        Some(p) => println!("baseline_csv = {}", p.display()),
        None => println!("baseline_csv ="),
    }

    let mut codecs = Vec::new();
    for (idx, model_path) in args.models.iter().enumerate() {
        let params = ModelParams::load(model_path)?;
        let entropy_model = match args.entropy.get(idx) {
            Some(path) => Some(EntropyModel::load(path)?),
            None => None,
        };
        let label = model_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("model{idx}"));
        codecs.push(CurveCodec {
            label,
            params,
            entropy: entropy_model,
        });
    }

    let mut rows = metrics::rd_curve(&args.images, &codecs)?;
    if let Some(baseline) = &args.baseline_csv {
        rows.extend(metrics::read_csv(baseline)?);
    }
    metrics::write_csv(&args.out, &rows)?;
    println!("wrote {} rows to {}", rows.len(), args.out.display());
    Ok(())
}
