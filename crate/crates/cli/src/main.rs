use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use permix_core::{
    default_data_dir, evaluate, load_model, montage, prepare_data, run_train, save_gray, save_model, ChannelView,
    DataConfig, DataSource, Error, RotScoring, RunConfig, ScoreMode, TaskModels, Variation,
};

#[derive(Parser)]
#[command(
    name = "permix",
    version,
    about = "Train, evaluate and inspect stacked mixture feature networks"
)]
struct Cli {
    /// Worker threads (0 = all cores). One thread gives bit-identical runs.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train feature layers and a task layer, write a model file and a JSON report.
    Train(TrainArgs),
    /// Error rate and confusion matrix of a model on a data split.
    Eval(EvalArgs),
    /// Render a montage of a layer's dictionary means.
    Inspect(InspectArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory with the IDX digit files and a textures/ folder.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Variation to generate from the IDX digits.
    #[arg(long, default_value = "basic")]
    variation: String,
    /// Published amat training file (used together with --amat-test instead of --data).
    #[arg(long, requires = "amat_test")]
    amat_train: Option<PathBuf>,
    #[arg(long, requires = "amat_train")]
    amat_test: Option<PathBuf>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_valid: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Seed of the variation generator and the split.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

impl DataArgs {
    fn config(&self) -> Result<DataConfig, Error> {
        let variation: Variation = self.variation.parse()?;
        let mut cfg = match (&self.amat_train, &self.amat_test) {
            (Some(train), Some(test)) => DataConfig {
                source: DataSource::Amat {
                    train: train.clone(),
                    test: test.clone(),
                },
                train: 10_000,
                valid: 2_000,
                test: 50_000,
                ..DataConfig::idx(PathBuf::new(), variation)
            },
            _ => DataConfig::idx(self.data.clone().unwrap_or_else(default_data_dir), variation),
        };
        cfg.seed = self.data_seed;
        if let Some(n) = self.n_train {
            cfg.train = n;
        }
        if let Some(n) = self.n_valid {
            cfg.valid = n;
        }
        if let Some(n) = self.n_test {
            cfg.test = n;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Marginal,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum RotArg {
    Shortcut,
    Exact,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON run config; flags given explicitly override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// plain, plain-svm or oriented (default plain).
    #[arg(long)]
    preset: Option<String>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Patches sampled for each feature layer.
    #[arg(long)]
    n_patches: Option<usize>,
    /// EM iteration cap for feature layers.
    #[arg(long)]
    max_iters: Option<usize>,
    /// EM iteration cap for the task layer.
    #[arg(long)]
    task_max_iters: Option<usize>,
    /// Labeled samples per class for the task layer.
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    rot_scoring: Option<RotArg>,
    /// Standardize per-class scores with statistics from the training features.
    #[arg(long)]
    standardize: bool,
    #[arg(long)]
    out: PathBuf,
    /// Write the training report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Max,
    PerChannel,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Feature layer index (1 = first mixture layer); omit for the task layer.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, value_enum, default_value = "max")]
    view: ViewArg,
    /// For rotation layers, show only the canonical rotation of each part.
    #[arg(long)]
    canonical_only: bool,
    /// Output image, `.pgm` or `.png`.
    #[arg(long)]
    out: PathBuf,
}

fn emit(value: &impl Serialize, path: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value)?;
    match path {
        Some(p) => fs::write(p, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::MissingInput(path.clone()));
            }
            serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?
        }
        None => RunConfig::new("plain", args.data.config()?),
    };
    if let Some(p) = &args.preset {
        cfg.preset = p.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.n_patches {
        cfg.n_patches = n;
    }
    if let Some(n) = args.max_iters {
        cfg.em.max_iters = n;
    }
    if let Some(n) = args.task_max_iters {
        cfg.task_em.max_iters = n;
    }
    if args.per_class.is_some() {
        cfg.data.per_class = args.per_class;
    }
    if let Some(m) = args.mode {
        cfg.predict.mode = match m {
            ModeArg::Marginal => ScoreMode::Marginal,
            ModeArg::Max => ScoreMode::Max,
        };
    }
    if let Some(r) = args.rot_scoring {
        cfg.predict.rot_scoring = match r {
            RotArg::Shortcut => RotScoring::Shortcut,
            RotArg::Exact => RotScoring::Exact,
        };
    }
    if args.standardize {
        cfg.calibrate = true;
        cfg.predict.standardize = true;
    }
    // fail on a bad preset before loading any data
    cfg.resolve_preset()?;
    let data = prepare_data(&cfg.data)?;
    log::info!("training {} on {} ({} images)", cfg.preset, data.id, data.train.len());
    let (model, report) = run_train(&cfg, &data)?;
    save_model(&args.out, &model)?;
    emit(&report, args.report.as_deref())
}

fn eval(args: EvalArgs) -> Result<(), Error> {
    let model = load_model(&args.model)?;
    let data = prepare_data(&args.data.config()?)?;
    let ds = match args.split {
        SplitArg::Train => &data.train,
        SplitArg::Valid => &data.valid,
        SplitArg::Test => &data.test,
    };
    emit(&evaluate(&model, ds)?, args.report.as_deref())
}

fn inspect(args: InspectArgs) -> Result<(), Error> {
    let model = load_model(&args.model)?;
    let view = match args.view {
        ViewArg::Max => ChannelView::Max,
        ViewArg::PerChannel => ChannelView::PerChannel,
    };
    let net = &model.network;
    let (parts, count, size, channels) = match args.layer {
        Some(l) => {
            let dict = net
                .dictionary(l)
                .ok_or_else(|| Error::InvalidArgument(format!("layer {l} has no dictionary")))?;
            let size = net.layers()[l].coding.patch_size;
            let keep: Vec<usize> = (0..dict.len())
                .filter(|&k| !args.canonical_only || dict.meta()[k].transform == 0)
                .collect();
            let parts: Vec<f64> = keep.iter().flat_map(|&k| dict.part(k).iter().copied()).collect();
            (parts, keep.len(), size, net.input_channels(l))
        }
        None => {
            let task = model
                .task
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("model has no task layer".into()))?;
            let last = net.layers().len();
            // the task layer sees the last feature map; infer its side from the dimension
            let channels = net.layers()[last - 1].output_layout().channels();
            let (parts, count) = match &task.model.models {
                TaskModels::Mixture(ms) => (
                    ms.iter().flat_map(|m| m.mu().iter().copied()).collect::<Vec<_>>(),
                    ms.iter().map(|m| m.components()).sum(),
                ),
                TaskModels::RotMix(ms) => {
                    let mut parts = Vec::new();
                    let mut count = 0;
                    for m in ms {
                        for f in 0..m.components() {
                            for w in 0..m.order() {
                                if !args.canonical_only || w == 0 {
                                    parts.extend_from_slice(m.block(f, w));
                                    count += 1;
                                }
                            }
                        }
                    }
                    (parts, count)
                }
                TaskModels::Svm(_) => {
                    return Err(Error::InvalidArgument("svm task layers have no means to render".into()))
                }
            };
            let side = ((task.model.dim() / channels) as f64).sqrt().round() as usize;
            (parts, count, side, channels)
        }
    };
    let img = montage(&parts, count, size, channels, view)?;
    save_gray(&img, &args.out)?;
    eprintln!("wrote {} tiles to {}", count, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 1 })
        }
    }
}
