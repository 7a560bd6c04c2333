use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use dcnfis::checkpoint::Checkpoint;
use dcnfis::data::{self, Dataset, Split};
use dcnfis::explain::{self, Quantity, MEDOID_CAP};
use dcnfis::{fuzzy, image, trainer, util, Dcnfis, Error, TrainConfig};

/// Train, evaluate and explain deep convolutional neuro-fuzzy classifiers.
#[derive(Parser)]
#[command(name = "dcnfis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus per-epoch metrics.
    Train(TrainArgs),
    /// Accuracy and confusion matrix of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write the fuzzy rule base of a checkpoint as text.
    Rules(RulesArgs),
    /// Medoid and saliency images.
    Explain(ExplainArgs),
    /// Backbone features of every sample as CSV.
    ExportFeatures(ExportArgs),
    /// Per-pixel mean of the training split.
    MeanImage(MeanImageArgs),
}

#[derive(Args)]
struct DataArg {
    /// Directory with train-* and t10k-* IDX files.
    #[arg(long, env = "DCNFIS_DATA_DIR")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// key = value training config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint path, rewritten after every epoch.
    #[arg(long, value_parser = non_empty_path)]
    out: PathBuf,
    /// Metrics CSV path [default: <out>.metrics.csv].
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "BOOL")]
    mean_subtract: Option<bool>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitName {
    Train,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_parser = non_empty_path)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    split: SplitName,
    /// Confusion matrix CSV [default: <ckpt>.<split>.confusion.csv].
    #[arg(long)]
    confusion: Option<PathBuf>,
}

#[derive(Args)]
struct RulesArgs {
    #[arg(long, value_parser = non_empty_path)]
    ckpt: PathBuf,
    #[arg(long, value_parser = non_empty_path)]
    out: PathBuf,
    /// File with one feature name per line.
    #[arg(long)]
    feature_names: Option<PathBuf>,
}

#[derive(Args)]
#[command(group(ArgGroup::new("what").required(true).args(["medoids", "sample", "misclassified"])))]
struct ExplainArgs {
    #[arg(long, value_parser = non_empty_path)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArg,
    /// Output directory, created if missing.
    #[arg(long, value_parser = non_empty_path)]
    out: PathBuf,
    /// Per-rule medoid images, their saliency maps and a JSON report.
    #[arg(long)]
    medoids: bool,
    /// Comparison row for one sample of --split.
    #[arg(long, value_name = "ID")]
    sample: Option<usize>,
    /// Comparison rows for the first K misclassified samples of --split.
    #[arg(long, value_name = "K")]
    misclassified: Option<usize>,
    #[arg(long, value_enum, default_value_t = SplitName::Train)]
    split: SplitName,
    /// Differentiate the class probability instead of the logit.
    #[arg(long)]
    probability: bool,
    /// Largest cluster scored exhaustively when finding medoids.
    #[arg(long, default_value_t = MEDOID_CAP)]
    cap: usize,
    /// Seed for subsampling clusters above the cap.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long, value_parser = non_empty_path)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long, value_enum, default_value_t = SplitName::Train)]
    split: SplitName,
    #[arg(long, value_parser = non_empty_path)]
    out: PathBuf,
}

#[derive(Args)]
struct MeanImageArgs {
    #[command(flatten)]
    data: DataArg,
    /// PGM path; a raw f32 sidecar is written next to it.
    #[arg(long, value_parser = non_empty_path)]
    out: PathBuf,
}

fn non_empty_path(s: &str) -> Result<PathBuf, String> {
    if s.trim().is_empty() {
        Err("path must not be empty".into())
    } else {
        Ok(PathBuf::from(s))
    }
}

/// Failure category, reported on stderr and as the exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Category {
    Numeric = 1,
    Data = 2,
    Config = 3,
}

impl Category {
    fn of(e: &Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::Diverged { .. } | Error::NonDeterministic { .. } | Error::NonScalarLoss(_) | Error::BackwardAlreadyRun => {
                Category::Numeric
            }
            Error::Idx(_) | Error::Checkpoint(_) | Error::Io { .. } | Error::Json(_) | Error::Shape { .. } => Category::Data,
            Error::Config { .. } | Error::Backbone { .. } | Error::Invalid(_) => Category::Config,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Category::Numeric => "numeric",
            Category::Data => "data",
            Category::Config => "config",
        }
    }
}

struct Failure(Category, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(Category::of(&e), e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn data_dir(arg: &DataArg) -> Result<&Path, Failure> {
    arg.data
        .as_deref()
        .ok_or_else(|| Failure(Category::Data, "no data directory: pass --data or set DCNFIS_DATA_DIR".into()))
}

fn load_dataset(arg: &DataArg) -> Result<Dataset, Failure> {
    Ok(Dataset::load_dir(data_dir(arg)?).map_err(Error::from)?)
}

/// The split as the checkpoint's model saw it during training.
fn model_split(ds: &Dataset, ck: &Checkpoint, which: SplitName) -> Split {
    let mut split = match which {
        SplitName::Train => ds.train.clone(),
        SplitName::Test => ds.test.clone(),
    };
    if let Some(mean) = &ck.mean {
        data::subtract_mean(&mut split, mean);
    }
    split
}

fn check_compatible(model: &Dcnfis, split: &Split) -> CmdResult {
    let [c, h, w] = model.backbone.config().input;
    if c != 1 || (h, w) != (split.rows, split.cols) {
        return Err(Failure(
            Category::Data,
            format!("model expects {c}x{h}x{w} inputs but the data holds 1x{}x{} images", split.rows, split.cols),
        ));
    }
    if let Some(l) = split.labels.iter().find(|&&l| l as usize >= model.n_classes()) {
        return Err(Failure(Category::Data, format!("label {l} exceeds the model's {} classes", model.n_classes())));
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e).into())
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let mut cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mean_subtract {
        cfg.mean_subtract = m;
    }
    let ds = load_dataset(&args.data)?;
    if cfg.backbone.input != [1, ds.train.rows, ds.train.cols] {
        return Err(Failure(
            Category::Config,
            format!("backbone input {:?} does not match {}x{} images", cfg.backbone.input, ds.train.rows, ds.train.cols),
        ));
    }
    let metrics_path = args.metrics.clone().unwrap_or_else(|| with_suffix(&args.out, ".metrics.csv"));
    let model = Dcnfis::new(cfg.backbone.clone(), ds.n_classes, cfg.seed)?;
    let mut history = Vec::new();
    let initial = Checkpoint {
        model: model.clone(),
        mean: trainer::prepare_dataset(&ds, &cfg)?.mean,
        seed: cfg.seed,
        epoch: 0,
    };
    initial.save(&args.out)?;
    util::write_atomic_str(&metrics_path, &trainer::metrics_csv(&history))?;
    let result = trainer::train_with(model, &ds, &cfg, |m, ck| {
        history.push(m.clone());
        ck.save(&args.out)?;
        util::write_atomic_str(&metrics_path, &trainer::metrics_csv(&history))
    });
    match result {
        Ok(out) => {
            match out.history.last() {
                Some(m) => println!("final test accuracy {:.4}", m.test_acc),
                None => println!("no epochs run; wrote the initial model"),
            }
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => {
            if let Error::Diverged { last_good, .. } = &e {
                last_good.save(&args.out)?;
            }
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    let split = model_split(&ds, &ck, args.split);
    check_compatible(&ck.model, &split)?;
    let ev = trainer::evaluate(&ck.model, &split)?;
    let path = args
        .confusion
        .unwrap_or_else(|| with_suffix(&args.ckpt, &format!(".{}.confusion.csv", args.split)));
    util::write_atomic_str(&path, &ev.confusion_csv())?;
    println!("accuracy {:.4}", ev.accuracy);
    println!("loss {:.6}", ev.loss);
    Ok(())
}

fn cmd_rules(args: RulesArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.ckpt)?;
    let names = match &args.feature_names {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).filter(|l| !l.is_empty()).collect();
            if names.len() != ck.model.head.n_features() {
                return Err(Failure(
                    Category::Config,
                    format!("{} feature names for {} features", names.len(), ck.model.head.n_features()),
                ));
            }
            Some(names)
        }
        None => None,
    };
    let text = fuzzy::render_rules(&ck.model.head, names.as_deref());
    util::write_atomic_str(&args.out, &text)?;
    println!("wrote {} rules to {}", ck.model.head.n_rules(), args.out.display());
    Ok(())
}

fn write_row(dir: &Path, stem: &str, row: &explain::ComparisonRow, rows: usize, cols: usize) -> CmdResult {
    let (w, pixels) = row.render(rows, cols);
    image::write_pgm(&dir.join(format!("{stem}.pgm")), w, rows, &pixels)?;
    let raw: Vec<f32> = row.panels.iter().flatten().copied().collect();
    image::write_f32_sidecar(&dir.join(format!("{stem}.f32")), &raw)?;
    Ok(())
}

fn cmd_explain(args: ExplainArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    let train = model_split(&ds, &ck, SplitName::Train);
    let split = model_split(&ds, &ck, args.split);
    check_compatible(&ck.model, &train)?;
    check_compatible(&ck.model, &split)?;
    if let Some(id) = args.sample {
        if id >= split.len() {
            return Err(Failure(Category::Config, format!("sample {id} out of range for {} samples", split.len())));
        }
    }
    create_dir(&args.out)?;
    let quantity = if args.probability { Quantity::Probability } else { Quantity::Logit };
    let model = &ck.model;
    let (rows, cols) = (train.rows, train.cols);
    let report = explain::medoid_report(model, &train, args.cap, args.seed)?;
    let maps = explain::medoid_saliencies(model, &report, &train, quantity)?;
    if args.medoids {
        for (r, map) in report.rules.iter().zip(&maps) {
            let (Some(m), Some(map)) = (r.medoid, map) else {
                log::warn!("rule {} wins no training samples; no medoid", r.rule);
                continue;
            };
            let raw = ds.train.image(m);
            image::write_pgm(&args.out.join(format!("rule_{:02}_medoid.pgm", r.rule)), cols, rows, &image::render_minmax(raw))?;
            image::write_f32_sidecar(&args.out.join(format!("rule_{:02}_medoid.f32", r.rule)), raw)?;
            image::write_pgm(&args.out.join(format!("rule_{:02}_saliency.pgm", r.rule)), cols, rows, &map.render())?;
            image::write_f32_sidecar(&args.out.join(format!("rule_{:02}_saliency.f32", r.rule)), map.values.data())?;
        }
        util::write_atomic_str(&args.out.join("medoids.json"), &report.to_json()?)?;
        println!("wrote medoids for {} rules to {}", report.rules.iter().filter(|r| r.medoid.is_some()).count(), args.out.display());
    }
    if let Some(id) = args.sample {
        let row = explain::comparison_row(model, &split, id, &maps, quantity)?;
        write_row(&args.out, &format!("sample_{id}"), &row, rows, cols)?;
        println!("sample {id}: label {} predicted {}", row.label, row.predicted);
    }
    if let Some(k) = args.misclassified {
        let ids = explain::misclassified(model, &split, k)?;
        let mut index = String::from("row,sample_id,label,predicted\n");
        let mut grid = Vec::new();
        let mut width = 0;
        for (n, &id) in ids.iter().enumerate() {
            let row = explain::comparison_row(model, &split, id, &maps, quantity)?;
            write_row(&args.out, &format!("misclassified_{n:03}_sample_{id}"), &row, rows, cols)?;
            let (w, pixels) = row.render(rows, cols);
            if n > 0 {
                grid.extend(std::iter::repeat_n(255u8, w * explain::ROW_GAP));
            }
            grid.extend(pixels);
            width = w;
            index.push_str(&format!("{n},{id},{},{}\n", row.label, row.predicted));
        }
        util::write_atomic_str(&args.out.join("misclassified.csv"), &index)?;
        if !ids.is_empty() {
            image::write_pgm(&args.out.join("misclassified.pgm"), width, grid.len() / width, &grid)?;
        }
        println!("wrote {} misclassified rows to {}", ids.len(), args.out.display());
    }
    Ok(())
}

fn cmd_export(args: ExportArgs) -> CmdResult {
    let ck = Checkpoint::load(&args.ckpt)?;
    let ds = load_dataset(&args.data)?;
    let split = model_split(&ds, &ck, args.split);
    check_compatible(&ck.model, &split)?;
    let csv = explain::export_features(&ck.model, &split)?;
    util::write_atomic_str(&args.out, &csv)?;
    println!("wrote {} rows to {}", split.len(), args.out.display());
    Ok(())
}

fn cmd_mean_image(args: MeanImageArgs) -> CmdResult {
    let ds = load_dataset(&args.data)?;
    let (mean, rendered) = explain::mean_image(&ds.train)?;
    image::write_pgm(&args.out, ds.train.cols, ds.train.rows, &rendered)?;
    image::write_f32_sidecar(&args.out.with_extension("f32"), &mean)?;
    println!("wrote {}x{} mean image to {}", ds.train.rows, ds.train.cols, args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { Category::Config as u8 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Rules(a) => cmd_rules(a),
        Command::Explain(a) => cmd_explain(a),
        Command::ExportFeatures(a) => cmd_export(a),
        Command::MeanImage(a) => cmd_mean_image(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure(cat, msg)) => {
            eprintln!("error [{}]: {msg}", cat.name());
            ExitCode::from(cat as u8)
        }
    }
}
