//! `dscore` command-line tool.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dscore::data::{load_split, save_idx_dataset, DatasetMeta, Split};
use dscore::nn::{evaluate_stats, load_weights, model_id, save_weights, TrainConfig};
use dscore::pipeline::{augment_train, compare_aug, diagnose, parse_methods, MNIST_FAMILY};
use dscore::report::{write_heatmaps, Comparison, ComparisonRow};
use dscore::transform::transform_dataset;
use dscore::{gen_synthetic, DiagnosisReport, Dataset, ErrorClass, GlyphPlacement, ModelConfig, RunSettings, SyntheticConfig, TransformSpec};

#[derive(Parser)]
#[command(name = "dscore", version, about = "Spatial fitness and robustness diagnosis for small CNNs")]
struct Cli {
    /// Worker threads for evaluation (falls back to DSCORE_THREADS).
    #[arg(long, global = true, env = "DSCORE_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic glyph dataset as IDX files.
    GenData(GenData),
    /// Train a model and write its weights.
    Train(TrainCmd),
    /// Report loss and accuracy of a model on one split.
    Eval(EvalCmd),
    /// Diagnose a trained model and write a report.
    Diagnose(DiagnoseCmd),
    /// Retrain with score-guided augmentation and re-diagnose.
    AugmentTrain(AugmentTrainCmd),
    /// Train with several augmentation methods and tabulate the diagnoses.
    CompareAug(CompareAugCmd),
}

#[derive(Args)]
struct GenData {
    /// Glyph placement: centered or uniform.
    #[arg(long, default_value = "centered")]
    kind: GlyphPlacement,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 24)]
    size: usize,
}

#[derive(Args, Clone)]
struct TrainOpts {
    /// Preset name (mma, mmb, cm, tiny) or a layer list such as "conv(6,5,5) maxpool(2,2) flatten fc(10,softmax)".
    #[arg(long, default_value = "tiny")]
    arch: String,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f32,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainCmd {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Weight file to write.
    #[arg(long, default_value = "model.dsw")]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Split to evaluate: train or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args, Clone, Copy)]
struct GridOpts {
    /// Grid order.
    #[arg(long, default_value_t = 3)]
    n: usize,
    /// Shrink control for the translated test sets.
    #[arg(long, default_value_t = 5.0)]
    t: f64,
}

#[derive(Args)]
struct DiagnoseCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Report file to write.
    #[arg(long, default_value = "report.toml")]
    out: PathBuf,
    #[command(flatten)]
    grid: GridOpts,
    /// Directory for feature and attention heatmaps (.csv and .pgm).
    #[arg(long)]
    heatmap: Option<PathBuf>,
    /// Directory to dump each translated test set as IDX files.
    #[arg(long)]
    dump_transforms: Option<PathBuf>,
}

#[derive(Args)]
struct AugmentTrainCmd {
    #[arg(long)]
    data: PathBuf,
    /// Report whose suggested probability is used when --p is absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Execution probabilities, comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// Start from these weights instead of a fresh model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output directory for weights, reports and comparison.toml.
    #[arg(long, default_value = "augment")]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[command(flatten)]
    grid: GridOpts,
}

#[derive(Args)]
struct CompareAugCmd {
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated subset of none, rhf, rvf, rr, rhv, rpr, guided.
    #[arg(long, default_value = "none,guided")]
    methods: String,
    /// Dataset family; defaults to the one recorded with the dataset.
    #[arg(long = "dataset-family")]
    family: Option<String>,
    /// Guided probability; defaults to the unaugmented run's suggestion.
    #[arg(long)]
    p: Option<f64>,
    /// Comparison file to write.
    #[arg(long, default_value = "comparison.toml")]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
    #[command(flatten)]
    grid: GridOpts,
}

enum Failure {
    Usage(String),
    Core(dscore::Error),
}

impl From<dscore::Error> for Failure {
    fn from(e: dscore::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult = Result<(), Failure>;

/// Files written by the running command; removed unless the command succeeds.
#[derive(Default)]
struct Outputs {
    paths: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
    keep: bool,
}

impl Outputs {
    fn file(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.paths.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    fn dir(&mut self, path: &Path) -> std::io::Result<PathBuf> {
        if !path.exists() {
            fs::create_dir_all(path)?;
            self.dirs.push(path.to_path_buf());
        }
        Ok(path.to_path_buf())
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if self.keep {
            return;
        }
        for p in &self.paths {
            let _ = fs::remove_file(p);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn settings(opts: &TrainOpts, grid: GridOpts) -> RunSettings {
    RunSettings {
        train: TrainConfig { epochs: opts.epochs, lr: opts.lr, batch_size: opts.batch_size, seed: opts.seed },
        n: grid.n,
        t: grid.t,
    }
}

fn load_both(dir: &Path) -> dscore::Result<(Dataset, Dataset)> {
    Ok((load_split(dir, Split::Train)?, load_split(dir, Split::Test)?))
}

fn model_config(arch: &str, data_dir: &Path, train: &Dataset) -> dscore::Result<ModelConfig> {
    let classes = match DatasetMeta::read(data_dir)? {
        Some(meta) => meta.classes,
        None => train.label_bound(),
    };
    ModelConfig::from_arch(arch, Some(train.image_shape()))?.with_classes(classes)
}

fn gen_data(cmd: GenData, out: &mut Outputs) -> CmdResult {
    let cfg = SyntheticConfig {
        kind: cmd.kind,
        classes: cmd.classes,
        n_train: cmd.n_train,
        n_test: cmd.n_test,
        size: cmd.size,
        seed: cmd.seed,
    };
    let data = gen_synthetic(&cfg)?;
    out.dir(&cmd.out)?;
    for split in [Split::Train, Split::Test] {
        let (img, lab) = dscore::data::idx_paths(&cmd.out, split, 1);
        out.file(&img);
        out.file(&lab);
    }
    out.file(&cmd.out.join(dscore::data::METADATA_FILE));
    save_idx_dataset(&cmd.out, &data.train)?;
    save_idx_dataset(&cmd.out, &data.test)?;
    cfg.meta().write(&cmd.out)?;
    println!("wrote {} train and {} test images to {}", data.train.len(), data.test.len(), cmd.out.display());
    Ok(())
}

fn train_cmd(cmd: TrainCmd, out: &mut Outputs) -> CmdResult {
    let (train_set, test) = load_both(&cmd.data)?;
    let cfg = model_config(&cmd.opts.arch, &cmd.data, &train_set)?;
    let mut model = dscore::Model::build(&cfg, cmd.opts.seed)?;
    let tc = TrainConfig { epochs: cmd.opts.epochs, lr: cmd.opts.lr, batch_size: cmd.opts.batch_size, seed: cmd.opts.seed };
    for e in dscore::train(&mut model, &train_set, &tc, None)? {
        eprintln!("epoch {} loss {:.4} accuracy {:.4}", e.epoch + 1, e.loss, e.accuracy);
    }
    let stats = evaluate_stats(&model, &test)?;
    save_weights(&model, &out.file(&cmd.out))?;
    println!("test loss {:.4} accuracy {:.4}", stats.loss, stats.accuracy);
    println!("model {} -> {}", model_id(&model)?, cmd.out.display());
    Ok(())
}

fn eval_cmd(cmd: EvalCmd) -> CmdResult {
    let split = match cmd.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => return Err(Failure::Usage(format!("unknown split `{other}` (train or test)"))),
    };
    let model = load_weights(&cmd.model)?;
    let data = load_split(&cmd.data, split)?;
    let stats = evaluate_stats(&model, &data)?;
    println!("loss {:.4} accuracy {:.4}", stats.loss, stats.accuracy);
    Ok(())
}

fn diagnose_cmd(cmd: DiagnoseCmd, out: &mut Outputs) -> CmdResult {
    let model = load_weights(&cmd.model)?;
    let test = load_split(&cmd.data, Split::Test)?;
    let report = diagnose(&model, &test, cmd.grid.n, cmd.grid.t)?;
    report.write(&out.file(&cmd.out))?;
    if let Some(dir) = &cmd.heatmap {
        out.dir(dir)?;
        for name in ["feature", "attention"] {
            for ext in ["csv", "pgm"] {
                out.file(&dir.join(format!("heatmap_{name}.{ext}")));
            }
        }
        write_heatmaps(&report, dir, "heatmap")?;
    }
    if let Some(dir) = &cmd.dump_transforms {
        out.dir(dir)?;
        for i in 1..=cmd.grid.n * cmd.grid.n {
            let spec = TransformSpec::for_region(cmd.grid.n, cmd.grid.t, i)?;
            let sub = out.dir(&dir.join(format!("region_{i}")))?;
            save_idx_dataset(&sub, &transform_dataset(&test, &spec)?)?;
        }
    }
    print!("{}", report.summary());
    Ok(())
}

fn fmt_p(p: f64) -> String {
    format!("{p:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
}

fn augment_train_cmd(cmd: AugmentTrainCmd, out: &mut Outputs) -> CmdResult {
    let base = cmd.report.as_deref().map(DiagnosisReport::read).transpose()?;
    let ps = if !cmd.p.is_empty() {
        cmd.p.clone()
    } else if let Some(r) = &base {
        vec![r.p]
    } else {
        return Err(Failure::Usage("augment-train needs --report or --p".into()));
    };
    let (train_set, test) = load_both(&cmd.data)?;
    let cfg = model_config(&cmd.opts.arch, &cmd.data, &train_set)?;
    let init = cmd.model.as_deref().map(load_weights).transpose()?;
    let s = settings(&cmd.opts, cmd.grid);
    let runs = augment_train(&cfg, init.as_ref(), &train_set, &test, &s, &ps)?;
    out.dir(&cmd.out)?;
    let mut rows = Vec::new();
    if let Some(r) = &base {
        rows.push(ComparisonRow::from_report("report", cmd.opts.seed, Some(r.p), None, r));
    }
    for (p, run) in &runs {
        let tag = fmt_p(*p);
        save_weights(&run.model, &out.file(&cmd.out.join(format!("model_p{tag}.dsw"))))?;
        run.report.write(&out.file(&cmd.out.join(format!("report_p{tag}.toml"))))?;
        rows.push(ComparisonRow::from_report("guided", cmd.opts.seed, Some(*p), Some(run.test.loss), &run.report));
    }
    let table_path = out.file(&cmd.out.join("comparison.toml"));
    let table = Comparison::append(&table_path, cmd.grid.n, rows)?;
    print!("{}", table.render());
    Ok(())
}

fn compare_aug_cmd(cmd: CompareAugCmd, out: &mut Outputs) -> CmdResult {
    let methods = parse_methods(&cmd.methods)?;
    let family = match cmd.family {
        Some(f) => Some(f),
        None => DatasetMeta::read(&cmd.data)?.map(|m| m.family),
    };
    if let Some(f) = &family {
        dscore::pipeline::check_family(&methods, f)?;
    }
    let (train_set, test) = load_both(&cmd.data)?;
    let cfg = model_config(&cmd.opts.arch, &cmd.data, &train_set)?;
    let s = settings(&cmd.opts, cmd.grid);
    let (table, _) = compare_aug(&cfg, &train_set, &test, &s, &methods, family.as_deref(), cmd.p)?;
    table.write(&out.file(&cmd.out))?;
    print!("{}", table.render());
    if family.as_deref() == Some(MNIST_FAMILY) {
        eprintln!("note: digit data, flips and rotation are disabled");
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(Failure::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    let mut out = Outputs::default();
    match cli.command {
        Command::GenData(c) => gen_data(c, &mut out)?,
        Command::Train(c) => train_cmd(c, &mut out)?,
        Command::Eval(c) => eval_cmd(c)?,
        Command::Diagnose(c) => diagnose_cmd(c, &mut out)?,
        Command::AugmentTrain(c) => augment_train_cmd(c, &mut out)?,
        Command::CompareAug(c) => compare_aug_cmd(c, &mut out)?,
    }
    out.keep = true;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            })
        }
    }
}
