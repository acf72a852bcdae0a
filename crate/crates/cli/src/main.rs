//! `videomap`: pretrain, fine-tune, evaluate, benchmark and generate data.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use videomap_core::checkpoint::{load_model, save_checkpoint};
use videomap_core::cost::{cost_model, CostReport};
use videomap_core::data::{make_dataset, read_dataset, ClipDims, Dataset, DatasetKind};
use videomap_core::finetune::{evaluate, finetune_run, Init, EVAL_CSV_HEADER};
use videomap_core::pretrain::run_pretrain;
use videomap_core::{Error, Model, ModelConfig, Result, RunConfig, Tensor};

#[derive(Parser)]
#[command(name = "videomap", version, about = "Hybrid SSM/attention video encoder with masked next-frame pretraining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain encoder and decoder; writes a checkpoint and a `step,loss` CSV.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier from a checkpoint or from scratch.
    Finetune(FinetuneArgs),
    /// Evaluate a fine-tuned checkpoint on a labeled dataset.
    Eval(EvalArgs),
    /// Analytic FLOP and activation counts for SSM, attention and hybrid stacks.
    Bench(BenchArgs),
    /// Generate a synthetic moving-sprite dataset file.
    GenData(GenDataArgs),
}

/// Flags shared by every command that builds a model config.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// `key=value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "mask-ratio")]
    mask_ratio: Option<f64>,
    #[arg(long = "ar-mode")]
    ar_mode: Option<String>,
    /// SSM layers per attention layer (0 = pure attention).
    #[arg(long)]
    ratio: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config {
                key: "config".into(),
                message: format!("cannot read {}: {e}", path.display()),
            })?;
            cfg.apply_text(&text)?;
        }
        let overrides = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("mask_ratio", self.mask_ratio.map(|v| v.to_string())),
            ("ar_mode", self.ar_mode.clone()),
            ("mamba_per_attn", self.ratio.map(|v| v.to_string())),
            ("depth", self.depth.map(|v| v.to_string())),
        ];
        for (key, value) in overrides {
            if let Some(value) = value {
                cfg.set(key, &value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Unlabeled dataset file (optional when `--steps 0`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve path; defaults to the checkpoint path with `.loss.csv` appended.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Labeled training dataset.
    #[arg(long)]
    data: PathBuf,
    /// Labeled validation dataset; without it the last quarter of `--data` is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Checkpoint path or `scratch`.
    #[arg(long, default_value = "scratch")]
    init: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Fine-tuned checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch `epoch,top1,top5` CSV; defaults to the checkpoint path with `.eval.csv` appended.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Fine-tuned checkpoint to evaluate.
    #[arg(long)]
    init: PathBuf,
    /// Labeled dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated sequence lengths.
    #[arg(long = "L", value_delimiter = ',', default_value = "64,256,1024")]
    lens: Vec<u64>,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pretrain,
    Labeled,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum, default_value = "pretrain")]
    kind: Kind,
    #[arg(long, default_value_t = 256)]
    clips: usize,
    #[arg(long, default_value_t = 4)]
    classes: u16,
    #[arg(long)]
    out: PathBuf,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn dims_of(m: &ModelConfig) -> ClipDims {
    ClipDims { frames: m.frames, channels: m.channels, height: m.image_size, width: m.image_size }
}

fn load_dataset(path: &Path, m: &ModelConfig) -> Result<Dataset> {
    let ds = read_dataset(path)?;
    if ds.dims != dims_of(m) {
        return Err(Error::Data(format!(
            "{} holds {:?} clips, config expects {:?}",
            path.display(),
            ds.dims,
            dims_of(m)
        )));
    }
    Ok(ds)
}

fn pretrain(args: &PretrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let clips: Vec<Tensor> = match &args.data {
        Some(path) => load_dataset(path, &cfg.model)?.clips(),
        None if args.steps == 0 => Vec::new(),
        None => return Err(Error::Data("--data is required when --steps > 0".into())),
    };
    let mut model = Model::new(&cfg)?;
    let csv_path = args.csv.clone().unwrap_or_else(|| with_suffix(&args.out, ".loss.csv"));
    let mut csv = create(&csv_path)?;
    let curve = run_pretrain(&mut model, &clips, args.steps, Some(&mut csv))?;
    csv.flush()?;
    save_checkpoint(&model, &args.out)?;
    match curve.last() {
        Some(last) => eprintln!("pretrained {} steps, final loss {last:.6}", curve.len()),
        None => eprintln!("wrote initial checkpoint"),
    }
    Ok(())
}

fn finetune(args: &FinetuneArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let data = load_dataset(&args.data, &cfg.model)?;
    let classes = data.classes as usize;
    let mut train = data.labeled()?;
    let val = match &args.val {
        Some(path) => load_dataset(path, &cfg.model)?.labeled()?,
        None => {
            let held = train.len() / 4;
            train.split_off(train.len() - held)
        }
    };
    let init = if args.init == "scratch" { Init::Scratch } else { Init::Checkpoint(PathBuf::from(&args.init)) };
    let result = finetune_run(&cfg, &init, &train, &val, classes, args.epochs, cfg.model.seed)?;
    let csv_path = args.csv.clone().unwrap_or_else(|| with_suffix(&args.out, ".eval.csv"));
    let mut csv = create(&csv_path)?;
    writeln!(csv, "{EVAL_CSV_HEADER}")?;
    for r in &result.history {
        writeln!(csv, "{}", r.csv_row())?;
    }
    csv.flush()?;
    save_checkpoint(&result.model, &args.out)?;
    print!("{}", result.best.to_text());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let model = load_model(&args.init)?;
    let data = load_dataset(&args.data, &model.config.model)?;
    let report = evaluate(&model, &data.labeled()?, 0, args.seed)?;
    let text = report.to_text();
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn bench(args: &BenchArgs) -> Result<()> {
    let cfg = args.config.resolve()?.model;
    if args.lens.contains(&0) {
        return Err(Error::Config { key: "L".into(), message: "sequence lengths must be >= 1".into() });
    }
    let variants = [
        ("ssm", ModelConfig { mamba_per_attn: cfg.depth.max(1), ..cfg.clone() }),
        ("attention", ModelConfig { mamba_per_attn: 0, ..cfg.clone() }),
        ("hybrid", cfg.clone()),
    ];
    let mut out: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    writeln!(out, "L,arch,flops,activations")?;
    for (arch, variant) in &variants {
        for CostReport { seq_len, total_flops, peak_activations, .. } in cost_model(variant, &args.lens) {
            writeln!(out, "{seq_len},{arch},{total_flops},{peak_activations}")?;
        }
    }
    out.flush()?;
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let cfg = args.config.resolve()?.model;
    let kind = match args.kind {
        Kind::Pretrain => DatasetKind::Pretrain,
        Kind::Labeled => DatasetKind::Labeled,
    };
    let ds = make_dataset(kind, args.clips, args.classes, cfg.seed, dims_of(&cfg))?;
    ds.write(&args.out)?;
    eprintln!("wrote {} clips to {}", ds.len(), args.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Pretrain(a) => pretrain(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
        Command::GenData(a) => gen_data(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Numeric(_)) { 2 } else { 1 })
        }
    }
}
