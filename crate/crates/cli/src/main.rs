//! `quantkit` command-line front end. Every command writes its outputs and a
//! `resolved_options.json` into `--out`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use quantkit::calib::{calibrate, CalibConfig, CalibrationProfile, Granularity};
use quantkit::graph::{
    load_model, load_model_with_extension, save_model, toy_mobilenet, toy_resnet, FixtureSpec, ModelGraph,
};
use quantkit::nnexec::{
    evaluate, load_dataset, make_toy_dataset_with, save_dataset, train, Accuracy, Augmentation, DatasetSplit,
    ToyDataConfig, TrainConfig,
};
use quantkit::prune::{run_pipeline, PipelineConfig};
use quantkit::quantize::{
    build_quantized, evaluate_quantized, load_quantized, plan_placement_with, save_quantized, AccumMode, OverflowAudit,
    PlacementOptions, QuantizeConfig,
};
use quantkit::{par, Error};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "quantkit", version, about = "Toy-scale quantization toolkit")]
struct Cli {
    /// Global seed; falls back to QUANTKIT_SEED, then 0.
    #[arg(long, global = true, env = "QUANTKIT_SEED", default_value_t = 0)]
    seed: u64,
    /// Cap on worker threads.
    #[arg(long, global = true, value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic toy dataset as `train/` and `eval/` splits.
    GenData(GenDataArgs),
    /// Train a toy fixture in fp32.
    Train(TrainArgs),
    /// Evaluate an fp or quantized model on the eval split.
    Eval(EvalArgs),
    /// Calibrate activation scales with the tolerance-KL sweep.
    Calibrate(CalibrateArgs),
    /// Post-training quantization to an integer model.
    Quantize(QuantizeArgs),
    /// Prune, fine-tune, quantize and QAT-fine-tune.
    Pipeline(PipelineArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    classes: u32,
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u32).range(1..))]
    per_class: u32,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u32).range(4..))]
    image_size: u32,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Arch {
    Resnet,
    Mobilenet,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    arch: Arch,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with training options; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    augmentation: Option<AugArg>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum AugArg {
    Aggressive,
    Weak,
    None,
}

impl From<AugArg> for Augmentation {
    fn from(a: AugArg) -> Self {
        match a {
            AugArg::Aggressive => Augmentation::AggressiveCrop,
            AugArg::Weak => Augmentation::WeakCrop,
            AugArg::None => Augmentation::None,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_tolerance(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(t) if t >= 1.0 && t.is_finite() => Ok(t),
        _ => Err(format!("tolerance must be a finite number >= 1, got `{s}`")),
    }
}

fn parse_sparsity(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        _ => Err(format!("sparsity must lie in [0, 1), got `{s}`")),
    }
}

#[derive(Args, Debug, Serialize)]
struct CalibArgs {
    #[arg(long, value_parser = parse_tolerance)]
    tolerance: Option<f64>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    batches: Option<u32>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    batch_size: Option<u32>,
}

impl CalibArgs {
    fn config(&self, bits: u8) -> CalibConfig {
        let d = CalibConfig::default();
        CalibConfig {
            tolerance: self.tolerance.unwrap_or(d.tolerance),
            batches: self.batches.map_or(d.batches, |b| b as usize),
            batch_size: self.batch_size.map_or(d.batch_size, |b| b as usize),
            bits,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct CalibrateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    calib: CalibArgs,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    bits: u8,
    /// Use signed codes at every site.
    #[arg(long)]
    signed_only: bool,
    /// Also write one `kl_<site>.csv` per site under `out/kl`.
    #[arg(long)]
    dump_kl: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum GranularityArg {
    Layer,
    Channel,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum AccumArg {
    Int16,
    Int32,
}

#[derive(Args, Debug, Serialize)]
struct QuantizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    wbits: u8,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u8).range(2..=8))]
    abits: u8,
    #[arg(long, value_enum, default_value = "channel")]
    granularity: GranularityArg,
    #[arg(long, value_enum, default_value = "int32")]
    accum: AccumArg,
    /// Use signed codes for ReLU outputs too.
    #[arg(long)]
    signed_only: bool,
    /// Also quantize the inputs of every Add.
    #[arg(long)]
    quantize_add: bool,
    /// Layers kept in fp32; repeatable.
    #[arg(long = "fp-layer")]
    fp_layers: Vec<String>,
    #[command(flatten)]
    calib: CalibArgs,
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_sparsity)]
    sparsity: f64,
    /// TOML file with `finetune`, `calib`, `quantize` and `qat` tables.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Command failures, each with its exit code.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::Io(e))
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Lib(Error::Validation(_)) => 3,
            Failure::Lib(Error::Numeric(_) | Error::DegenerateSite { .. }) => 4,
            Failure::Lib(Error::Io(_) | Error::Format(_)) => 5,
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text + "\n")?;
    Ok(())
}

#[derive(Serialize)]
struct Resolved<'a, A: Serialize, C: Serialize> {
    command: &'a str,
    seed: u64,
    threads: Option<u16>,
    args: &'a A,
    config: C,
}

fn record<A: Serialize, C: Serialize>(cli: &Cli, out: &Path, command: &str, args: &A, config: C) -> CmdResult {
    fs::create_dir_all(out)?;
    let r = Resolved { command, seed: cli.seed, threads: cli.threads, args, config };
    write_json(&out.join("resolved_options.json"), &r)
}

fn load_split(dir: &Path) -> Result<DatasetSplit, Failure> {
    let train = load_dataset(dir.join("train"), None)?;
    let eval = load_dataset(dir.join("eval"), Some(train.classes))?;
    Ok(DatasetSplit { train, eval })
}

#[derive(Serialize)]
struct Metrics {
    model: String,
    quantized: bool,
    samples: usize,
    top1: f64,
    top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    overflow: Option<OverflowAudit>,
}

impl Metrics {
    fn new(model: &Path, acc: &Accuracy, overflow: Option<OverflowAudit>) -> Self {
        Metrics {
            model: model.display().to_string(),
            quantized: overflow.is_some(),
            samples: acc.total,
            top1: acc.top1,
            top5: acc.top5,
            overflow,
        }
    }

    fn text(&self) -> String {
        let mut s = format!("samples  {}\ntop1     {:.2}\n", self.samples, 100.0 * self.top1);
        if let Some(t5) = self.top5 {
            s += &format!("top5     {:.2}\n", 100.0 * t5);
        }
        if let Some(a) = &self.overflow {
            s += &format!("accumulations {}  saturated {}\n", a.total(), a.saturated());
        }
        s
    }

    fn write(&self, out: &Path, stem: &str) -> CmdResult {
        write_json(&out.join(format!("{stem}.json")), self)?;
        fs::write(out.join(format!("{stem}.txt")), self.text())?;
        print!("{}", self.text());
        Ok(())
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> CmdResult {
    let cfg = ToyDataConfig::default();
    record(cli, &a.out, "gen-data", a, cfg)?;
    let split = make_toy_dataset_with(cli.seed, a.classes as usize, a.per_class as usize, a.image_size as usize, &cfg)?;
    save_dataset(&split.train, a.out.join("train"))?;
    save_dataset(&split.eval, a.out.join("eval"))?;
    println!("train {}  eval {}", split.train.len(), split.eval.len());
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> CmdResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = cli.seed;
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    if let Some(aug) = a.augmentation {
        cfg.augmentation = aug.into();
    }
    record(cli, &a.out, "train", a, &cfg)?;
    let data = load_split(&a.data)?;
    let shape = data.train.sample_shape();
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::Validation(format!("samples must be square [c, s, s], got {shape:?}")).into());
    }
    let spec = FixtureSpec { in_channels: shape[0], image_size: shape[1], classes: data.train.classes, seed: cli.seed };
    let g = match a.arch {
        Arch::Resnet => toy_resnet(&spec),
        Arch::Mobilenet => toy_mobilenet(&spec),
    };
    let trained = train(&g, &data.train, &cfg)?;
    save_model(&trained, a.out.join("model"))?;
    Metrics::new(&a.out.join("model"), &evaluate(&trained, &data.eval)?, None).write(&a.out, "metrics")
}

fn eval_cmd(cli: &Cli, a: &EvalArgs) -> CmdResult {
    record(cli, &a.out, "eval", a, ())?;
    let eval = load_split(&a.data)?.eval;
    let (_, ext) = load_model_with_extension(&a.model)?;
    let metrics = if ext.is_some() {
        let (acc, audit) = evaluate_quantized(&load_quantized(&a.model)?, &eval)?;
        Metrics::new(&a.model, &acc, Some(audit))
    } else {
        Metrics::new(&a.model, &evaluate(&load_model(&a.model)?, &eval)?, None)
    };
    metrics.write(&a.out, "metrics")
}

fn place(g: &ModelGraph, signed_only: bool, quantize_add: bool) -> ModelGraph {
    plan_placement_with(g, PlacementOptions { quantize_add_inputs: quantize_add, unsigned_relu: !signed_only })
}

fn calibrate_cmd(cli: &Cli, a: &CalibrateArgs) -> CmdResult {
    let cfg = a.calib.config(a.bits);
    record(cli, &a.out, "calibrate", a, &cfg)?;
    let placed = place(&load_model(&a.model)?, a.signed_only, false);
    let profile = calibrate(&placed, &load_split(&a.data)?.train, &cfg)?;
    profile.save(a.out.join("profile.json"))?;
    if a.dump_kl {
        profile.write_kl_csv(a.out.join("kl"))?;
    }
    print!("{}", profile_text(&profile));
    Ok(())
}

fn profile_text(p: &CalibrationProfile) -> String {
    let width = p.sites.keys().map(String::len).max().unwrap_or(4).max(4);
    let mut s = format!("{:width$}  {:>8}  {:>12}  {:>6}  {:>6}\n", "site", "sign", "scale", "id_min", "id_opt");
    for (id, site) in &p.sites {
        s += &format!(
            "{id:width$}  {:>8}  {:>12.6e}  {:>6}  {:>6}\n",
            format!("{:?}", site.params.signedness).to_lowercase(),
            site.params.scales[0],
            site.curve.id_min,
            site.curve.id_opt
        );
    }
    s
}

fn quantize_cmd(cli: &Cli, a: &QuantizeArgs) -> CmdResult {
    let calib = a.calib.config(a.abits);
    let qcfg = QuantizeConfig {
        weight_bits: a.wbits,
        granularity: match a.granularity {
            GranularityArg::Layer => Granularity::LayerWise,
            GranularityArg::Channel => Granularity::ChannelWise,
        },
        accum: match a.accum {
            AccumArg::Int16 => AccumMode::Int16,
            AccumArg::Int32 => AccumMode::Int32,
        },
        fp_layers: a.fp_layers.clone(),
    };
    record(cli, &a.out, "quantize", a, (&calib, &qcfg))?;
    let data = load_split(&a.data)?;
    let placed = place(&load_model(&a.model)?, a.signed_only, a.quantize_add);
    let profile = calibrate(&placed, &data.train, &calib)?;
    let qm = build_quantized(&placed, &profile, &qcfg)?;
    profile.save(a.out.join("profile.json"))?;
    let dir = a.out.join("model");
    save_quantized(&qm, &dir)?;
    let (acc, audit) = evaluate_quantized(&qm, &data.eval)?;
    Metrics::new(&dir, &acc, Some(audit)).write(&a.out, "overflow_report")
}

fn pipeline_cmd(cli: &Cli, a: &PipelineArgs) -> CmdResult {
    let mut cfg: PipelineConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => PipelineConfig::default(),
    };
    cfg.finetune.seed = cli.seed;
    cfg.qat.seed = cli.seed;
    record(cli, &a.out, "pipeline", a, &cfg)?;
    let data = load_split(&a.data)?;
    let state = run_pipeline(&load_model(&a.model)?, a.sparsity, &data, &cfg)?;
    save_model(&state.m1, a.out.join("m1"))?;
    save_model(&state.m2, a.out.join("m2"))?;
    save_quantized(&state.m3, a.out.join("m3"))?;
    save_model(&state.m4_master, a.out.join("m4_master"))?;
    save_quantized(&state.m4, a.out.join("m4"))?;
    write_json(&a.out.join("mask.json"), &state.mask)?;
    state.report.write(&a.out)?;
    print!("{}", state.report.to_text());
    Ok(())
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        par::init_threads(n as usize);
    }
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Calibrate(a) => calibrate_cmd(cli, a),
        Command::Quantize(a) => quantize_cmd(cli, a),
        Command::Pipeline(a) => pipeline_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            ExitCode::from(f.code())
        }
    }
}
