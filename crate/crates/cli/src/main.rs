use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use superad::io::{
    load_cube, load_map_csv, load_mask, save_cube, save_labels_csv, save_map_csv, save_map_pgm,
    save_mask, write_text,
};
use superad::metrics::evaluate;
use superad::modelfile::save_model;
use superad::superpixel::slic_segment;
use superad::train::{logs_to_csv, train};
use superad::{
    rxd, synth, AdaConvConfig, LossKind, ObpmConfig, Perturbation, SceneSpec, TrainConfig,
};

const THREADS_ENV: &str = "SUPERAD_THREADS";

#[derive(Parser)]
#[command(name = "superad", version, about = "Hyperspectral anomaly detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene with planted anomalies.
    Synth(SynthArgs),
    /// Run SLIC superpixel segmentation.
    Segment(SegmentArgs),
    /// Compute an anomaly map.
    Detect(DetectArgs),
    /// Score an anomaly map against ground truth.
    Eval(EvalArgs),
    /// Sweep training parameters over a grid.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    endmembers: usize,
    #[arg(long, default_value_t = 0.005)]
    rate: f64,
    /// Minimum spectral angle to every endmember, radians.
    #[arg(long, default_value_t = 0.25)]
    contrast: f64,
    #[arg(long, default_value_t = 12)]
    smoothness: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 100)]
    segments: usize,
    #[arg(long, default_value_t = superad::superpixel::DEFAULT_COMPACTNESS)]
    compactness: f64,
    #[arg(long, default_value_t = superad::superpixel::DEFAULT_MAX_ITERS)]
    iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Method {
    Superad,
    Rxd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Obpm,
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum PerturbationArg {
    Spp,
    None,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 100)]
    segments: usize,
    #[arg(long, default_value_t = 9)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    kernel: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "obpm")]
    loss: LossArg,
    #[arg(long, value_enum, default_value = "spp")]
    perturbation: PerturbationArg,
}

impl TrainFlags {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            segments: self.segments,
            adaconv: AdaConvConfig {
                window: self.window,
                kernel: self.kernel,
            },
            obpm: ObpmConfig {
                alpha: self.alpha,
                beta: self.beta,
            },
            epochs: self.epochs,
            learning_rate: self.lr,
            seed: self.seed,
            loss_kind: match self.loss {
                LossArg::Obpm => LossKind::Obpm,
                LossArg::L1 => LossKind::L1,
                LossArg::L2 => LossKind::L2,
            },
            perturbation: match self.perturbation {
                PerturbationArg::Spp => Perturbation::Spp,
                PerturbationArg::None => Perturbation::None,
            },
            ..TrainConfig::default()
        }
    }
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "superad")]
    method: Method,
    /// Ground-truth mask; adds per-epoch AUC to epochs.csv.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// `param=v1,v2,...`; repeat for a Cartesian product.
    #[arg(long = "grid", required = true)]
    grids: Vec<String>,
    #[command(flatten)]
    train: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg.replace('\n', " ")
}

fn write_manifest(out: &Path, subcommand: &str, config: Value, inputs: Value, outputs: &[&str], seed: u64) -> Result<()> {
    let manifest = json!({
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": env!("CARGO_PKG_VERSION"),
        "threads": std::env::var(THREADS_ENV).ok(),
    });
    write_text(out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let spec = SceneSpec {
        height: a.height,
        width: a.width,
        bands: a.bands,
        endmember_count: a.endmembers,
        anomaly_rate: a.rate,
        anomaly_contrast: a.contrast,
        smoothness: a.smoothness,
        seed: a.seed,
    };
    let (cube, gt) = synth::synth_scene(&spec)?;
    create_out(&a.out)?;
    save_cube(&cube, a.out.join("scene.hsi"))?;
    save_mask(&gt, a.out.join("gt.pgm"))?;
    write_manifest(&a.out, "synth", serde_json::to_value(&spec)?, json!({}), &["scene.hsi", "gt.pgm"], spec.seed)
}

fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    create_out(&a.out)?;
    let cube = load_cube(&a.input)?.normalize_bands();
    let labels = slic_segment(&cube, a.segments, a.compactness, a.iters)?;
    save_labels_csv(&labels, a.out.join("labels.csv"))?;
    let config = json!({ "segments": a.segments, "compactness": a.compactness, "iters": a.iters });
    write_manifest(&a.out, "segment", config, json!({ "input": a.input }), &["labels.csv"], 0)
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    create_out(&a.out)?;
    let cube = load_cube(&a.input)?;
    let gt = a.gt.as_ref().map(load_mask).transpose()?;
    let inputs = json!({ "input": a.input, "gt": a.gt });
    match a.method {
        Method::Rxd => {
            let map = rxd::rxd(&cube)?;
            save_map_csv(&map, a.out.join("map.csv"))?;
            save_map_pgm(&map, a.out.join("map.pgm"))?;
            let config = json!({ "method": a.method, "ridge": rxd::default_ridge(&cube) });
            write_manifest(&a.out, "detect", config, inputs, &["map.csv", "map.pgm"], 0)
        }
        Method::Superad => {
            let config = a.train.config();
            let out = train(&cube, &config, gt.as_ref())?;
            save_map_csv(&out.map, a.out.join("map.csv"))?;
            save_map_pgm(&out.map, a.out.join("map.pgm"))?;
            save_model(&out.model, a.out.join("model.sadm"))?;
            write_text(a.out.join("epochs.csv"), &logs_to_csv(&out.logs))?;
            let mut value = serde_json::to_value(&config)?;
            value["method"] = json!(a.method);
            write_manifest(
                &a.out,
                "detect",
                value,
                inputs,
                &["map.csv", "map.pgm", "model.sadm", "epochs.csv"],
                config.seed,
            )
        }
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    create_out(&a.out)?;
    let map = load_map_csv(&a.map)?;
    let gt = load_mask(&a.gt)?;
    let (report, roc) = evaluate(&map, &gt)?;
    write_text(a.out.join("metrics.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(a.out.join("roc.csv"), &roc.to_csv())?;
    write_manifest(
        &a.out,
        "eval",
        json!({}),
        json!({ "map": a.map, "gt": a.gt }),
        &["metrics.json", "roc.csv"],
        0,
    )
}

const GRID_PARAMS: &[&str] = &[
    "segments", "window", "kernel", "alpha", "beta", "epochs", "lr", "seed", "loss", "perturbation",
    "compactness", "dim", "layers",
];

fn parse_grid(spec: &str) -> Result<(String, Vec<String>)> {
    let Some((name, values)) = spec.split_once('=') else {
        bail!("grid `{spec}` is not param=v1,v2,...");
    };
    let name = name.trim();
    if !GRID_PARAMS.contains(&name) {
        bail!("unknown grid parameter `{name}` (expected one of {})", GRID_PARAMS.join(", "));
    }
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if values.iter().any(|v| v.is_empty()) {
        bail!("grid `{spec}` has an empty value");
    }
    Ok((name.to_string(), values))
}

fn parse_value<T: std::str::FromStr>(name: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| anyhow::anyhow!("bad value `{v}` for {name}"))
}

fn apply_param(config: &mut TrainConfig, name: &str, v: &str) -> Result<()> {
    match name {
        "segments" => config.segments = parse_value(name, v)?,
        "window" => config.adaconv.window = parse_value(name, v)?,
        "kernel" => config.adaconv.kernel = parse_value(name, v)?,
        "alpha" => config.obpm.alpha = parse_value(name, v)?,
        "beta" => config.obpm.beta = parse_value(name, v)?,
        "epochs" => config.epochs = parse_value(name, v)?,
        "lr" => config.learning_rate = parse_value(name, v)?,
        "seed" => config.seed = parse_value(name, v)?,
        "compactness" => config.compactness = parse_value(name, v)?,
        "dim" => config.dim = parse_value(name, v)?,
        "layers" => config.layers = parse_value(name, v)?,
        "loss" => {
            config.loss_kind = match v {
                "obpm" => LossKind::Obpm,
                "l1" => LossKind::L1,
                "l2" => LossKind::L2,
                _ => bail!("bad value `{v}` for loss"),
            }
        }
        "perturbation" => {
            config.perturbation = match v {
                "spp" => Perturbation::Spp,
                "none" => Perturbation::None,
                _ => bail!("bad value `{v}` for perturbation"),
            }
        }
        _ => bail!("unknown grid parameter `{name}`"),
    }
    Ok(())
}

/// Every combination, last axis varying fastest.
fn cartesian(axes: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    axes.iter().fold(vec![Vec::new()], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut row = prefix.clone();
                    row.push(v.clone());
                    row
                })
            })
            .collect()
    })
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let axes = a.grids.iter().map(|g| parse_grid(g)).collect::<Result<Vec<_>>>()?;
    let cube = load_cube(&a.input)?;
    let gt = load_mask(&a.gt)?;
    let base = a.train.config();
    let cells = cartesian(&axes);
    create_out(&a.out)?;
    // validate every cell before spending time on any of them
    let configs = cells
        .iter()
        .map(|cell| {
            let mut config = base.clone();
            for ((name, _), v) in axes.iter().zip(cell) {
                apply_param(&mut config, name, v)?;
            }
            config.log_every = config.epochs.max(1);
            config.validate()?;
            Ok(config)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut csv: String = axes.iter().map(|(n, _)| format!("{n},")).collect();
    csv.push_str("auc,snpr_db,runtime_s\n");
    for (cell, config) in cells.iter().zip(&configs) {
        let start = Instant::now();
        let out = train(&cube, config, None)?;
        let runtime = start.elapsed().as_secs_f64();
        let (report, _) = evaluate(&out.map, &gt)?;
        for v in cell {
            csv.push_str(v);
            csv.push(',');
        }
        csv.push_str(&format!("{},{},{runtime:.3}\n", report.auc, report.snpr_db));
    }
    write_text(a.out.join("sweep.csv"), &csv)?;
    let grid: serde_json::Map<String, Value> = axes.iter().map(|(n, v)| (n.clone(), json!(v))).collect();
    let config = json!({ "base": base, "grid": grid });
    write_manifest(&a.out, "ablate", config, json!({ "input": a.input, "gt": a.gt }), &["sweep.csv"], base.seed)
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("{THREADS_ENV}={raw} is not a thread count"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
