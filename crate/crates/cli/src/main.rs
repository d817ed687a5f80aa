use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qsegment::data::{self, DatasetIndex, Sample};
use qsegment::metrics::{self, evaluate};
use qsegment::model::qsm::{self, QsmModel};
use qsegment::model::{mac_count_specs, LayerSpec};
use qsegment::quant::{calibrate, fold_batchnorm, quantize_model};
use qsegment::train::train_with;
use qsegment::{build_model, Shape, Tensor};
use serde::{Deserialize, Serialize};

mod config;

use config::RunConfig;

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(name = "qsegment", version, about = "Train, quantize and run the Q-Segment vessel segmentation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Layer table, parameter count and serialized size estimates.
    Summary(Common),
    /// Train a float model and write best/last checkpoints plus a JSON-lines log.
    Train(Common),
    /// Fold batchnorm, calibrate on training images and write an int8 model.
    Quantize(QuantizeArgs),
    /// Segment one image into probability and mask PNGs.
    Infer(InferArgs),
    /// Metric report over the validation split.
    Eval(EvalArgs),
    /// Host latency of float and/or quantized forward passes, as CSV.
    Bench(BenchArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Model file (QSM). Commands that accept it fall back to a freshly initialized model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long)]
    out: Option<PathBuf>,
    /// CHASE_DB1 directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the seeded synthetic vessel set instead of --data.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Working resolution, e.g. 64x64.
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[arg(long)]
    threshold: Option<f32>,
    /// Expect or produce an int8 model.
    #[arg(long)]
    quantized: bool,
    /// TOML file with run settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stop training after this many optimizer steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    common: Common,
    /// Number of training images used for calibration.
    #[arg(long, default_value_t = 8)]
    calib: usize,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: PathBuf,
    /// Also dump raw float probabilities as little-endian f32.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Use the model's own thresholded predictions as ground truth.
    #[arg(long)]
    self_consistency: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BenchMode {
    Float,
    Quantized,
    Both,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 20)]
    iters: usize,
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    #[arg(long, value_enum, default_value_t = BenchMode::Float)]
    mode: BenchMode,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Usage errors are 2, I/O and format problems 3, numeric failures 4.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(q) = cause.downcast_ref::<qsegment::Error>() {
            return if q.is_numeric() {
                EXIT_NUMERIC
            } else if q.is_io() {
                EXIT_IO
            } else {
                EXIT_USAGE
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<toml::de::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Summary(c) => cmd_summary(&RunConfig::resolve(&c)?),
        Command::Train(c) => cmd_train(&RunConfig::resolve(&c)?),
        Command::Quantize(a) => cmd_quantize(&RunConfig::resolve(&a.common)?, a.calib),
        Command::Infer(a) => cmd_infer(&RunConfig::resolve(&a.common)?, &a.image, a.raw),
        Command::Eval(a) => cmd_eval(&RunConfig::resolve(&a.common)?, a.self_consistency),
        Command::Bench(a) => cmd_bench(&RunConfig::resolve(&a.common)?, a.iters, a.warmup, a.mode),
    }
}

fn load(path: &Path) -> Result<QsmModel> {
    qsm::load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn load_checked(cfg: &RunConfig) -> Result<QsmModel> {
    let path = cfg.model.as_ref().ok_or_else(|| anyhow!("--model is required"))?;
    let m = load(path)?;
    if m.is_quantized() != cfg.quantized {
        let (file, want) = if m.is_quantized() { ("int8", "float") } else { ("float", "int8") };
        return Err(qsegment::Error::InvalidArgument(format!(
            "{} holds a {file} model but a {want} model was requested{}",
            path.display(),
            if m.is_quantized() { " (pass --quantized)" } else { "" }
        )))
        .context("model/file mode mismatch");
    }
    Ok(m)
}

fn dataset(cfg: &RunConfig) -> Result<DatasetIndex> {
    let d = match (&cfg.data, cfg.synthetic) {
        (Some(_), true) => bail!("--data and --synthetic are mutually exclusive"),
        (Some(dir), false) => data::load_chase(dir, cfg.size)?,
        (None, true) => DatasetIndex::synthetic(cfg.seed, cfg.size)?,
        (None, false) => bail!("pass --data DIR or --synthetic"),
    };
    if let Some(w) = &d.warning {
        eprintln!("warning: {w}");
    }
    Ok(d)
}

/// Rough int8 QSM size: int8 weights, int32 biases and multipliers, f32
/// weight scales, int8 shifts, plus a header allowance per tensor and site.
fn estimate_int8_bytes(specs: &[LayerSpec]) -> usize {
    let mut payload = 0;
    let mut tensors = 0;
    for s in specs {
        let convs: Vec<(usize, usize)> = if s.index == 8 {
            vec![(9 * s.c_in, s.c_out)]
        } else {
            vec![(9 * s.c_in, s.c_out), (s.c_out, s.c_out), (9, s.c_out)]
        };
        for (fan_in, c_out) in convs {
            payload += fan_in * c_out + c_out * (4 + 4 + 4 + 1);
            tensors += 5;
        }
    }
    let sites = 1 + 7 * 4 + 2 + 3 + 1;
    12 + 600 + payload + tensors * 90 + sites * 60
}

fn cmd_summary(cfg: &RunConfig) -> Result<()> {
    let model = match &cfg.model {
        Some(p) => load(p)?,
        None => QsmModel::Float(build_model(cfg.seed)),
    };
    let (h, w) = cfg.size;
    let specs = model.specs().to_vec();
    let mut out = String::new();
    out.push_str(&format!("{:>5}  {:<16} {:>5} {:>6}  output@{h}x{w}\n", "layer", "kind", "c_in", "c_out"));
    let shapes: Vec<Shape> = match &model {
        QsmModel::Float(m) => m.layer_output_shapes(h, w),
        QsmModel::Quantized(q) => {
            let div = [1, 2, 4, 8, 4, 2, 1, 1];
            q.specs.iter().zip(div).map(|(s, d)| Shape::new(1, s.c_out, h / d, w / d)).collect()
        }
    };
    for (s, sh) in specs.iter().zip(&shapes) {
        let kind = serde_json::to_value(s.kind)?.as_str().unwrap_or_default().to_string();
        out.push_str(&format!("{:>5}  {:<16} {:>5} {:>6}  {}x{}x{}\n", s.index, kind, s.c_in, s.c_out, sh.c, sh.h, sh.w));
    }
    match &model {
        QsmModel::Float(m) => {
            out.push_str(&format!("parameters: {}\n", m.parameter_count()));
            out.push_str(&format!("float size: {} bytes\n", qsm::float_to_bytes(m)?.len()));
        }
        QsmModel::Quantized(q) => {
            let n: usize = q.named_convs().iter().map(|(_, c)| c.weight.len() + c.bias.len()).sum();
            out.push_str(&format!("stored parameters (folded): {n}\n"));
            out.push_str(&format!("int8 size: {} bytes\n", qsm::quantized_to_bytes(q)?.len()));
        }
    }
    out.push_str(&format!("int8 size estimate: {} bytes\n", estimate_int8_bytes(&specs)));
    out.push_str(&format!("MACs@{h}x{w}: {}\n", mac_count_specs(&specs, h, w)?));
    print!("{out}");
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out_dir = cfg.out.clone().ok_or_else(|| anyhow!("--out DIR is required"))?;
    let data = dataset(cfg)?;
    let tc = cfg.train_config();
    tc.validate()?;
    std::fs::create_dir_all(&out_dir)?;
    let mut log = File::create(out_dir.join("train.log"))?;
    writeln!(log, "{}", serde_json::to_string(&cfg.canonical())?)?;
    let mut io_err = None;
    let outcome = train_with(&tc, &data, &mut |r| {
        if io_err.is_none() {
            io_err = writeln!(log, "{}", r.to_json_line()).err();
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    qsm::save_model(&outcome.best, out_dir.join("best.qsm"))?;
    qsm::save_model(&outcome.last, out_dir.join("last.qsm"))?;
    let first = outcome.log.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = outcome.log.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "steps {}  loss {first:.4} -> {last:.4}  best val dice {}",
        outcome.steps,
        outcome.best_val_dice.map_or("n/a".to_string(), |d| format!("{d:.4}"))
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Agreement {
    images: usize,
    mean_abs_dlogit: f64,
    mask_dice: f64,
}

/// Float vs quantized agreement: mean |Δlogit| over all pixels and Dice
/// between the two binary masks at logit 0.
fn agreement(float: &QsmModel, quant: &QsmModel, samples: &[Sample]) -> Result<Agreement> {
    let mut abs = 0.0;
    let mut n = 0usize;
    let mut conf = metrics::Confusion::default();
    for s in samples {
        let zf = float.forward(&s.image)?;
        let zq = quant.forward(&s.image)?;
        abs += zf.data().iter().zip(zq.data()).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
        n += zf.len();
        let mask = |z: &Tensor<f32>| z.map(|v| (v >= 0.0) as u8 as f32);
        conf = conf + metrics::confusion(&mask(&zq), &mask(&zf), 0.5)?;
    }
    Ok(Agreement { images: samples.len(), mean_abs_dlogit: abs / n.max(1) as f64, mask_dice: conf.dice() })
}

fn cmd_quantize(cfg: &RunConfig, calib: usize) -> Result<()> {
    let out = cfg.out.clone().ok_or_else(|| anyhow!("--out FILE is required"))?;
    let float = match &cfg.model {
        Some(p) => match load(p)? {
            QsmModel::Float(m) => m,
            QsmModel::Quantized(_) => bail!(qsegment::Error::InvalidArgument(format!("{} is already quantized", p.display()))),
        },
        None => build_model(cfg.seed),
    };
    if calib == 0 {
        bail!("--calib must be at least 1");
    }
    let data = dataset(cfg)?;
    let samples = &data.train[..calib.min(data.train.len())];
    let folded = fold_batchnorm(&float)?;
    let ranges = calibrate(&folded, samples)?;
    let q = quantize_model(&folded, &ranges)?;
    let bytes = qsm::quantized_to_bytes(&q)?;
    std::fs::write(&out, &bytes)?;
    let stats = agreement(&QsmModel::Float(float), &QsmModel::Quantized(q), samples)?;
    println!("wrote {} ({} bytes)", out.display(), bytes.len());
    println!("{}", serde_json::to_string(&stats)?);
    Ok(())
}

fn cmd_infer(cfg: &RunConfig, image: &Path, raw: bool) -> Result<()> {
    let out_dir = cfg.out.clone().ok_or_else(|| anyhow!("--out DIR is required"))?;
    let model = load_checked(cfg)?;
    let x = data::read_image(image)?;
    let s = x.shape();
    let logits = model.forward(&data::pad_to_multiple(&x, 8))?;
    let probs = data::crop_top_left(&logits, s.h, s.w)?.map(qsegment::tensor::sigmoid_scalar);
    let mask = probs.map(|p| (p >= cfg.threshold) as u8 as f32);
    std::fs::create_dir_all(&out_dir)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    data::write_gray_png(&probs, &out_dir.join(format!("{stem}_prob.png")))?;
    data::write_gray_png(&mask, &out_dir.join(format!("{stem}_mask.png")))?;
    if raw {
        let bytes: Vec<u8> = probs.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(out_dir.join(format!("{stem}_prob.f32")), bytes)?;
    }
    println!("{}x{} foreground {:.4}", s.h, s.w, mask.data().iter().sum::<f32>() / mask.len() as f32);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, self_consistency: bool) -> Result<()> {
    let model = load_checked(cfg)?;
    let data = dataset(cfg)?;
    if data.val.is_empty() {
        bail!(qsegment::Error::Dataset("validation split is empty".into()));
    }
    let mut probs = Vec::with_capacity(data.val.len());
    let mut gts = Vec::with_capacity(data.val.len());
    for s in &data.val {
        let p = model.forward(&s.image)?.map(qsegment::tensor::sigmoid_scalar);
        gts.push(if self_consistency { p.map(|v| (v >= cfg.threshold) as u8 as f32) } else { s.mask.clone() });
        probs.push(p);
    }
    let report = evaluate(&probs, &gts, cfg.threshold)?;
    let json = report.to_json();
    if let Some(out) = &cfg.out {
        std::fs::write(out, format!("{json}\n"))?;
    }
    println!("{json}");
    Ok(())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let i = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[i]
}

fn cmd_bench(cfg: &RunConfig, iters: usize, warmup: usize, mode: BenchMode) -> Result<()> {
    if iters == 0 {
        bail!("--iters must be at least 1");
    }
    let (h, w) = cfg.size;
    let float = match &cfg.model {
        Some(p) => Some(load(p)?),
        None => None,
    };
    let base = match &float {
        Some(QsmModel::Float(m)) => Some(m.clone()),
        Some(QsmModel::Quantized(_)) => None,
        None => Some(build_model(cfg.seed)),
    };
    let specs = float.as_ref().map(|m| m.specs().to_vec()).unwrap_or_else(|| build_model(0).specs.clone());
    let macs = mac_count_specs(&specs, h, w)?;
    let x = DatasetIndex::synthetic_sized(cfg.seed, (h, w), 1, 0)?.train.remove(0);

    let mut models: Vec<(&str, QsmModel)> = Vec::new();
    if matches!(mode, BenchMode::Float | BenchMode::Both) {
        let m = base.clone().ok_or_else(|| anyhow!("float bench needs a float model"))?;
        models.push(("float", QsmModel::Float(m)));
    }
    if matches!(mode, BenchMode::Quantized | BenchMode::Both) {
        let q = match (&float, &base) {
            (Some(QsmModel::Quantized(q)), _) => q.clone(),
            (_, Some(m)) => {
                let folded = fold_batchnorm(m)?;
                quantize_model(&folded, &calibrate(&folded, std::slice::from_ref(&x))?)?
            }
            _ => unreachable!(),
        };
        models.push(("quantized", QsmModel::Quantized(q)));
    }

    let mut csv = String::from("mode,h,w,iters,mean_ms,p50_ms,p95_ms,mac_count\n");
    for (name, m) in &models {
        for _ in 0..warmup {
            m.forward(&x.image)?;
        }
        let mut times: Vec<f64> = (0..iters)
            .map(|_| {
                let t = Instant::now();
                m.forward(&x.image).map(|_| t.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<qsegment::Result<_>>()?;
        times.sort_by(f64::total_cmp);
        let mean = times.iter().sum::<f64>() / iters as f64;
        csv.push_str(&format!(
            "{name},{h},{w},{iters},{mean:.4},{:.4},{:.4},{macs}\n",
            percentile(&times, 0.5),
            percentile(&times, 0.95)
        ));
    }
    if let Some(out) = &cfg.out {
        std::fs::write(out, &csv)?;
    }
    print!("{csv}");
    eprintln!("host CPU latency; not comparable to on-sensor figures");
    Ok(())
}
