//! `nvcf`: encode raw volumes into NVCF networks, decode them back to grids,
//! render them directly, and score them.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use nvcf_core::codec::{compression_ratio, deserialize, packed_code_len, read_header_bytes, reconstruct_volume};
use nvcf_core::field_net::DEFAULT_OMEGA0;
use nvcf_core::metrics::evaluate_model;
use nvcf_core::pipeline::{encode, Budget, EncodeOptions};
use nvcf_core::renderer::{raymarch_neural, write_ppm, Camera, TransferFunction};
use nvcf_core::trainer::{LearningRate, TrainConfig};
use nvcf_core::volume::{load_raw, sample_count, write_raw_f32, Precision};
use nvcf_core::Error as CoreError;
use serde_json::json;

#[derive(Parser)]
#[command(name = "nvcf", version, about = "Neural compression of scalar volumes")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train, quantize and write a compressed model.
    Encode(EncodeArgs),
    /// Evaluate a model on a grid and write float32 raw data.
    Decode(DecodeArgs),
    /// Ray march a model directly into a PPM image.
    Render(RenderArgs),
    /// Compare a model against a reference volume.
    Metrics(MetricsArgs),
    /// Print header fields and sizes of a model file.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GridArgs {
    /// Grid size, e.g. 64x64x64 or 16,16,16,4 (fastest-varying axis last).
    #[arg(long, value_parser = parse_resolution)]
    resolution: Dims,
    #[arg(long, default_value = "float32", value_parser = parse_precision)]
    precision: Precision,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct BudgetArgs {
    /// Target compression ratio; the weight budget is samples / ratio.
    #[arg(long)]
    ratio: Option<f64>,
    /// Weight budget before quantization.
    #[arg(long)]
    weights: Option<u64>,
}

#[derive(Args)]
struct EncodeArgs {
    input: PathBuf,
    output: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value_t = 8)]
    blocks: usize,
    /// Gradient penalty weight.
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    #[arg(long, default_value_t = 9)]
    bits: u8,
    #[arg(long, default_value_t = 75)]
    epochs: usize,
    #[arg(long, default_value_t = 16384)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial learning rate (default: derived from the network size).
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_OMEGA0)]
    omega0: f32,
    /// Write the per-epoch training log as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    input: PathBuf,
    output: PathBuf,
    /// Evaluate on this grid instead of the stored one.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<Dims>,
}

#[derive(Args)]
struct RenderArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_parser = parse_vec3, default_value = "2.2,1.6,2.6", allow_hyphen_values = true)]
    eye: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "0,0,0", allow_hyphen_values = true)]
    look_at: [f64; 3],
    #[arg(long, value_parser = parse_vec3, default_value = "0,1,0", allow_hyphen_values = true)]
    up: [f64; 3],
    /// Vertical field of view in degrees.
    #[arg(long, default_value_t = 50.0)]
    fov: f64,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Transfer function file of "position r g b a" lines.
    #[arg(long)]
    tf: Option<PathBuf>,
    #[arg(long, default_value_t = 0.005)]
    step: f64,
    #[arg(long)]
    shaded: bool,
    /// Time in [-1, 1] for 4D models.
    #[arg(long, allow_hyphen_values = true)]
    time: Option<f64>,
}

#[derive(Args)]
struct MetricsArgs {
    input: PathBuf,
    reference: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Also score analytic network gradients.
    #[arg(long)]
    net_grad: bool,
}

#[derive(Args)]
struct InspectArgs {
    input: PathBuf,
    /// Source sample precision for the ratio.
    #[arg(long, default_value = "float32", value_parser = parse_precision)]
    precision: Precision,
}

/// Grid sizes from one flag value.
#[derive(Clone, Debug)]
struct Dims(Vec<usize>);

fn parse_resolution(s: &str) -> std::result::Result<Dims, String> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if !(3..=4).contains(&dims.len()) || dims.contains(&0) {
        return Err(format!("expected 3 or 4 positive sizes, got {s:?}"));
    }
    Ok(Dims(dims))
}

fn parse_precision(s: &str) -> std::result::Result<Precision, String> {
    s.parse().map_err(|e: CoreError| e.to_string())
}

fn parse_vec3(s: &str) -> std::result::Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected x,y,z, got {s:?}"))
}

/// Bad invocation discovered after argument parsing.
#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Config(_) | CoreError::Budget { .. }) => 2,
        _ => 1,
    }
}

/// Writes through a temporary file in the destination directory so a failed
/// run never leaves a partial output behind.
fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temporary file in {}", dir.display()))?;
    {
        let mut out = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut out)?;
        out.flush()?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn read_model(path: &Path) -> Result<nvcf_core::quantizer::QuantizedModel> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(deserialize(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

fn cmd_encode(a: EncodeArgs) -> Result<()> {
    let volume = load_raw(&a.input, &a.grid.resolution.0, a.grid.precision)?;
    let budget = match (a.budget.ratio, a.budget.weights) {
        (Some(r), None) => Budget::Ratio(r),
        (None, Some(m)) => Budget::Weights(m),
        _ => return Err(usage("exactly one of --ratio and --weights is required")),
    };
    let opts = EncodeOptions {
        budget,
        n_blocks: a.blocks,
        bits: a.bits,
        omega0: a.omega0,
        train: TrainConfig {
            epochs: a.epochs,
            batch_size: a.batch,
            lambda: a.lambda,
            lr_initial: a.lr.map_or(LearningRate::Auto, LearningRate::Fixed),
            seed: a.seed,
            ..TrainConfig::default()
        },
    };
    let encoded = encode(&volume, a.grid.precision, &opts, |r| {
        let psnr = r.psnr.map(|p| format!(", probe PSNR {p:.2} dB")).unwrap_or_default();
        eprintln!("epoch {:>3}  lr {:.2e}  loss {:.4e}{psnr}", r.epoch + 1, r.lr, r.loss);
    })?;
    write_atomic(&a.output, |w| Ok(w.write_all(&encoded.bytes)?))?;
    if let Some(log) = &a.log {
        write_atomic(log, |w| Ok(encoded.log.write_csv(w)?))?;
    }
    let r = &encoded.report;
    eprintln!(
        "wrote {} ({} bytes): k={}, {} params, ratio {:.2}:1, PSNR {}, {:.1}s",
        a.output.display(),
        r.bytes,
        r.k,
        r.params,
        r.ratio,
        r.psnr,
        r.seconds
    );
    println!("{}", serde_json::to_string(r)?);
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let model = read_model(&a.input)?;
    let resolution = a.resolution.map_or_else(|| model.resolution.clone(), |d| d.0);
    if resolution.len() != model.arch.d {
        return Err(usage(format!(
            "model is {}D but --resolution has {} axes",
            model.arch.d,
            resolution.len()
        )));
    }
    let volume = reconstruct_volume(&model, &resolution)?;
    write_atomic(&a.output, |w| Ok(write_raw_f32(&volume, w)?))?;
    eprintln!("wrote {} ({} samples)", a.output.display(), volume.len());
    println!(
        "{}",
        json!({ "resolution": resolution, "samples": volume.len(), "bytes": 4 * volume.len() })
    );
    Ok(())
}

fn cmd_render(a: RenderArgs) -> Result<()> {
    let model = read_model(&a.input)?;
    match (model.arch.d, a.time) {
        (3, Some(_)) => return Err(usage("--time is only valid for 4D models")),
        (4, None) => return Err(usage("4D models need --time")),
        _ => {}
    }
    let tf = match &a.tf {
        Some(p) => TransferFunction::load(p)?,
        None => TransferFunction::default_ramp(),
    };
    let cam = Camera {
        eye: a.eye,
        look_at: a.look_at,
        up: a.up,
        fov_deg: a.fov,
        width: a.width,
        height: a.height,
    };
    let img = raymarch_neural(&model, &cam, &tf, a.step, a.shaded, a.time)?;
    write_atomic(&a.output, |w| Ok(write_ppm(&img, w)?))?;
    eprintln!("wrote {} ({}x{})", a.output.display(), img.width, img.height);
    println!("{}", json!({ "width": img.width, "height": img.height, "shaded": a.shaded }));
    Ok(())
}

fn cmd_metrics(a: MetricsArgs) -> Result<()> {
    let model = read_model(&a.input)?;
    if a.grid.resolution.0 != model.resolution {
        return Err(usage(format!(
            "reference resolution {:?} does not match the model's {:?}",
            a.grid.resolution.0, model.resolution
        )));
    }
    let reference = load_raw(&a.reference, &a.grid.resolution.0, a.grid.precision)?;
    let report = evaluate_model(&model, &reference, a.net_grad)?;
    eprintln!("PSNR {}, FD-Grad PSNR {}", report.psnr, report.fd_grad_psnr);
    println!("{}", report.to_json_line());
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let header = read_header_bytes(&bytes).with_context(|| format!("decoding {}", a.input.display()))?;
    let model = deserialize(&bytes).with_context(|| format!("decoding {}", a.input.display()))?;
    let samples = sample_count(&header.resolution);
    let layers: Vec<_> = model
        .layers
        .iter()
        .map(|l| {
            json!({
                "rows": l.rows,
                "cols": l.cols,
                "centers": l.centers.len(),
                "code_bytes": packed_code_len(l.rows * l.cols, header.bits),
            })
        })
        .collect();
    let ratio = compression_ratio(samples, a.precision, bytes.len());
    eprintln!(
        "NVCF v{}: d={}, k={}, {} blocks, {} bits, omega0 {}, resolution {:?}, {} bytes, ratio {:.2}:1",
        header.version,
        header.arch.d,
        header.arch.k,
        header.arch.n_blocks,
        header.bits,
        header.arch.omega0,
        header.resolution,
        bytes.len(),
        ratio
    );
    println!(
        "{}",
        json!({
            "version": header.version,
            "d": header.arch.d,
            "k": header.arch.k,
            "n_blocks": header.arch.n_blocks,
            "bits": header.bits,
            "omega0": header.arch.omega0,
            "resolution": header.resolution,
            "vmin": header.range.vmin,
            "vmax": header.range.vmax,
            "params": header.arch.param_count(),
            "unquantized": model.unquantized_count(),
            "layers": layers,
            "total_bits": 8 * bytes.len(),
            "bytes": bytes.len(),
            "samples": samples,
            "ratio": ratio,
        })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Render(a) => cmd_render(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
