//! `dashq`: quantize, inspect and evaluate layer stacks stored in `.dqb` bundles.
//!
//! Exit codes: 0 success, 2 validation or I/O error, 3 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dashq_core::analysis::{
    default_rho_grid, group_samples, per_sample_hessians, random_pair_sweeps, snr, stability_curve, summarize_sweeps,
    write_shrinkage_csv, write_snr_csv, write_stability_csv,
};
use dashq_core::bundle::Tensor;
use dashq_core::calibration::apply_layer;
use dashq_core::config::KvConfig;
use dashq_core::pipeline::{
    compare, evaluate, read_model, run_pipeline, CalibrationSource, EvalReport, PipelineInputs, RunConfig,
};
use dashq_core::synth::{gen_synthetic, SynthKind, SynthSpec};
use dashq_core::{ActivationBatch, DiagImportance, Error, HessianEstimate, Result, TensorBundle};

#[derive(Parser)]
#[command(name = "dashq", version, about = "Diagonal-Hessian weighted least squares weight quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic model with calibration and held-out activations.
    Gen(GenArgs),
    /// Accumulate diagonal (and optionally full) Hessian statistics.
    Calibrate(CalibrateArgs),
    /// Quantize every layer of a model bundle.
    Quantize(QuantizeArgs),
    /// Expand a quantized model into dense f32 weights.
    Dequantize(DequantizeArgs),
    /// Recompute losses of a quantized model against its inputs.
    Eval(EvalArgs),
    /// Run several methods on the same inputs and tabulate them.
    Compare(QuantizeArgs),
    /// Hessian stability diagnostics.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
}

/// Quantization settings; any of them may instead come from `--config`.
#[derive(Args, Default)]
struct QuantOptions {
    /// Method name (`rtn`, `gptq`, `dashq`); comma-separated for `compare`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    bits: Option<u8>,
    #[arg(long = "group-size")]
    group_size: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Store scales and offsets as f16.
    #[arg(long = "fp16-params")]
    fp16_params: bool,
    /// GPTQ lazy-update block size.
    #[arg(long = "block-size")]
    block_size: Option<usize>,
    /// GPTQ damping, as a fraction of the mean Hessian diagonal.
    #[arg(long = "damp-ratio")]
    damp_ratio: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Recorded in the run configuration; quantization itself is deterministic.
    #[arg(long)]
    seed: Option<u64>,
    /// `key = value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
}

const QUANT_KEYS: &[&str] = &[
    "method", "bits", "group-size", "iters", "alpha", "lambda", "s-floor", "fp16-params", "block-size", "damp-ratio",
    "workers", "seed",
];

impl QuantOptions {
    fn resolve(&self) -> Result<KvConfig> {
        let mut cfg = match &self.config {
            Some(path) => KvConfig::load(path)?,
            None => KvConfig::new(),
        };
        cfg.check_known(QUANT_KEYS)?;
        let mut set = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                cfg.set(key, v);
            }
        };
        set("method", self.method.clone());
        set("bits", self.bits.map(|v| v.to_string()));
        set("group-size", self.group_size.map(|v| v.to_string()));
        set("iters", self.iters.map(|v| v.to_string()));
        set("alpha", self.alpha.map(|v| v.to_string()));
        set("lambda", self.lambda.map(|v| v.to_string()));
        set("block-size", self.block_size.map(|v| v.to_string()));
        set("damp-ratio", self.damp_ratio.map(|v| v.to_string()));
        set("workers", self.workers.map(|v| v.to_string()));
        set("seed", self.seed.map(|v| v.to_string()));
        if self.fp16_params {
            cfg.set("fp16-params", "true");
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct QuantizeArgs {
    /// Model and calibration bundle (see `gen`).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output model bundle (`quantize` only).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-layer (`quantize`) or per-method (`compare`) CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// JSON report (`quantize` only).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    opts: QuantOptions,
}

#[derive(Args)]
struct GenArgs {
    /// `gaussian-iid`, `correlated` or `heavy-tailed-cols`.
    #[arg(long)]
    kind: Option<String>,
    /// Layer widths, e.g. `64,64,64,32`.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Calibration samples.
    #[arg(long)]
    n: Option<usize>,
    /// Held-out samples.
    #[arg(long)]
    heldout: Option<usize>,
    /// Tokens per sample.
    #[arg(long = "seq-len")]
    seq_len: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Inputs of this layer, via the full-precision prefix.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Also store the full `d x d` estimate.
    #[arg(long)]
    full: bool,
    /// Per-channel `h_j` as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct DequantizeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Model and calibration bundle the model was quantized from.
    #[arg(long = "in")]
    input: PathBuf,
    /// Quantized model bundle.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Entrywise |mean| / std of per-sample Hessians.
    Snr {
        #[command(flatten)]
        common: AnalyzeCommon,
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },
    /// Discrepancy between disjoint calibration sets along the shrinkage family.
    Shrinkage {
        #[command(flatten)]
        common: AnalyzeCommon,
        /// Samples per calibration set.
        #[arg(long = "set-size")]
        set_size: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Relative L1 error of diagonal and off-diagonal parts versus sample count.
    Stability {
        #[command(flatten)]
        common: AnalyzeCommon,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Reference size (default: all samples).
        #[arg(long)]
        reference: Option<usize>,
        /// Compare raw sums instead of per-token averages.
        #[arg(long)]
        raw: bool,
    },
}

#[derive(Args)]
struct AnalyzeCommon {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Sequences pooled into one sample (1 = per-sequence statistics).
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(args) => gen(args),
        Command::Calibrate(args) => calibrate(args),
        Command::Quantize(args) => quantize(args),
        Command::Dequantize(args) => dequantize(args),
        Command::Eval(args) => eval(args),
        Command::Compare(args) => compare_methods(args),
        Command::Analyze { what } => analyze(what),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(Error::from)
}

fn gen(args: GenArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::new(),
    };
    cfg.check_known(&["kind", "dims", "n", "heldout", "seq-len", "seed"])?;
    let defaults = SynthSpec::default();
    let spec = SynthSpec {
        kind: match args.kind.or(cfg.get("kind").map(str::to_string)) {
            Some(k) => k.parse::<SynthKind>()?,
            None => defaults.kind,
        },
        dims: args.dims.or(cfg.get_list("dims")?).unwrap_or(defaults.dims),
        n: args.n.or(cfg.get_parsed("n")?).unwrap_or(defaults.n),
        heldout: args.heldout.or(cfg.get_parsed("heldout")?).unwrap_or(defaults.heldout),
        seq_len: args.seq_len.or(cfg.get_parsed("seq-len")?).unwrap_or(defaults.seq_len),
        seed: args.seed.or(cfg.get_parsed("seed")?).unwrap_or(defaults.seed),
    };
    let data = gen_synthetic(&spec)?;
    data.to_bundle().save(&args.out)?;
    println!(
        "{} model {:?}, {} calibration + {} held-out samples of {} tokens -> {}",
        spec.kind,
        spec.dims,
        spec.n,
        spec.heldout,
        spec.seq_len,
        args.out.display()
    );
    Ok(())
}

/// Calibration batches entering `layer`, through the full-precision prefix.
fn layer_inputs(path: &Path, layer: usize) -> Result<Vec<ActivationBatch>> {
    let inputs = PipelineInputs::from_bundle(&TensorBundle::load(path)?)?;
    if layer >= inputs.stack.len() {
        return Err(Error::Invalid(format!("layer {layer} out of range for a {}-layer model", inputs.stack.len())));
    }
    let mut x = inputs.calibration;
    for l in &inputs.stack.layers()[..layer] {
        x = x.iter().map(|b| apply_layer(&l.weight, l.activation, b)).collect::<Result<_>>()?;
    }
    Ok(x)
}

fn calibrate(args: CalibrateArgs) -> Result<()> {
    let x = layer_inputs(&args.input, args.layer)?;
    let d = x[0].d_in();
    let diag = DiagImportance::from_batches(d, &x)?;
    let mut out = TensorBundle::new();
    let l = args.layer;
    out.insert(format!("diag/{l}"), Tensor::f64(vec![d], diag.h.clone())?);
    out.insert(format!("sample_count/{l}"), Tensor::i64(vec![1], vec![diag.sample_count as i64])?);
    if args.full {
        let h = HessianEstimate::from_batches(d, &x)?;
        // nalgebra is column-major; the estimate is symmetric so the order is moot.
        out.insert(format!("hessian/{l}"), Tensor::f64(vec![d, d], h.matrix.as_slice().to_vec())?);
    }
    out.save(&args.out)?;
    if let Some(csv) = &args.csv {
        let mut s = String::from("channel,h\n");
        for (j, h) in diag.h.iter().enumerate() {
            s.push_str(&format!("{j},{h}\n"));
        }
        write_text(csv, &s)?;
    }
    println!("layer {l}: {d} channels, {} tokens -> {}", diag.sample_count, args.out.display());
    Ok(())
}

fn run_config(args: &QuantizeArgs, cfg: &KvConfig, method: &str) -> Result<RunConfig> {
    let mut rc = RunConfig::new(method, CalibrationSource::Bundle(args.input.clone()));
    rc.spec = cfg.quant_spec()?;
    rc.gptq = cfg.gptq_config()?;
    rc.workers = cfg.get_parsed("workers")?;
    rc.seed = cfg.get_parsed("seed")?.unwrap_or(0);
    Ok(rc)
}

fn print_report(report: &EvalReport) {
    println!("method {}", report.method);
    println!("{:>5} {:>14} {:>14} {:>10} {:>10}", "layer", "loss", "w-proxy", "ds[1]", "ds[T]");
    for l in &report.layers {
        let ds = l.median_scale_change();
        let cell = |v: Option<&f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
        println!(
            "{:>5} {:>14.6e} {:>14.6e} {:>10} {:>10}",
            l.layer,
            l.loss,
            l.weighted_proxy,
            cell(ds.first()),
            cell(ds.last())
        );
    }
    if let Some(mse) = report.end_to_end_mse {
        println!("held-out end-to-end MSE {mse:.6e}");
    }
}

fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("layer,loss,weighted_proxy,seconds,ds_first,ds_last\n");
    for l in &report.layers {
        let ds = l.median_scale_change();
        let cell = |v: Option<&f64>| v.map_or_else(String::new, |v| v.to_string());
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.layer,
            l.loss,
            l.weighted_proxy,
            l.seconds,
            cell(ds.first()),
            cell(ds.last())
        ));
    }
    s
}

fn quantize(args: QuantizeArgs) -> Result<()> {
    let cfg = args.opts.resolve()?;
    let method = cfg.get("method").unwrap_or("dashq").to_string();
    let mut rc = run_config(&args, &cfg, &method)?;
    rc.out = args.out.clone();
    rc.report = args.report.clone();
    let out = run_pipeline(&rc)?;
    print_report(&out.report);
    println!("quantized in {:.3}s", out.report.seconds);
    if let Some(csv) = &args.csv {
        write_text(csv, &report_csv(&out.report))?;
    }
    Ok(())
}

fn compare_methods(args: QuantizeArgs) -> Result<()> {
    let cfg = args.opts.resolve()?;
    let methods = cfg.get("method").unwrap_or("rtn,gptq,dashq").to_string();
    let cfgs = methods
        .split(',')
        .map(|m| run_config(&args, &cfg, m.trim()))
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&cfgs)?;
    print!("{}", table.to_table());
    if let Some(csv) = &args.csv {
        write_text(csv, &table.to_csv())?;
    }
    Ok(())
}

fn dequantize(args: DequantizeArgs) -> Result<()> {
    let model = TensorBundle::load(&args.input)?;
    let layers = read_model(&model)?;
    let mut out = TensorBundle::new();
    for (l, q) in layers.iter().enumerate() {
        out.insert(format!("weight/{l}"), q.dequantize().to_tensor());
        if let Some(a) = model.get(&format!("activation/{l}")) {
            out.insert(format!("activation/{l}"), a.clone());
        }
    }
    out.save(&args.out)?;
    println!("{} layers -> {}", layers.len(), args.out.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let inputs = PipelineInputs::from_bundle(&TensorBundle::load(&args.input)?)?;
    let report = evaluate(&inputs, &TensorBundle::load(&args.model)?)?;
    print_report(&report);
    if let Some(csv) = &args.csv {
        write_text(csv, &report_csv(&report))?;
    }
    Ok(())
}

fn csv_target(path: &Option<PathBuf>) -> Result<Box<dyn std::io::Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p)?),
        None => Box::new(std::io::stdout()),
    })
}

fn analyze(what: AnalyzeCommand) -> Result<()> {
    match what {
        AnalyzeCommand::Snr { common, bins } => {
            let x = group_samples(&layer_inputs(&common.input, common.layer)?, common.batch)?;
            let report = snr(&per_sample_hessians(&x)?, bins)?;
            eprintln!(
                "median SNR: diagonal {:.4}, off-diagonal {:.4}",
                report.median_diagonal(),
                report.median_off_diagonal()
            );
            write_snr_csv(csv_target(&common.csv)?, &report)?;
        }
        AnalyzeCommand::Shrinkage { common, set_size, trials, seed } => {
            let x = group_samples(&layer_inputs(&common.input, common.layer)?, common.batch)?;
            let sweeps = random_pair_sweeps(&x, set_size, trials, &default_rho_grid(), seed)?;
            write_shrinkage_csv(csv_target(&common.csv)?, &summarize_sweeps(&sweeps)?)?;
        }
        AnalyzeCommand::Stability { common, sizes, reference, raw } => {
            let x = group_samples(&layer_inputs(&common.input, common.layer)?, common.batch)?;
            let reference = reference.unwrap_or(x.len());
            let sizes = if sizes.is_empty() {
                (0..).map(|p| 1usize << p).take_while(|&n| n <= reference).collect()
            } else {
                sizes
            };
            write_stability_csv(csv_target(&common.csv)?, &stability_curve(&x, &sizes, reference, !raw)?)?;
        }
    }
    Ok(())
}
