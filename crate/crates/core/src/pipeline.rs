//! End-to-end toy pipeline: calibrate, quantize layer by layer while
//! propagating through the already-quantized prefix, then evaluate.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

use crate::analysis::median;
use crate::baselines::GptqConfig;
use crate::bundle::{Tensor, TensorBundle};
use crate::calibration::{apply_layer, matmul, ActivationBatch, DiagImportance, HessianEstimate, LayerStack};
use crate::error::{Error, Result};
use crate::quantizer::{CalibrationStats, Quantizer, QuantizerRegistry};
use crate::solver::SolveTrace;
use crate::synth::{gen_synthetic, read_heldout, SynthSpec};
use crate::types::{QuantSpec, QuantizedLayer, WeightMatrix};

#[derive(Debug, Clone, PartialEq)]
pub enum CalibrationSource {
    /// A bundle with `weight/<l>`, `activation/<l>`, `act/0/*` and optionally `heldout/*`.
    Bundle(PathBuf),
    /// Generated in memory; the run seed replaces `SynthSpec::seed`.
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: String,
    pub spec: QuantSpec,
    pub gptq: GptqConfig,
    pub source: CalibrationSource,
    pub seed: u64,
    /// Rayon threads; `None` uses the global pool.
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(method: impl Into<String>, source: CalibrationSource) -> Self {
        Self {
            method: method.into(),
            spec: QuantSpec::default(),
            gptq: GptqConfig::default(),
            source,
            seed: 0,
            workers: None,
            out: None,
            report: None,
        }
    }

    pub fn load_inputs(&self) -> Result<PipelineInputs> {
        match &self.source {
            CalibrationSource::Bundle(path) => PipelineInputs::from_bundle(&TensorBundle::load(path)?),
            CalibrationSource::Synthetic(spec) => {
                let data = gen_synthetic(&SynthSpec { seed: self.seed, ..spec.clone() })?;
                Ok(PipelineInputs { stack: data.stack, calibration: data.calibration, heldout: data.heldout })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineInputs {
    pub stack: LayerStack,
    /// Inputs to layer 0.
    pub calibration: Vec<ActivationBatch>,
    pub heldout: Vec<ActivationBatch>,
}

impl PipelineInputs {
    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let stack = LayerStack::read_from_bundle(bundle)?;
        let calibration = ActivationBatch::read_layer(bundle, 0)?;
        if calibration.is_empty() {
            return Err(Error::Invalid("bundle has no calibration batches under `act/0/`".into()));
        }
        Ok(Self { stack, calibration, heldout: read_heldout(bundle)? })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.stack.d_in().ok_or_else(|| Error::Invalid("empty layer stack".into()))?;
        if self.calibration.is_empty() {
            return Err(Error::Invalid("no calibration data".into()));
        }
        if let Some(x) = self.calibration.iter().chain(&self.heldout).find(|x| x.d_in() != d) {
            return Err(Error::Shape(format!("batch `{}` has {} channels, model expects {d}", x.batch_id, x.d_in())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub layer: usize,
    /// `||W X - W_hat X||_F^2` on the calibration inputs reaching this layer.
    pub loss: f64,
    /// `sum_j h_j ||W[:, j] - W_hat[:, j]||^2`.
    pub weighted_proxy: f64,
    pub seconds: f64,
    /// Group solve traces (iterative methods only).
    pub traces: Vec<SolveTrace>,
}

impl LayerReport {
    /// Median over groups of `delta s_t`, one entry per iteration.
    pub fn median_scale_change(&self) -> Vec<f64> {
        median_scale_change(&self.traces)
    }
}

pub fn median_scale_change(traces: &[SolveTrace]) -> Vec<f64> {
    let t_max = traces.iter().map(|t| t.scale_change.len()).max().unwrap_or(0);
    (0..t_max)
        .map(|t| {
            let vals: Vec<f64> = traces.iter().filter_map(|tr| tr.scale_change.get(t).copied()).collect();
            median(&vals)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub method: String,
    pub layers: Vec<LayerReport>,
    /// Mean squared output error on held-out inputs; `None` without held-out data.
    pub end_to_end_mse: Option<f64>,
    pub seconds: f64,
}

impl EvalReport {
    pub fn total_loss(&self) -> f64 {
        self.layers.iter().map(|l| l.loss).sum()
    }

    pub fn total_weighted_proxy(&self) -> f64 {
        self.layers.iter().map(|l| l.weighted_proxy).sum()
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "method": self.method,
            "end_to_end_mse": self.end_to_end_mse,
            "seconds": self.seconds,
            "layers": self.layers.iter().map(|l| json!({
                "layer": l.layer,
                "loss": l.loss,
                "weighted_proxy": l.weighted_proxy,
                "seconds": l.seconds,
                "median_scale_change": l.median_scale_change(),
            })).collect::<Vec<_>>(),
        })
    }
}

pub struct PipelineOutput {
    pub report: EvalReport,
    pub layers: Vec<QuantizedLayer>,
    /// `layer/<l>/{meta,codes,scales,zeros}`, `activation/<l>`, `info/method`.
    pub model: TensorBundle,
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(0) => Err(Error::Invalid("workers must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(f))
            .map_err(|e| Error::Invalid(format!("thread pool: {e}"))),
    }
}

pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    let inputs = cfg.load_inputs()?;
    let out = run_on_inputs(cfg, &inputs, &QuantizerRegistry::with_builtin())?;
    if let Some(path) = &cfg.out {
        out.model.save(path)?;
    }
    if let Some(path) = &cfg.report {
        std::fs::write(path, serde_json::to_string_pretty(&out.report.to_json()).unwrap() + "\n")?;
    }
    Ok(out)
}

/// Runs `cfg.method` on in-memory inputs without touching the filesystem.
pub fn run_on_inputs(cfg: &RunConfig, inputs: &PipelineInputs, registry: &QuantizerRegistry) -> Result<PipelineOutput> {
    cfg.spec.validate()?;
    cfg.gptq.validate()?;
    inputs.validate()?;
    let method = registry.get(&cfg.method)?;
    with_workers(cfg.workers, || {
        let start = Instant::now();
        let (layers, timings) = quantize_stack(method.as_ref(), inputs, &cfg.spec, &cfg.gptq)?;
        let mut report = evaluate_layers(&inputs.stack, &layers, &inputs.calibration, &inputs.heldout)?;
        report.method = cfg.method.clone();
        for (l, (seconds, traces)) in timings.into_iter().enumerate() {
            report.layers[l].seconds = seconds;
            report.layers[l].traces = traces;
        }
        report.seconds = start.elapsed().as_secs_f64();
        let model = model_bundle(&cfg.method, &inputs.stack, &layers);
        Ok(PipelineOutput { report, layers, model })
    })?
}

/// Seconds spent on a layer and its group traces.
pub type LayerTiming = (f64, Vec<SolveTrace>);

/// Quantizes every layer in order. Layer `l` is calibrated on the inputs
/// produced by the quantized layers `0..l`.
pub fn quantize_stack(
    method: &dyn Quantizer,
    inputs: &PipelineInputs,
    spec: &QuantSpec,
    gptq: &GptqConfig,
) -> Result<(Vec<QuantizedLayer>, Vec<LayerTiming>)> {
    let mut x = inputs.calibration.clone();
    let mut layers = Vec::with_capacity(inputs.stack.len());
    let mut timings = Vec::with_capacity(inputs.stack.len());
    for (l, layer) in inputs.stack.layers().iter().enumerate() {
        let start = Instant::now();
        let d = layer.weight.d_in();
        let stats = CalibrationStats {
            diag: DiagImportance::from_batches(d, &x)?,
            full: if method.needs_full_hessian() { Some(HessianEstimate::from_batches(d, &x)?) } else { None },
        };
        let q = method.quantize(&layer.weight, &stats, spec, gptq)?;
        timings.push((start.elapsed().as_secs_f64(), q.traces));
        if l + 1 < inputs.stack.len() {
            let w_hat = q.layer.dequantize();
            x = x.par_iter().map(|b| apply_layer(&w_hat, layer.activation, b)).collect::<Result<_>>()?;
        }
        layers.push(q.layer);
    }
    Ok((layers, timings))
}

pub fn model_bundle(method: &str, stack: &LayerStack, layers: &[QuantizedLayer]) -> TensorBundle {
    let mut b = TensorBundle::new();
    for (l, (q, layer)) in layers.iter().zip(stack.layers()).enumerate() {
        q.write_to_bundle(&mut b, &format!("layer/{l}"));
        b.insert(format!("activation/{l}"), Tensor::u8(vec![1], vec![layer.activation.code()]).unwrap());
    }
    b.insert("info/method", Tensor::u8(vec![method.len()], method.as_bytes().to_vec()).unwrap());
    b
}

/// Quantized layers stored under `layer/<l>/`, in order.
pub fn read_model(bundle: &TensorBundle) -> Result<Vec<QuantizedLayer>> {
    let mut layers = Vec::new();
    while bundle.contains(&format!("layer/{}/meta", layers.len())) {
        layers.push(QuantizedLayer::read_from_bundle(bundle, &format!("layer/{}", layers.len()))?);
    }
    if layers.is_empty() {
        return Err(Error::Invalid("bundle holds no `layer/0`".into()));
    }
    Ok(layers)
}

/// Recomputes every reported loss from a model bundle and the inputs.
pub fn evaluate(inputs: &PipelineInputs, model: &TensorBundle) -> Result<EvalReport> {
    inputs.validate()?;
    let layers = read_model(model)?;
    let mut report = evaluate_layers(&inputs.stack, &layers, &inputs.calibration, &inputs.heldout)?;
    report.method = model
        .get("info/method")
        .and_then(|t| t.as_u8())
        .map(|b| String::from_utf8_lossy(b).into_owned())
        .unwrap_or_default();
    Ok(report)
}

/// `||W X - W_hat X||_F^2` accumulated over batches.
pub fn layer_loss(weight: &WeightMatrix, w_hat: &WeightMatrix, x: &[ActivationBatch]) -> Result<f64> {
    x.iter()
        .map(|b| {
            let y = matmul(weight, b)?;
            let y_hat = matmul(w_hat, b)?;
            Ok(y.iter().zip(&y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        })
        .sum()
}

pub fn weighted_proxy(weight: &WeightMatrix, w_hat: &WeightMatrix, h: &DiagImportance) -> f64 {
    let mut total = 0.0;
    for i in 0..weight.d_out() {
        for (j, (&a, &b)) in weight.row(i).iter().zip(w_hat.row(i)).enumerate() {
            total += h.h[j] * (a as f64 - b as f64).powi(2);
        }
    }
    total
}

/// Mean squared difference between full-precision and quantized stack outputs.
pub fn end_to_end_mse(stack: &LayerStack, layers: &[QuantizedLayer], x: &[ActivationBatch]) -> Result<f64> {
    let dequantized: Vec<WeightMatrix> = layers.iter().map(QuantizedLayer::dequantize).collect();
    let mut sum = 0.0;
    let mut count = 0usize;
    for b in x {
        let reference = stack.forward(b)?;
        let quantized = dequantized
            .iter()
            .zip(stack.layers())
            .try_fold(b.clone(), |x, (w, layer)| apply_layer(w, layer.activation, &x))?;
        sum += reference.as_slice().iter().zip(quantized.as_slice()).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum::<f64>();
        count += reference.as_slice().len();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

fn evaluate_layers(
    stack: &LayerStack,
    layers: &[QuantizedLayer],
    calibration: &[ActivationBatch],
    heldout: &[ActivationBatch],
) -> Result<EvalReport> {
    if layers.len() != stack.len() {
        return Err(Error::Shape(format!("model has {} layers, stack has {}", layers.len(), stack.len())));
    }
    let mut x = calibration.to_vec();
    let mut reports = Vec::with_capacity(layers.len());
    for (l, (q, layer)) in layers.iter().zip(stack.layers()).enumerate() {
        if (q.d_out, q.d_in) != (layer.weight.d_out(), layer.weight.d_in()) {
            return Err(Error::Shape(format!("layer {l}: quantized shape differs from the stack")));
        }
        let w_hat = q.dequantize();
        let h = DiagImportance::from_batches(layer.weight.d_in(), &x)?;
        reports.push(LayerReport {
            layer: l,
            loss: layer_loss(&layer.weight, &w_hat, &x)?,
            weighted_proxy: weighted_proxy(&layer.weight, &w_hat, &h),
            seconds: 0.0,
            traces: Vec::new(),
        });
        if l + 1 < layers.len() {
            x = x.par_iter().map(|b| apply_layer(&w_hat, layer.activation, b)).collect::<Result<_>>()?;
        }
    }
    Ok(EvalReport {
        method: String::new(),
        layers: reports,
        end_to_end_mse: if heldout.is_empty() { None } else { Some(end_to_end_mse(stack, layers, heldout)?) },
        seconds: 0.0,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub method: String,
    pub loss: f64,
    pub weighted_proxy: f64,
    pub end_to_end_mse: Option<f64>,
    pub seconds: f64,
    /// Median `delta s` at the first and last iteration, layer 0.
    pub scale_change_first_last: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
}

/// Runs every configuration on the same inputs (in parallel) and tabulates
/// the results in the given order.
pub fn compare(cfgs: &[RunConfig]) -> Result<Comparison> {
    let first = cfgs.first().ok_or_else(|| Error::Invalid("nothing to compare".into()))?;
    if let Some(c) = cfgs.iter().find(|c| c.source != first.source || c.seed != first.seed) {
        return Err(Error::Invalid(format!(
            "config for `{}` uses different model/calibration inputs than `{}`",
            c.method, first.method
        )));
    }
    let inputs = first.load_inputs()?;
    let registry = QuantizerRegistry::with_builtin();
    let reports = cfgs
        .par_iter()
        .map(|c| run_on_inputs(c, &inputs, &registry).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    Ok(Comparison {
        rows: reports
            .into_iter()
            .map(|r| CompareRow {
                loss: r.total_loss(),
                weighted_proxy: r.total_weighted_proxy(),
                end_to_end_mse: r.end_to_end_mse,
                seconds: r.seconds,
                scale_change_first_last: r.layers.first().and_then(|l| {
                    let m = l.median_scale_change();
                    Some((*m.first()?, *m.last()?))
                }),
                method: r.method,
            })
            .collect(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:e}"))
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,loss,weighted_proxy,end_to_end_mse,seconds,ds_first,ds_last\n");
        for r in &self.rows {
            let (a, b) = r.scale_change_first_last.unzip();
            writeln!(
                s,
                "{},{:e},{:e},{},{:.3},{},{}",
                r.method,
                r.loss,
                r.weighted_proxy,
                opt(r.end_to_end_mse),
                r.seconds,
                opt(a),
                opt(b)
            )
            .unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>12} {:>12} {:>12} {:>8} {:>10} {:>10}\n",
            "method", "loss", "w-proxy", "e2e-mse", "time(s)", "ds[1]", "ds[T]"
        );
        for r in &self.rows {
            let (a, b) = r.scale_change_first_last.unzip();
            let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
            writeln!(
                s,
                "{:<8} {:>12.4e} {:>12.4e} {:>12} {:>8.3} {:>10} {:>10}",
                r.method,
                r.loss,
                r.weighted_proxy,
                cell(r.end_to_end_mse),
                r.seconds,
                cell(a),
                cell(b)
            )
            .unwrap();
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityRow {
    pub n: usize,
    /// Held-out `||W X - W_hat X||^2` of the first layer.
    pub loss: f64,
}

/// Quantizes the first layer of `data` with calibration prefixes of each
/// size in `sizes` and reports the held-out layer loss.
pub fn calibration_sensitivity(
    method: &dyn Quantizer,
    inputs: &PipelineInputs,
    sizes: &[usize],
    spec: &QuantSpec,
    gptq: &GptqConfig,
) -> Result<Vec<SensitivityRow>> {
    inputs.validate()?;
    if inputs.heldout.is_empty() {
        return Err(Error::Invalid("sensitivity sweep needs held-out data".into()));
    }
    let layer = &inputs.stack.layers()[0];
    let d = layer.weight.d_in();
    sizes
        .par_iter()
        .map(|&n| {
            if n == 0 || n > inputs.calibration.len() {
                return Err(Error::InsufficientSamples(format!(
                    "size {n} outside 1..={}",
                    inputs.calibration.len()
                )));
            }
            let x = &inputs.calibration[..n];
            let stats = CalibrationStats {
                diag: DiagImportance::from_batches(d, x)?,
                full: if method.needs_full_hessian() { Some(HessianEstimate::from_batches(d, x)?) } else { None },
            };
            let q = method.quantize(&layer.weight, &stats, spec, gptq)?;
            Ok(SensitivityRow { n, loss: layer_loss(&layer.weight, &q.layer.dequantize(), &inputs.heldout)? })
        })
        .collect()
}
