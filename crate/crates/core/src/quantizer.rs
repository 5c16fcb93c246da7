//! Quantization methods behind one trait, looked up by name at runtime.

use std::sync::Arc;

use crate::baselines::{quantize_gptq, quantize_rtn, GptqConfig};
use crate::calibration::{DiagImportance, HessianEstimate};
use crate::error::{Error, Result};
use crate::solver::{quantize_layer_dashq, SolveTrace};
use crate::types::{QuantSpec, QuantizedLayer, WeightMatrix};

/// Calibration statistics for one layer's inputs.
#[derive(Debug, Clone)]
pub struct CalibrationStats {
    pub diag: DiagImportance,
    /// Present only when the method asked for it.
    pub full: Option<HessianEstimate>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuantization {
    pub layer: QuantizedLayer,
    /// One trace per group for iterative methods, empty otherwise.
    pub traces: Vec<SolveTrace>,
}

pub trait Quantizer: Send + Sync {
    fn name(&self) -> &'static str;

    fn needs_full_hessian(&self) -> bool {
        false
    }

    fn quantize(
        &self,
        weight: &WeightMatrix,
        stats: &CalibrationStats,
        spec: &QuantSpec,
        gptq: &GptqConfig,
    ) -> Result<LayerQuantization>;
}

pub struct Rtn;

impl Quantizer for Rtn {
    fn name(&self) -> &'static str {
        "rtn"
    }

    fn quantize(&self, weight: &WeightMatrix, _: &CalibrationStats, spec: &QuantSpec, _: &GptqConfig) -> Result<LayerQuantization> {
        Ok(LayerQuantization { layer: quantize_rtn(weight, spec)?, traces: Vec::new() })
    }
}

pub struct Gptq;

impl Quantizer for Gptq {
    fn name(&self) -> &'static str {
        "gptq"
    }

    fn needs_full_hessian(&self) -> bool {
        true
    }

    fn quantize(&self, weight: &WeightMatrix, stats: &CalibrationStats, spec: &QuantSpec, cfg: &GptqConfig) -> Result<LayerQuantization> {
        let full = stats
            .full
            .as_ref()
            .ok_or_else(|| Error::Invalid("gptq needs the full Hessian estimate".into()))?;
        Ok(LayerQuantization { layer: quantize_gptq(weight, full, spec, cfg)?, traces: Vec::new() })
    }
}

pub struct DashQ;

impl Quantizer for DashQ {
    fn name(&self) -> &'static str {
        "dashq"
    }

    fn quantize(&self, weight: &WeightMatrix, stats: &CalibrationStats, spec: &QuantSpec, _: &GptqConfig) -> Result<LayerQuantization> {
        let (layer, traces) = quantize_layer_dashq(weight, &stats.diag, spec)?;
        Ok(LayerQuantization { layer, traces })
    }
}

#[derive(Clone, Default)]
pub struct QuantizerRegistry {
    entries: Vec<(&'static str, Arc<dyn Quantizer>)>,
}

impl QuantizerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// `rtn`, `gptq` and `dashq`.
    pub fn with_builtin() -> Self {
        let mut r = Self::new();
        r.register(Arc::new(Rtn));
        r.register(Arc::new(Gptq));
        r.register(Arc::new(DashQ));
        r
    }

    /// Adds a method, replacing any existing one with the same name.
    pub fn register(&mut self, quantizer: Arc<dyn Quantizer>) {
        let name = quantizer.name();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = quantizer,
            None => self.entries.push((name, quantizer)),
        }
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Quantizer>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, q)| q.clone())
            .ok_or_else(|| Error::UnknownMethod(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.iter().map(|(n, _)| *n)
    }
}
