//! Calibration statistics and layer-by-layer activation propagation.
//!
//! Accumulators work in f64 whatever the input precision. Batch sums are
//! formed first and then added to the running total, in the same order for
//! the diagonal and the full estimate, so `diag(full) == diag` holds exactly.

use nalgebra::DMatrix;

use crate::bundle::{Tensor, TensorBundle};
use crate::error::{Error, Result};
use crate::types::{QuantizedLayer, WeightMatrix};

/// `d_in x n` activations; each column is one token position.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    d_in: usize,
    n: usize,
    data: Vec<f32>,
    pub batch_id: String,
}

impl ActivationBatch {
    pub fn new(d_in: usize, n: usize, data: Vec<f32>, batch_id: impl Into<String>) -> Result<Self> {
        if data.len() != d_in * n {
            return Err(Error::Shape(format!(
                "{d_in}x{n} activations need {} entries, got {}",
                d_in * n,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("activation batch".into()));
        }
        Ok(Self { d_in, n, data, batch_id: batch_id.into() })
    }

    pub fn from_rows(rows: &[Vec<f32>], batch_id: impl Into<String>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged activation rows".into()));
        }
        Self::new(rows.len(), n, rows.concat(), batch_id)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Number of columns (token positions).
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, j: usize) -> &[f32] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Columns `start..end` as a new batch.
    pub fn columns(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.n {
            return Err(Error::Shape(format!("column range {start}..{end} outside 0..{}", self.n)));
        }
        let data = (0..self.d_in)
            .flat_map(|j| self.row(j)[start..end].iter().copied())
            .collect();
        Ok(Self { d_in: self.d_in, n: end - start, data, batch_id: self.batch_id.clone() })
    }

    /// Concatenates batches along the sample axis.
    pub fn concat(batches: &[ActivationBatch], batch_id: impl Into<String>) -> Result<Self> {
        let first = batches
            .first()
            .ok_or_else(|| Error::Invalid("no batches to concatenate".into()))?;
        let d_in = first.d_in;
        if let Some(b) = batches.iter().find(|b| b.d_in != d_in) {
            return Err(Error::Shape(format!("batch `{}` has d_in {} != {d_in}", b.batch_id, b.d_in)));
        }
        let n = batches.iter().map(|b| b.n).sum();
        let mut data = Vec::with_capacity(d_in * n);
        for j in 0..d_in {
            for b in batches {
                data.extend_from_slice(b.row(j));
            }
        }
        Ok(Self { d_in, n, data, batch_id: batch_id.into() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(vec![self.d_in, self.n], self.data.clone()).expect("shape matches data")
    }

    pub fn from_tensor(t: &Tensor, batch_id: impl Into<String>) -> Result<Self> {
        let data = t
            .as_f32()
            .ok_or_else(|| Error::Invalid("activations must be f32".into()))?;
        match t.shape() {
            &[d_in, n] => Self::new(d_in, n, data.to_vec(), batch_id),
            other => Err(Error::Shape(format!("activations must be 2-D, got {other:?}"))),
        }
    }

    /// All batches stored under `act/<layer>/`, in name order.
    pub fn read_layer(bundle: &TensorBundle, layer: usize) -> Result<Vec<Self>> {
        let prefix = format!("act/{layer}/");
        bundle
            .names_with_prefix(&prefix)
            .map(|name| Self::from_tensor(bundle.get(name).unwrap(), &name[prefix.len()..]))
            .collect()
    }
}

/// Per-input-channel importance `h_j = sum_k x_jk^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagImportance {
    pub h: Vec<f64>,
    pub sample_count: u64,
}

impl DiagImportance {
    pub fn zeros(d_in: usize) -> Self {
        Self { h: vec![0.0; d_in], sample_count: 0 }
    }

    pub fn from_batches<'a>(d_in: usize, batches: impl IntoIterator<Item = &'a ActivationBatch>) -> Result<Self> {
        let mut acc = Self::zeros(d_in);
        for b in batches {
            acc.accumulate(b)?;
        }
        Ok(acc)
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn accumulate(&mut self, batch: &ActivationBatch) -> Result<()> {
        if batch.d_in() != self.h.len() {
            return Err(Error::Shape(format!(
                "batch has {} channels, accumulator {}",
                batch.d_in(),
                self.h.len()
            )));
        }
        for (j, h) in self.h.iter_mut().enumerate() {
            *h += batch.row(j).iter().map(|&x| x as f64 * x as f64).sum::<f64>();
        }
        self.sample_count += batch.n() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &DiagImportance) -> Result<()> {
        if other.h.len() != self.h.len() {
            return Err(Error::Shape("cannot merge accumulators of different width".into()));
        }
        self.h.iter_mut().zip(&other.h).for_each(|(a, b)| *a += b);
        self.sample_count += other.sample_count;
        Ok(())
    }
}

/// Full empirical Hessian `H = sum X X^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianEstimate {
    pub matrix: DMatrix<f64>,
    pub sample_count: u64,
}

impl HessianEstimate {
    pub fn zeros(d_in: usize) -> Self {
        Self { matrix: DMatrix::zeros(d_in, d_in), sample_count: 0 }
    }

    pub fn from_batches<'a>(d_in: usize, batches: impl IntoIterator<Item = &'a ActivationBatch>) -> Result<Self> {
        let mut acc = Self::zeros(d_in);
        for b in batches {
            acc.accumulate(b)?;
        }
        Ok(acc)
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn accumulate(&mut self, batch: &ActivationBatch) -> Result<()> {
        let d = self.dim();
        if batch.d_in() != d {
            return Err(Error::Shape(format!("batch has {} channels, estimate {d}", batch.d_in())));
        }
        let rows: Vec<Vec<f64>> = (0..d)
            .map(|j| batch.row(j).iter().map(|&x| x as f64).collect())
            .collect();
        for i in 0..d {
            for j in i..d {
                let s: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                self.matrix[(i, j)] += s;
                if i != j {
                    self.matrix[(j, i)] += s;
                }
            }
        }
        self.sample_count += batch.n() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &HessianEstimate) -> Result<()> {
        if other.dim() != self.dim() {
            return Err(Error::Shape("cannot merge estimates of different width".into()));
        }
        self.matrix += &other.matrix;
        self.sample_count += other.sample_count;
        Ok(())
    }

    pub fn diagonal(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.matrix.diagonal())
    }

    pub fn off_diagonal(&self) -> DMatrix<f64> {
        let mut o = self.matrix.clone();
        o.fill_diagonal(0.0);
        o
    }

    /// Estimate divided by its sample count.
    pub fn normalized(&self) -> DMatrix<f64> {
        if self.sample_count == 0 {
            self.matrix.clone()
        } else {
            &self.matrix / self.sample_count as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::None => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::None),
            1 => Ok(Activation::Relu),
            other => Err(Error::Format(format!("unknown activation code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: WeightMatrix,
    pub activation: Activation,
}

/// Sequential dense layers: `x_{l+1} = act_l(W_l x_l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.d_out() != pair[1].weight.d_in() {
                return Err(Error::Shape(format!(
                    "layer {l} outputs {} channels but layer {} expects {}",
                    pair[0].weight.d_out(),
                    l + 1,
                    pair[1].weight.d_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn d_in(&self) -> Option<usize> {
        self.layers.first().map(|l| l.weight.d_in())
    }

    /// Full-precision forward pass.
    pub fn forward(&self, x: &ActivationBatch) -> Result<ActivationBatch> {
        self.layers
            .iter()
            .try_fold(x.clone(), |x, layer| apply_layer(&layer.weight, layer.activation, &x))
    }

    pub fn write_to_bundle(&self, bundle: &mut TensorBundle) {
        for (l, layer) in self.layers.iter().enumerate() {
            bundle.insert(format!("weight/{l}"), layer.weight.to_tensor());
            bundle.insert(
                format!("activation/{l}"),
                Tensor::u8(vec![1], vec![layer.activation.code()]).unwrap(),
            );
        }
    }

    pub fn read_from_bundle(bundle: &TensorBundle) -> Result<Self> {
        let mut layers = Vec::new();
        while let Some(t) = bundle.get(&format!("weight/{}", layers.len())) {
            let l = layers.len();
            let activation = match bundle.get(&format!("activation/{l}")) {
                Some(a) => Activation::from_code(
                    *a.as_u8()
                        .and_then(|v| v.first())
                        .ok_or_else(|| Error::Format(format!("activation/{l} must be one u8")))?,
                )?,
                None => Activation::None,
            };
            layers.push(Layer { weight: WeightMatrix::from_tensor(t)?, activation });
        }
        if layers.is_empty() {
            return Err(Error::Invalid("bundle holds no `weight/0`".into()));
        }
        Self::new(layers)
    }
}

/// `W X` in f64, row-major `d_out x n`.
pub fn matmul(weight: &WeightMatrix, x: &ActivationBatch) -> Result<Vec<f64>> {
    if weight.d_in() != x.d_in() {
        return Err(Error::Shape(format!(
            "weight expects {} inputs, activations have {}",
            weight.d_in(),
            x.d_in()
        )));
    }
    let n = x.n();
    let mut out = vec![0.0f64; weight.d_out() * n];
    for (i, out_row) in out.chunks_mut(n.max(1)).enumerate().take(weight.d_out()) {
        for (j, &w) in weight.row(i).iter().enumerate() {
            let w = w as f64;
            for (o, &v) in out_row.iter_mut().zip(x.row(j)) {
                *o += w * v as f64;
            }
        }
    }
    Ok(out)
}

pub fn apply_layer(weight: &WeightMatrix, activation: Activation, x: &ActivationBatch) -> Result<ActivationBatch> {
    let y = matmul(weight, x)?;
    let data = y.into_iter().map(|v| activation.apply(v) as f32).collect();
    ActivationBatch::new(weight.d_out(), x.n(), data, x.batch_id.clone())
}

/// Activations entering layer `prefix.len()`, obtained by running `x0`
/// through the dequantized prefix layers and their activation functions.
pub fn propagate(stack: &LayerStack, prefix: &[QuantizedLayer], x0: &ActivationBatch) -> Result<ActivationBatch> {
    if prefix.len() >= stack.len() {
        return Err(Error::Invalid(format!(
            "prefix of {} layers must be shorter than the {}-layer stack",
            prefix.len(),
            stack.len()
        )));
    }
    prefix
        .iter()
        .zip(stack.layers())
        .try_fold(x0.clone(), |x, (q, layer)| {
            apply_layer(&q.dequantize(), layer.activation, &x)
        })
}
