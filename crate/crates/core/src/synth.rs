//! Deterministic synthetic models and activations.
//!
//! Every random quantity comes from ChaCha8 seeded with the run seed, each on
//! its own stream, so adding a layer or changing `n` never perturbs the other
//! draws. Normals are `rand_distr::StandardNormal` (ziggurat).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::bundle::{Tensor, TensorBundle};
use crate::calibration::{Activation, ActivationBatch, Layer, LayerStack};
use crate::error::{Error, Result};
use crate::types::WeightMatrix;

const STREAM_WEIGHTS: u64 = 0;
const STREAM_FACTOR: u64 = 1 << 32;
const STREAM_BOOST: u64 = 2 << 32;
const STREAM_CALIBRATION: u64 = 3 << 32;
const STREAM_HELDOUT: u64 = 4 << 32;

/// Gain applied to the salient channels of `heavy-tailed-cols`.
pub const BOOST: f32 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// Independent standard normal channels.
    GaussianIid,
    /// `x = A z` with a fixed random factor `A` (entries `N(0, 1/d)`).
    Correlated,
    /// Independent channels, a random `max(1, d/16)` of them scaled by [`BOOST`].
    HeavyTailedCols,
}

impl SynthKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::GaussianIid => "gaussian-iid",
            SynthKind::Correlated => "correlated",
            SynthKind::HeavyTailedCols => "heavy-tailed-cols",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian-iid" => Ok(SynthKind::GaussianIid),
            "correlated" => Ok(SynthKind::Correlated),
            "heavy-tailed-cols" => Ok(SynthKind::HeavyTailedCols),
            other => Err(Error::Invalid(format!(
                "unknown synthetic kind `{other}` (gaussian-iid, correlated, heavy-tailed-cols)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Layer widths `d_0, d_1, ..., d_L`; hidden layers use relu, the last is linear.
    pub dims: Vec<usize>,
    /// Calibration samples.
    pub n: usize,
    /// Held-out samples.
    pub heldout: usize,
    /// Token columns per sample.
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: SynthKind::GaussianIid,
            dims: vec![64, 64, 64, 32],
            n: 128,
            heldout: 32,
            seq_len: 16,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return Err(Error::Invalid(format!("dims must list at least two positive widths, got {:?}", self.dims)));
        }
        if self.seq_len == 0 {
            return Err(Error::Invalid("seq_len must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub stack: LayerStack,
    /// One batch per sample, ids zero-padded so name order is draw order.
    pub calibration: Vec<ActivationBatch>,
    pub heldout: Vec<ActivationBatch>,
    /// Input channels scaled by [`BOOST`] (empty unless `heavy-tailed-cols`).
    pub boosted: Vec<usize>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut impl Rng) -> f32 {
    rng.sample::<f64, _>(StandardNormal) as f32
}

/// Generates input samples for `spec.kind` with a fixed per-seed input law.
pub struct InputSampler {
    d: usize,
    factor: Option<Vec<f32>>,
    gain: Vec<f32>,
}

impl InputSampler {
    pub fn new(kind: SynthKind, d: usize, seed: u64) -> Self {
        let factor = (kind == SynthKind::Correlated).then(|| {
            let mut rng = stream(seed, STREAM_FACTOR);
            let sd = (1.0 / d as f64).sqrt() as f32;
            (0..d * d).map(|_| normal(&mut rng) * sd).collect()
        });
        let mut gain = vec![1.0f32; d];
        if kind == SynthKind::HeavyTailedCols {
            let mut rng = stream(seed, STREAM_BOOST);
            for j in rand::seq::index::sample(&mut rng, d, (d / 16).max(1)) {
                gain[j] = BOOST;
            }
        }
        Self { d, factor, gain }
    }

    pub fn boosted(&self) -> Vec<usize> {
        (0..self.d).filter(|&j| self.gain[j] != 1.0).collect()
    }

    /// `count` samples of `seq_len` tokens each.
    pub fn draw(&self, rng: &mut impl Rng, count: usize, seq_len: usize, label: &str) -> Result<Vec<ActivationBatch>> {
        let d = self.d;
        (0..count)
            .map(|i| {
                let mut data = vec![0.0f32; d * seq_len];
                let mut z = vec![0.0f32; d];
                for t in 0..seq_len {
                    z.iter_mut().for_each(|v| *v = normal(rng));
                    for j in 0..d {
                        let x = match &self.factor {
                            Some(a) => a[j * d..(j + 1) * d].iter().zip(&z).map(|(a, z)| a * z).sum(),
                            None => z[j],
                        };
                        data[j * seq_len + t] = x * self.gain[j];
                    }
                }
                ActivationBatch::new(d, seq_len, data, format!("{label}{i:06}"))
            })
            .collect()
    }
}

/// Weights `N(0, 1/d_in)`; calibration and held-out inputs per `spec.kind`.
pub fn gen_synthetic(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut wrng = stream(spec.seed, STREAM_WEIGHTS);
    let last = spec.dims.len() - 2;
    let layers = spec
        .dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let sd = (1.0 / w[0] as f64).sqrt() as f32;
            Ok(Layer {
                weight: WeightMatrix::from_fn(w[1], w[0], |_, _| normal(&mut wrng) * sd)?,
                activation: if l < last { Activation::Relu } else { Activation::None },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sampler = InputSampler::new(spec.kind, spec.dims[0], spec.seed);
    Ok(SynthData {
        stack: LayerStack::new(layers)?,
        calibration: sampler.draw(&mut stream(spec.seed, STREAM_CALIBRATION), spec.n, spec.seq_len, "")?,
        heldout: sampler.draw(&mut stream(spec.seed, STREAM_HELDOUT), spec.heldout, spec.seq_len, "")?,
        boosted: sampler.boosted(),
    })
}

impl SynthData {
    /// `weight/<l>`, `activation/<l>`, `act/0/<id>`, `heldout/<id>`, `synth/boosted`.
    pub fn to_bundle(&self) -> TensorBundle {
        let mut b = TensorBundle::new();
        self.stack.write_to_bundle(&mut b);
        for x in &self.calibration {
            b.insert(format!("act/0/{}", x.batch_id), x.to_tensor());
        }
        for x in &self.heldout {
            b.insert(format!("heldout/{}", x.batch_id), x.to_tensor());
        }
        let boosted = self.boosted.iter().map(|&j| j as i64).collect::<Vec<_>>();
        b.insert("synth/boosted", Tensor::i64(vec![boosted.len()], boosted).unwrap());
        b
    }

    pub fn from_bundle(bundle: &TensorBundle) -> Result<Self> {
        Ok(Self {
            stack: LayerStack::read_from_bundle(bundle)?,
            calibration: ActivationBatch::read_layer(bundle, 0)?,
            heldout: read_heldout(bundle)?,
            boosted: bundle
                .get("synth/boosted")
                .and_then(|t| t.as_i64())
                .map(|v| v.iter().map(|&j| j as usize).collect())
                .unwrap_or_default(),
        })
    }
}

/// Batches under `heldout/`, in name order.
pub fn read_heldout(bundle: &TensorBundle) -> Result<Vec<ActivationBatch>> {
    bundle
        .names_with_prefix("heldout/")
        .map(|name| ActivationBatch::from_tensor(bundle.get(name).unwrap(), &name["heldout/".len()..]))
        .collect()
}
