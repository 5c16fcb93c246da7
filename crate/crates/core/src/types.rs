//! Core value types shared by every quantizer.
//!
//! The affine convention throughout is offset-before-scaling:
//! `q = clip(round((w + z) / s))` and `w_hat = s * q - z`, with `z` kept in
//! full precision. All three quantizers emit the same [`QuantizedLayer`] and
//! share one dequantizer.

use std::ops::Range;

use half::f16;

use crate::bundle::{Tensor, TensorBundle};
use crate::error::{Error, Result};
use crate::packing;

/// Dense `d_out x d_in` weights, row-major. Rows are output channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    d_out: usize,
    d_in: usize,
    data: Vec<f32>,
}

impl WeightMatrix {
    pub fn new(d_out: usize, d_in: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != d_out * d_in {
            return Err(Error::Shape(format!(
                "{d_out}x{d_in} weight matrix needs {} entries, got {}",
                d_out * d_in,
                data.len()
            )));
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("weight matrix".into()));
        }
        Ok(Self { d_out, d_in, data })
    }

    pub fn from_fn(d_out: usize, d_in: usize, mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let data = (0..d_out * d_in).map(|k| f(k / d_in, k % d_in)).collect();
        Self::new(d_out, d_in, data)
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.d_in + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.d_in..(row + 1) * self.d_in]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::f32(vec![self.d_out, self.d_in], self.data.clone()).expect("shape matches data")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let data = t
            .as_f32()
            .ok_or_else(|| Error::Invalid(format!("weights must be f32, got {}", t.dtype().as_str())))?;
        match t.shape() {
            &[d_out, d_in] => Self::new(d_out, d_in, data.to_vec()),
            other => Err(Error::Shape(format!("weights must be 2-D, got {other:?}"))),
        }
    }
}

/// Storage precision for per-group scale and offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ParamPrecision {
    #[default]
    F32,
    /// Round through IEEE half precision before use (values are still stored as f32).
    F16,
}

impl ParamPrecision {
    pub fn round(self, v: f64) -> f32 {
        match self {
            ParamPrecision::F32 => v as f32,
            ParamPrecision::F16 => f16::from_f64(v).to_f32(),
        }
    }

    /// Rounds a scale, stepping up to the smallest representable value that
    /// is still at least `floor`.
    pub fn round_scale(self, s: f64, floor: f64) -> f32 {
        let s = s.max(floor);
        match self {
            ParamPrecision::F32 => {
                let mut r = s as f32;
                while (r as f64) < floor {
                    r = f32::from_bits(r.to_bits() + 1);
                }
                r
            }
            ParamPrecision::F16 => {
                let mut r = f16::from_f64(s);
                while r.to_f64() < floor {
                    r = f16::from_bits(r.to_bits() + 1);
                }
                r.to_f32()
            }
        }
    }
}

/// Quantization settings shared by all methods.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
    /// Coordinate-descent iterations `T`.
    pub iters: usize,
    /// Ridge weight on `s^2`.
    pub lambda: f64,
    /// Damping of parameter updates; 1 disables damping.
    pub alpha: f64,
    /// Lower bound on every scale.
    pub s_floor: f64,
    pub param_precision: ParamPrecision,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            bits: 4,
            group_size: 128,
            iters: 9,
            lambda: 1e-2,
            alpha: 0.5,
            s_floor: 1e-8,
            param_precision: ParamPrecision::F32,
        }
    }
}

impl QuantSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=8).contains(&self.bits) {
            return Err(Error::Invalid(format!("bits must be in 2..=8, got {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::Invalid("group size must be positive".into()));
        }
        if self.iters == 0 {
            return Err(Error::Invalid("iters must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Invalid(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        if !(self.s_floor > 0.0 && self.s_floor.is_finite()) {
            return Err(Error::Invalid(format!("s_floor must be > 0, got {}", self.s_floor)));
        }
        Ok(())
    }

    pub fn max_code(&self) -> u8 {
        ((1u16 << self.bits) - 1) as u8
    }

    pub fn groups_per_row(&self, d_in: usize) -> usize {
        d_in.div_ceil(self.group_size)
    }
}

/// Column ranges of the groups of one row. The last group is shorter when
/// `group_size` does not divide `d_in`.
pub fn group_ranges(d_in: usize, group_size: usize) -> impl Iterator<Item = Range<usize>> {
    (0..d_in)
        .step_by(group_size.max(1))
        .map(move |start| start..(start + group_size).min(d_in))
}

/// One group's fitted parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupParams {
    pub scale: f64,
    pub offset: f64,
    pub codes: Vec<u8>,
}

impl GroupParams {
    pub fn reconstruct(&self) -> Vec<f64> {
        self.codes
            .iter()
            .map(|&q| self.scale * q as f64 - self.offset)
            .collect()
    }
}

/// Packed codes plus per-group parameters for one layer.
///
/// Codes are packed row-major over the full `d_out x d_in` matrix. Scales and
/// zeros are indexed `row * groups_per_row + group`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub bits: u8,
    pub group_size: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub packed_codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub zeros: Vec<f32>,
}

impl QuantizedLayer {
    /// Packs a row-major code matrix together with its group parameters.
    pub fn assemble(
        bits: u8,
        group_size: usize,
        d_out: usize,
        d_in: usize,
        codes: &[u8],
        scales: Vec<f32>,
        zeros: Vec<f32>,
    ) -> Result<Self> {
        if codes.len() != d_out * d_in {
            return Err(Error::Shape(format!(
                "expected {} codes, got {}",
                d_out * d_in,
                codes.len()
            )));
        }
        let layer = Self {
            bits,
            group_size,
            d_out,
            d_in,
            packed_codes: packing::pack_codes(codes, bits)?,
            scales,
            zeros,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn groups_per_row(&self) -> usize {
        self.d_in.div_ceil(self.group_size)
    }

    pub fn num_groups(&self) -> usize {
        self.d_out * self.groups_per_row()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) || self.group_size == 0 {
            return Err(Error::Invalid(format!(
                "bad layer metadata: bits {}, group size {}",
                self.bits, self.group_size
            )));
        }
        let groups = self.num_groups();
        if self.scales.len() != groups || self.zeros.len() != groups {
            return Err(Error::Shape(format!(
                "{groups} groups but {} scales and {} zeros",
                self.scales.len(),
                self.zeros.len()
            )));
        }
        let need = packing::packed_len(self.d_out * self.d_in, self.bits);
        if self.packed_codes.len() != need {
            return Err(Error::Shape(format!(
                "packed codes hold {} bytes, expected {need}",
                self.packed_codes.len()
            )));
        }
        if !self.scales.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::Invalid("scales must be finite and positive".into()));
        }
        if !self.zeros.iter().all(|z| z.is_finite()) {
            return Err(Error::NonFinite("zeros".into()));
        }
        Ok(())
    }

    pub fn codes(&self) -> Vec<u8> {
        packing::unpack_codes(&self.packed_codes, self.bits, self.d_out * self.d_in)
            .expect("validated packed length")
    }

    /// `W_hat[i][j] = s_G * Q[i][j] - z_G`, evaluated in f64 and stored as f32.
    pub fn dequantize(&self) -> WeightMatrix {
        let codes = self.codes();
        let gpr = self.groups_per_row();
        let data = codes
            .iter()
            .enumerate()
            .map(|(k, &q)| {
                let (row, col) = (k / self.d_in, k % self.d_in);
                let g = row * gpr + col / self.group_size;
                (self.scales[g] as f64 * q as f64 - self.zeros[g] as f64) as f32
            })
            .collect();
        WeightMatrix::new(self.d_out, self.d_in, data).expect("finite parameters")
    }

    pub fn write_to_bundle(&self, bundle: &mut TensorBundle, prefix: &str) {
        let gpr = self.groups_per_row();
        let meta = vec![
            self.bits as i64,
            self.group_size as i64,
            self.d_out as i64,
            self.d_in as i64,
        ];
        bundle.insert(format!("{prefix}/meta"), Tensor::i64(vec![4], meta).unwrap());
        bundle.insert(
            format!("{prefix}/codes"),
            Tensor::u8(vec![self.packed_codes.len()], self.packed_codes.clone()).unwrap(),
        );
        bundle.insert(
            format!("{prefix}/scales"),
            Tensor::f32(vec![self.d_out, gpr], self.scales.clone()).unwrap(),
        );
        bundle.insert(
            format!("{prefix}/zeros"),
            Tensor::f32(vec![self.d_out, gpr], self.zeros.clone()).unwrap(),
        );
    }

    pub fn read_from_bundle(bundle: &TensorBundle, prefix: &str) -> Result<Self> {
        let meta = bundle
            .require(&format!("{prefix}/meta"))?
            .as_i64()
            .filter(|m| m.len() == 4)
            .ok_or_else(|| Error::Format(format!("{prefix}/meta must be 4 x i64")))?;
        let to_usize = |v: i64| {
            usize::try_from(v).map_err(|_| Error::Format(format!("{prefix}/meta has negative entry")))
        };
        let bits = u8::try_from(meta[0]).map_err(|_| Error::Format("bits out of range".into()))?;
        let packed = bundle
            .require(&format!("{prefix}/codes"))?
            .as_u8()
            .ok_or_else(|| Error::Format(format!("{prefix}/codes must be u8")))?;
        let float = |name: &str| -> Result<Vec<f32>> {
            bundle
                .require(&format!("{prefix}/{name}"))?
                .as_f32()
                .map(<[f32]>::to_vec)
                .ok_or_else(|| Error::Format(format!("{prefix}/{name} must be f32")))
        };
        let layer = Self {
            bits,
            group_size: to_usize(meta[1])?,
            d_out: to_usize(meta[2])?,
            d_in: to_usize(meta[3])?,
            packed_codes: packed.to_vec(),
            scales: float("scales")?,
            zeros: float("zeros")?,
        };
        layer.validate()?;
        Ok(layer)
    }
}
