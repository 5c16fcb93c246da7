//! GPTQ: quantize columns left to right, pushing each column's error onto
//! the not-yet-quantized columns through the inverse Hessian.
//!
//! Uses the upper Cholesky factor `U` of `H^-1` (`H^-1 = U^T U`). Row `j` of
//! `U`, scaled by `1 / U_jj`, is the inverse-Hessian row of the remaining
//! submatrix, so the per-column update
//! `w_k -= (w_j - q_j) / U_jj * U_jk` for `k > j`
//! applies the compensation step with the already-quantized coordinates
//! eliminated. Updates inside a block are immediate; updates to columns past
//! the block are applied once per block.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::calibration::HessianEstimate;
use crate::error::{Error, Result};
use crate::solver::{assemble_layer, init_params, nearest_code};
use crate::types::{group_ranges, QuantSpec, QuantizedLayer, WeightMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct GptqConfig {
    pub block_size: usize,
    /// Added to the diagonal as a fraction of the mean diagonal entry.
    pub damp_ratio: f64,
}

impl Default for GptqConfig {
    fn default() -> Self {
        Self { block_size: 128, damp_ratio: 0.01 }
    }
}

impl GptqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::Invalid("block size must be >= 1".into()));
        }
        if !(self.damp_ratio >= 0.0 && self.damp_ratio.is_finite()) {
            return Err(Error::Invalid(format!("damp ratio must be >= 0, got {}", self.damp_ratio)));
        }
        Ok(())
    }
}

/// `H + damp_ratio * mean(diag(H)) * I`.
pub fn damped_hessian(h: &DMatrix<f64>, damp_ratio: f64) -> DMatrix<f64> {
    let d = h.nrows();
    let mean = if d == 0 { 0.0 } else { h.diagonal().sum() / d as f64 };
    let mut out = h.clone();
    for i in 0..d {
        out[(i, i)] += damp_ratio * mean;
    }
    out
}

/// Upper triangular `U` with `U^T U = H^-1`.
pub fn inverse_cholesky_upper(h: &DMatrix<f64>, damp_ratio: f64) -> Result<DMatrix<f64>> {
    let singular = || Error::SingularHessian { damp_ratio };
    let inv = h.clone().cholesky().ok_or_else(singular)?.inverse();
    let inv = (&inv + inv.transpose()) * 0.5;
    let u = inv.cholesky().ok_or_else(singular)?.l().transpose();
    if u.iter().all(|x| x.is_finite()) && u.diagonal().iter().all(|&x| x > 0.0) {
        Ok(u)
    } else {
        Err(singular())
    }
}

/// Sweeps one row in place and returns its codes.
///
/// `grid[g]` holds the fixed `(scale, offset)` of group `g`. After column `j`
/// is quantized and its error applied, `observe(j, row)` sees the row with
/// in-block columns compensated; columns past the current block receive their
/// share at the block boundary.
pub fn sweep_row(
    row: &mut [f64],
    u: &DMatrix<f64>,
    grid: &[(f64, f64)],
    group_size: usize,
    bits: u8,
    block_size: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> Vec<u8> {
    let d = row.len();
    let top = ((1u32 << bits) - 1) as f64;
    let mut codes = vec![0u8; d];
    let mut errs = Vec::with_capacity(block_size);
    let mut start = 0;
    while start < d {
        let end = (start + block_size).min(d);
        errs.clear();
        for j in start..end {
            let (s, z) = grid[j / group_size];
            let q = nearest_code(row[j], s, z, top);
            codes[j] = q;
            let err = (row[j] - (s * q as f64 - z)) / u[(j, j)];
            for k in j + 1..end {
                row[k] -= err * u[(j, k)];
            }
            errs.push(err);
            observe(j, row);
        }
        for k in end..d {
            let delta: f64 = errs.iter().enumerate().map(|(i, e)| e * u[(start + i, k)]).sum();
            row[k] -= delta;
        }
        start = end;
    }
    codes
}

/// GPTQ with group grids fixed up front from the uncompensated weights.
pub fn quantize_gptq(
    weight: &WeightMatrix,
    hessian: &HessianEstimate,
    spec: &QuantSpec,
    cfg: &GptqConfig,
) -> Result<QuantizedLayer> {
    spec.validate()?;
    cfg.validate()?;
    let (d_out, d_in) = (weight.d_out(), weight.d_in());
    if hessian.dim() != d_in {
        return Err(Error::Shape(format!(
            "Hessian is {0}x{0}, weight has {d_in} inputs",
            hessian.dim()
        )));
    }
    let u = inverse_cholesky_upper(&damped_hessian(&hessian.matrix, cfg.damp_ratio), cfg.damp_ratio)?;

    let rows = (0..d_out)
        .into_par_iter()
        .map(|r| {
            let mut row: Vec<f64> = weight.row(r).iter().map(|&x| x as f64).collect();
            let mut stored = Vec::new();
            for cols in group_ranges(d_in, spec.group_size) {
                let (s, z) = init_params(&row[cols], spec.bits, spec.s_floor)?;
                stored.push((
                    spec.param_precision.round_scale(s, spec.s_floor),
                    spec.param_precision.round(z),
                ));
            }
            let grid: Vec<(f64, f64)> = stored.iter().map(|&(s, z)| (s as f64, z as f64)).collect();
            let codes = sweep_row(&mut row, &u, &grid, spec.group_size, spec.bits, cfg.block_size, |_, _| {});
            Ok((stored, codes))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut groups = Vec::with_capacity(d_out * spec.groups_per_row(d_in));
    for (stored, codes) in rows {
        for ((s, z), cols) in stored.into_iter().zip(group_ranges(d_in, spec.group_size)) {
            groups.push((s, z, codes[cols].to_vec()));
        }
    }
    assemble_layer(spec, d_out, d_in, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::quantize_rtn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn estimate(m: DMatrix<f64>) -> HessianEstimate {
        HessianEstimate { matrix: m, sample_count: 1 }
    }

    fn spec(bits: u8, group_size: usize) -> QuantSpec {
        QuantSpec { bits, group_size, ..Default::default() }
    }

    #[test]
    fn identity_hessian_is_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = WeightMatrix::from_fn(6, 20, |_, _| rng.random_range(-1.0f32..1.0)).unwrap();
        for (bits, g, block) in [(2, 8, 128), (3, 5, 4), (4, 20, 1)] {
            let sp = spec(bits, g);
            let cfg = GptqConfig { block_size: block, ..Default::default() };
            let gptq = quantize_gptq(&w, &estimate(DMatrix::identity(20, 20)), &sp, &cfg).unwrap();
            assert_eq!(gptq, quantize_rtn(&w, &sp).unwrap());
        }
    }

    #[test]
    fn diagonal_hessian_is_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = WeightMatrix::from_fn(3, 12, |_, _| rng.random_range(-1.0f32..1.0)).unwrap();
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(12, |_, _| rng.random_range(0.1..10.0)));
        let sp = spec(2, 4);
        assert_eq!(
            quantize_gptq(&w, &estimate(diag), &sp, &GptqConfig::default()).unwrap(),
            quantize_rtn(&w, &sp).unwrap()
        );
    }

    #[test]
    fn two_by_two_compensation() {
        // H = [[2, 1], [1, 2]]: an error e on column 0 shifts column 1 by e / 2.
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let u = inverse_cholesky_upper(&h, 0.0).unwrap();
        let mut row = vec![0.3, 1.2];
        let mut seen = Vec::new();
        let codes = sweep_row(&mut row, &u, &[(1.0, 0.0)], 2, 2, 128, |j, r| seen.push((j, r.to_vec())));
        assert_eq!(codes, vec![0, 1]);
        assert!((seen[0].1[1] - 1.35).abs() < 1e-12, "{:?}", seen);
    }

    #[test]
    fn grid_aligned_weights_propagate_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Every group spans codes 0..=3 on the grid s = 0.5, z = 1.
        let codes: Vec<u8> = (0..32).map(|k| [0u8, 3, 1, 2][k % 4]).collect();
        let w = WeightMatrix::new(2, 16, codes.iter().map(|&q| 0.5 * q as f32 - 1.0).collect()).unwrap();
        let x = nalgebra::DMatrix::from_fn(16, 40, |_, _| rng.random_range(-1.0..1.0));
        let h = estimate(&x * x.transpose());
        let q = quantize_gptq(&w, &h, &spec(2, 4), &GptqConfig::default()).unwrap();
        assert_eq!(q.codes(), codes);
        assert_eq!(q.dequantize(), w);
    }

    #[test]
    fn singular_hessian_fails() {
        let w = WeightMatrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let cfg = GptqConfig { damp_ratio: 0.0, ..Default::default() };
        let err = quantize_gptq(&w, &estimate(DMatrix::zeros(3, 3)), &spec(2, 3), &cfg).unwrap_err();
        assert!(matches!(err, Error::SingularHessian { .. }));
        assert!(err.is_numerical());
        // Rank-one without damping is singular too; damping rescues it.
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let rank1 = estimate(&v * v.transpose());
        assert!(quantize_gptq(&w, &rank1, &spec(2, 3), &cfg).is_err());
        assert!(quantize_gptq(&w, &rank1, &spec(2, 3), &GptqConfig::default()).is_ok());
    }

    /// Dense-solve oracle: the remaining weights minimizing
    /// `(w - v)^T H (w - v)` with the processed coordinates fixed.
    fn conditional_minimizer(h: &DMatrix<f64>, w0: &[f64], fixed: &[f64], done: usize) -> Vec<f64> {
        let d = w0.len();
        let rest = d - done;
        let h_rr = h.view((done, done), (rest, rest)).into_owned();
        let h_rp = h.view((done, 0), (rest, done)).into_owned();
        let delta_p = nalgebra::DVector::from_fn(done, |i, _| w0[i] - fixed[i]);
        let rhs = h_rp * delta_p;
        let shift = h_rr.lu().solve(&rhs).unwrap();
        (0..rest).map(|i| w0[done + i] + shift[i]).collect()
    }

    #[test]
    fn compensation_is_conditional_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let d = rng.random_range(3..=6);
            let x = DMatrix::from_fn(d, d + 4, |_, _| rng.random_range(-1.0..1.0));
            let h = &x * x.transpose();
            let hd = damped_hessian(&h, 0.01);
            let u = inverse_cholesky_upper(&hd, 0.01).unwrap();
            let w0: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (s, z) = init_params(&w0, 2, 1e-8).unwrap();
            let mut row = w0.clone();
            let mut fixed = vec![0.0; d];
            let mut seen = Vec::new();
            sweep_row(&mut row, &u, &[(s, z)], d, 2, 128, |j, r| {
                fixed[j] = s * nearest_code(r[j], s, z, 3.0) as f64 - z;
                seen.push(j);
                if j + 1 < d {
                    let want = conditional_minimizer(&hd, &w0, &fixed, j + 1);
                    for (k, v) in want.iter().enumerate() {
                        assert!((r[j + 1 + k] - v).abs() < 1e-8, "col {j}: {} vs {v}", r[j + 1 + k]);
                    }
                }
            });
            assert_eq!(seen, (0..d).collect::<Vec<_>>());
        }
    }

    #[test]
    fn block_size_does_not_change_result() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = WeightMatrix::from_fn(4, 24, |_, _| rng.random_range(-1.0f32..1.0)).unwrap();
        let x = DMatrix::from_fn(24, 60, |_, _| rng.random_range(-1.0..1.0));
        let h = estimate(&x * x.transpose());
        let sp = spec(3, 8);
        let full = quantize_gptq(&w, &h, &sp, &GptqConfig { block_size: 128, ..Default::default() }).unwrap();
        for block in [1, 5, 8] {
            let q = quantize_gptq(&w, &h, &sp, &GptqConfig { block_size: block, ..Default::default() }).unwrap();
            assert_eq!(q.codes(), full.codes(), "block {block}");
        }
    }

    #[test]
    fn hessian_shape_checked() {
        let w = WeightMatrix::new(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let err = quantize_gptq(&w, &estimate(DMatrix::identity(2, 2)), &spec(2, 3), &GptqConfig::default());
        assert!(matches!(err, Err(Error::Shape(_))));
    }
}
