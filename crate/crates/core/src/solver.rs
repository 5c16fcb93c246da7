//! Diagonal-Hessian weighted least squares group solver.
//!
//! With the Hessian replaced by its diagonal `h`, the reconstruction loss of a
//! row splits into independent per-element terms, and each group's affine
//! parameters solve the ridge problem
//!
//! ```text
//! min_{s,z}  sum_j h_j (w_j - (s q_j - z))^2 + lambda s^2
//! ```
//!
//! for fixed codes `q`. Its minimizer is `s = Cov_h(w, q) / (Var_h(q) + lambda)`,
//! `z = s qbar_h - wbar_h`. The solver alternates code refinement with this
//! regression, starting from the min-max grid.

use rayon::prelude::*;

use crate::calibration::DiagImportance;
use crate::error::{Error, Result};
use crate::types::{group_ranges, GroupParams, QuantSpec, QuantizedLayer, WeightMatrix};

/// Weights and importances of one group.
#[derive(Debug, Clone, Copy)]
pub struct GroupProblem<'a> {
    pub weights: &'a [f64],
    pub importance: &'a [f64],
    pub spec: &'a QuantSpec,
}

/// Per-iteration record of one group solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    /// Ridge objective after each regression step.
    pub objective: Vec<f64>,
    /// `|s_t - s_{t-1}| / |s_0|` for `t = 1..=T`.
    pub scale_change: Vec<f64>,
    /// Whether the scale floor was hit by any regression.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMoments {
    pub h_sum: f64,
    pub w_mean: f64,
    pub q_mean: f64,
    pub cov: f64,
    pub var: f64,
}

/// Output of the closed-form regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    pub scale: f64,
    pub offset: f64,
    /// The unconstrained scale fell below the floor.
    pub clamped: bool,
}

/// Min-max starting point: `s0 = (max - min) / (2^b - 1)`, `z0 = -min`.
///
/// A constant group gets `s0 = s_floor`, which maps every weight to code 0
/// with zero error.
pub fn init_params(w: &[f64], bits: u8, s_floor: f64) -> Result<(f64, f64)> {
    if w.is_empty() {
        return Err(Error::Invalid("empty group".into()));
    }
    if bits < 2 {
        return Err(Error::Invalid(format!("bits must be >= 2, got {bits}")));
    }
    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let levels = ((1u32 << bits) - 1) as f64;
    let scale = if hi > lo { ((hi - lo) / levels).max(s_floor) } else { s_floor };
    Ok((scale, -lo))
}

/// `q_j = clip(round((w_j + z) / s), 0, 2^b - 1)`, ties rounded away from zero.
pub fn refine_codes(w: &[f64], s: f64, z: f64, bits: u8) -> Result<Vec<u8>> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Invalid(format!("scale must be positive, got {s}")));
    }
    let top = ((1u32 << bits) - 1) as f64;
    Ok(w.iter().map(|&x| nearest_code(x, s, z, top)).collect())
}

#[inline]
pub(crate) fn nearest_code(w: f64, s: f64, z: f64, top: f64) -> u8 {
    ((w + z) / s).round().clamp(0.0, top) as u8
}

pub fn weighted_moments(w: &[f64], q: &[u8], h: &[f64]) -> Result<WeightedMoments> {
    if w.len() != q.len() || w.len() != h.len() {
        return Err(Error::Shape(format!(
            "group lengths differ: {} weights, {} codes, {} importances",
            w.len(),
            q.len(),
            h.len()
        )));
    }
    let h_sum: f64 = h.iter().sum();
    if !(h_sum > 0.0) {
        return Err(Error::ZeroImportance);
    }
    let w_mean = h.iter().zip(w).map(|(h, w)| h * w).sum::<f64>() / h_sum;
    let q_mean = h.iter().zip(q).map(|(h, &q)| h * q as f64).sum::<f64>() / h_sum;
    let (mut cov, mut var) = (0.0, 0.0);
    for ((&h, &w), &q) in h.iter().zip(w).zip(q) {
        let dq = q as f64 - q_mean;
        cov += h * dq * (w - w_mean);
        var += h * dq * dq;
    }
    Ok(WeightedMoments { h_sum, w_mean, q_mean, cov, var })
}

/// Closed-form ridge solution, with the scale clamped to `>= s_floor`. The
/// offset is the exact minimizer for the clamped scale.
pub fn regress_params(m: &WeightedMoments, lambda: f64, s_floor: f64) -> Result<Regression> {
    let denom = m.var + lambda;
    if denom == 0.0 {
        return Err(Error::ZeroDenominator);
    }
    let raw = m.cov / denom;
    let clamped = !(raw >= s_floor);
    let scale = if clamped { s_floor } else { raw };
    Ok(Regression { scale, offset: scale * m.q_mean - m.w_mean, clamped })
}

/// `sum_j h_j (w_j - (s q_j - z))^2 + lambda s^2`.
pub fn objective(w: &[f64], h: &[f64], q: &[u8], s: f64, z: f64, lambda: f64) -> f64 {
    weighted_loss(w, h, q, s, z) + lambda * s * s
}

/// `sum_j h_j (w_j - (s q_j - z))^2`.
pub fn weighted_loss(w: &[f64], h: &[f64], q: &[u8], s: f64, z: f64) -> f64 {
    w.iter()
        .zip(h)
        .zip(q)
        .map(|((&w, &h), &q)| {
            let r = w - (s * q as f64 - z);
            h * r * r
        })
        .sum()
}

fn check_importance(h: &[f64]) -> Result<()> {
    if h.iter().all(|&x| x >= 0.0 && x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Invalid("importance weights must be finite and non-negative".into()))
    }
}

/// Runs the alternating solve on one group.
///
/// Each of the `T` iterations refines the codes from the current `(s, z)`
/// and then regresses `(s, z)` on those codes. With `alpha < 1` the new
/// parameters are `alpha * regressed + (1 - alpha) * previous`. Codes are
/// recomputed from the final parameters before returning. Groups whose
/// importances sum to zero are solved with uniform importance.
pub fn solve_group(p: &GroupProblem<'_>) -> Result<(GroupParams, SolveTrace)> {
    let GroupProblem { weights: w, importance, spec } = *p;
    if w.len() != importance.len() {
        return Err(Error::Shape(format!(
            "{} weights but {} importances",
            w.len(),
            importance.len()
        )));
    }
    check_importance(importance)?;
    let uniform;
    let h = if importance.iter().sum::<f64>() > 0.0 {
        importance
    } else {
        uniform = vec![1.0; w.len()];
        &uniform
    };

    let (s0, z0) = init_params(w, spec.bits, spec.s_floor)?;
    let mut trace = SolveTrace::default();

    if w.iter().all(|&x| x == w[0]) {
        // Constant group: codes 0 reconstruct it exactly.
        let offset = -w[0];
        let codes = vec![0; w.len()];
        let obj = objective(w, h, &codes, s0, offset, spec.lambda);
        trace.objective = vec![obj; spec.iters];
        trace.scale_change = vec![0.0; spec.iters];
        return Ok((GroupParams { scale: s0, offset, codes }, trace));
    }

    let (mut s, mut z) = (s0, z0);
    for _ in 0..spec.iters {
        let codes = refine_codes(w, s, z, spec.bits)?;
        let m = weighted_moments(w, &codes, h)?;
        let reg = match regress_params(&m, spec.lambda, spec.s_floor) {
            Ok(r) => r,
            // Constant codes and no ridge: every scale fits equally well, keep
            // the current one and re-center the offset.
            Err(Error::ZeroDenominator) => Regression { scale: s, offset: s * m.q_mean - m.w_mean, clamped: false },
            Err(e) => return Err(e),
        };
        trace.clamped |= reg.clamped;
        let (s_next, z_next) = if spec.alpha >= 1.0 {
            (reg.scale, reg.offset)
        } else {
            (
                spec.alpha * reg.scale + (1.0 - spec.alpha) * s,
                spec.alpha * reg.offset + (1.0 - spec.alpha) * z,
            )
        };
        // In exact arithmetic the step never increases the objective; when
        // rounding says otherwise (e.g. an already exact fit), keep (s, z).
        let candidate = objective(w, h, &codes, s_next, z_next, spec.lambda);
        let current = objective(w, h, &codes, s, z, spec.lambda);
        let (s_next, z_next, obj) = if candidate <= current { (s_next, z_next, candidate) } else { (s, z, current) };
        trace.objective.push(obj);
        trace.scale_change.push((s_next - s).abs() / s0.abs());
        s = s_next;
        z = z_next;
    }
    let codes = refine_codes(w, s, z, spec.bits)?;
    Ok((GroupParams { scale: s, offset: z, codes }, trace))
}

/// Rounds a group's parameters to storage precision and recomputes its codes
/// against the stored values.
pub(crate) fn finalize_group(w: &[f64], scale: f64, offset: f64, spec: &QuantSpec) -> Result<(f32, f32, Vec<u8>)> {
    let s = spec.param_precision.round_scale(scale, spec.s_floor);
    let z = spec.param_precision.round(offset);
    let codes = refine_codes(w, s as f64, z as f64, spec.bits)?;
    Ok((s, z, codes))
}

/// Assembles a layer from per-group `(scale, offset, codes)` in row-major group order.
pub(crate) fn assemble_layer(
    spec: &QuantSpec,
    d_out: usize,
    d_in: usize,
    groups: Vec<(f32, f32, Vec<u8>)>,
) -> Result<QuantizedLayer> {
    let mut scales = Vec::with_capacity(groups.len());
    let mut zeros = Vec::with_capacity(groups.len());
    let mut codes = Vec::with_capacity(d_out * d_in);
    for (s, z, q) in groups {
        scales.push(s);
        zeros.push(z);
        codes.extend_from_slice(&q);
    }
    QuantizedLayer::assemble(spec.bits, spec.group_size, d_out, d_in, &codes, scales, zeros)
}

/// `(row, columns)` for every group of a layer, row-major.
pub(crate) fn layer_groups(d_out: usize, d_in: usize, group_size: usize) -> Vec<(usize, std::ops::Range<usize>)> {
    (0..d_out)
        .flat_map(|row| group_ranges(d_in, group_size).map(move |r| (row, r)))
        .collect()
}

/// Quantizes every group of `weight` independently with the alternating
/// solver. Groups run in parallel on the current rayon pool; output order
/// does not depend on scheduling.
pub fn quantize_layer_dashq(
    weight: &WeightMatrix,
    diag: &DiagImportance,
    spec: &QuantSpec,
) -> Result<(QuantizedLayer, Vec<SolveTrace>)> {
    spec.validate()?;
    let (d_out, d_in) = (weight.d_out(), weight.d_in());
    if diag.len() != d_in {
        return Err(Error::Shape(format!(
            "importance has {} channels, weight has {d_in} inputs",
            diag.len()
        )));
    }
    let solved: Vec<_> = layer_groups(d_out, d_in, spec.group_size)
        .into_par_iter()
        .map(|(row, cols)| {
            let w: Vec<f64> = weight.row(row)[cols.clone()].iter().map(|&x| x as f64).collect();
            let problem = GroupProblem { weights: &w, importance: &diag.h[cols], spec };
            let (params, trace) = solve_group(&problem)?;
            let stored = finalize_group(&w, params.scale, params.offset, spec)?;
            Ok((stored, trace))
        })
        .collect::<Result<_>>()?;
    let (groups, traces): (Vec<_>, Vec<_>) = solved.into_iter().unzip();
    Ok((assemble_layer(spec, d_out, d_in, groups)?, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FLOOR: f64 = 1e-8;

    /// Independent evaluation of the ridge objective.
    fn ridge(w: &[f64], h: &[f64], q: &[f64], s: f64, z: f64, lambda: f64) -> f64 {
        let mut total = lambda * s * s;
        for j in 0..w.len() {
            let recon = s * q[j] - z;
            total += h[j] * (w[j] - recon).powi(2);
        }
        total
    }

    fn spec(bits: u8, iters: usize, lambda: f64, alpha: f64) -> QuantSpec {
        QuantSpec { bits, group_size: 128, iters, lambda, alpha, s_floor: FLOOR, ..Default::default() }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn init_examples() {
        assert_eq!(init_params(&[0.0, 3.0], 2, FLOOR).unwrap(), (1.0, 0.0));
        let (s, z) = init_params(&[-1.0, 1.0], 2, FLOOR).unwrap();
        assert!(close(s, 2.0 / 3.0));
        assert_eq!(z, 1.0);
        assert_eq!(init_params(&[0.3; 3], 2, FLOOR).unwrap(), (FLOOR, -0.3));
        assert!(init_params(&[], 2, FLOOR).is_err());
    }

    #[test]
    fn refine_examples() {
        assert_eq!(refine_codes(&[0.0, 1.0, 2.0, 3.0], 1.0, 0.0, 2).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(refine_codes(&[10.0], 1.0, 0.0, 2).unwrap(), vec![3]);
        assert_eq!(refine_codes(&[-5.0], 1.0, 0.0, 2).unwrap(), vec![0]);
        // Exact ties round away from zero.
        assert_eq!(refine_codes(&[0.5, 1.5, 2.5], 1.0, 0.0, 2).unwrap(), vec![1, 2, 3]);
        assert!(refine_codes(&[1.0], 0.0, 0.0, 2).is_err());
        assert!(refine_codes(&[1.0], -1.0, 0.0, 2).is_err());
    }

    #[test]
    fn refine_matches_exhaustive_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let bits = rng.random_range(2..=8u8);
            let s = rng.random_range(0.01..2.0);
            let z = rng.random_range(-3.0..3.0);
            let w: Vec<f64> = (0..8).map(|_| rng.random_range(-4.0..4.0)).collect();
            let q = refine_codes(&w, s, z, bits).unwrap();
            for (j, &wj) in w.iter().enumerate() {
                let err = |c: u32| (wj - (s * c as f64 - z)).abs();
                let best = (0..1u32 << bits).map(err).fold(f64::INFINITY, f64::min);
                assert!(err(q[j] as u32) <= best + 1e-12, "w={wj} s={s} z={z} q={}", q[j]);
            }
        }
    }

    #[test]
    fn moments_examples() {
        let m = weighted_moments(&[0.0, 1.0], &[0, 1], &[1.0, 1.0]).unwrap();
        assert_eq!((m.w_mean, m.q_mean, m.cov, m.var), (0.5, 0.5, 0.5, 0.5));

        let m = weighted_moments(&[0.0, 2.0], &[0, 1], &[1.0, 3.0]).unwrap();
        assert_eq!((m.q_mean, m.w_mean, m.cov, m.var), (0.75, 1.5, 1.5, 0.75));

        let m = weighted_moments(&[0.0, 2.0, 5.0], &[2, 2, 2], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.cov, m.var), (0.0, 0.0));

        assert!(matches!(weighted_moments(&[1.0], &[0], &[0.0]), Err(Error::ZeroImportance)));
    }

    #[test]
    fn regress_affine_exact() {
        let (w, q, h) = ([0.0, 1.0], [0u8, 1], [1.0, 1.0]);
        let m = weighted_moments(&w, &q, &h).unwrap();
        let r = regress_params(&m, 0.0, FLOOR).unwrap();
        assert_eq!((r.scale, r.offset, r.clamped), (1.0, 0.0, false));
        assert_eq!(weighted_loss(&w, &h, &q, r.scale, r.offset), 0.0);
    }

    #[test]
    fn regress_with_ridge_is_grid_optimal() {
        let (w, q, h) = ([0.0, 1.0], [0u8, 1], [1.0, 1.0]);
        let m = weighted_moments(&w, &q, &h).unwrap();
        let r = regress_params(&m, 0.5, FLOOR).unwrap();
        assert_eq!((r.scale, r.offset), (0.5, -0.25));
        // Profile out z and scan s on a fine 1-D grid.
        let qf = [0.0, 1.0];
        let best = ridge(&w, &h, &qf, r.scale, r.offset, 0.5);
        for k in -2000..=2000 {
            let s = r.scale + k as f64 * 1e-3;
            let z = s * m.q_mean - m.w_mean;
            assert!(ridge(&w, &h, &qf, s, z, 0.5) >= best - 1e-15);
        }
    }

    #[test]
    fn regress_stationary_by_finite_differences() {
        let (w, q, h) = ([0.0, 1.0, 1.0], [0u8, 1, 2], [1.0, 1.0, 1.0]);
        let m = weighted_moments(&w, &q, &h).unwrap();
        let r = regress_params(&m, 0.0, FLOOR).unwrap();
        assert!(close(r.scale, 0.5));
        assert!(close(r.offset, -1.0 / 6.0));
        let qf = [0.0, 1.0, 2.0];
        let d = 1e-5;
        let gs = (ridge(&w, &h, &qf, r.scale + d, r.offset, 0.0) - ridge(&w, &h, &qf, r.scale - d, r.offset, 0.0)) / (2.0 * d);
        let gz = (ridge(&w, &h, &qf, r.scale, r.offset + d, 0.0) - ridge(&w, &h, &qf, r.scale, r.offset - d, 0.0)) / (2.0 * d);
        assert!(gs.abs() < 1e-8 && gz.abs() < 1e-8, "{gs} {gz}");
    }

    #[test]
    fn regress_zero_denominator_and_clamp() {
        let m = weighted_moments(&[1.0, 2.0], &[1, 1], &[1.0, 1.0]).unwrap();
        assert!(matches!(regress_params(&m, 0.0, FLOOR), Err(Error::ZeroDenominator)));
        // Anti-correlated codes push the raw scale negative.
        let m = weighted_moments(&[1.0, 0.0], &[0, 1], &[1.0, 1.0]).unwrap();
        let r = regress_params(&m, 0.0, FLOOR).unwrap();
        assert!(r.clamped);
        assert_eq!(r.scale, FLOOR);
        assert!(close(r.offset, FLOOR * m.q_mean - m.w_mean));
    }

    #[test]
    fn fixed_point_on_grid() {
        let w = [0.0, 1.0, 2.0, 3.0];
        let sp = spec(2, 5, 0.0, 1.0);
        let (p, trace) = solve_group(&GroupProblem { weights: &w, importance: &[1.0; 4], spec: &sp }).unwrap();
        assert_eq!((p.scale, p.offset), (1.0, 0.0));
        assert_eq!(p.codes, vec![0, 1, 2, 3]);
        assert!(trace.objective.iter().all(|&o| o == 0.0));
        assert!(trace.scale_change.iter().all(|&d| d == 0.0));
        assert_eq!(trace.objective.len(), 5);
    }

    #[test]
    fn exact_two_point_fit_stays_exact() {
        // min-max already reconstructs both points; a refit may only add rounding noise.
        let w = [0.013, -0.0377];
        let h = [0.9, 1.7];
        let sp = spec(6, 9, 0.0, 1.0);
        let (p, trace) = solve_group(&GroupProblem { weights: &w, importance: &h, spec: &sp }).unwrap();
        let (s0, z0) = init_params(&w, 6, FLOOR).unwrap();
        let rtn = weighted_loss(&w, &h, &refine_codes(&w, s0, z0, 6).unwrap(), s0, z0);
        assert!(trace.objective.iter().all(|&o| o <= rtn));
        assert!(weighted_loss(&w, &h, &p.codes, p.scale, p.offset) <= rtn);
    }

    #[test]
    fn single_element_is_exact() {
        for h in [0.0, 1e-3, 1.0, 50.0] {
            for lambda in [0.0, 1e-2] {
                let sp = spec(2, 9, lambda, 0.5);
                let (p, _) = solve_group(&GroupProblem { weights: &[0.7], importance: &[h], spec: &sp }).unwrap();
                assert!((p.reconstruct()[0] - 0.7).abs() < 1e-12);
                let hh = if h > 0.0 { h } else { 1.0 };
                let loss = objective(&[0.7], &[hh], &p.codes, p.scale, p.offset, lambda);
                assert!(loss <= lambda * p.scale * p.scale + 1e-15);
            }
        }
    }

    #[test]
    fn constant_group() {
        let sp = spec(3, 9, 0.0, 0.5);
        let (p, trace) = solve_group(&GroupProblem { weights: &[-0.4; 5], importance: &[1.0, 2.0, 0.0, 1.0, 1.0], spec: &sp }).unwrap();
        assert_eq!((p.scale, p.offset), (FLOOR, 0.4));
        assert_eq!(p.codes, vec![0; 5]);
        assert_eq!(trace.objective, vec![0.0; 9]);
    }

    #[test]
    fn zero_importance_falls_back_to_uniform() {
        let w = [0.1, -0.3, 0.8, 0.2, 0.5];
        let sp = spec(2, 9, 0.0, 1.0);
        let dead = solve_group(&GroupProblem { weights: &w, importance: &[0.0; 5], spec: &sp }).unwrap();
        let uniform = solve_group(&GroupProblem { weights: &w, importance: &[1.0; 5], spec: &sp }).unwrap();
        assert_eq!(dead, uniform);
    }

    #[test]
    fn negative_importance_rejected() {
        let sp = spec(2, 3, 0.0, 1.0);
        assert!(solve_group(&GroupProblem { weights: &[1.0, 2.0], importance: &[1.0, -1.0], spec: &sp }).is_err());
    }

    fn rtn_loss(w: &[f64], h: &[f64], bits: u8) -> f64 {
        let (s, z) = init_params(w, bits, FLOOR).unwrap();
        let q = refine_codes(w, s, z, bits).unwrap();
        weighted_loss(w, h, &q, s, z)
    }

    #[test]
    fn uniform_importance_beats_rtn() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let n = rng.random_range(2..64);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = vec![1.0; n];
            let sp = spec(rng.random_range(2..=4), 9, 0.0, 1.0);
            let (p, trace) = solve_group(&GroupProblem { weights: &w, importance: &h, spec: &sp }).unwrap();
            if trace.clamped {
                continue;
            }
            let ours = weighted_loss(&w, &h, &p.codes, p.scale, p.offset);
            let base = rtn_loss(&w, &h, sp.bits);
            assert!(ours <= base * (1.0 + 1e-12) + 1e-15, "{ours} > {base}");
        }
    }

    #[test]
    fn zero_iterations_is_rtn() {
        let w = [0.3, -0.2, 0.9, 0.1, -0.7];
        let sp = spec(3, 0, 0.0, 1.0);
        let (p, trace) = solve_group(&GroupProblem { weights: &w, importance: &[1.0; 5], spec: &sp }).unwrap();
        let (s, z) = init_params(&w, 3, FLOOR).unwrap();
        assert_eq!((p.scale, p.offset), (s, z));
        assert_eq!(p.codes, refine_codes(&w, s, z, 3).unwrap());
        assert!(trace.objective.is_empty());
    }

    #[test]
    fn homogeneous_importance_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let n = rng.random_range(2..32);
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
            let sp = spec(2, 9, 0.0, 0.5);
            let base = solve_group(&GroupProblem { weights: &w, importance: &h, spec: &sp }).unwrap().0;
            // Powers of two scale every weighted sum exactly.
            for c in [0.25, 8.0, 1024.0] {
                let hc: Vec<f64> = h.iter().map(|x| x * c).collect();
                let scaled = solve_group(&GroupProblem { weights: &w, importance: &hc, spec: &sp }).unwrap().0;
                assert_eq!(scaled, base);
            }
            let hc: Vec<f64> = h.iter().map(|x| x * 3.7).collect();
            let scaled = solve_group(&GroupProblem { weights: &w, importance: &hc, spec: &sp }).unwrap().0;
            assert!(close(scaled.scale, base.scale) && close(scaled.offset, base.offset));
        }
    }

    fn random_layer(rng: &mut ChaCha8Rng, d_out: usize, d_in: usize) -> (WeightMatrix, DiagImportance) {
        let w = WeightMatrix::from_fn(d_out, d_in, |_, _| rng.random_range(-1.0f32..1.0)).unwrap();
        let h = (0..d_in).map(|_| rng.random_range(0.0..10.0)).collect();
        (w, DiagImportance { h, sample_count: 1 })
    }

    #[test]
    fn single_group_layer_matches_solve_group() {
        let w = [0.1f32, 0.7, -0.4, 0.25];
        let weight = WeightMatrix::new(1, 4, w.to_vec()).unwrap();
        let h = vec![1.0, 4.0, 0.5, 2.0];
        let sp = QuantSpec { bits: 2, group_size: 4, ..Default::default() };
        let (layer, traces) = quantize_layer_dashq(&weight, &DiagImportance { h: h.clone(), sample_count: 1 }, &sp).unwrap();
        let wf: Vec<f64> = w.iter().map(|&x| x as f64).collect();
        let (p, trace) = solve_group(&GroupProblem { weights: &wf, importance: &h, spec: &sp }).unwrap();
        assert_eq!(layer.scales, vec![p.scale as f32]);
        assert_eq!(layer.zeros, vec![p.offset as f32]);
        assert_eq!(layer.codes(), p.codes);
        assert_eq!(traces, vec![trace]);
    }

    #[test]
    fn remainder_group_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, d) = random_layer(&mut rng, 3, 6);
        let sp = QuantSpec { bits: 3, group_size: 4, ..Default::default() };
        let (layer, traces) = quantize_layer_dashq(&w, &d, &sp).unwrap();
        assert_eq!(layer.num_groups(), 6);
        assert_eq!(traces.len(), 6);
        // The 2-wide remainder group is solved on its own.
        let wf: Vec<f64> = w.row(1)[4..6].iter().map(|&x| x as f64).collect();
        let (p, _) = solve_group(&GroupProblem { weights: &wf, importance: &d.h[4..6], spec: &sp }).unwrap();
        assert_eq!(layer.scales[3], p.scale as f32);
    }

    #[test]
    fn groups_are_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (w, d) = random_layer(&mut rng, 4, 16);
        let sp = QuantSpec { bits: 2, group_size: 4, ..Default::default() };
        let (base, _) = quantize_layer_dashq(&w, &d, &sp).unwrap();
        // Perturb group (row 2, cols 8..12) only.
        let mut data = w.as_slice().to_vec();
        for v in &mut data[2 * 16 + 8..2 * 16 + 12] {
            *v = *v * 3.0 + 0.5;
        }
        let (other, _) = quantize_layer_dashq(&WeightMatrix::new(4, 16, data).unwrap(), &d, &sp).unwrap();
        let (bc, oc) = (base.codes(), other.codes());
        for g in 0..16 {
            let (row, col0) = (g / 4, (g % 4) * 4);
            let same = base.scales[g] == other.scales[g]
                && base.zeros[g] == other.zeros[g]
                && bc[row * 16 + col0..row * 16 + col0 + 4] == oc[row * 16 + col0..row * 16 + col0 + 4];
            assert_eq!(same, g != 2 * 4 + 2, "group {g}");
        }
    }

    #[test]
    fn layer_is_independent_of_thread_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (w, d) = random_layer(&mut rng, 16, 40);
        let sp = QuantSpec { bits: 2, group_size: 16, ..Default::default() };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| quantize_layer_dashq(&w, &d, &sp).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn importance_length_mismatch() {
        let w = WeightMatrix::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            quantize_layer_dashq(&w, &DiagImportance::zeros(2), &QuantSpec::default()),
            Err(Error::Shape(_))
        ));
    }

    fn arb_group() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<u8>)> {
        (2usize..=8).prop_flat_map(|n| {
            (
                prop::collection::vec(-2.0f64..2.0, n),
                prop::collection::vec(0.01f64..5.0, n),
                prop::collection::vec(0u8..16, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn closed_form_beats_local_grid((w, h, q) in arb_group(), lambda in prop::sample::select(vec![0.0, 1e-2, 0.5])) {
            let m = weighted_moments(&w, &q, &h).unwrap();
            prop_assume!(m.var + lambda > 0.0);
            let r = regress_params(&m, lambda, FLOOR).unwrap();
            prop_assume!(!r.clamped);
            let qf: Vec<f64> = q.iter().map(|&c| c as f64).collect();
            let best = ridge(&w, &h, &qf, r.scale, r.offset, lambda);
            let tol = 1e-12 * (1.0 + best);
            for a in 0..=400 {
                let s = r.scale - 1.0 + a as f64 * 0.005;
                for b in (0..=400).step_by(8) {
                    let z = r.offset - 1.0 + b as f64 * 0.005;
                    prop_assert!(ridge(&w, &h, &qf, s, z, lambda) >= best - tol);
                }
            }
            // Stationarity by central differences.
            let d = 1e-5;
            let gs = (ridge(&w, &h, &qf, r.scale + d, r.offset, lambda) - ridge(&w, &h, &qf, r.scale - d, r.offset, lambda)) / (2.0 * d);
            let gz = (ridge(&w, &h, &qf, r.scale, r.offset + d, lambda) - ridge(&w, &h, &qf, r.scale, r.offset - d, lambda)) / (2.0 * d);
            prop_assert!(gs.abs() < 1e-8 && gz.abs() < 1e-8, "grad ({}, {})", gs, gz);
        }

        #[test]
        fn undamped_descent(w in prop::collection::vec(-3.0f64..3.0, 2..40), seed in any::<u64>(), bits in 2u8..=4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h: Vec<f64> = w.iter().map(|_| rng.random_range(0.0..4.0)).collect();
            let sp = spec(bits, 9, 1e-2, 1.0);
            let (_, trace) = solve_group(&GroupProblem { weights: &w, importance: &h, spec: &sp }).unwrap();
            for pair in trace.objective.windows(2) {
                prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-300, "{:?}", trace.objective);
            }
            prop_assert!(trace.scale_change.iter().all(|&d| d >= 0.0));
        }
    }
}
