//! Stability diagnostics for empirical Hessians.
//!
//! - [`shrink`] and [`discrepancy`]: the linear family `D + rho O` and the
//!   normalized L1 gap between two calibration sets along it.
//! - [`snr`]: entrywise `|mean| / std` across per-sample estimates.
//! - [`stability_curve`]: relative L1 error of diagonal and off-diagonal parts
//!   against a large reference, as a function of sample count.
//! - [`batch_variation`]: spread of the difference of two independent estimates.

use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibration::{ActivationBatch, HessianEstimate};
use crate::error::{Error, Result};

/// `D + rho * O`.
pub fn shrink(h: &DMatrix<f64>, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| if i == j { h[(i, j)] } else { rho * h[(i, j)] })
}

/// Entrywise L1 norm.
pub fn l1(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|x| x.abs()).sum()
}

fn diag_off_l1(m: &DMatrix<f64>) -> (f64, f64) {
    let mut diag = 0.0;
    let mut off = 0.0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if i == j {
                diag += m[(i, j)].abs();
            } else {
                off += m[(i, j)].abs();
            }
        }
    }
    (diag, off)
}

fn check_square_pair(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    if a.shape() != b.shape() || a.nrows() != a.ncols() {
        return Err(Error::Shape(format!(
            "need two equal square matrices, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `R(rho) = ||dD + rho dO||_1 / ||D_A + rho O_A||_1`.
pub fn discrepancy(a: &DMatrix<f64>, b: &DMatrix<f64>, rho: f64) -> Result<f64> {
    check_square_pair(a, b)?;
    let den = l1(&shrink(a, rho));
    if !(den > 0.0) {
        return Err(Error::Degenerate("shrunk reference estimate has zero L1 norm".into()));
    }
    Ok(l1(&shrink(&(a - b), rho)) / den)
}

/// `{0}` followed by 32 log-spaced points from `1e-4` to `1`.
pub fn default_rho_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..32).map(|k| 10f64.powf(-4.0 + 4.0 * k as f64 / 31.0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShrinkageSweep {
    pub rho: Vec<f64>,
    pub r: Vec<f64>,
    pub set_a: String,
    pub set_b: String,
}

pub fn shrinkage_sweep(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    rho_grid: &[f64],
    set_a: impl Into<String>,
    set_b: impl Into<String>,
) -> Result<ShrinkageSweep> {
    if rho_grid.windows(2).any(|w| w[1] < w[0]) || rho_grid.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Invalid("rho grid must be sorted within [0, 1]".into()));
    }
    let r = rho_grid.iter().map(|&rho| discrepancy(a, b, rho)).collect::<Result<_>>()?;
    Ok(ShrinkageSweep { rho: rho_grid.to_vec(), r, set_a: set_a.into(), set_b: set_b.into() })
}

/// Draws `trials` pairs of disjoint `set_size`-sample calibration sets from
/// `pool` and sweeps each pair over `rho_grid`.
pub fn random_pair_sweeps(
    pool: &[ActivationBatch],
    set_size: usize,
    trials: usize,
    rho_grid: &[f64],
    seed: u64,
) -> Result<Vec<ShrinkageSweep>> {
    if set_size == 0 || 2 * set_size > pool.len() {
        return Err(Error::InsufficientSamples(format!(
            "two disjoint sets of {set_size} need {} samples, pool has {}",
            2 * set_size,
            pool.len()
        )));
    }
    let d = pool[0].d_in();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let draws: Vec<Vec<usize>> = (0..trials)
        .map(|_| {
            order.shuffle(&mut rng);
            order[..2 * set_size].to_vec()
        })
        .collect();
    draws
        .par_iter()
        .enumerate()
        .map(|(t, order)| {
            let a = HessianEstimate::from_batches(d, order[..set_size].iter().map(|&i| &pool[i]))?;
            let b = HessianEstimate::from_batches(d, order[set_size..2 * set_size].iter().map(|&i| &pool[i]))?;
            shrinkage_sweep(&a.matrix, &b.matrix, rho_grid, format!("trial{t}/A"), format!("trial{t}/B"))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageRow {
    pub rho: f64,
    pub mean: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Per-rho mean and 10th/90th percentiles across sweeps sharing one grid.
pub fn summarize_sweeps(sweeps: &[ShrinkageSweep]) -> Result<Vec<ShrinkageRow>> {
    let first = sweeps.first().ok_or_else(|| Error::Invalid("no sweeps to summarize".into()))?;
    if sweeps.iter().any(|s| s.rho != first.rho) {
        return Err(Error::Invalid("sweeps use different rho grids".into()));
    }
    Ok(first
        .rho
        .iter()
        .enumerate()
        .map(|(k, &rho)| {
            let vals: Vec<f64> = sweeps.iter().map(|s| s.r[k]).collect();
            ShrinkageRow {
                rho,
                mean: vals.iter().sum::<f64>() / vals.len() as f64,
                p10: percentile(&vals, 10.0),
                p90: percentile(&vals, 90.0),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` bin edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(values: impl IntoIterator<Item = f64> + Clone, lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0u64; bins];
        for v in values {
            if v.is_finite() && v >= lo && v <= hi {
                counts[(((v - lo) / width) as usize).min(bins - 1)] += 1;
            }
        }
        Self { edges, counts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnrReport {
    /// Length `d`.
    pub diagonal: Vec<f64>,
    /// Upper triangle, row-major, length `d (d - 1) / 2`.
    pub off_diagonal: Vec<f64>,
    pub diagonal_hist: Histogram,
    pub off_diagonal_hist: Histogram,
}

impl SnrReport {
    pub fn median_diagonal(&self) -> f64 {
        median_finite(&self.diagonal)
    }

    pub fn median_off_diagonal(&self) -> f64 {
        median_finite(&self.off_diagonal)
    }
}

/// Regroups sequences into samples of `per` consecutive sequences, so the
/// statistics can be taken per batch rather than per sequence. A trailing
/// partial group is dropped to keep every sample the same size.
pub fn group_samples(sequences: &[ActivationBatch], per: usize) -> Result<Vec<ActivationBatch>> {
    if per == 0 {
        return Err(Error::Invalid("samples must hold at least one sequence".into()));
    }
    if per == 1 {
        return Ok(sequences.to_vec());
    }
    sequences
        .chunks_exact(per)
        .map(|c| ActivationBatch::concat(c, c[0].batch_id.clone()))
        .collect()
}

/// One `x x^T` per sample.
pub fn per_sample_hessians(samples: &[ActivationBatch]) -> Result<Vec<DMatrix<f64>>> {
    samples
        .iter()
        .map(|s| HessianEstimate::from_batches(s.d_in(), [s]).map(|h| h.matrix))
        .collect()
}

/// Entrywise `|mean| / std` over per-sample estimates, with the sample
/// (n - 1) standard deviation. Zero-variance entries get `+inf` and are left
/// out of the histograms, which share edges spanning `[0, max finite SNR]`.
pub fn snr(per_sample: &[DMatrix<f64>], bins: usize) -> Result<SnrReport> {
    if per_sample.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "SNR needs at least 2 samples, got {}",
            per_sample.len()
        )));
    }
    let d = per_sample[0].nrows();
    if per_sample.iter().any(|m| m.shape() != (d, d)) {
        return Err(Error::Shape("per-sample estimates differ in shape".into()));
    }
    let n = per_sample.len() as f64;
    let entry = |i: usize, j: usize| {
        let mean = per_sample.iter().map(|m| m[(i, j)]).sum::<f64>() / n;
        let var = per_sample.iter().map(|m| (m[(i, j)] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        if std > 0.0 {
            mean.abs() / std
        } else {
            f64::INFINITY
        }
    };
    let diagonal: Vec<f64> = (0..d).map(|i| entry(i, i)).collect();
    let off_diagonal: Vec<f64> = (0..d)
        .flat_map(|i| (i + 1..d).map(move |j| (i, j)))
        .map(|(i, j)| entry(i, j))
        .collect();
    let hi = diagonal
        .iter()
        .chain(&off_diagonal)
        .copied()
        .filter(|v| v.is_finite())
        .fold(0.0, f64::max);
    Ok(SnrReport {
        diagonal_hist: Histogram::new(diagonal.iter().copied(), 0.0, hi, bins),
        off_diagonal_hist: Histogram::new(off_diagonal.iter().copied(), 0.0, hi, bins),
        diagonal,
        off_diagonal,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityRow {
    pub n: usize,
    pub diag_rel_l1: f64,
    pub offdiag_rel_l1: f64,
}

/// Relative L1 error of the estimate from the first `n` samples against the
/// estimate from the first `reference_n`, split into diagonal and
/// off-diagonal parts. With `normalize`, both estimates are divided by their
/// sample counts first.
pub fn stability_curve(
    samples: &[ActivationBatch],
    sizes: &[usize],
    reference_n: usize,
    normalize: bool,
) -> Result<Vec<StabilityRow>> {
    if reference_n == 0 || reference_n > samples.len() {
        return Err(Error::InsufficientSamples(format!(
            "reference needs {reference_n} samples, have {}",
            samples.len()
        )));
    }
    if let Some(&n) = sizes.iter().find(|&&n| n == 0 || n > reference_n) {
        return Err(Error::Invalid(format!("size {n} outside 1..={reference_n}")));
    }
    let d = samples[0].d_in();
    let scaled = |h: &HessianEstimate| if normalize { h.normalized() } else { h.matrix.clone() };

    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&k| sizes[k]);
    let mut acc = HessianEstimate::zeros(d);
    let mut taken = 0;
    let mut snapshots = vec![DMatrix::zeros(0, 0); sizes.len()];
    for &k in &order {
        for s in &samples[taken..sizes[k]] {
            acc.accumulate(s)?;
        }
        taken = taken.max(sizes[k]);
        snapshots[k] = scaled(&acc);
    }
    for s in &samples[taken..reference_n] {
        acc.accumulate(s)?;
    }
    let reference = scaled(&acc);
    let (ref_diag, ref_off) = diag_off_l1(&reference);
    if !(ref_diag > 0.0 && ref_off > 0.0) {
        return Err(Error::Degenerate("reference estimate has an all-zero diagonal or off-diagonal".into()));
    }
    Ok(sizes
        .iter()
        .zip(snapshots)
        .map(|(&n, est)| {
            let (diag_err, off_err) = diag_off_l1(&(est - &reference));
            StabilityRow { n, diag_rel_l1: diag_err / ref_diag, offdiag_rel_l1: off_err / ref_off }
        })
        .collect())
}

/// Per off-diagonal entry (upper triangle): the standard deviation of single
/// estimates and of the difference between paired independent estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchVariation {
    pub single_std: Vec<f64>,
    pub diff_std: Vec<f64>,
}

impl BatchVariation {
    /// `diff_std / single_std` for entries with non-zero spread.
    pub fn ratios(&self) -> Vec<f64> {
        self.single_std
            .iter()
            .zip(&self.diff_std)
            .filter(|(s, _)| **s > 0.0)
            .map(|(s, d)| d / s)
            .collect()
    }
}

/// Welford accumulators for [`BatchVariation`], fed one pair at a time.
#[derive(Debug, Clone)]
pub struct BatchVariationAccumulator {
    d: usize,
    pairs: u64,
    singles: u64,
    single_mean: Vec<f64>,
    single_m2: Vec<f64>,
    diff_mean: Vec<f64>,
    diff_m2: Vec<f64>,
}

fn welford(mean: &mut f64, m2: &mut f64, count: u64, x: f64) {
    let delta = x - *mean;
    *mean += delta / count as f64;
    *m2 += delta * (x - *mean);
}

impl BatchVariationAccumulator {
    pub fn new(d: usize) -> Self {
        let m = d * d.saturating_sub(1) / 2;
        Self {
            d,
            pairs: 0,
            singles: 0,
            single_mean: vec![0.0; m],
            single_m2: vec![0.0; m],
            diff_mean: vec![0.0; m],
            diff_m2: vec![0.0; m],
        }
    }

    /// One pair of independent estimates; both also count as single estimates.
    pub fn push(&mut self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
        check_square_pair(a, b)?;
        if a.nrows() != self.d {
            return Err(Error::Shape(format!("expected {0}x{0} estimates, got {1}x{1}", self.d, a.nrows())));
        }
        self.pairs += 1;
        let mut k = 0;
        for i in 0..self.d {
            for j in i + 1..self.d {
                welford(&mut self.diff_mean[k], &mut self.diff_m2[k], self.pairs, a[(i, j)] - b[(i, j)]);
                k += 1;
            }
        }
        for m in [a, b] {
            self.singles += 1;
            let mut k = 0;
            for i in 0..self.d {
                for j in i + 1..self.d {
                    welford(&mut self.single_mean[k], &mut self.single_m2[k], self.singles, m[(i, j)]);
                    k += 1;
                }
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<BatchVariation> {
        if self.pairs < 2 {
            return Err(Error::InsufficientSamples(format!("need at least 2 pairs, got {}", self.pairs)));
        }
        let std = |m2: &[f64], n: u64| m2.iter().map(|v| (v / (n - 1) as f64).sqrt()).collect();
        Ok(BatchVariation { single_std: std(&self.single_m2, self.singles), diff_std: std(&self.diff_m2, self.pairs) })
    }
}

/// Pairs `set_a[i]` with `set_b[i]`; single-estimate spread pools both sets.
pub fn batch_variation(set_a: &[DMatrix<f64>], set_b: &[DMatrix<f64>]) -> Result<BatchVariation> {
    if set_a.len() != set_b.len() || set_a.is_empty() {
        return Err(Error::InsufficientSamples("need two equal, non-empty lists of estimates".into()));
    }
    let mut acc = BatchVariationAccumulator::new(set_a[0].nrows());
    for (a, b) in set_a.iter().zip(set_b) {
        acc.push(a, b)?;
    }
    acc.finish()
}

/// Linear-interpolation percentile (`p` in 0..=100). NaN on empty input.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    percentile(values, 50.0)
}

fn median_finite(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    median(&finite)
}

pub fn write_shrinkage_csv<W: Write>(mut out: W, rows: &[ShrinkageRow]) -> std::io::Result<()> {
    writeln!(out, "rho,R_mean,R_p10,R_p90")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.rho, r.mean, r.p10, r.p90)?;
    }
    Ok(())
}

pub fn write_stability_csv<W: Write>(mut out: W, rows: &[StabilityRow]) -> std::io::Result<()> {
    writeln!(out, "n,diag_rel_l1,offdiag_rel_l1")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.n, r.diag_rel_l1, r.offdiag_rel_l1)?;
    }
    Ok(())
}

/// Histogram rows `bin_lo,bin_hi,diag_count,offdiag_count`.
pub fn write_snr_csv<W: Write>(mut out: W, report: &SnrReport) -> std::io::Result<()> {
    writeln!(out, "bin_lo,bin_hi,diag_count,offdiag_count")?;
    let h = &report.diagonal_hist;
    for k in 0..h.counts.len() {
        writeln!(
            out,
            "{},{},{},{}",
            h.edges[k],
            h.edges[k + 1],
            h.counts[k],
            report.off_diagonal_hist.counts[k]
        )?;
    }
    Ok(())
}
