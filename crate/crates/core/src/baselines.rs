//! Comparison methods: zero-phase low-pass filtering, ridge regression and
//! the autoencoder without a peak branch.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibnet::{train_autoencoder, AutoEncoder, CalibArch, TrainConfig, TrainingSet};
use crate::error::{Error, Result};
use crate::nn::gemm::{gemm, MatRef};
use crate::signal::{normalize, ShockSignal, SignalPair};

pub const DEFAULT_CUTOFF: f64 = 5_000.0;
pub const DEFAULT_TRANSITION: f64 = 2_000.0;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1.0;

/// Hamming window main-lobe width is about `3.3 / N` of the sample rate.
const HAMMING_WIDTH_FACTOR: f64 = 3.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirDesign {
    pub sample_rate: f64,
    pub transition_width: f64,
}

/// Linear-phase FIR filter with odd length and unit DC gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub cutoff: f64,
    pub design: FirDesign,
}

/// Hamming-windowed sinc low-pass.
pub fn design_lowpass(cutoff: f64, sample_rate: f64, transition_width: f64) -> Result<FirFilter> {
    if !(cutoff > 0.0 && cutoff < sample_rate / 2.0) {
        return Err(Error::InvalidCutoff { cutoff, sample_rate });
    }
    if !(transition_width > 0.0 && transition_width.is_finite()) {
        return Err(Error::InvalidConfig(format!("transition width {transition_width}")));
    }
    let mut n = (HAMMING_WIDTH_FACTOR * sample_rate / transition_width).ceil() as usize;
    if n % 2 == 0 {
        n += 1;
    }
    let mid = (n / 2) as f64;
    let fc = cutoff / sample_rate;
    let mut taps: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let w = if n == 1 { 1.0 } else { 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos() };
            sinc * w
        })
        .collect();
    // enforce exact symmetry before normalizing
    for i in 0..n / 2 {
        let avg = 0.5 * (taps[i] + taps[n - 1 - i]);
        taps[i] = avg;
        taps[n - 1 - i] = avg;
    }
    let sum: f64 = taps.iter().sum();
    for t in taps.iter_mut() {
        *t /= sum;
    }
    Ok(FirFilter {
        taps,
        cutoff,
        design: FirDesign {
            sample_rate,
            transition_width,
        },
    })
}

impl FirFilter {
    pub fn default_lowpass(sample_rate: f64) -> Result<Self> {
        design_lowpass(DEFAULT_CUTOFF, sample_rate, DEFAULT_TRANSITION)
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    /// Magnitude of the single-pass frequency response at `freq`.
    pub fn gain_at(&self, freq: f64) -> f64 {
        let w = 2.0 * PI * freq / self.design.sample_rate;
        let (re, im) = self
            .taps
            .iter()
            .enumerate()
            .fold((0.0, 0.0), |(re, im), (k, t)| (re + t * (w * k as f64).cos(), im - t * (w * k as f64).sin()));
        re.hypot(im)
    }
}

fn causal(taps: &[f64], x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(taps.len());
            x[lo..=i].iter().rev().zip(taps).map(|(a, b)| a * b).sum()
        })
        .collect()
}

/// Forward-backward filtering with even reflection padding of `taps − 1`
/// samples at each end. Net phase is zero, so peaks stay where they are.
pub fn apply_zero_phase(f: &FirFilter, s: &ShockSignal) -> Result<ShockSignal> {
    let pad = f.taps.len() - 1;
    if f.taps.len() >= s.len() {
        return Err(Error::FilterTooLong {
            taps: f.taps.len(),
            len: s.len(),
        });
    }
    let x = &s.samples;
    let n = x.len();
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| x[i]));
    ext.extend_from_slice(x);
    ext.extend((0..pad).map(|i| x[n - 2 - i]));
    let mut y = causal(&f.taps, &ext);
    y.reverse();
    let mut y = causal(&f.taps, &y);
    y.reverse();
    Ok(ShockSignal::new(y[pad..pad + n].to_vec(), s.sample_rate))
}

/// Ridge map from normalized low-end shape to the high-end record in the
/// same units, `y = W x + c`, plus a scalar ridge for the peak,
/// `p = a p_x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    /// `dim × dim`, row-major.
    pub matrix: Vec<f64>,
    pub intercept: Vec<f64>,
    pub peak_slope: f64,
    pub peak_intercept: f64,
    pub ridge_lambda: f64,
    pub dim: usize,
}

fn column_means(rows: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for r in rows.chunks_exact(d) {
        for (a, b) in m.iter_mut().zip(r) {
            *a += b;
        }
    }
    for a in m.iter_mut() {
        *a /= n as f64;
    }
    m
}

fn center(rows: &[f64], mean: &[f64]) -> Vec<f64> {
    rows.chunks_exact(mean.len())
        .flat_map(|r| r.iter().zip(mean).map(|(a, b)| a - b))
        .collect()
}

/// Cholesky solve of `a · x = b` (`a` is `k × k`, `b` is `k × m`), rejecting
/// numerically singular systems.
fn spd_solve(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let max_diag = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let chol = a.cholesky().ok_or(Error::SingularSystem)?;
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if !(min_pivot > 1e-13 * max_diag) {
        return Err(Error::SingularSystem);
    }
    Ok(chol.solve(&b))
}

/// Closed-form ridge fit. Uses the `n × n` dual system when there are fewer
/// samples than dimensions, the `d × d` primal system otherwise.
pub fn fit_linear(train_pairs: &[SignalPair], ridge_lambda: f64) -> Result<LinearMap> {
    if train_pairs.len() < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 pairs, got {}", train_pairs.len())));
    }
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(Error::InvalidConfig(format!("ridge lambda {ridge_lambda}")));
    }
    let d = train_pairs[0].low.len();
    let set = TrainingSet::from_pairs(train_pairs, d)?;
    let n = set.len();
    let mx = column_means(&set.x, n, d);
    let my = column_means(&set.target, n, d);
    let xc = center(&set.x, &mx);
    let yc = center(&set.target, &my);

    let mut w = vec![0.0; d * d];
    if n <= d {
        // W = Ycᵀ (Xc Xcᵀ + λI)⁻¹ Xc
        let mut k = vec![0.0; n * n];
        gemm(MatRef::row_major(&xc, n, d), MatRef::row_major(&xc, n, d).t(), 0.0, &mut k);
        let mut k = DMatrix::from_row_slice(n, n, &k);
        for i in 0..n {
            k[(i, i)] += ridge_lambda;
        }
        let a = spd_solve(k, DMatrix::from_row_slice(n, d, &xc))?;
        // nalgebra is column-major: the transpose of `a` stored column-major
        // is `a` row-major
        let a_rows: Vec<f64> = a.transpose().as_slice().to_vec();
        gemm(MatRef::row_major(&yc, n, d).t(), MatRef::row_major(&a_rows, n, d), 0.0, &mut w);
    } else {
        // Wᵀ = (Xcᵀ Xc + λI)⁻¹ Xcᵀ Yc
        let mut g = vec![0.0; d * d];
        gemm(MatRef::row_major(&xc, n, d).t(), MatRef::row_major(&xc, n, d), 0.0, &mut g);
        let mut g = DMatrix::from_row_slice(d, d, &g);
        for i in 0..d {
            g[(i, i)] += ridge_lambda;
        }
        let mut xty = vec![0.0; d * d];
        gemm(MatRef::row_major(&xc, n, d).t(), MatRef::row_major(&yc, n, d), 0.0, &mut xty);
        let wt = spd_solve(g, DMatrix::from_row_slice(d, d, &xty))?;
        // column-major storage of Wᵀ is W row-major
        w.copy_from_slice(wt.as_slice());
    }

    let mut intercept = my;
    let mut wmx = vec![0.0; d];
    gemm(MatRef::row_major(&w, d, d), MatRef::row_major(&mx, d, 1), 0.0, &mut wmx);
    for (c, v) in intercept.iter_mut().zip(&wmx) {
        *c -= v;
    }

    let px = DVector::from_column_slice(&set.p_x);
    let pr = DVector::from_column_slice(&set.p_ref);
    let (mpx, mpr) = (px.mean(), pr.mean());
    let sxy: f64 = px.iter().zip(pr.iter()).map(|(a, b)| (a - mpx) * (b - mpr)).sum();
    let sxx: f64 = px.iter().map(|a| (a - mpx) * (a - mpx)).sum::<f64>() + ridge_lambda;
    if !(sxx > 0.0) {
        return Err(Error::SingularSystem);
    }
    let slope = sxy / sxx;

    let map = LinearMap {
        matrix: w,
        intercept,
        peak_slope: slope,
        peak_intercept: mpr - slope * mpx,
        ridge_lambda,
        dim: d,
    };
    if !map.is_finite() {
        return Err(Error::SingularSystem);
    }
    Ok(map)
}

impl LinearMap {
    pub fn is_finite(&self) -> bool {
        self.matrix.iter().chain(&self.intercept).all(|v| v.is_finite())
            && self.peak_slope.is_finite()
            && self.peak_intercept.is_finite()
    }

    /// `W x_n + c`, in units of the input peak.
    pub fn shape(&self, x_n: &[f64]) -> Result<Vec<f64>> {
        if x_n.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: x_n.len(),
            });
        }
        let mut y = self.intercept.clone();
        gemm(
            MatRef::row_major(&self.matrix, self.dim, self.dim),
            MatRef::row_major(x_n, self.dim, 1),
            1.0,
            &mut y,
        );
        Ok(y)
    }

    pub fn predict_peak(&self, p_x: f64) -> f64 {
        self.peak_slope * p_x + self.peak_intercept
    }

    /// Shape rescaled to unit magnitude times the regressed peak.
    pub fn predict(&self, x_r: &ShockSignal) -> Result<ShockSignal> {
        let n = normalize(x_r)?;
        let y = self.shape(&n.shape)?;
        let m = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if !(m >= 1e-12) {
            return Err(Error::DegenerateDecode(m));
        }
        let p = self.predict_peak(n.peak);
        Ok(ShockSignal::new(y.iter().map(|v| v / m * p).collect(), x_r.sample_rate))
    }
}

/// Trains the encoder/decoder alone on the shape loss.
pub fn ae_baseline(
    train_pairs: &[SignalPair],
    arch: CalibArch,
    use_linf_term: bool,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<AutoEncoder> {
    let set = TrainingSet::from_pairs(train_pairs, arch.signal_len)?;
    let mut ae = AutoEncoder::new(arch, use_linf_term, seed)?;
    train_autoencoder(&mut ae, &set, cfg)?;
    Ok(ae)
}
