//! Shock signal types, preprocessing and the two calibration error metrics.
//!
//! All samples are accelerations in g. Preprocessing aligns every record to a
//! fixed 15 ms window whose largest-magnitude sample sits 2.5 ms in, which at
//! 200 kHz gives 3000 samples with the peak at index 500.

use crate::error::{Error, Result};

/// Sample rate shared by every preprocessed signal, in Hz.
pub const SAMPLE_RATE: f64 = 200_000.0;
/// Length of a preprocessed signal at [`SAMPLE_RATE`].
pub const SIGNAL_LEN: usize = 3000;
/// Index of the peak inside a preprocessed window at [`SAMPLE_RATE`].
pub const PEAK_INDEX: usize = 500;

const WINDOW_PRE_SECONDS: f64 = 2.5e-3;
const WINDOW_SECONDS: f64 = 15e-3;

/// An acceleration time series in g.
#[derive(Debug, Clone, PartialEq)]
pub struct ShockSignal {
    pub samples: Vec<f64>,
    pub sample_rate: f64,
}

impl ShockSignal {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Largest signed sample, the quantity the peak metric compares.
    pub fn signed_max(&self) -> f64 {
        self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest absolute sample.
    pub fn max_abs(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.samples.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFiniteSample(i)),
            None => Ok(()),
        }
    }

    pub fn scaled(&self, factor: f64) -> ShockSignal {
        ShockSignal::new(
            self.samples.iter().map(|v| v * factor).collect(),
            self.sample_rate,
        )
    }
}

/// Scale-free shape of a signal together with its peak magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSignal {
    pub shape: Vec<f64>,
    pub peak: f64,
    pub sample_rate: f64,
}

/// Low-end and high-end recordings of the same drop, co-registered.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalPair {
    pub low: ShockSignal,
    pub high: ShockSignal,
    pub drop_id: u64,
}

impl SignalPair {
    pub fn new(low: ShockSignal, high: ShockSignal, drop_id: u64) -> Result<Self> {
        if low.len() != high.len() {
            return Err(Error::DimensionMismatch {
                expected: high.len(),
                actual: low.len(),
            });
        }
        if low.sample_rate != high.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "pair {drop_id}: sample rates differ ({} vs {})",
                low.sample_rate, high.sample_rate
            )));
        }
        Ok(Self { low, high, drop_id })
    }
}

/// Peak and shape errors of one method over one set of signals.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eps_p: f64,
    pub eps_s: f64,
    pub per_signal_peak_err: Vec<f64>,
    pub per_signal_shape_err: Vec<f64>,
    pub n: usize,
}

/// Index and signed value of the largest-magnitude sample. Ties go to the
/// smallest index.
pub fn detect_peak(s: &ShockSignal) -> Result<(usize, f64)> {
    s.check_finite()?;
    let mut best = None::<(usize, f64)>;
    for (i, &v) in s.samples.iter().enumerate() {
        if best.is_none_or(|(_, b)| v.abs() > b.abs()) {
            best = Some((i, v));
        }
    }
    match best {
        Some((_, v)) if v == 0.0 => Err(Error::DegenerateSignal),
        Some(found) => Ok(found),
        None => Err(Error::DegenerateSignal),
    }
}

/// Cuts a 15 ms window with the peak 2.5 ms from the start. Samples that fall
/// outside the raw record are zero.
pub fn window_around_peak(raw: &ShockSignal) -> Result<ShockSignal> {
    let (peak, _) = detect_peak(raw)?;
    let pre = (WINDOW_PRE_SECONDS * raw.sample_rate).round() as usize;
    let len = (WINDOW_SECONDS * raw.sample_rate).round() as usize;
    let start = peak as isize - pre as isize;
    let samples = (0..len as isize)
        .map(|k| {
            let j = start + k;
            if j >= 0 && (j as usize) < raw.len() {
                raw.samples[j as usize]
            } else {
                0.0
            }
        })
        .collect();
    Ok(ShockSignal::new(samples, raw.sample_rate))
}

pub fn normalize(s: &ShockSignal) -> Result<NormalizedSignal> {
    let (_, value) = detect_peak(s)?;
    let peak = value.abs();
    Ok(NormalizedSignal {
        shape: s.samples.iter().map(|v| v / peak).collect(),
        peak,
        sample_rate: s.sample_rate,
    })
}

pub fn denormalize(n: &NormalizedSignal) -> Result<ShockSignal> {
    if !(n.peak > 0.0) {
        return Err(Error::NonPositivePeak(n.peak));
    }
    Ok(ShockSignal::new(
        n.shape.iter().map(|v| v * n.peak).collect(),
        n.sample_rate,
    ))
}

fn check_sets(preds: &[ShockSignal], refs: &[ShockSignal]) -> Result<Vec<f64>> {
    if preds.is_empty() || preds.len() != refs.len() {
        return Err(Error::MismatchedSets(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    let mut ref_peaks = Vec::with_capacity(refs.len());
    for (i, (p, r)) in preds.iter().zip(refs).enumerate() {
        if p.len() != r.len() {
            return Err(Error::MismatchedSets(format!(
                "signal {i}: prediction has {} samples, reference {}",
                p.len(),
                r.len()
            )));
        }
        let peak = r.signed_max();
        if !(peak > 0.0) {
            return Err(Error::NonPositiveReferencePeak { index: i, peak });
        }
        ref_peaks.push(peak);
    }
    Ok(ref_peaks)
}

/// Per-signal relative peak errors `|max(pred) - max(ref)| / max(ref)` using
/// the signed maximum.
pub fn peak_errors(preds: &[ShockSignal], refs: &[ShockSignal]) -> Result<Vec<f64>> {
    let ref_peaks = check_sets(preds, refs)?;
    Ok(preds
        .iter()
        .zip(ref_peaks)
        .map(|(p, rp)| (p.signed_max() - rp).abs() / rp)
        .collect())
}

/// Per-signal summed absolute error divided by the reference peak.
pub fn shape_errors(preds: &[ShockSignal], refs: &[ShockSignal]) -> Result<Vec<f64>> {
    let ref_peaks = check_sets(preds, refs)?;
    Ok(preds
        .iter()
        .zip(refs)
        .zip(ref_peaks)
        .map(|((p, r), rp)| {
            let total: f64 = p
                .samples
                .iter()
                .zip(&r.samples)
                .map(|(a, b)| (a - b).abs())
                .sum();
            total / rp
        })
        .collect())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean relative peak error ε_p.
pub fn metric_eps_p(preds: &[ShockSignal], refs: &[ShockSignal]) -> Result<f64> {
    Ok(mean(&peak_errors(preds, refs)?))
}

/// Mean peak-normalized summed shape error ε_s.
pub fn metric_eps_s(preds: &[ShockSignal], refs: &[ShockSignal]) -> Result<f64> {
    Ok(mean(&shape_errors(preds, refs)?))
}

pub fn evaluate(preds: &[ShockSignal], refs: &[ShockSignal]) -> Result<EvalReport> {
    let per_signal_peak_err = peak_errors(preds, refs)?;
    let per_signal_shape_err = shape_errors(preds, refs)?;
    Ok(EvalReport {
        eps_p: mean(&per_signal_peak_err),
        eps_s: mean(&per_signal_shape_err),
        n: preds.len(),
        per_signal_peak_err,
        per_signal_shape_err,
    })
}
