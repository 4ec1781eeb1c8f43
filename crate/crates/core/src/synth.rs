//! Synthetic drop-test rig.
//!
//! Stands in for a physical drop table: each drop produces a ground-truth
//! ("high-end") acceleration record made of a haversine impact pulse plus
//! decaying table ringing, and a "low-end" measurement of the same event
//! through a cheap sensor model with a mechanical resonance, an
//! amplitude-dependent sensitivity error and broadband noise.
//!
//! Every pair draws from its own ChaCha stream keyed by `(master_seed,
//! drop_id)`, so a dataset is a pure function of its configuration no matter
//! how many threads build it.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::{window_around_peak, ShockSignal, SignalPair, SAMPLE_RATE};
use crate::srs::sdof_response;

pub const MIN_PULSE_WIDTH: f64 = 0.3e-3;
pub const MAX_PULSE_WIDTH: f64 = 3e-3;

/// Raw record length before windowing.
const RECORD_LEN: usize = 4096;
const SPLIT_STREAM: u64 = u64::MAX;

/// Deterministic RNG for one named stream of a seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    pub n_pairs: usize,
    pub train_count: usize,
    /// Range of ground-truth peak accelerations in g.
    pub peak_range: (f64, f64),
    pub sample_rate: f64,
    pub master_seed: u64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            n_pairs: 660,
            train_count: 500,
            peak_range: (500.0, 8000.0),
            sample_rate: SAMPLE_RATE,
            master_seed: 1,
        }
    }
}

impl RigConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.peak_range;
        if self.train_count >= self.n_pairs {
            return Err(Error::InvalidConfig(format!(
                "train count {} must be below pair count {}",
                self.train_count, self.n_pairs
            )));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad peak range {lo}..{hi} g")));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad sample rate {}", self.sample_rate)));
        }
        Ok(())
    }
}

/// Defects of the cheap sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LowEndModel {
    /// Mean of the multiplicative gain error minus one.
    pub peak_gain_bias: f64,
    /// Standard deviation of the multiplicative gain error.
    pub peak_gain_spread: f64,
    /// Gaussian noise RMS as a fraction of the true peak.
    pub noise_floor: f64,
    pub resonance_freq: f64,
    pub resonance_q: f64,
    /// Blend between the ideal response (0) and the resonant response (1).
    pub resonance_gain: f64,
    /// Fractional sensitivity lost per decade of true peak above
    /// `compression_onset`.
    pub gain_compression: f64,
    pub compression_onset: f64,
}

impl Default for LowEndModel {
    fn default() -> Self {
        Self {
            peak_gain_bias: -0.2,
            peak_gain_spread: 0.02,
            noise_floor: 0.05,
            resonance_freq: 5000.0,
            resonance_q: 5.0,
            resonance_gain: 1.0,
            gain_compression: 0.1,
            compression_onset: 500.0,
        }
    }
}

impl LowEndModel {
    /// A perfect sensor: the low-end output equals the truth.
    pub fn identity() -> Self {
        Self {
            peak_gain_bias: 0.0,
            peak_gain_spread: 0.0,
            noise_floor: 0.0,
            resonance_gain: 0.0,
            gain_compression: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self, sample_rate: f64) -> Result<()> {
        let nyquist = sample_rate / 2.0;
        if !(self.resonance_freq > 0.0 && self.resonance_freq < nyquist) {
            return Err(Error::InvalidConfig(format!(
                "resonance {} Hz must lie in (0, {nyquist})",
                self.resonance_freq
            )));
        }
        if !(self.resonance_q > 0.5) {
            return Err(Error::InvalidConfig(format!("resonance Q {} must exceed 0.5", self.resonance_q)));
        }
        for (name, v) in [
            ("peak_gain_spread", self.peak_gain_spread),
            ("noise_floor", self.noise_floor),
            ("resonance_gain", self.resonance_gain),
            ("gain_compression", self.gain_compression),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.compression_onset > 0.0) || !self.peak_gain_bias.is_finite() {
            return Err(Error::InvalidConfig("bad gain parameters".into()));
        }
        Ok(())
    }
}

/// One ground-truth drop: a haversine pulse of `target_peak` g lasting
/// `pulse_width` seconds, followed by table ringing at 800–3000 Hz whose
/// amplitude never exceeds 15 % of the peak. Returned already windowed.
pub fn simulate_drop(target_peak: f64, pulse_width: f64, rng: &mut impl Rng) -> Result<ShockSignal> {
    simulate_drop_at(target_peak, pulse_width, SAMPLE_RATE, rng)
}

fn simulate_drop_at(
    target_peak: f64,
    pulse_width: f64,
    sample_rate: f64,
    rng: &mut impl Rng,
) -> Result<ShockSignal> {
    if !(target_peak > 0.0 && target_peak.is_finite()) {
        return Err(Error::InvalidPulseParams(format!("target peak {target_peak} g")));
    }
    if !(MIN_PULSE_WIDTH..=MAX_PULSE_WIDTH).contains(&pulse_width) {
        return Err(Error::InvalidPulseParams(format!(
            "pulse width {pulse_width} s outside [{MIN_PULSE_WIDTH}, {MAX_PULSE_WIDTH}]"
        )));
    }
    let ring_amp = rng.gen_range(0.03..0.12) * target_peak;
    let ring_freq = rng.gen_range(800.0..3000.0);
    let ring_tau = rng.gen_range(2e-3..6e-3);
    let centre = rng.gen_range(800..1200) as f64;

    let half = pulse_width / 2.0;
    let samples = (0..RECORD_LEN)
        .map(|i| {
            let t = (i as f64 - centre) / sample_rate;
            if t.abs() <= half {
                target_peak * (PI * t / pulse_width).cos().powi(2)
            } else if t > half {
                let tr = t - half;
                ring_amp * (-tr / ring_tau).exp() * (2.0 * PI * ring_freq * tr).sin()
            } else {
                0.0
            }
        })
        .collect();
    window_around_peak(&ShockSignal::new(samples, sample_rate))
}

/// Passes a ground-truth record through the low-end sensor model.
pub fn degrade(truth: &ShockSignal, m: &LowEndModel, rng: &mut impl Rng) -> Result<ShockSignal> {
    truth.check_finite()?;
    m.validate(truth.sample_rate)?;
    let peak = truth.max_abs();

    let gain_noise = Normal::new(1.0 + m.peak_gain_bias, m.peak_gain_spread)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let decades = if peak > 0.0 {
        (peak / m.compression_onset).log10().max(0.0)
    } else {
        0.0
    };
    let gain = gain_noise.sample(rng) * (1.0 - m.gain_compression * decades);

    let mut out = truth.samples.clone();
    if m.resonance_gain != 0.0 {
        let resonant = sdof_response(&truth.samples, truth.sample_rate, m.resonance_freq, m.resonance_q);
        for (o, r) in out.iter_mut().zip(resonant) {
            *o += m.resonance_gain * (r - *o);
        }
    }
    let sigma = m.noise_floor * peak;
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    for o in out.iter_mut() {
        let n = noise.sample(rng);
        *o = gain * *o + n;
    }
    Ok(ShockSignal::new(out, truth.sample_rate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SignalPair>,
    pub test: Vec<SignalPair>,
}

fn generate_pair(cfg: &RigConfig, m: &LowEndModel, drop_id: u64) -> Result<SignalPair> {
    let mut rng = stream_rng(cfg.master_seed, drop_id);
    let (lo, hi) = cfg.peak_range;
    let peak = (rng.gen::<f64>() * (hi / lo).ln()).exp() * lo;
    let peak = peak.clamp(lo, hi);
    let width = (rng.gen::<f64>() * (MAX_PULSE_WIDTH / MIN_PULSE_WIDTH).ln()).exp() * MIN_PULSE_WIDTH;
    let width = width.clamp(MIN_PULSE_WIDTH, MAX_PULSE_WIDTH);
    let high = simulate_drop_at(peak, width, cfg.sample_rate, &mut rng)?;
    let low = degrade(&high, m, &mut rng)?;
    SignalPair::new(low, high, drop_id)
}

/// Builds `n_pairs` drops and splits them into train and test sets with a
/// seeded shuffle. Each split is ordered by drop id.
pub fn generate_dataset(cfg: &RigConfig, m: &LowEndModel) -> Result<Dataset> {
    cfg.validate()?;
    m.validate(cfg.sample_rate)?;
    let pairs = (0..cfg.n_pairs as u64)
        .into_par_iter()
        .map(|id| generate_pair(cfg, m, id))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<usize> = (0..cfg.n_pairs).collect();
    order.shuffle(&mut stream_rng(cfg.master_seed, SPLIT_STREAM));
    let mut is_train = vec![false; cfg.n_pairs];
    for &i in &order[..cfg.train_count] {
        is_train[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = pairs.into_iter().partition(|p| is_train[p.drop_id as usize]);
    Ok(Dataset { train, test })
}
