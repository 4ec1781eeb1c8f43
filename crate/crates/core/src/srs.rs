//! Shock response spectrum.
//!
//! Each natural frequency gets a base-excited single-degree-of-freedom
//! oscillator driven by the signal; the spectrum value is the largest
//! absolute acceleration of the mass over the record (maximax). The
//! production path is the ramp-invariant recursive filter of Smallwood,
//! which is exact for input that is linear between samples. [`srs_oracle`]
//! integrates the same equation directly with RK4 and is kept as a
//! cross-check.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::signal::ShockSignal;

pub const DEFAULT_Q: f64 = 10.0;
pub const DEFAULT_F_MIN: f64 = 100.0;
pub const DEFAULT_F_MAX: f64 = 10_000.0;
pub const DEFAULT_POINTS_PER_OCTAVE: usize = 6;

/// Integration substeps per input sample used by the oracle.
pub const ORACLE_OVERSAMPLE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct SrsCurve {
    pub freqs: Vec<f64>,
    pub values: Vec<f64>,
    pub q_factor: f64,
}

/// Geometric grid starting at `f_min` with `points_per_octave` points per
/// doubling, extended until it reaches `f_max`.
///
/// The last point is the first grid point at or above `f_max`, so the grid
/// always covers the requested band: 100 Hz to 10 kHz at 6 points per octave
/// yields 41 points ending at about 10.16 kHz.
pub fn log_freq_grid(f_min: f64, f_max: f64, points_per_octave: usize) -> Result<Vec<f64>> {
    if !(f_min > 0.0 && f_min.is_finite() && f_max.is_finite() && f_max >= f_min) {
        return Err(Error::InvalidRange(format!("need 0 < f_min <= f_max, got {f_min}..{f_max}")));
    }
    if points_per_octave == 0 {
        return Err(Error::InvalidRange("points_per_octave must be at least 1".into()));
    }
    let span = points_per_octave as f64 * (f_max / f_min).log2();
    let steps = (span - 1e-9).ceil().max(0.0) as usize;
    Ok((0..=steps)
        .map(|k| f_min * 2f64.powf(k as f64 / points_per_octave as f64))
        .collect())
}

pub fn default_grid() -> Vec<f64> {
    log_freq_grid(DEFAULT_F_MIN, DEFAULT_F_MAX, DEFAULT_POINTS_PER_OCTAVE)
        .expect("default grid is valid")
}

fn check_inputs(s: &ShockSignal, freqs: &[f64], q_factor: f64) -> Result<()> {
    s.check_finite()?;
    if !(q_factor > 0.5) || !q_factor.is_finite() {
        return Err(Error::InvalidConfig(format!("Q factor must exceed 0.5, got {q_factor}")));
    }
    let nyquist = s.sample_rate / 2.0;
    for (i, &f) in freqs.iter().enumerate() {
        if !(f > 0.0) {
            return Err(Error::InvalidRange(format!("frequency {f} is not positive")));
        }
        if i > 0 && f <= freqs[i - 1] {
            return Err(Error::InvalidRange("frequencies must be strictly increasing".into()));
        }
        if f >= nyquist {
            return Err(Error::FrequencyAboveNyquist { freq: f, nyquist });
        }
    }
    Ok(())
}

/// Absolute acceleration of a base-excited oscillator with natural frequency
/// `fn_hz` and quality factor `q`, via the ramp-invariant recursive filter.
///
/// The filter has unit DC gain, so it also serves as a model of an
/// accelerometer with a mechanical resonance.
pub fn sdof_response(input: &[f64], sample_rate: f64, fn_hz: f64, q: f64) -> Vec<f64> {
    let zeta = 1.0 / (2.0 * q);
    let wn = 2.0 * PI * fn_hz;
    let dt = 1.0 / sample_rate;
    let wd = wn * (1.0 - zeta * zeta).sqrt();
    let e = (-zeta * wn * dt).exp();
    let k = wd * dt;
    let c = e * k.cos();
    let sp = e * k.sin() / k;
    let (b0, b1, b2) = (1.0 - sp, 2.0 * (sp - c), e * e - sp);
    let (a1, a2) = (2.0 * c, -e * e);

    let mut out = Vec::with_capacity(input.len());
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for &x0 in input {
        let y0 = b0 * x0 + b1 * x1 + b2 * x2 + a1 * y1 + a2 * y2;
        out.push(y0);
        x2 = x1;
        x1 = x0;
        y2 = y1;
        y1 = y0;
    }
    out
}

fn maximax(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

pub fn srs_maximax(s: &ShockSignal, freqs: &[f64], q_factor: f64) -> Result<SrsCurve> {
    check_inputs(s, freqs, q_factor)?;
    let values = freqs
        .iter()
        .map(|&f| maximax(&sdof_response(&s.samples, s.sample_rate, f, q_factor)))
        .collect();
    Ok(SrsCurve {
        freqs: freqs.to_vec(),
        values,
        q_factor,
    })
}

/// Reference spectrum from RK4 integration of
/// `z'' + 2ζω z' + ω² z = -a_base(t)` with the base acceleration linearly
/// interpolated between samples. The response is observed at the original
/// sample instants, matching what the recursive filter reports.
pub fn srs_oracle(s: &ShockSignal, freqs: &[f64], q_factor: f64) -> Result<SrsCurve> {
    check_inputs(s, freqs, q_factor)?;
    let zeta = 1.0 / (2.0 * q_factor);
    let dt = 1.0 / s.sample_rate;
    let h = dt / ORACLE_OVERSAMPLE as f64;
    let n = s.samples.len();
    let base = |i: usize| if i < n { s.samples[i] } else { 0.0 };

    let values = freqs
        .iter()
        .map(|&f| {
            let w = 2.0 * PI * f;
            let (c1, c2) = (2.0 * zeta * w, w * w);
            // state: relative displacement and velocity; zero initial conditions
            let (mut z, mut v) = (0.0f64, 0.0f64);
            let accel = |z: f64, v: f64, a: f64| -a - c1 * v - c2 * z;
            let mut peak = 0.0f64;
            for i in 0..n {
                // absolute acceleration at sample i
                peak = peak.max((c1 * v + c2 * z).abs());
                let (a0, a1) = (base(i), base(i + 1));
                for sub in 0..ORACLE_OVERSAMPLE {
                    let t0 = sub as f64 / ORACLE_OVERSAMPLE as f64;
                    let th = (sub as f64 + 0.5) / ORACLE_OVERSAMPLE as f64;
                    let t1 = (sub + 1) as f64 / ORACLE_OVERSAMPLE as f64;
                    let fa = a0 + (a1 - a0) * t0;
                    let fm = a0 + (a1 - a0) * th;
                    let fb = a0 + (a1 - a0) * t1;
                    let k1z = v;
                    let k1v = accel(z, v, fa);
                    let k2z = v + 0.5 * h * k1v;
                    let k2v = accel(z + 0.5 * h * k1z, k2z, fm);
                    let k3z = v + 0.5 * h * k2v;
                    let k3v = accel(z + 0.5 * h * k2z, k3z, fm);
                    let k4z = v + h * k3v;
                    let k4v = accel(z + h * k3z, k4z, fb);
                    z += h / 6.0 * (k1z + 2.0 * k2z + 2.0 * k3z + k4z);
                    v += h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
                }
            }
            peak
        })
        .collect();
    Ok(SrsCurve {
        freqs: freqs.to_vec(),
        values,
        q_factor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{SAMPLE_RATE, SIGNAL_LEN};

    /// 100 g, 11 ms haversine starting at sample 100.
    fn haversine_11ms() -> ShockSignal {
        let width = 11e-3;
        let samples = (0..SIGNAL_LEN)
            .map(|i| {
                let t = (i as f64 - 100.0) / SAMPLE_RATE;
                if (0.0..=width).contains(&t) {
                    100.0 * (PI * t / width).sin().powi(2)
                } else {
                    0.0
                }
            })
            .collect();
        ShockSignal::new(samples, SAMPLE_RATE)
    }

    #[test]
    fn grid_examples() {
        assert_eq!(log_freq_grid(100.0, 400.0, 1).unwrap(), vec![100.0, 200.0, 400.0]);
        assert_eq!(log_freq_grid(100.0, 100.0, 6).unwrap(), vec![100.0]);
        let g = log_freq_grid(100.0, 10_000.0, 6).unwrap();
        assert_eq!(g.len(), 41);
        let ratio = 2f64.powf(1.0 / 6.0);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-12);
        }
        assert!(matches!(log_freq_grid(0.0, 10.0, 1), Err(Error::InvalidRange(_))));
        assert!(matches!(log_freq_grid(10.0, 5.0, 1), Err(Error::InvalidRange(_))));
        assert!(matches!(log_freq_grid(10.0, 50.0, 0), Err(Error::InvalidRange(_))));
    }

    #[test]
    fn filter_has_unit_dc_gain() {
        let y = sdof_response(&vec![1.0; 200_000], SAMPLE_RATE, 500.0, 10.0);
        assert!((y.last().unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_signal_gives_zero_curve() {
        let s = ShockSignal::new(vec![0.0; 500], SAMPLE_RATE);
        let g = default_grid();
        assert!(srs_maximax(&s, &g, DEFAULT_Q).unwrap().values.iter().all(|&v| v == 0.0));
        assert!(srs_oracle(&s, &g, DEFAULT_Q).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn haversine_high_frequency_asymptote() {
        let s = haversine_11ms();
        let curve = srs_maximax(&s, &[10_000.0], DEFAULT_Q).unwrap();
        assert!((curve.values[0] - 100.0).abs() / 100.0 < 0.03, "{}", curve.values[0]);
    }

    #[test]
    fn filter_matches_oracle_on_haversine() {
        let s = haversine_11ms();
        let g = default_grid();
        let a = srs_maximax(&s, &g, DEFAULT_Q).unwrap();
        let b = srs_oracle(&s, &g, DEFAULT_Q).unwrap();
        for (i, (x, y)) in a.values.iter().zip(&b.values).enumerate() {
            assert!((x - y).abs() / y < 0.01, "f={} filter={x} oracle={y}", g[i]);
        }
    }

    #[test]
    fn linear_in_amplitude() {
        let s = haversine_11ms();
        let g = log_freq_grid(200.0, 5000.0, 3).unwrap();
        let a = srs_maximax(&s, &g, DEFAULT_Q).unwrap();
        let b = srs_maximax(&s.scaled(3.5), &g, DEFAULT_Q).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((3.5 * x - y).abs() <= 1e-9 * y);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let s = haversine_11ms();
        assert!(matches!(
            srs_maximax(&s, &[100.0, 100_000.0], DEFAULT_Q),
            Err(Error::FrequencyAboveNyquist { .. })
        ));
        assert!(matches!(srs_maximax(&s, &[100.0], 0.5), Err(Error::InvalidConfig(_))));
        assert!(matches!(srs_oracle(&s, &[200.0, 100.0], 10.0), Err(Error::InvalidRange(_))));
    }
}
