use rand::seq::index::sample;

use crate::synth::stream_rng;

/// Loss value plus a fingerprint of every discrete branch taken while
/// computing it (ReLU on/off pattern, arg-max positions, signs). Two
/// evaluations with different fingerprints straddle a kink.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub regime: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Number of coordinates sampled; all of them when the vector is shorter.
    pub coordinates: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coordinates: 200,
            tolerance: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a ±step perturbation crossed a kink.
    pub skipped: usize,
    pub passed: bool,
}

/// Compares `analytic` against central differences of `loss` at `params`.
///
/// Relative error is `|a - n| / max(|a|, |n|, r / tolerance, 1e-8)` where
/// `r = ε·|L| / step` is the smallest slope a central difference can resolve
/// at loss value `L`. Without it an exactly cancelling gradient would be
/// compared against pure rounding noise.
pub fn grad_check(
    mut loss: impl FnMut(&[f64]) -> Probe,
    params: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len(), "gradient length differs from parameters");
    let base = loss(params);
    let floor = (f64::EPSILON * base.value.abs() / cfg.step / cfg.tolerance).max(1e-8);
    let indices: Vec<usize> = if params.len() <= cfg.coordinates {
        (0..params.len()).collect()
    } else {
        let mut rng = stream_rng(cfg.seed, 0x6772_6164);
        let mut v = sample(&mut rng, params.len(), cfg.coordinates).into_vec();
        v.sort_unstable();
        v
    };

    let mut point = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    for i in indices {
        let orig = point[i];
        point[i] = orig + cfg.step;
        let plus = loss(&point);
        point[i] = orig - cfg.step;
        let minus = loss(&point);
        point[i] = orig;
        if plus.regime != base.regime || minus.regime != base.regime {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * cfg.step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.checked += 1;
        if rel > report.max_rel_err || rel.is_nan() {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    report.passed = report.max_rel_err <= cfg.tolerance;
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    /// ‖W x − t‖² with W 15×20 (300 coordinates).
    fn quadratic(w: &[f64], x: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
        let (rows, cols) = (t.len(), x.len());
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.len()];
        for r in 0..rows {
            let y: f64 = (0..cols).map(|c| w[r * cols + c] * x[c]).sum();
            let d = y - t[r];
            loss += d * d;
            for c in 0..cols {
                grad[r * cols + c] = 2.0 * d * x[c];
            }
        }
        (loss, grad)
    }

    fn fixture() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.7).sin()).collect();
        let t: Vec<f64> = (0..15).map(|i| (i as f64 * 0.3).cos()).collect();
        let w: Vec<f64> = (0..300).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect();
        (w, x, t)
    }

    #[test]
    fn smooth_quadratic_is_tight() {
        let (w, x, t) = fixture();
        let (_, grad) = quadratic(&w, &x, &t);
        let report = grad_check(
            |v| Probe {
                value: quadratic(v, &x, &t).0,
                regime: vec![],
            },
            &w,
            &grad,
            &GradCheckConfig::default(),
        );
        assert_eq!(report.checked, 200);
        assert!(report.max_rel_err < 1e-7, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn corrupted_gradient_detected() {
        let (w, x, t) = fixture();
        let (_, mut grad) = quadratic(&w, &x, &t);
        for g in grad.iter_mut() {
            *g *= 1.01;
        }
        let report = grad_check(
            |v| Probe {
                value: quadratic(v, &x, &t).0,
                regime: vec![],
            },
            &w,
            &grad,
            &GradCheckConfig {
                coordinates: 1000,
                ..GradCheckConfig::default()
            },
        );
        assert_eq!(report.checked, 300);
        assert!(!report.passed);
    }

    #[test]
    fn cancelled_gradient_vs_rounding_noise() {
        // d/dv of (big + v·1e-30) is ~0 analytically; the difference quotient
        // only sees rounding of `big`
        let report = grad_check(
            |v| Probe {
                value: 3462.581 + v[0] * 1e-30 + if v[0] < 0.0 { 4.5e-13 } else { 0.0 },
                regime: vec![],
            },
            &[0.0],
            &[0.0],
            &GradCheckConfig::default(),
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn kink_crossings_are_skipped() {
        // |v0| at v0 = 0 straddles the kink
        let report = grad_check(
            |v| Probe {
                value: v[0].abs() + v[1],
                regime: vec![(v[0] > 0.0) as u8],
            },
            &[0.0, 3.0],
            &[0.0, 1.0],
            &GradCheckConfig::default(),
        );
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed);
    }
}
