//! Method comparison, ablation study and report formatting.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::Rng;

use crate::baselines::{apply_zero_phase, fit_linear, FirFilter, LinearMap};
use crate::calibnet::{
    objective, train_variants, AblationFlags, AutoEncoder, CalibArch, CalibModel, LossTerms, TrainConfig, TrainingSet,
};
use crate::error::{Error, Result};
use crate::nn::{grad_check, GradCheckConfig, GradCheckReport, Probe};
use crate::signal::{evaluate, EvalReport, ShockSignal, SignalPair};
use crate::srs::SrsCurve;
use crate::synth::{generate_dataset, stream_rng, LowEndModel, RigConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Raw,
    Lpf,
    Lr,
    Ae,
    Net,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Raw, Method::Lpf, Method::Lr, Method::Ae, Method::Net];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Raw => "raw",
            Method::Lpf => "lpf",
            Method::Lr => "lr",
            Method::Ae => "ae",
            Method::Net => "net",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Whatever trained artifacts are available to [`predict`].
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub lpf: Option<FirFilter>,
    pub lr: Option<LinearMap>,
    pub ae: Option<AutoEncoder>,
    pub net: Option<CalibModel>,
}

pub fn predict(method: Method, models: &Models, inputs: &[ShockSignal]) -> Result<Vec<ShockSignal>> {
    let missing = || Error::MissingModelForMethod(method.to_string());
    match method {
        Method::Raw => Ok(inputs.to_vec()),
        Method::Lpf => {
            let f = match &models.lpf {
                Some(f) => f.clone(),
                None => FirFilter::default_lowpass(inputs.first().ok_or(Error::EmptyDataset)?.sample_rate)?,
            };
            inputs.iter().map(|s| apply_zero_phase(&f, s)).collect()
        }
        Method::Lr => {
            let lr = models.lr.as_ref().ok_or_else(missing)?;
            inputs.iter().map(|s| lr.predict(s)).collect()
        }
        Method::Ae => models.ae.as_ref().ok_or_else(missing)?.predict_all(inputs),
        Method::Net => models.net.as_ref().ok_or_else(missing)?.calibrate_all(inputs),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodReport {
    pub method: String,
    pub report: EvalReport,
}

/// Scores each method on `test`, in the order given.
pub fn compare(methods: &[Method], models: &Models, test: &[SignalPair]) -> Result<Vec<MethodReport>> {
    let inputs: Vec<ShockSignal> = test.iter().map(|p| p.low.clone()).collect();
    let refs: Vec<ShockSignal> = test.iter().map(|p| p.high.clone()).collect();
    methods
        .iter()
        .map(|&m| {
            Ok(MethodReport {
                method: m.to_string(),
                report: evaluate(&predict(m, models, &inputs)?, &refs)?,
            })
        })
        .collect()
}

pub fn format_table(rows: &[MethodReport]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}  {:>8}  {:>10}  {:>5}\n", "method", "eps_p %", "eps_s", "n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.2}  {:>10.2}  {:>5}",
            r.method,
            100.0 * r.report.eps_p,
            r.report.eps_s,
            r.report.n
        );
    }
    out
}

pub fn format_csv(rows: &[MethodReport]) -> String {
    let mut out = String::from("method,eps_p_percent,eps_s,n\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{:.6},{}", r.method, 100.0 * r.report.eps_p, r.report.eps_s, r.report.n);
    }
    out
}

/// `freq_hz` followed by one column per named curve.
pub fn srs_csv(curves: &[(&str, &SrsCurve)]) -> String {
    let mut out = String::from("freq_hz");
    for (name, _) in curves {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    if let Some((_, first)) = curves.first() {
        for (i, f) in first.freqs.iter().enumerate() {
            let _ = write!(out, "{f:.6}");
            for (_, c) in curves {
                let _ = write!(out, ",{:.6}", c.values[i]);
            }
            out.push('\n');
        }
    }
    out
}

/// Log-log line plot of SRS curves.
pub fn srs_svg(curves: &[(&str, &SrsCurve)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 50.0;
    const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];
    let pts = |c: &SrsCurve| c.freqs.iter().zip(&c.values).map(|(f, v)| (f.log10(), v.max(1e-12).log10())).collect::<Vec<_>>();
    let all: Vec<(f64, f64)> = curves.iter().flat_map(|(_, c)| pts(c)).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !(x1 > x0) {
        x1 = x0 + 1.0;
    }
    if !(y1 > y0) {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n");
    let _ = writeln!(
        out,
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * M,
        H - 2.0 * M
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">natural frequency (Hz, log)</text>", W / 2.0, H - 15.0);
    let _ = writeln!(out, "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">peak response (g, log)</text>", H / 2.0, H / 2.0);
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts(c).iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(out, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            M + 10.0,
            M + 18.0 * (i as f64 + 1.0)
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Model variants compared by the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoZ,
    NoLinf,
    NoResidual,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::NoZ, Variant::NoLinf, Variant::NoResidual];

    pub fn flags(self) -> AblationFlags {
        let full = AblationFlags::default();
        match self {
            Variant::Full => full,
            Variant::NoZ => AblationFlags {
                ppn_uses_z: false,
                ..full
            },
            Variant::NoLinf => AblationFlags {
                use_linf_term: false,
                ..full
            },
            Variant::NoResidual => AblationFlags {
                ppn_residual: false,
                ..full
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoZ => "no-z",
            Variant::NoLinf => "no-linf",
            Variant::NoResidual => "no-residual",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub rig: RigConfig,
    pub low_end: LowEndModel,
    pub arch: CalibArch,
    pub train: TrainConfig,
    pub ridge_lambda: f64,
    /// Each seed initializes the networks and drives the batch shuffle.
    pub seeds: Vec<u64>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            rig: RigConfig::default(),
            low_end: LowEndModel::default(),
            arch: CalibArch::default(),
            train: TrainConfig::default(),
            ridge_lambda: crate::baselines::DEFAULT_RIDGE_LAMBDA,
            seeds: vec![1, 2, 3],
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    /// Test-set report per variant, in [`Variant::ALL`] order.
    pub variants: Vec<(Variant, EvalReport)>,
    pub ae: EvalReport,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    /// raw, lpf, lr, ae, net for the first seed.
    pub table: Vec<MethodReport>,
    pub runs: Vec<SeedRun>,
}

impl StudyResult {
    pub fn mean_eps_p(&self, v: Variant) -> f64 {
        let sum: f64 = self
            .runs
            .iter()
            .map(|r| r.variants.iter().find(|(x, _)| *x == v).map_or(f64::NAN, |(_, rep)| rep.eps_p))
            .sum();
        sum / self.runs.len() as f64
    }

    pub fn row(&self, method: Method) -> Option<&EvalReport> {
        self.table.iter().find(|r| r.method == method.as_str()).map(|r| &r.report)
    }
}

/// Generates the dataset, fits every baseline and trains all model variants
/// for each seed.
///
/// Variants that keep the L∞ term share one trunk run (the peak branch has
/// no influence on the trunk), and the autoencoder baseline is that trunk.
pub fn run_study(cfg: &StudyConfig, mut progress: impl FnMut(&str)) -> Result<StudyResult> {
    if cfg.seeds.is_empty() {
        return Err(Error::InvalidConfig("study needs at least one seed".into()));
    }
    let data = generate_dataset(&cfg.rig, &cfg.low_end)?;
    let set = TrainingSet::from_pairs(&data.train, cfg.arch.signal_len)?;
    let lpf = FirFilter::default_lowpass(cfg.rig.sample_rate)?;
    let lr = fit_linear(&data.train, cfg.ridge_lambda)?;
    progress("baselines fitted");

    let mut runs = Vec::new();
    let mut table = Vec::new();
    for &seed in &cfg.seeds {
        let train_cfg = TrainConfig { seed, ..cfg.train.clone() };
        let with_linf = [Variant::Full, Variant::NoZ, Variant::NoResidual];
        let mut linf_models = with_linf
            .iter()
            .map(|v| CalibModel::new(cfg.arch, v.flags(), seed))
            .collect::<Result<Vec<_>>>()?;
        train_variants(&mut linf_models, &set, &train_cfg)?;
        progress(&format!("seed {seed}: trunk with L-infinity trained"));
        let mut no_linf = vec![CalibModel::new(cfg.arch, Variant::NoLinf.flags(), seed)?];
        train_variants(&mut no_linf, &set, &train_cfg)?;
        progress(&format!("seed {seed}: trunk without L-infinity trained"));

        let mut trained: Vec<(Variant, CalibModel)> = with_linf.into_iter().zip(linf_models).collect();
        trained.push((Variant::NoLinf, no_linf.remove(0)));
        let mut variants = Vec::new();
        for v in Variant::ALL {
            let model = &trained.iter().find(|(x, _)| *x == v).expect("every variant trained").1;
            let models = Models {
                net: Some(model.clone()),
                ..Models::default()
            };
            let rep = compare(&[Method::Net], &models, &data.test)?.remove(0).report;
            variants.push((v, rep));
        }
        let full = trained.swap_remove(0).1;
        let models = Models {
            lpf: Some(lpf.clone()),
            lr: Some(lr.clone()),
            ae: Some(full.autoencoder()),
            net: Some(full),
        };
        let rows = compare(&Method::ALL, &models, &data.test)?;
        let ae = rows[3].report.clone();
        if table.is_empty() {
            table = rows;
        }
        runs.push(SeedRun { seed, variants, ae });
    }
    Ok(StudyResult { table, runs })
}

/// One gradient comparison inside [`calibnet_grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckLine {
    pub point: usize,
    pub target: &'static str,
    pub report: GradCheckReport,
}

fn random_batch(arch: &CalibArch, n: usize, rng: &mut impl Rng) -> TrainingSet {
    let l = arch.signal_len;
    let mut x = Vec::with_capacity(n * l);
    for _ in 0..n {
        let row: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        x.extend(row.iter().map(|v| v / m));
    }
    TrainingSet {
        signal_len: l,
        x,
        target: (0..n * l).map(|_| rng.gen_range(-1.2..1.2)).collect(),
        p_x: (0..n).map(|_| rng.gen_range(500.0..8000.0)).collect(),
        p_ref: (0..n).map(|_| rng.gen_range(500.0..8000.0)).collect(),
    }
}

/// Compares analytic and central-difference gradients at `points` random
/// models and batches: the shape loss with and without the L∞ term over the
/// trunk, and the peak loss over the PPN. `corrupt` scales every analytic
/// gradient by 1.01 as a negative control.
pub fn calibnet_grad_check(arch: CalibArch, seed: u64, points: usize, corrupt: bool) -> Result<Vec<GradCheckLine>> {
    arch.validate()?;
    let mut lines = Vec::new();
    let shape_only = LossTerms { shape: true, peak: false };
    let peak_only = LossTerms { shape: false, peak: true };
    let none = LossTerms { shape: false, peak: false };
    let scale = if corrupt { 1.01 } else { 1.0 };
    for point in 0..points {
        let mut rng = stream_rng(seed, 0x6763_0000 + point as u64);
        let set = random_batch(&arch, 3, &mut rng);
        let model_seed = rng.gen();
        let check = GradCheckConfig {
            seed: rng.gen(),
            ..GradCheckConfig::default()
        };
        for (target, use_linf) in [("shape", true), ("shape-l2", false)] {
            let flags = AblationFlags {
                use_linf_term: use_linf,
                ..AblationFlags::default()
            };
            let model = CalibModel::new(arch, flags, model_seed)?;
            let (_, g) = objective(&model, &set, shape_only)?;
            let mut analytic = g.encoder.flatten();
            analytic.extend_from_slice(g.decoder.values());
            analytic.iter_mut().for_each(|v| *v *= scale);
            let report = grad_check(
                |v| {
                    let e = objective(&model.with_trunk_vector(v).expect("same length"), &set, none)
                        .expect("valid batch")
                        .0;
                    Probe {
                        value: e.shape_loss,
                        regime: e.regime,
                    }
                },
                &model.trunk_vector(),
                &analytic,
                &check,
            );
            lines.push(GradCheckLine { point, target, report });
        }
        let model = CalibModel::new(arch, AblationFlags::default(), model_seed)?;
        let (_, g) = objective(&model, &set, peak_only)?;
        let analytic: Vec<f64> = g.ppn.flatten().iter().map(|v| v * scale).collect();
        let report = grad_check(
            |v| {
                let e = objective(&model.with_ppn_vector(v).expect("same length"), &set, none)
                    .expect("valid batch")
                    .0;
                Probe {
                    value: e.peak_loss,
                    regime: e.regime,
                }
            },
            &model.ppn.flatten(),
            &analytic,
            &check,
        );
        lines.push(GradCheckLine {
            point,
            target: "peak",
            report,
        });
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_suite_passes_and_detects_corruption() {
        let arch = CalibArch::reduced(30, 8, 4);
        let good = calibnet_grad_check(arch, 1, 2, false).unwrap();
        assert_eq!(good.len(), 6);
        assert!(good.iter().all(|l| l.report.passed), "{good:?}");
        let bad = calibnet_grad_check(arch, 1, 1, true).unwrap();
        assert!(bad.iter().all(|l| !l.report.passed));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("fft".parse::<Method>().is_err());
    }

    #[test]
    fn raw_on_identity_sensor_is_exact() {
        let rig = RigConfig {
            n_pairs: 12,
            train_count: 8,
            ..RigConfig::default()
        };
        let data = generate_dataset(&rig, &LowEndModel::identity()).unwrap();
        let rows = compare(&[Method::Raw], &Models::default(), &data.test).unwrap();
        assert_eq!(rows[0].report.eps_p, 0.0);
        assert_eq!(rows[0].report.eps_s, 0.0);
        assert!(matches!(
            compare(&[Method::Net], &Models::default(), &data.test),
            Err(Error::MissingModelForMethod(m)) if m == "net"
        ));
    }

    #[test]
    fn csv_and_table_layout() {
        let rep = EvalReport {
            eps_p: 0.135,
            eps_s: 228.6,
            per_signal_peak_err: vec![],
            per_signal_shape_err: vec![],
            n: 160,
        };
        let rows = vec![
            MethodReport {
                method: "raw".into(),
                report: rep.clone(),
            },
            MethodReport {
                method: "net".into(),
                report: rep,
            },
        ];
        assert_eq!(
            format_csv(&rows),
            "method,eps_p_percent,eps_s,n\nraw,13.500000,228.600000,160\nnet,13.500000,228.600000,160\n"
        );
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().nth(1).unwrap().contains("13.50"));
    }

    #[test]
    fn srs_outputs() {
        let c = SrsCurve {
            freqs: vec![100.0, 200.0],
            values: vec![1.0, 2.0],
            q_factor: 10.0,
        };
        let csv = srs_csv(&[("srs_low", &c), ("srs_high", &c)]);
        assert_eq!(csv, "freq_hz,srs_low,srs_high\n100.000000,1.000000,1.000000\n200.000000,2.000000,2.000000\n");
        let svg = srs_svg(&[("low", &c)]);
        assert!(svg.starts_with("<svg") && svg.contains("polyline"));
    }
}
