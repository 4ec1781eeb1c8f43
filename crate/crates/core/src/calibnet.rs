//! Encoder–decoder calibration network with a peak prediction branch.
//!
//! A low-end record `x_r` is split into its shape `x_n = x_r / p_x` and peak
//! `p_x = max|x_r|`. The encoder maps `x_n` to a latent vector `z`; the
//! decoder maps `z` back to a full-length signal `y_n`. The peak prediction
//! network (PPN) compresses `z` to a few features, appends `p_x`, and
//! predicts a correction `p_res` so that `p_y = p_x + p_res`. The calibrated
//! output is `y_n` rescaled to unit magnitude and multiplied by `p_y`.
//!
//! Training targets express the high-end record in the input's normalized
//! units, `y_ref = high / p_x`, so the decoder learns the relative peak as
//! well as the shape. The shape loss `‖y_n − y_ref‖₂ + ‖y_n − y_ref‖∞`
//! updates only the encoder and decoder; the peak loss `|p_y − p_ref|`
//! updates only the PPN, which sees `z` as a constant.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, backward_into, forward, forward_batch, Activation, AdamConfig, AdamState, DenseLayer, ParamSet,
};
use crate::signal::{normalize, ShockSignal, SignalPair, SIGNAL_LEN};
use crate::synth::stream_rng;

const TRUNK_STREAM: u64 = 1;
const PPN_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;
const INFERENCE_CHUNK: usize = 64;

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibArch {
    pub signal_len: usize,
    pub hidden: usize,
    pub latent: usize,
    pub ppn_compress: usize,
    pub ppn_hidden: usize,
    /// Normalizing constant in g for the peak entering and leaving the PPN.
    pub peak_scale: f64,
}

impl Default for CalibArch {
    fn default() -> Self {
        Self {
            signal_len: SIGNAL_LEN,
            hidden: 1024,
            latent: 256,
            ppn_compress: 8,
            ppn_hidden: 16,
            peak_scale: 10_000.0,
        }
    }
}

impl CalibArch {
    /// Small network for gradient checks: hidden width is four times the
    /// latent width, as in the full-size model.
    pub fn reduced(signal_len: usize, latent: usize, ppn_compress: usize) -> Self {
        Self {
            signal_len,
            hidden: 4 * latent,
            latent,
            ppn_compress,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.signal_len, self.hidden, self.latent, self.ppn_compress, self.ppn_hidden];
        if dims.contains(&0) || !(self.peak_scale > 0.0 && self.peak_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!("bad architecture {self:?}")));
        }
        Ok(())
    }

    pub fn encoder_layers(&self) -> Vec<DenseLayer> {
        vec![
            DenseLayer::new(self.signal_len, self.hidden, Activation::Relu),
            DenseLayer::new(self.hidden, self.latent, Activation::Identity),
        ]
    }

    pub fn decoder_layers(&self) -> Vec<DenseLayer> {
        vec![
            DenseLayer::new(self.latent, self.hidden, Activation::Relu),
            DenseLayer::new(self.hidden, self.signal_len, Activation::Identity),
        ]
    }

    pub fn compress_layers(&self) -> Vec<DenseLayer> {
        vec![DenseLayer::new(self.latent, self.ppn_compress, Activation::Relu)]
    }

    pub fn head_layers(&self) -> Vec<DenseLayer> {
        vec![
            DenseLayer::new(self.ppn_compress + 1, self.ppn_hidden, Activation::Relu),
            DenseLayer::new(self.ppn_hidden, 1, Activation::Identity),
        ]
    }
}

/// Switches for the ablation variants. The full model has all three set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub ppn_uses_z: bool,
    pub use_linf_term: bool,
    pub ppn_residual: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            ppn_uses_z: true,
            use_linf_term: true,
            ppn_residual: true,
        }
    }
}

/// Encoder (θ₁) and decoder (θ₂).
#[derive(Debug, Clone, PartialEq)]
pub struct Trunk {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
}

impl Trunk {
    fn init(arch: &CalibArch, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, TRUNK_STREAM);
        Ok(Self {
            encoder: ParamSet::he_uniform(&arch.encoder_layers(), &mut rng)?,
            decoder: ParamSet::he_uniform(&arch.decoder_layers(), &mut rng)?,
        })
    }

    fn zeros(arch: &CalibArch) -> Result<Self> {
        Ok(Self {
            encoder: ParamSet::zeros(&arch.encoder_layers())?,
            decoder: ParamSet::zeros(&arch.decoder_layers())?,
        })
    }

    fn encode(&self, x_n: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(&self.encoder, x_n)?.0)
    }

    fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(&self.decoder, z)?.0)
    }

    /// Batched encode + decode returning `(z, y_n)`.
    fn run_batch(&self, x: &[f64], batch: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let z = forward_batch(&self.encoder, x, batch)?.into_output();
        let y = forward_batch(&self.decoder, &z, batch)?.into_output();
        Ok((z, y))
    }
}

/// Peak prediction network (φ): `z` compression followed by the residual head.
#[derive(Debug, Clone, PartialEq)]
pub struct Ppn {
    pub compress: ParamSet,
    pub head: ParamSet,
}

impl Ppn {
    fn init(arch: &CalibArch, seed: u64) -> Result<Self> {
        let mut rng = stream_rng(seed, PPN_STREAM);
        Ok(Self {
            compress: ParamSet::he_uniform(&arch.compress_layers(), &mut rng)?,
            head: ParamSet::he_uniform(&arch.head_layers(), &mut rng)?,
        })
    }

    fn zeros(arch: &CalibArch) -> Result<Self> {
        Ok(Self {
            compress: ParamSet::zeros(&arch.compress_layers())?,
            head: ParamSet::zeros(&arch.head_layers())?,
        })
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.compress.flatten();
        v.extend_from_slice(self.head.values());
        v
    }

    pub fn unflatten(arch: &CalibArch, v: &[f64]) -> Result<Self> {
        let compress = ParamSet::zeros(&arch.compress_layers())?;
        let split = compress.len();
        if v.len() < split {
            return Err(Error::DimensionMismatch {
                expected: split,
                actual: v.len(),
            });
        }
        Ok(Self {
            compress: ParamSet::unflatten(&arch.compress_layers(), v[..split].to_vec())?,
            head: ParamSet::unflatten(&arch.head_layers(), v[split..].to_vec())?,
        })
    }
}

/// Assembles the PPN head input `[features, p_x / scale]` row by row.
fn head_input(features: &[f64], p_x: &[f64], arch: &CalibArch) -> Vec<f64> {
    let mut out = Vec::with_capacity(p_x.len() * (arch.ppn_compress + 1));
    for (row, p) in features.chunks_exact(arch.ppn_compress).zip(p_x) {
        out.extend_from_slice(row);
        out.push(p / arch.peak_scale);
    }
    out
}

fn ppn_batch(ppn: &Ppn, arch: &CalibArch, flags: AblationFlags, z: &[f64], p_x: &[f64]) -> Result<Vec<f64>> {
    let batch = p_x.len();
    let zeros;
    let z_in = if flags.ppn_uses_z {
        z
    } else {
        zeros = vec![0.0; z.len()];
        &zeros
    };
    let features = forward_batch(&ppn.compress, z_in, batch)?.into_output();
    let out = forward_batch(&ppn.head, &head_input(&features, p_x, arch), batch)?.into_output();
    Ok(out
        .iter()
        .zip(p_x)
        .map(|(o, p)| if flags.ppn_residual { p + o * arch.peak_scale } else { o * arch.peak_scale })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibModel {
    pub arch: CalibArch,
    pub flags: AblationFlags,
    pub trunk: Trunk,
    pub ppn: Ppn,
}

impl CalibModel {
    /// He-uniform initialization from `seed`. The trunk and the PPN draw
    /// from separate streams, so models that differ only in PPN flags share
    /// an identical trunk.
    pub fn new(arch: CalibArch, flags: AblationFlags, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            flags,
            trunk: Trunk::init(&arch, seed)?,
            ppn: Ppn::init(&arch, seed)?,
        })
    }

    /// Every parameter zero.
    pub fn zeroed(arch: CalibArch, flags: AblationFlags) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            flags,
            trunk: Trunk::zeros(&arch)?,
            ppn: Ppn::zeros(&arch)?,
        })
    }

    fn check_len(&self, got: usize, expected: usize) -> Result<()> {
        if got != expected {
            return Err(Error::DimensionMismatch { expected, actual: got });
        }
        Ok(())
    }

    pub fn encode(&self, x_n: &[f64]) -> Result<Vec<f64>> {
        self.check_len(x_n.len(), self.arch.signal_len)?;
        self.trunk.encode(x_n)
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z.len(), self.arch.latent)?;
        self.trunk.decode(z)
    }

    pub fn ppn_predict(&self, p_x: f64, z: &[f64]) -> Result<f64> {
        if !(p_x > 0.0) {
            return Err(Error::NonPositivePeak(p_x));
        }
        self.check_len(z.len(), self.arch.latent)?;
        Ok(ppn_batch(&self.ppn, &self.arch, self.flags, z, &[p_x])?[0])
    }

    pub fn calibrate(&self, x_r: &ShockSignal) -> Result<ShockSignal> {
        self.check_len(x_r.len(), self.arch.signal_len)?;
        let n = normalize(x_r)?;
        let z = self.trunk.encode(&n.shape)?;
        let y_n = self.trunk.decode(&z)?;
        let p_y = self.ppn_predict(n.peak, &z)?;
        assemble(&y_n, p_y, x_r.sample_rate)
    }

    /// Batched [`calibrate`](Self::calibrate).
    pub fn calibrate_all(&self, inputs: &[ShockSignal]) -> Result<Vec<ShockSignal>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let (x, p_x) = normalized_rows(chunk, self.arch.signal_len)?;
            let (z, y) = self.trunk.run_batch(&x, chunk.len())?;
            let p_y = ppn_batch(&self.ppn, &self.arch, self.flags, &z, &p_x)?;
            for ((row, p), s) in y.chunks_exact(self.arch.signal_len).zip(p_y).zip(chunk) {
                out.push(assemble(row, p, s.sample_rate)?);
            }
        }
        Ok(out)
    }

    /// Encoder then decoder parameters as one flat vector.
    pub fn trunk_vector(&self) -> Vec<f64> {
        let mut v = self.trunk.encoder.flatten();
        v.extend_from_slice(self.trunk.decoder.values());
        v
    }

    pub fn with_trunk_vector(&self, v: &[f64]) -> Result<Self> {
        let split = self.trunk.encoder.len();
        if v.len() != split + self.trunk.decoder.len() {
            return Err(Error::DimensionMismatch {
                expected: split + self.trunk.decoder.len(),
                actual: v.len(),
            });
        }
        let mut out = self.clone();
        out.trunk.encoder = ParamSet::unflatten(self.trunk.encoder.layers(), v[..split].to_vec())?;
        out.trunk.decoder = ParamSet::unflatten(self.trunk.decoder.layers(), v[split..].to_vec())?;
        Ok(out)
    }

    pub fn with_ppn_vector(&self, v: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.ppn = Ppn::unflatten(&self.arch, v)?;
        Ok(out)
    }

    /// The encoder/decoder alone, used as the autoencoder baseline.
    pub fn autoencoder(&self) -> AutoEncoder {
        AutoEncoder {
            arch: self.arch,
            use_linf_term: self.flags.use_linf_term,
            trunk: self.trunk.clone(),
        }
    }
}

fn normalized_rows(signals: &[ShockSignal], len: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x = Vec::with_capacity(signals.len() * len);
    let mut p = Vec::with_capacity(signals.len());
    for s in signals {
        if s.len() != len {
            return Err(Error::DimensionMismatch {
                expected: len,
                actual: s.len(),
            });
        }
        let n = normalize(s)?;
        x.extend_from_slice(&n.shape);
        p.push(n.peak);
    }
    Ok((x, p))
}

/// `y_pred = y_n / max|y_n| · p_y`.
fn assemble(y_n: &[f64], p_y: f64, sample_rate: f64) -> Result<ShockSignal> {
    let m = y_n.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(m >= 1e-9) {
        return Err(Error::DegenerateDecode(m));
    }
    Ok(ShockSignal::new(y_n.iter().map(|v| v / m * p_y).collect(), sample_rate))
}

/// Encoder/decoder without a PPN. Its output keeps the decoder amplitude and
/// rescales by the input peak, `y_pred = y_n · p_x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub arch: CalibArch,
    pub use_linf_term: bool,
    pub trunk: Trunk,
}

impl AutoEncoder {
    pub fn new(arch: CalibArch, use_linf_term: bool, seed: u64) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            use_linf_term,
            trunk: Trunk::init(&arch, seed)?,
        })
    }

    pub fn predict(&self, x_r: &ShockSignal) -> Result<ShockSignal> {
        Ok(self.predict_all(std::slice::from_ref(x_r))?.remove(0))
    }

    pub fn predict_all(&self, inputs: &[ShockSignal]) -> Result<Vec<ShockSignal>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(INFERENCE_CHUNK) {
            let (x, p_x) = normalized_rows(chunk, self.arch.signal_len)?;
            let (_, y) = self.trunk.run_batch(&x, chunk.len())?;
            for ((row, p), s) in y.chunks_exact(self.arch.signal_len).zip(p_x).zip(chunk) {
                out.push(ShockSignal::new(row.iter().map(|v| v * p).collect(), s.sample_rate));
            }
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.trunk.encoder.len() + self.trunk.decoder.len()
    }
}

/// `‖y_n − y_ref‖₂ + ‖y_n − y_ref‖∞`; the second term only when `use_linf`.
pub fn loss_shape(y_n: &[f64], y_ref: &[f64], use_linf: bool) -> Result<f64> {
    if y_n.len() != y_ref.len() {
        return Err(Error::DimensionMismatch {
            expected: y_ref.len(),
            actual: y_n.len(),
        });
    }
    Ok(shape_term(y_n, y_ref, use_linf, None).0)
}

/// Shape loss for one sample; optionally writes `scale · ∂L/∂y_n` into
/// `grad`. Returns the loss and the L∞ arg-max index (first on ties).
fn shape_term(y: &[f64], t: &[f64], use_linf: bool, grad: Option<(&mut [f64], f64)>) -> (f64, usize) {
    let mut sq = 0.0;
    let mut worst = (0usize, -1.0f64);
    for (i, (a, b)) in y.iter().zip(t).enumerate() {
        let d = a - b;
        sq += d * d;
        if d.abs() > worst.1 {
            worst = (i, d.abs());
        }
    }
    let l2 = sq.sqrt();
    let loss = if use_linf { l2 + worst.1.max(0.0) } else { l2 };
    if let Some((g, scale)) = grad {
        let inv = if l2 > 0.0 { scale / l2 } else { 0.0 };
        for ((gi, a), b) in g.iter_mut().zip(y).zip(t) {
            *gi = (a - b) * inv;
        }
        if use_linf && worst.1 > 0.0 {
            let k = worst.0;
            g[k] += scale * (y[k] - t[k]).signum();
        }
    }
    (loss, worst.0)
}

/// `|p_y − p_ref|`.
pub fn loss_peak(p_y: f64, p_ref: f64) -> Result<f64> {
    if !(p_ref > 0.0) {
        return Err(Error::NonPositivePeak(p_ref));
    }
    Ok((p_y - p_ref).abs())
}

/// Subgradient of [`loss_peak`] with respect to `p_y`; zero at equality.
pub fn loss_peak_grad(p_y: f64, p_ref: f64) -> f64 {
    if p_y > p_ref {
        1.0
    } else if p_y < p_ref {
        -1.0
    } else {
        0.0
    }
}

/// Preprocessed training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub signal_len: usize,
    /// Normalized low-end shapes, row-major.
    pub x: Vec<f64>,
    /// High-end records divided by the low-end peak, row-major.
    pub target: Vec<f64>,
    pub p_x: Vec<f64>,
    pub p_ref: Vec<f64>,
}

impl TrainingSet {
    pub fn from_pairs(pairs: &[SignalPair], signal_len: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut set = Self {
            signal_len,
            x: Vec::with_capacity(pairs.len() * signal_len),
            target: Vec::with_capacity(pairs.len() * signal_len),
            p_x: Vec::with_capacity(pairs.len()),
            p_ref: Vec::with_capacity(pairs.len()),
        };
        for p in pairs {
            if p.low.len() != signal_len || p.high.len() != signal_len {
                return Err(Error::DimensionMismatch {
                    expected: signal_len,
                    actual: p.low.len().max(p.high.len()),
                });
            }
            let n = normalize(&p.low)?;
            let p_ref = p.high.max_abs();
            if !(p_ref > 0.0) {
                return Err(Error::NonPositivePeak(p_ref));
            }
            set.x.extend_from_slice(&n.shape);
            set.target.extend(p.high.samples.iter().map(|v| v / n.peak));
            set.p_x.push(n.peak);
            set.p_ref.push(p_ref);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.p_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_x.is_empty()
    }

    fn gather(&self, idx: &[usize]) -> Self {
        let l = self.signal_len;
        let mut out = Self {
            signal_len: l,
            x: Vec::with_capacity(idx.len() * l),
            target: Vec::with_capacity(idx.len() * l),
            p_x: Vec::with_capacity(idx.len()),
            p_ref: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            out.x.extend_from_slice(&self.x[i * l..(i + 1) * l]);
            out.target.extend_from_slice(&self.target[i * l..(i + 1) * l]);
            out.p_x.push(self.p_x[i]);
            out.p_ref.push(self.p_ref[i]);
        }
        out
    }
}

/// Gradient buffers laid out like a [`CalibModel`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub encoder: ParamSet,
    pub decoder: ParamSet,
    pub ppn: Ppn,
}

impl Gradients {
    pub fn zeros(arch: &CalibArch) -> Result<Self> {
        Ok(Self {
            encoder: ParamSet::zeros(&arch.encoder_layers())?,
            decoder: ParamSet::zeros(&arch.decoder_layers())?,
            ppn: Ppn::zeros(arch)?,
        })
    }
}

/// Batch-mean losses plus the discrete branch pattern behind them.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub shape_loss: f64,
    pub peak_loss: f64,
    pub regime: Vec<u8>,
}

fn relu_pattern(tape: &crate::nn::Tape, layers: &[DenseLayer], out: &mut Vec<u8>) {
    for (i, l) in layers.iter().enumerate() {
        if l.activation == Activation::Relu {
            out.extend(tape.activation(Some(i)).iter().map(|&a| (a > 0.0) as u8));
        }
    }
}

/// Shape loss of a batch; fills trunk gradients of the batch mean. Returns
/// the summed loss and `z`.
fn trunk_pass(
    trunk: &Trunk,
    batch: &TrainingSet,
    use_linf: bool,
    grads: Option<(&mut ParamSet, &mut ParamSet)>,
    regime: Option<&mut Vec<u8>>,
) -> Result<(f64, Vec<f64>)> {
    let n = batch.len();
    let l = batch.signal_len;
    let enc = forward_batch(&trunk.encoder, &batch.x, n)?;
    let dec = forward_batch(&trunk.decoder, enc.output(), n)?;
    let y = dec.output();
    let scale = 1.0 / n as f64;
    let mut dy = vec![0.0; y.len()];
    let mut total = 0.0;
    let mut argmax = Vec::with_capacity(n);
    for ((yr, tr), gr) in y.chunks_exact(l).zip(batch.target.chunks_exact(l)).zip(dy.chunks_exact_mut(l)) {
        let (loss, k) = shape_term(yr, tr, use_linf, Some((gr, scale)));
        total += loss;
        argmax.push((k, (yr[k] - tr[k]) > 0.0));
    }
    if let Some(r) = regime {
        relu_pattern(&enc, trunk.encoder.layers(), r);
        relu_pattern(&dec, trunk.decoder.layers(), r);
        if use_linf {
            for (k, s) in argmax {
                r.extend_from_slice(&(k as u64).to_le_bytes());
                r.push(s as u8);
            }
        }
    }
    if let Some((ge, gd)) = grads {
        let dz = backward_into(&trunk.decoder, &dec, &dy, gd, true)?.expect("input gradient requested");
        backward_into(&trunk.encoder, &enc, &dz, ge, false)?;
    }
    Ok((total, enc.into_output()))
}

/// Peak loss of a batch given a detached `z`; fills PPN gradients of the
/// batch mean. Returns the summed loss.
#[allow(clippy::too_many_arguments)]
fn ppn_pass(
    ppn: &Ppn,
    arch: &CalibArch,
    flags: AblationFlags,
    z: &[f64],
    p_x: &[f64],
    p_ref: &[f64],
    grads: Option<&mut Ppn>,
    regime: Option<&mut Vec<u8>>,
) -> Result<f64> {
    let n = p_x.len();
    let zeros;
    let z_in = if flags.ppn_uses_z {
        z
    } else {
        zeros = vec![0.0; z.len()];
        &zeros
    };
    let comp = forward_batch(&ppn.compress, z_in, n)?;
    let head = forward_batch(&ppn.head, &head_input(comp.output(), p_x, arch), n)?;
    let mut total = 0.0;
    let mut d_out = Vec::with_capacity(n);
    let mut signs = Vec::with_capacity(n);
    for ((o, px), pr) in head.output().iter().zip(p_x).zip(p_ref) {
        let p_y = if flags.ppn_residual { px + o * arch.peak_scale } else { o * arch.peak_scale };
        total += (p_y - pr).abs();
        let s = loss_peak_grad(p_y, *pr);
        signs.push((s + 1.0) as u8);
        d_out.push(s * arch.peak_scale / n as f64);
    }
    if let Some(r) = regime {
        relu_pattern(&comp, ppn.compress.layers(), r);
        relu_pattern(&head, ppn.head.layers(), r);
        r.extend(signs);
    }
    if let Some(g) = grads {
        let d_in = backward_into(&ppn.head, &head, &d_out, &mut g.head, true)?.expect("input gradient requested");
        let width = arch.ppn_compress;
        let d_feat: Vec<f64> = d_in
            .chunks_exact(width + 1)
            .flat_map(|row| row[..width].iter().copied())
            .collect();
        // the gradient stops here: nothing flows back into z
        backward_into(&ppn.compress, &comp, &d_feat, &mut g.compress, false)?;
    }
    Ok(total)
}

/// Which loss terms to differentiate in [`objective`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub shape: bool,
    pub peak: bool,
}

/// Batch-mean losses over all of `set` and their gradients: the shape loss
/// with respect to the trunk, the peak loss with respect to the PPN. Terms
/// that are switched off leave their gradient buffers at zero.
pub fn objective(model: &CalibModel, set: &TrainingSet, terms: LossTerms) -> Result<(Evaluation, Gradients)> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if set.signal_len != model.arch.signal_len {
        return Err(Error::DimensionMismatch {
            expected: model.arch.signal_len,
            actual: set.signal_len,
        });
    }
    let mut grads = Gradients::zeros(&model.arch)?;
    let mut regime = Vec::new();
    let n = set.len() as f64;
    let (shape_sum, z) = trunk_pass(
        &model.trunk,
        set,
        model.flags.use_linf_term,
        terms.shape.then_some((&mut grads.encoder, &mut grads.decoder)),
        Some(&mut regime),
    )?;
    let peak_sum = ppn_pass(
        &model.ppn,
        &model.arch,
        model.flags,
        &z,
        &set.p_x,
        &set.p_ref,
        terms.peak.then_some(&mut grads.ppn),
        Some(&mut regime),
    )?;
    Ok((
        Evaluation {
            shape_loss: shape_sum / n,
            peak_loss: peak_sum / n,
            regime,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 1,
        }
    }
}

/// Epoch-mean losses. `peak` is absent when no PPN was trained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub shape: f64,
    pub peak: Option<f64>,
}

struct HeadSlot<'a> {
    ppn: &'a mut Ppn,
    flags: AblationFlags,
    compress_state: AdamState,
    head_state: AdamState,
    grads: Ppn,
    peak_sum: f64,
}

/// Trains one trunk and any number of PPN heads on the same batches.
///
/// Because the shape loss never depends on the PPN and the PPN never sends
/// gradient into the trunk, each head ends exactly where it would if trained
/// alone with the same trunk initialization and seed.
fn fit(
    arch: &CalibArch,
    use_linf: bool,
    trunk: &mut Trunk,
    heads: Vec<(&mut Ppn, AblationFlags)>,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if set.signal_len != arch.signal_len {
        return Err(Error::DimensionMismatch {
            expected: arch.signal_len,
            actual: set.signal_len,
        });
    }
    let mut enc_state = AdamState::new(&trunk.encoder, cfg.adam);
    let mut dec_state = AdamState::new(&trunk.decoder, cfg.adam);
    let mut enc_grad = ParamSet::zeros(trunk.encoder.layers())?;
    let mut dec_grad = ParamSet::zeros(trunk.decoder.layers())?;
    let mut slots = heads
        .into_iter()
        .map(|(ppn, flags)| {
            Ok(HeadSlot {
                compress_state: AdamState::new(&ppn.compress, cfg.adam),
                head_state: AdamState::new(&ppn.head, cfg.adam),
                grads: Ppn::zeros(arch)?,
                ppn,
                flags,
                peak_sum: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = stream_rng(cfg.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut shape_trace = Vec::with_capacity(cfg.epochs);
    let mut peak_traces = vec![Vec::with_capacity(cfg.epochs); slots.len()];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut shape_sum = 0.0;
        for s in slots.iter_mut() {
            s.peak_sum = 0.0;
        }
        for idx in order.chunks(cfg.batch_size) {
            let batch = set.gather(idx);
            let (loss, z) = trunk_pass(trunk, &batch, use_linf, Some((&mut enc_grad, &mut dec_grad)), None)?;
            shape_sum += loss;
            adam_step(&mut trunk.encoder, &enc_grad, &mut enc_state)?;
            adam_step(&mut trunk.decoder, &dec_grad, &mut dec_state)?;
            for s in slots.iter_mut() {
                s.peak_sum += ppn_pass(
                    s.ppn,
                    arch,
                    s.flags,
                    &z,
                    &batch.p_x,
                    &batch.p_ref,
                    Some(&mut s.grads),
                    None,
                )?;
                adam_step(&mut s.ppn.compress, &s.grads.compress, &mut s.compress_state)?;
                adam_step(&mut s.ppn.head, &s.grads.head, &mut s.head_state)?;
            }
        }
        let n = set.len() as f64;
        shape_trace.push(shape_sum / n);
        for (trace, s) in peak_traces.iter_mut().zip(&slots) {
            trace.push(s.peak_sum / n);
        }
    }
    Ok((shape_trace, peak_traces))
}

fn epoch_losses(shape: &[f64], peak: Option<&[f64]>) -> Vec<EpochLoss> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &s)| EpochLoss {
            epoch: i + 1,
            shape: s,
            peak: peak.map(|p| p[i]),
        })
        .collect()
}

/// Jointly minimizes the shape loss over the trunk and the peak loss over
/// the PPN with Adam on shuffled mini-batches.
pub fn train(model: &mut CalibModel, pairs: &[SignalPair], cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    let set = TrainingSet::from_pairs(pairs, model.arch.signal_len)?;
    train_on(model, &set, cfg)
}

pub fn train_on(model: &mut CalibModel, set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    let flags = model.flags;
    let (shape, peaks) = fit(
        &model.arch,
        flags.use_linf_term,
        &mut model.trunk,
        vec![(&mut model.ppn, flags)],
        set,
        cfg,
    )?;
    Ok(epoch_losses(&shape, Some(&peaks[0])))
}

/// Trains several models that share an architecture, an L∞ setting and an
/// initial trunk, running the trunk once and every PPN head alongside it.
/// The result equals calling [`train`] on each model separately.
pub fn train_variants(models: &mut [CalibModel], set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<Vec<EpochLoss>>> {
    let Some((first, rest)) = models.split_first_mut() else {
        return Ok(Vec::new());
    };
    for m in rest.iter() {
        if m.arch != first.arch || m.flags.use_linf_term != first.flags.use_linf_term || m.trunk != first.trunk {
            return Err(Error::InvalidConfig(
                "variants must share architecture, L-infinity setting and initial trunk".into(),
            ));
        }
    }
    let arch = first.arch;
    let use_linf = first.flags.use_linf_term;
    let mut heads = vec![(&mut first.ppn, first.flags)];
    for m in rest.iter_mut() {
        heads.push((&mut m.ppn, m.flags));
    }
    let (shape, peaks) = fit(&arch, use_linf, &mut first.trunk, heads, set, cfg)?;
    for m in rest.iter_mut() {
        m.trunk = first.trunk.clone();
    }
    Ok(peaks.iter().map(|p| epoch_losses(&shape, Some(p))).collect())
}

/// Trains only the encoder/decoder on the shape loss.
pub fn train_autoencoder(ae: &mut AutoEncoder, set: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    let (shape, _) = fit(&ae.arch, ae.use_linf_term, &mut ae.trunk, Vec::new(), set, cfg)?;
    Ok(epoch_losses(&shape, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, GradCheckConfig, Probe};
    use crate::signal::SAMPLE_RATE;
    use crate::synth::{generate_dataset, LowEndModel, RigConfig};
    use rand::Rng;

    fn tiny() -> CalibArch {
        CalibArch::reduced(30, 8, 4)
    }

    fn random_set(arch: &CalibArch, n: usize, seed: u64) -> TrainingSet {
        let mut rng = stream_rng(seed, 99);
        let l = arch.signal_len;
        let mut x = Vec::new();
        let mut target = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = row.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            x.extend(row.iter().map(|v| v / m));
            target.extend((0..l).map(|_| rng.gen_range(-1.0..1.0)));
        }
        TrainingSet {
            signal_len: l,
            x,
            target,
            p_x: (0..n).map(|_| rng.gen_range(500.0..8000.0)).collect(),
            p_ref: (0..n).map(|_| rng.gen_range(500.0..8000.0)).collect(),
        }
    }

    fn signal(len: usize, f: impl Fn(usize) -> f64) -> ShockSignal {
        ShockSignal::new((0..len).map(f).collect(), SAMPLE_RATE)
    }

    #[test]
    fn default_dimensions() {
        let arch = CalibArch::default();
        let model = CalibModel::zeroed(arch, AblationFlags::default()).unwrap();
        let z = model.encode(&vec![0.0; 3000]).unwrap();
        assert_eq!(z.len(), 256);
        assert!(z.iter().all(|&v| v == 0.0));
        let y = model.decode(&z).unwrap();
        assert_eq!(y.len(), 3000);
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(matches!(model.encode(&[0.0; 10]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(model.decode(&[0.0; 10]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_ppn_residual_identity() {
        let arch = tiny();
        let z = vec![0.3; arch.latent];
        let full = CalibModel::zeroed(arch, AblationFlags::default()).unwrap();
        assert_eq!(full.ppn_predict(1234.5, &z).unwrap(), 1234.5);
        let direct = CalibModel::zeroed(
            arch,
            AblationFlags {
                ppn_residual: false,
                ..AblationFlags::default()
            },
        )
        .unwrap();
        assert_eq!(direct.ppn_predict(1234.5, &z).unwrap(), 0.0);
        assert!(matches!(full.ppn_predict(0.0, &z), Err(Error::NonPositivePeak(_))));
    }

    #[test]
    fn calibrate_preserves_peak_with_zero_ppn() {
        let arch = tiny();
        let mut model = CalibModel::new(arch, AblationFlags::default(), 5).unwrap();
        model.ppn = Ppn::zeros(&arch).unwrap();
        let x = signal(30, |i| ((i as f64) * 0.4).sin() * 700.0 + 20.0);
        let y = model.calibrate(&x).unwrap();
        assert_eq!(y.len(), 30);
        assert!(y.samples.iter().all(|v| v.is_finite()));
        assert!((y.max_abs() - x.max_abs()).abs() <= 1e-9 * x.max_abs());
    }

    #[test]
    fn calibrate_output_peak_is_ppn_prediction() {
        let arch = tiny();
        let model = CalibModel::new(arch, AblationFlags::default(), 8).unwrap();
        let x = signal(30, |i| ((i as f64) * 0.9).cos() * 300.0);
        let n = normalize(&x).unwrap();
        let z = model.encode(&n.shape).unwrap();
        let p_y = model.ppn_predict(n.peak, &z).unwrap();
        let y = model.calibrate(&x).unwrap();
        assert!((y.max_abs() - p_y.abs()).abs() <= 1e-9 * p_y.abs());
        let batch = model.calibrate_all(&[x.clone(), x.scaled(2.0)]).unwrap();
        for (a, b) in batch[0].samples.iter().zip(&y.samples) {
            assert!((a - b).abs() <= 1e-9 * p_y.abs());
        }
    }

    #[test]
    fn calibrate_errors() {
        let arch = tiny();
        let model = CalibModel::zeroed(arch, AblationFlags::default()).unwrap();
        assert!(matches!(model.calibrate(&signal(30, |_| 0.0)), Err(Error::DegenerateSignal)));
        assert!(matches!(model.calibrate(&signal(30, |i| i as f64 + 1.0)), Err(Error::DegenerateDecode(_))));
        assert!(matches!(model.calibrate(&signal(12, |i| i as f64)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn shape_is_scale_invariant() {
        let arch = tiny();
        let model = CalibModel::new(arch, AblationFlags::default(), 3).unwrap();
        let x = signal(30, |i| ((i as f64) * 0.7).sin() * 100.0);
        let a = model.trunk.decode(&model.encode(&normalize(&x).unwrap().shape).unwrap()).unwrap();
        let b = model
            .trunk
            .decode(&model.encode(&normalize(&x.scaled(37.0)).unwrap().shape).unwrap())
            .unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-12 * (1.0 + p.abs()));
        }
    }

    #[test]
    fn shape_loss_examples() {
        let zero = vec![0.0; 3000];
        assert_eq!(loss_shape(&zero, &zero, true).unwrap(), 0.0);
        let mut d = zero.clone();
        d[0] = 1.0;
        assert_eq!(loss_shape(&d, &zero, true).unwrap(), 2.0);
        d[0] = 3.0;
        d[1] = 4.0;
        assert_eq!(loss_shape(&d, &zero, true).unwrap(), 9.0);
        assert_eq!(loss_shape(&d, &zero, false).unwrap(), 5.0);
        assert!(matches!(loss_shape(&d, &[0.0; 3], true), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn linf_gradient_hits_only_argmax() {
        let y = [0.1, -0.5, 0.2, 0.0];
        let t = [0.0; 4];
        let mut with = [0.0; 4];
        let mut without = [0.0; 4];
        shape_term(&y, &t, true, Some((&mut with, 1.0)));
        shape_term(&y, &t, false, Some((&mut without, 1.0)));
        let diff: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
        assert_eq!(diff, vec![0.0, -1.0, 0.0, 0.0]);
    }

    #[test]
    fn peak_loss_examples() {
        assert_eq!(loss_peak(100.0, 100.0).unwrap(), 0.0);
        assert_eq!(loss_peak(110.0, 100.0).unwrap(), 10.0);
        assert_eq!(loss_peak_grad(110.0, 100.0), 1.0);
        assert_eq!(loss_peak_grad(90.0, 100.0), -1.0);
        assert_eq!(loss_peak_grad(100.0, 100.0), 0.0);
        assert!(matches!(loss_peak(1.0, 0.0), Err(Error::NonPositivePeak(_))));
    }

    fn shape_probe(m: &CalibModel, set: &TrainingSet) -> Probe {
        let mut regime = Vec::new();
        let (sum, _) = trunk_pass(&m.trunk, set, m.flags.use_linf_term, None, Some(&mut regime)).unwrap();
        Probe {
            value: sum / set.len() as f64,
            regime,
        }
    }

    #[test]
    fn shape_loss_gradients_match_finite_differences() {
        for use_linf in [true, false] {
            for seed in 0..4 {
                let flags = AblationFlags {
                    use_linf_term: use_linf,
                    ..AblationFlags::default()
                };
                let model = CalibModel::new(tiny(), flags, seed).unwrap();
                let set = random_set(&model.arch, 3, seed);
                let (_, grads) = objective(&model, &set, LossTerms { shape: true, peak: false }).unwrap();
                let mut analytic = grads.encoder.flatten();
                analytic.extend_from_slice(grads.decoder.values());
                let report = grad_check(
                    |v| shape_probe(&model.with_trunk_vector(v).unwrap(), &set),
                    &model.trunk_vector(),
                    &analytic,
                    &GradCheckConfig {
                        seed,
                        ..GradCheckConfig::default()
                    },
                );
                assert!(report.passed, "linf={use_linf} seed={seed}: {report:?}");
            }
        }
    }

    #[test]
    fn peak_loss_gradients_match_finite_differences() {
        for seed in 0..4 {
            let model = CalibModel::new(tiny(), AblationFlags::default(), seed).unwrap();
            let set = random_set(&model.arch, 3, seed);
            let (_, z) = trunk_pass(&model.trunk, &set, true, None, None).unwrap();
            let (_, grads) = objective(&model, &set, LossTerms { shape: false, peak: true }).unwrap();
            let probe = |v: &[f64]| {
                let ppn = Ppn::unflatten(&model.arch, v).unwrap();
                let mut regime = Vec::new();
                let sum = ppn_pass(&ppn, &model.arch, model.flags, &z, &set.p_x, &set.p_ref, None, Some(&mut regime))
                    .unwrap();
                Probe {
                    value: sum / set.len() as f64,
                    regime,
                }
            };
            let report = grad_check(probe, &model.ppn.flatten(), &grads.ppn.flatten(), &GradCheckConfig::default());
            assert!(report.passed, "seed={seed}: {report:?}");
            assert_eq!(report.checked + report.skipped, model.ppn.flatten().len());
        }
    }

    #[test]
    fn gradient_partition() {
        let model = CalibModel::new(tiny(), AblationFlags::default(), 11).unwrap();
        let set = random_set(&model.arch, 4, 11);
        let (eval, grads) = objective(&model, &set, LossTerms { shape: false, peak: true }).unwrap();
        assert!(grads.encoder.values().iter().all(|&g| g == 0.0));
        assert!(grads.decoder.values().iter().all(|&g| g == 0.0));
        assert!(grads.ppn.flatten().iter().any(|&g| g != 0.0));

        // perturbing φ leaves the shape loss untouched
        let mut other = model.clone();
        for v in other.ppn.head.values_mut() {
            *v += 0.25;
        }
        let (eval2, _) = objective(&other, &set, LossTerms { shape: true, peak: true }).unwrap();
        assert_eq!(eval.shape_loss, eval2.shape_loss);
        assert_ne!(eval.peak_loss, eval2.peak_loss);
    }

    #[test]
    fn shape_loss_dominates_l2_only() {
        let set = random_set(&tiny(), 5, 2);
        let model = CalibModel::new(tiny(), AblationFlags::default(), 2).unwrap();
        let l2only = CalibModel {
            flags: AblationFlags {
                use_linf_term: false,
                ..model.flags
            },
            ..model.clone()
        };
        let a = objective(&model, &set, LossTerms { shape: true, peak: true }).unwrap().0;
        let b = objective(&l2only, &set, LossTerms { shape: true, peak: true }).unwrap().0;
        assert!(a.shape_loss >= b.shape_loss);
    }

    fn toy_pairs(n: usize) -> Vec<SignalPair> {
        let cfg = RigConfig {
            n_pairs: n + 1,
            train_count: n,
            master_seed: 21,
            ..RigConfig::default()
        };
        generate_dataset(&cfg, &LowEndModel::default()).unwrap().train
    }

    fn short_pairs(n: usize, len: usize) -> Vec<SignalPair> {
        toy_pairs(n)
            .into_iter()
            .map(|p| {
                let cut = |s: &ShockSignal| ShockSignal::new(s.samples[480..480 + len].to_vec(), s.sample_rate);
                SignalPair::new(cut(&p.low), cut(&p.high), p.drop_id).unwrap()
            })
            .collect()
    }

    #[test]
    fn one_epoch_smoke() {
        let pairs = toy_pairs(4);
        let mut model = CalibModel::new(CalibArch::default(), AblationFlags::default(), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let trace = train(&mut model, &pairs, &cfg).unwrap();
        assert_eq!(trace.len(), 1);
        assert!(trace[0].shape.is_finite() && trace[0].peak.unwrap().is_finite());
        assert!(matches!(train(&mut model, &[], &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let pairs = short_pairs(24, 60);
        let arch = CalibArch::reduced(60, 8, 4);
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 8,
            seed: 4,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = CalibModel::new(arch, AblationFlags::default(), 4).unwrap();
            let trace = train(&mut m, &pairs, &cfg).unwrap();
            (m, trace)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        assert!(ta.last().unwrap().shape < ta[0].shape);
        assert!(ta.last().unwrap().peak.unwrap() < ta[0].peak.unwrap());
    }

    #[test]
    fn variants_equal_separate_training() {
        let pairs = short_pairs(12, 40);
        let set = TrainingSet::from_pairs(&pairs, 40).unwrap();
        let arch = CalibArch::reduced(40, 6, 3);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 5,
            seed: 9,
            ..TrainConfig::default()
        };
        let flag_sets = [
            AblationFlags::default(),
            AblationFlags {
                ppn_uses_z: false,
                ..AblationFlags::default()
            },
            AblationFlags {
                ppn_residual: false,
                ..AblationFlags::default()
            },
        ];
        let mut joint: Vec<CalibModel> = flag_sets.iter().map(|f| CalibModel::new(arch, *f, 9).unwrap()).collect();
        let joint_traces = train_variants(&mut joint, &set, &cfg).unwrap();
        for (i, f) in flag_sets.iter().enumerate() {
            let mut alone = CalibModel::new(arch, *f, 9).unwrap();
            let trace = train_on(&mut alone, &set, &cfg).unwrap();
            assert_eq!(alone, joint[i]);
            assert_eq!(trace, joint_traces[i]);
        }
        let mut ae = AutoEncoder::new(arch, true, 9).unwrap();
        train_autoencoder(&mut ae, &set, &cfg).unwrap();
        assert_eq!(ae, joint[0].autoencoder());

        let mut mixed = vec![
            CalibModel::new(arch, AblationFlags::default(), 9).unwrap(),
            CalibModel::new(
                arch,
                AblationFlags {
                    use_linf_term: false,
                    ..AblationFlags::default()
                },
                9,
            )
            .unwrap(),
        ];
        assert!(matches!(train_variants(&mut mixed, &set, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn autoencoder_scales_by_input_peak() {
        let arch = tiny();
        let ae = AutoEncoder::new(arch, true, 1).unwrap();
        let x = signal(30, |i| ((i as f64) * 0.3).sin() * 250.0);
        let y = ae.predict(&x).unwrap();
        let y_n = ae.trunk.decode(&ae.trunk.encode(&normalize(&x).unwrap().shape).unwrap()).unwrap();
        let p_x = x.max_abs();
        for (a, b) in y.samples.iter().zip(&y_n) {
            assert!((a - b * p_x).abs() <= 1e-9 * p_x);
        }
        assert_eq!(ae.param_count(), CalibModel::new(arch, AblationFlags::default(), 1).unwrap().trunk_vector().len());
    }
}
