//! Dense feed-forward networks with hand-written reverse-mode gradients.
//!
//! A [`ParamSet`] owns every weight and bias of one multilayer perceptron in a
//! single flat buffer; each [`DenseLayer`] is a view into it (weights stored
//! `outputs × inputs` row-major, then biases). Batched activations are
//! row-major `batch × width`.

mod adam;
pub mod gemm;
mod gradcheck;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use gemm::{gemm, MatRef};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Probe};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                if *x <= 0.0 {
                    *x = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Parameters of one MLP with stable flat indexing.
#[derive(Debug)]
pub struct ParamSet {
    layers: Vec<DenseLayer>,
    offsets: Vec<usize>,
    values: Vec<f64>,
    generation: u64,
}

impl Clone for ParamSet {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            offsets: self.offsets.clone(),
            values: self.values.clone(),
            generation: next_generation(),
        }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers && self.values == other.values
    }
}

impl ParamSet {
    /// All-zero parameters for the given layer stack.
    pub fn zeros(layers: &[DenseLayer]) -> Result<Self> {
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::DimensionMismatch {
                    expected: w[0].outputs,
                    actual: w[1].inputs,
                });
            }
        }
        let mut offsets = Vec::with_capacity(layers.len());
        let mut total = 0;
        for l in layers {
            offsets.push(total);
            total += l.param_count();
        }
        Ok(Self {
            layers: layers.to_vec(),
            offsets,
            values: vec![0.0; total],
            generation: next_generation(),
        })
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(layers: &[DenseLayer], rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(layers)?;
        for i in 0..p.layers.len() {
            let limit = (6.0 / p.layers[i].inputs as f64).sqrt();
            for w in p.weights_mut(i) {
                *w = rng.gen_range(-limit..limit);
            }
        }
        Ok(p)
    }

    pub fn unflatten(layers: &[DenseLayer], values: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(layers)?;
        if values.len() != p.values.len() {
            return Err(Error::DimensionMismatch {
                expected: p.values.len(),
                actual: values.len(),
            });
        }
        p.values = values;
        Ok(p)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access to the flat buffer. Invalidates outstanding tapes.
    pub fn values_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.values
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        let o = self.offsets[layer];
        &self.values[o..o + l.inputs * l.outputs]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let l = &self.layers[layer];
        let o = self.offsets[layer] + l.inputs * l.outputs;
        &self.values[o..o + l.outputs]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        self.generation = next_generation();
        let l = self.layers[layer];
        let o = self.offsets[layer];
        &mut self.values[o..o + l.inputs * l.outputs]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        self.generation = next_generation();
        let l = self.layers[layer];
        let o = self.offsets[layer] + l.inputs * l.outputs;
        &mut self.values[o..o + l.outputs]
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.layers == other.layers
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    generation: u64,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
}

impl Tape {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("tape holds the input at least")
    }

    pub fn into_output(mut self) -> Vec<f64> {
        self.acts.pop().expect("tape holds the input at least")
    }

    /// Activation after layer `layer` (0-based); `None` for the input.
    pub fn activation(&self, layer: Option<usize>) -> &[f64] {
        match layer {
            None => &self.acts[0],
            Some(l) => &self.acts[l + 1],
        }
    }
}

/// Forward pass over `batch` rows packed row-major in `x`.
pub fn forward_batch(net: &ParamSet, x: &[f64], batch: usize) -> Result<Tape> {
    let width = net.input_width();
    if x.len() != width * batch {
        return Err(Error::DimensionMismatch {
            expected: width * batch,
            actual: x.len(),
        });
    }
    let mut acts = Vec::with_capacity(net.layers.len() + 1);
    acts.push(x.to_vec());
    for (i, l) in net.layers.iter().enumerate() {
        let mut y = Vec::with_capacity(batch * l.outputs);
        for _ in 0..batch {
            y.extend_from_slice(net.biases(i));
        }
        gemm(
            MatRef::row_major(&acts[i], batch, l.inputs),
            MatRef::row_major(net.weights(i), l.outputs, l.inputs).t(),
            1.0,
            &mut y,
        );
        l.activation.apply(&mut y);
        acts.push(y);
    }
    Ok(Tape {
        batch,
        generation: net.generation,
        acts,
    })
}

/// Single-sample forward pass.
pub fn forward(net: &ParamSet, x: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let tape = forward_batch(net, x, 1)?;
    Ok((tape.output().to_vec(), tape))
}

/// Gradients from a backward pass.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub params: ParamSet,
    pub input: Vec<f64>,
}

/// Reverse pass writing parameter gradients into `grads` (overwritten, not
/// accumulated). Returns the input gradient when `want_input` is set.
///
/// ReLU uses subgradient 0 at exactly zero pre-activation.
pub fn backward_into(
    net: &ParamSet,
    tape: &Tape,
    grad_out: &[f64],
    grads: &mut ParamSet,
    want_input: bool,
) -> Result<Option<Vec<f64>>> {
    if tape.generation != net.generation || tape.acts.len() != net.layers.len() + 1 {
        return Err(Error::StaleTape);
    }
    if !net.same_layout(grads) {
        return Err(Error::ShapeMismatch("gradient buffer layout differs from network".into()));
    }
    let batch = tape.batch;
    if grad_out.len() != batch * net.output_width() {
        return Err(Error::DimensionMismatch {
            expected: batch * net.output_width(),
            actual: grad_out.len(),
        });
    }
    grads.generation = next_generation();
    let mut delta = grad_out.to_vec();
    for i in (0..net.layers.len()).rev() {
        let l = net.layers[i];
        if l.activation == Activation::Relu {
            for (d, &a) in delta.iter_mut().zip(&tape.acts[i + 1]) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        let o = grads.offsets[i];
        let (gw, gb) = grads.values[o..o + l.param_count()].split_at_mut(l.inputs * l.outputs);
        gemm(
            MatRef::row_major(&delta, batch, l.outputs).t(),
            MatRef::row_major(&tape.acts[i], batch, l.inputs),
            0.0,
            gw,
        );
        gb.fill(0.0);
        for row in delta.chunks_exact(l.outputs) {
            for (b, d) in gb.iter_mut().zip(row) {
                *b += d;
            }
        }
        if i > 0 || want_input {
            let mut prev = vec![0.0; batch * l.inputs];
            gemm(
                MatRef::row_major(&delta, batch, l.outputs),
                MatRef::row_major(net.weights(i), l.outputs, l.inputs),
                0.0,
                &mut prev,
            );
            delta = prev;
        }
    }
    Ok(want_input.then_some(delta))
}

pub fn backward(net: &ParamSet, tape: &Tape, grad_out: &[f64]) -> Result<Backprop> {
    let mut params = ParamSet::zeros(&net.layers)?;
    let input = backward_into(net, tape, grad_out, &mut params, true)?.unwrap_or_default();
    Ok(Backprop { params, input })
}
