//! Minimal multilayer perceptron over flat parameter vectors.
//!
//! Every network in the crate (ES policy, SAC policy, twin Q, state value) is a
//! [`NetSpec`] plus a [`ParamVector`]. Layers are stored back to back in the flat
//! vector: the weight matrix of a layer in row-major `[fan_out][fan_in]` order,
//! followed by its bias vector.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative given the pre-activation `z` and activation `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }

    fn code(self) -> u64 {
        match self {
            Activation::Relu => 1,
            Activation::Tanh => 2,
            Activation::Linear => 3,
        }
    }
}

/// Layer sizes and activations of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    input_dim: usize,
    hidden_dims: Vec<usize>,
    output_dim: usize,
    hidden_activation: Activation,
    output_activation: Activation,
    param_count: usize,
    hash: u64,
}

impl NetSpec {
    /// A network with ReLU hidden layers.
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        output_activation: Activation,
    ) -> Result<Self> {
        Self::with_activations(
            input_dim,
            hidden_dims,
            output_dim,
            Activation::Relu,
            output_activation,
        )
    }

    pub fn with_activations(
        input_dim: usize,
        hidden_dims: &[usize],
        output_dim: usize,
        hidden_activation: Activation,
        output_activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || output_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(
                "network layer sizes must be positive".into(),
            ));
        }
        let mut spec = NetSpec {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim,
            hidden_activation,
            output_activation,
            param_count: 0,
            hash: 0,
        };
        spec.param_count = spec
            .layer_dims()
            .iter()
            .map(|&(fan_in, fan_out)| fan_in * fan_out + fan_out)
            .sum();
        spec.hash = spec.compute_hash();
        Ok(spec)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn hidden_dims(&self) -> &[usize] {
        &self.hidden_dims
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn output_activation(&self) -> Activation {
        self.output_activation
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim));
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Stable 64-bit identifier of the architecture (FNV-1a over its shape).
    pub fn spec_hash(&self) -> u64 {
        self.hash
    }

    fn compute_hash(&self) -> u64 {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut words = vec![self.input_dim as u64, self.hidden_dims.len() as u64];
        words.extend(self.hidden_dims.iter().map(|&h| h as u64));
        words.push(self.output_dim as u64);
        words.push(self.hidden_activation.code());
        words.push(self.output_activation.code());
        let mut h = OFFSET;
        for w in words {
            for b in w.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        }
        h
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count);
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)));
            values.extend(std::iter::repeat_n(0.0, fan_out));
        }
        ParamVector {
            values,
            spec_hash: self.hash,
        }
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector {
            values: vec![0.0; self.param_count],
            spec_hash: self.hash,
        }
    }

    /// Borrowed per-layer views into a flat parameter slice.
    pub fn layers<'a>(&self, params: &'a [f64]) -> Vec<LayerView<'a>> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut offset = 0;
        for (fan_in, fan_out) in self.layer_dims() {
            let w_end = offset + fan_in * fan_out;
            let b_end = w_end + fan_out;
            out.push(LayerView {
                fan_in,
                fan_out,
                weights: &params[offset..w_end],
                biases: &params[w_end..b_end],
            });
            offset = b_end;
        }
        out
    }

    pub fn unflatten(&self, params: &ParamVector) -> Result<Vec<Layer>> {
        self.check_params(params)?;
        Ok(self
            .layers(params.as_slice())
            .into_iter()
            .map(|l| Layer {
                weights: l.weights.to_vec(),
                biases: l.biases.to_vec(),
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<ParamVector> {
        check_dim("flatten layer count", self.num_layers(), layers.len())?;
        let mut values = Vec::with_capacity(self.param_count);
        for (layer, (fan_in, fan_out)) in layers.iter().zip(self.layer_dims()) {
            check_dim("flatten weights", fan_in * fan_out, layer.weights.len())?;
            check_dim("flatten biases", fan_out, layer.biases.len())?;
            values.extend_from_slice(&layer.weights);
            values.extend_from_slice(&layer.biases);
        }
        ParamVector::new(self, values)
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        check_dim("parameter vector", self.param_count, params.len())?;
        if params.spec_hash != self.hash {
            return Err(Error::InvalidArgument(format!(
                "parameter vector belongs to spec {:016x}, not {:016x}",
                params.spec_hash, self.hash
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: &'a [f64],
    pub biases: &'a [f64],
}

/// Owned copy of one layer; `weights` is row-major `[fan_out][fan_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Flat, finite parameter vector tagged with the hash of its [`NetSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    spec_hash: u64,
}

impl ParamVector {
    pub fn new(spec: &NetSpec, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector", spec.param_count, values.len())?;
        check_finite(&values, "parameter vector")?;
        Ok(ParamVector {
            values,
            spec_hash: spec.hash,
        })
    }

    /// A vector for the same spec with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector", self.values.len(), values.len())?;
        check_finite(&values, "parameter vector")?;
        Ok(ParamVector {
            values,
            spec_hash: self.spec_hash,
        })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec_hash
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Little-endian: spec hash (u64), length (u64), then each value as f64.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.spec_hash.to_le_bytes())?;
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, spec: &NetSpec) -> Result<Self> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let hash = u64::from_le_bytes(word);
        if hash != spec.spec_hash() {
            return Err(Error::Checkpoint(format!(
                "spec hash {hash:016x} does not match expected {:016x}",
                spec.spec_hash()
            )));
        }
        r.read_exact(&mut word)?;
        let len = u64::from_le_bytes(word) as usize;
        if len != spec.param_count() {
            return Err(Error::Checkpoint(format!(
                "stored length {len} does not match parameter count {}",
                spec.param_count()
            )));
        }
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            r.read_exact(&mut word)?;
            values.push(f64::from_le_bytes(word));
        }
        ParamVector::new(spec, values)
    }
}

pub(crate) fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{what} has non-finite entry {} at index {i}",
            values[i]
        )));
    }
    Ok(())
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `activations[l]` is the input to layer `l`; the last entry is the output.
    activations: Vec<Vec<f64>>,
    preacts: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace has an output")
    }

    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

pub fn forward(params: &ParamVector, spec: &NetSpec, input: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_dim("network input", spec.input_dim, input.len())?;
    let layers = spec.layers(params.as_slice());
    let last = layers.len() - 1;
    let mut x = input.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let act = if l == last {
            spec.output_activation
        } else {
            spec.hidden_activation
        };
        x = affine(layer, &x)
            .into_iter()
            .map(|z| act.apply(z))
            .collect();
    }
    Ok(x)
}

pub fn forward_trace(params: &ParamVector, spec: &NetSpec, input: &[f64]) -> Result<Trace> {
    spec.check_params(params)?;
    check_dim("network input", spec.input_dim, input.len())?;
    let layers = spec.layers(params.as_slice());
    let last = layers.len() - 1;
    let mut activations = Vec::with_capacity(layers.len() + 1);
    let mut preacts = Vec::with_capacity(layers.len());
    activations.push(input.to_vec());
    for (l, layer) in layers.iter().enumerate() {
        let act = if l == last {
            spec.output_activation
        } else {
            spec.hidden_activation
        };
        let z = affine(layer, &activations[l]);
        activations.push(z.iter().map(|&v| act.apply(v)).collect());
        preacts.push(z);
    }
    Ok(Trace {
        activations,
        preacts,
    })
}

#[inline]
fn affine(layer: &LayerView<'_>, x: &[f64]) -> Vec<f64> {
    layer
        .weights
        .chunks_exact(layer.fan_in)
        .zip(layer.biases)
        .map(|(row, &b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
        .collect()
}

/// Backpropagates `upstream` (dL/d output) through a recorded pass.
///
/// Parameter gradients are *added* into `param_grads` when given; the gradient
/// with respect to the network input is returned.
pub fn backward_trace(
    params: &ParamVector,
    spec: &NetSpec,
    trace: &Trace,
    upstream: &[f64],
    mut param_grads: Option<&mut [f64]>,
) -> Result<Vec<f64>> {
    spec.check_params(params)?;
    check_dim("upstream gradient", spec.output_dim, upstream.len())?;
    if let Some(g) = param_grads.as_deref() {
        check_dim("parameter gradient buffer", spec.param_count, g.len())?;
    }
    let layers = spec.layers(params.as_slice());
    let last = layers.len() - 1;
    // Offsets of each layer's block in the flat vector.
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in &layers {
        offsets.push(off);
        off += layer.fan_in * layer.fan_out + layer.fan_out;
    }

    let mut delta = upstream.to_vec();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let act = if l == last {
            spec.output_activation
        } else {
            spec.hidden_activation
        };
        let z = &trace.preacts[l];
        let a = &trace.activations[l + 1];
        for j in 0..layer.fan_out {
            delta[j] *= act.derivative(z[j], a[j]);
        }
        let x = &trace.activations[l];
        if let Some(g) = param_grads.as_deref_mut() {
            let base = offsets[l];
            let (gw, gb) = g[base..base + layer.fan_in * layer.fan_out + layer.fan_out]
                .split_at_mut(layer.fan_in * layer.fan_out);
            for (j, (row, d)) in gw.chunks_exact_mut(layer.fan_in).zip(&delta).enumerate() {
                if *d != 0.0 {
                    for (gij, xi) in row.iter_mut().zip(x) {
                        *gij += d * xi;
                    }
                }
                gb[j] += d;
            }
        }
        let mut prev = vec![0.0; layer.fan_in];
        for (row, d) in layer.weights.chunks_exact(layer.fan_in).zip(&delta) {
            if *d != 0.0 {
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
        }
        delta = prev;
    }
    Ok(delta)
}

/// Gradients of `upstream · f(input)` with respect to parameters and input.
pub fn backward(
    params: &ParamVector,
    spec: &NetSpec,
    input: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dim("upstream gradient", spec.output_dim, upstream.len())?;
    let trace = forward_trace(params, spec, input)?;
    let mut grads = vec![0.0; spec.param_count];
    let input_grad = backward_trace(params, spec, &trace, upstream, Some(&mut grads))?;
    Ok((grads, input_grad))
}

/// Moment estimates for Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyperparameters(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyperparameters(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam descent step, in place.
pub fn adam_step(
    params: &mut ParamVector,
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    check_dim("adam gradients", params.len(), grads.len())?;
    check_dim("adam first moment", params.len(), state.first_moment.len())?;
    check_dim(
        "adam second moment",
        params.len(),
        state.second_moment.len(),
    )?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    check_finite(grads, "gradient")?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let values = params.values_mut();
    for i in 0..values.len() {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / c1;
        let v_hat = v / c2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}
