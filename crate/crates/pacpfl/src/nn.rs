//! Small dense feedforward networks over flattened parameter vectors.
//!
//! The GP layer treats a network as a pure function of `(params, x)`, so
//! parameters live in a flat `f64` vector rather than per-layer tensors.
//! Flattening order is layer-major: for each layer, the row-major weight
//! matrix (`output_dim x input_dim`) followed by the bias vector. Gradients
//! are computed by hand-written reverse mode; `backward` returns gradients
//! with respect to both the parameters and the input so callers can chain
//! through kernels and means.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Elementwise activation applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }

    /// Derivative expressed through the activation *output* `a`
    /// (for tanh, sigma'(z) = 1 - tanh(z)^2 = 1 - a^2).
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Linear => 1.0,
        }
    }
}

/// Architecture of one feedforward network.
///
/// `hidden_layers = 0` degenerates to a single affine map with the output
/// activation (`hidden_width` is then unused).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

impl NetSpec {
    /// Conventional spec: tanh hidden layers, linear output.
    pub fn new(input_dim: usize, hidden_layers: usize, hidden_width: usize, output_dim: usize) -> Self {
        NetSpec {
            input_dim,
            hidden_layers,
            hidden_width,
            output_dim,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Linear,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("net.input_dim", "must be at least 1"));
        }
        if self.output_dim == 0 {
            return Err(Error::config("net.output_dim", "must be at least 1"));
        }
        if self.hidden_layers > 0 && self.hidden_width == 0 {
            return Err(Error::config("net.hidden_width", "must be at least 1 when hidden layers are present"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        if self.hidden_layers == 0 {
            return vec![(self.input_dim, self.output_dim)];
        }
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        dims.push((self.input_dim, self.hidden_width));
        for _ in 1..self.hidden_layers {
            dims.push((self.hidden_width, self.hidden_width));
        }
        dims.push((self.hidden_width, self.output_dim));
        dims
    }

    /// Total length of the flattened parameter vector.
    #[must_use]
    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(fin, fout)| (fin + 1) * fout).sum()
    }

    fn activation_of_layer(&self, layer: usize, n_layers: usize) -> Activation {
        if layer + 1 == n_layers {
            self.output_activation
        } else {
            self.hidden_activation
        }
    }
}

/// Flattened parameter vector; construction rejects non-finite entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "non-finite parameter at flat index {i}: {}",
                values[i]
            )));
        }
        Ok(FlatParams { values })
    }

    #[must_use]
    pub fn zeros(len: usize) -> Self {
        FlatParams { values: vec![0.0; len] }
    }

    #[must_use]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[must_use]
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    #[must_use]
    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }
}

impl std::ops::Deref for FlatParams {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.values
    }
}

impl AsRef<[f64]> for FlatParams {
    fn as_ref(&self) -> &[f64] {
        &self.values
    }
}

fn check_shapes(spec: &NetSpec, params: &[f64], x: &[f64]) -> Result<()> {
    let want = spec.parameter_count();
    if params.len() != want {
        return Err(Error::shape(
            "net parameters",
            format!("expected {} parameters for spec, got {}", want, params.len()),
        ));
    }
    if x.len() != spec.input_dim {
        return Err(Error::shape(
            "net input",
            format!("layer 1 expects input of dim {}, got {}", spec.input_dim, x.len()),
        ));
    }
    Ok(())
}

/// Run the network forward. `params` must have length
/// `spec.parameter_count()`; `x` must have length `spec.input_dim`.
pub fn forward(spec: &NetSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    check_shapes(spec, params, x)?;
    let dims = spec.layer_dims();
    let mut activation = x.to_vec();
    let mut offset = 0;
    for (layer, &(fin, fout)) in dims.iter().enumerate() {
        let weights = &params[offset..offset + fin * fout];
        let biases = &params[offset + fin * fout..offset + (fin + 1) * fout];
        offset += (fin + 1) * fout;
        let act = spec.activation_of_layer(layer, dims.len());
        let mut next = Vec::with_capacity(fout);
        for i in 0..fout {
            let row = &weights[i * fin..(i + 1) * fin];
            let mut z = biases[i];
            for (w, a) in row.iter().zip(activation.iter()) {
                z += w * a;
            }
            next.push(act.apply(z));
        }
        activation = next;
    }
    Ok(activation)
}

/// Reverse-mode gradients of `upstream . output` with respect to the
/// parameters and the input: returns `(d/dparams, d/dx)` of
/// `sum_i upstream[i] * forward(spec, params, x)[i]`.
pub fn backward(spec: &NetSpec, params: &[f64], x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(spec, params, x)?;
    if upstream.len() != spec.output_dim {
        return Err(Error::shape(
            "net upstream gradient",
            format!("expected dim {}, got {}", spec.output_dim, upstream.len()),
        ));
    }
    let dims = spec.layer_dims();

    // Forward pass, keeping every layer's post-activation output.
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(dims.len() + 1);
    activations.push(x.to_vec());
    let mut offsets = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for (layer, &(fin, fout)) in dims.iter().enumerate() {
        offsets.push(offset);
        let weights = &params[offset..offset + fin * fout];
        let biases = &params[offset + fin * fout..offset + (fin + 1) * fout];
        offset += (fin + 1) * fout;
        let act = spec.activation_of_layer(layer, dims.len());
        let prev = activations.last().expect("at least the input activation");
        let mut next = Vec::with_capacity(fout);
        for i in 0..fout {
            let row = &weights[i * fin..(i + 1) * fin];
            let mut z = biases[i];
            for (w, a) in row.iter().zip(prev.iter()) {
                z += w * a;
            }
            next.push(act.apply(z));
        }
        activations.push(next);
    }

    // Reverse pass.
    let mut grad_params = vec![0.0; params.len()];
    let last_act = spec.activation_of_layer(dims.len() - 1, dims.len());
    let mut delta: Vec<f64> = activations[dims.len()]
        .iter()
        .zip(upstream.iter())
        .map(|(&a, &u)| u * last_act.derivative_from_output(a))
        .collect();

    for layer in (0..dims.len()).rev() {
        let (fin, fout) = dims[layer];
        let base = offsets[layer];
        let prev = &activations[layer];
        for i in 0..fout {
            let di = delta[i];
            let row = &mut grad_params[base + i * fin..base + (i + 1) * fin];
            for (g, a) in row.iter_mut().zip(prev.iter()) {
                *g += di * a;
            }
            grad_params[base + fin * fout + i] += di;
        }
        // dL/d(prev activation) = W^T delta, then through prev layer's
        // activation derivative (identity when prev is the raw input).
        let weights = &params[base..base + fin * fout];
        let mut prev_delta = vec![0.0; fin];
        for i in 0..fout {
            let di = delta[i];
            let row = &weights[i * fin..(i + 1) * fin];
            for (pd, w) in prev_delta.iter_mut().zip(row.iter()) {
                *pd += w * di;
            }
        }
        if layer > 0 {
            let act = spec.activation_of_layer(layer - 1, dims.len());
            for (pd, &a) in prev_delta.iter_mut().zip(prev.iter()) {
                *pd *= act.derivative_from_output(a);
            }
        }
        delta = prev_delta;
    }

    // After the loop `delta` is dL/dx.
    Ok((grad_params, delta))
}
