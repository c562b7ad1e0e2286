//! Minimal feed-forward network machinery: forward pass, reverse-mode
//! gradients, and Adam. ReLU on hidden layers, identity on the output.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape parameter is clamped to this floor after each optimizer step.
pub const SIGMA_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layer_sizes: Vec<usize>,
    /// Per-layer weight matrices, shaped (out x in).
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Invalid(format!(
                "layer sizes must list at least input and output widths, all positive: {layer_sizes:?}"
            )));
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_sizes[1..]
            .iter()
            .map(|&s| DVector::zeros(s))
            .collect();
        Ok(MlpParams {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut p = Self::zeros(layer_sizes)?;
        for w in &mut p.weights {
            let a = (6.0 / (w.ncols() + w.nrows()) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.random_range(-a..a);
            }
        }
        Ok(p)
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().expect("validated nonempty")
    }

    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Consistency of layer sizes against the stored matrices.
    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Schema("network needs at least two layers".into()));
        }
        if self.weights.len() != self.layer_sizes.len() - 1
            || self.biases.len() != self.weights.len()
        {
            return Err(Error::Schema("layer count mismatch".into()));
        }
        for (l, w) in self.weights.iter().enumerate() {
            if w.nrows() != self.layer_sizes[l + 1] || w.ncols() != self.layer_sizes[l] {
                return Err(Error::Schema(format!(
                    "weight {l} is {}x{}, expected {}x{}",
                    w.nrows(),
                    w.ncols(),
                    self.layer_sizes[l + 1],
                    self.layer_sizes[l]
                )));
            }
            if self.biases[l].len() != self.layer_sizes[l + 1] {
                return Err(Error::Schema(format!("bias {l} has wrong length")));
            }
        }
        if self
            .weights
            .iter()
            .flat_map(|w| w.iter())
            .chain(self.biases.iter().flat_map(|b| b.iter()))
            .any(|v| !v.is_finite())
        {
            return Err(Error::Schema("non-finite network parameter".into()));
        }
        Ok(())
    }

    /// Batched forward pass; rows of `input` are samples.
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<(DMatrix<f64>, MlpCache)> {
        if input.ncols() != self.input_width() {
            return Err(Error::Dimension(format!(
                "input width {} does not match first layer {}",
                input.ncols(),
                self.input_width()
            )));
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("non-finite network input".into()));
        }
        let mut activations = vec![input.clone()];
        let mut pre_acts = Vec::with_capacity(self.n_layers());
        for l in 0..self.n_layers() {
            let mut z = &activations[l] * self.weights[l].transpose();
            for mut row in z.row_iter_mut() {
                row += self.biases[l].transpose();
            }
            let a = if l + 1 < self.n_layers() {
                z.map(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre_acts.push(z);
            activations.push(a);
        }
        let out = activations.last().expect("at least input").clone();
        Ok((out, MlpCache {
            activations,
            pre_acts,
        }))
    }

    /// Reverse-mode gradients for a forward pass with the given cache.
    /// ReLU subgradient at exactly 0 is taken as 0.
    ///
    /// Returns parameter gradients and the gradient w.r.t. the input batch.
    pub fn backward(
        &self,
        cache: &MlpCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(MlpGrads, DMatrix<f64>)> {
        if cache.pre_acts.len() != self.n_layers()
            || cache.activations.len() != self.n_layers() + 1
            || cache.activations[0].ncols() != self.input_width()
        {
            return Err(Error::Dimension("cache does not match network".into()));
        }
        if upstream.shape() != (cache.activations[0].nrows(), self.output_width()) {
            return Err(Error::Dimension(format!(
                "upstream gradient is {:?}, expected ({}, {})",
                upstream.shape(),
                cache.activations[0].nrows(),
                self.output_width()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut dz = upstream.clone();
        for l in (0..self.n_layers()).rev() {
            grads.weights[l] = dz.transpose() * &cache.activations[l];
            grads.biases[l] = dz.row_sum().transpose();
            let da = &dz * &self.weights[l];
            if l > 0 {
                dz = da.zip_map(&cache.pre_acts[l - 1], |g, z| if z > 0.0 { g } else { 0.0 });
            } else {
                dz = da;
            }
        }
        Ok((grads, dz))
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }
}

/// Intermediate state retained by `forward` for the backward pass.
pub struct MlpCache {
    /// Layer inputs: `activations[0]` is the batch input, `activations[l+1]`
    /// the output of layer l after its activation.
    pub activations: Vec<DMatrix<f64>>,
    pub pre_acts: Vec<DMatrix<f64>>,
}

/// Gradient (or accumulator) shaped like an `MlpParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: params.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            *w *= s;
        }
        for b in &mut self.biases {
            *b *= s;
        }
    }
}

/// The full trainable parameter set: derivative-feature network, optional
/// output network, and the kernel shape parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainableParams {
    pub l_net: MlpParams,
    pub f_net: Option<MlpParams>,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainableGrads {
    pub l_net: MlpGrads,
    pub f_net: Option<MlpGrads>,
    pub sigma: f64,
}

impl TrainableGrads {
    pub fn zeros_like(params: &TrainableParams) -> Self {
        TrainableGrads {
            l_net: MlpGrads::zeros_like(&params.l_net),
            f_net: params.f_net.as_ref().map(MlpGrads::zeros_like),
            sigma: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &TrainableGrads) {
        self.l_net.add_assign(&other.l_net);
        if let (Some(a), Some(b)) = (self.f_net.as_mut(), other.f_net.as_ref()) {
            a.add_assign(b);
        }
        self.sigma += other.sigma;
    }

    pub fn scale(&mut self, s: f64) {
        self.l_net.scale(s);
        if let Some(f) = self.f_net.as_mut() {
            f.scale(s);
        }
        self.sigma *= s;
    }

    /// Same layout as `TrainableParams::flatten`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        flatten_net(&self.l_net.weights, &self.l_net.biases, &mut out);
        if let Some(f) = &self.f_net {
            flatten_net(&f.weights, &f.biases, &mut out);
        }
        out.push(self.sigma);
        out
    }
}

impl TrainableParams {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        flatten_net(&self.l_net.weights, &self.l_net.biases, &mut out);
        if let Some(f) = &self.f_net {
            flatten_net(&f.weights, &f.biases, &mut out);
        }
        out.push(self.sigma);
        out
    }

    pub fn assign_from_flat(&mut self, flat: &[f64]) {
        let mut it = flat.iter().copied();
        assign_net(&mut self.l_net.weights, &mut self.l_net.biases, &mut it);
        if let Some(f) = self.f_net.as_mut() {
            assign_net(&mut f.weights, &mut f.biases, &mut it);
        }
        self.sigma = it.next().expect("flat vector too short").max(SIGMA_FLOOR);
        debug_assert!(it.next().is_none(), "flat vector too long");
    }

    pub fn n_params(&self) -> usize {
        self.l_net.n_params() + self.f_net.as_ref().map_or(0, |f| f.n_params()) + 1
    }
}

/// Weight entries in row-major order, then the bias, per layer.
fn flatten_net(weights: &[DMatrix<f64>], biases: &[DVector<f64>], out: &mut Vec<f64>) {
    for (w, b) in weights.iter().zip(biases) {
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                out.push(w[(i, j)]);
            }
        }
        out.extend(b.iter().copied());
    }
}

fn assign_net(
    weights: &mut [DMatrix<f64>],
    biases: &mut [DVector<f64>],
    it: &mut impl Iterator<Item = f64>,
) {
    for (w, b) in weights.iter_mut().zip(biases.iter_mut()) {
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                w[(i, j)] = it.next().expect("flat vector too short");
            }
        }
        for v in b.iter_mut() {
            *v = it.next().expect("flat vector too short");
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamHyper {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction over the flattened parameter set.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &TrainableParams, hyper: AdamHyper) -> Self {
        let n = params.n_params();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            hyper,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One Adam update in place. The shape parameter (last flat entry) is
    /// clamped to stay at least `SIGMA_FLOOR`.
    pub fn step(&mut self, params: &mut TrainableParams, grads: &TrainableGrads) -> Result<()> {
        let mut flat = params.flatten();
        let gflat = grads.flatten();
        if gflat.len() != self.m.len() || flat.len() != self.m.len() {
            return Err(Error::Dimension(format!(
                "parameter/gradient size {} vs optimizer state {}",
                gflat.len(),
                self.m.len()
            )));
        }
        if gflat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Invalid("non-finite gradient".into()));
        }
        self.t += 1;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, &g), (m, v)) in flat
            .iter_mut()
            .zip(&gflat)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.hyper.learning_rate * m_hat / (v_hat.sqrt() + self.hyper.epsilon);
        }
        params.assign_from_flat(&flat);
        Ok(())
    }
}
