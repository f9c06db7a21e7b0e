//! Dense feed-forward networks with hand-written backpropagation and plain SGD.
//!
//! Weights are stored `in_dim x out_dim` so a layer computes
//! `activation(input · W + b)` on a batch with one sample per row. A final
//! [`Activation::Softmax`] layer emits raw logits; the softmax itself is fused
//! into [`cross_entropy`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
    /// Classification head. Forward output is the logits.
    Softmax,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity | Activation::Softmax => z,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn grad_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity | Activation::Softmax => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let spec = Self { layers };
        spec.validate()?;
        Ok(spec)
    }

    /// Builds a chain from a width list: `widths[0]` is the input dimension,
    /// hidden layers use `hidden`, and the last layer uses `head`.
    pub fn from_widths(widths: &[usize], hidden: Activation, head: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config("a model needs at least one layer"));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { head } else { hidden };
                LayerSpec::new(widths[i], widths[i + 1], act)
            })
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("model spec has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::config(format!("layer {i} has a zero dimension")));
            }
            if l.activation == Activation::Softmax && i + 1 != self.layers.len() {
                return Err(Error::config(format!(
                    "softmax is only allowed on the final layer (found on layer {i})"
                )));
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::config(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
}

/// Post-activation outputs of every layer; entry 0 is the input batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub layers: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn input(&self) -> &Matrix {
        &self.layers[0]
    }

    pub fn output(&self) -> &Matrix {
        self.layers.last().expect("trace always holds the input")
    }

    pub fn into_output(mut self) -> Matrix {
        self.layers.pop().expect("trace always holds the input")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient of the loss with respect to the input batch.
    pub input: Matrix,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
            && self.input.is_finite()
    }
}

/// Seeded Gaussian initialization, std `1/sqrt(in_dim)`, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    init_layers(spec, seed, 0)
}

/// Like [`init_model`], but layer `i` of `spec` draws from RNG stream
/// `first_stream + i`. A model cut in two and initialized piecewise with
/// matching stream offsets is bit-identical to the whole model.
pub fn init_layers(spec: &ModelSpec, seed: u64, first_stream: u64) -> Result<Model> {
    spec.validate()?;
    let mut weights = Vec::with_capacity(spec.len());
    let mut biases = Vec::with_capacity(spec.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(first_stream + i as u64);
        let std = 1.0 / (l.in_dim as f64).sqrt();
        let data: Vec<f64> = (0..l.in_dim * l.out_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        weights.push(Matrix::from_vec(l.in_dim, l.out_dim, data)?);
        biases.push(vec![0.0; l.out_dim]);
    }
    Ok(Model {
        spec: spec.clone(),
        weights,
        biases,
    })
}

impl Model {
    /// Assembles a model from explicit parameters.
    pub fn from_parts(spec: ModelSpec, weights: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.len() || biases.len() != spec.len() {
            return Err(Error::shape("parameter count does not match layer count"));
        }
        for (i, l) in spec.layers.iter().enumerate() {
            if weights[i].shape() != (l.in_dim, l.out_dim) || biases[i].len() != l.out_dim {
                return Err(Error::shape(format!("layer {i} parameters do not match its spec")));
            }
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Splits into `(layers[..at], layers[at..])`.
    pub fn split_at(&self, at: usize) -> Result<(Model, Model)> {
        if at == 0 || at >= self.spec.len() {
            return Err(Error::config(format!(
                "cannot split a {}-layer model at {at}",
                self.spec.len()
            )));
        }
        let head = Model {
            spec: ModelSpec {
                layers: self.spec.layers[..at].to_vec(),
            },
            weights: self.weights[..at].to_vec(),
            biases: self.biases[..at].to_vec(),
        };
        let tail = Model {
            spec: ModelSpec {
                layers: self.spec.layers[at..].to_vec(),
            },
            weights: self.weights[at..].to_vec(),
            biases: self.biases[at..].to_vec(),
        };
        Ok((head, tail))
    }

    /// Appends the layers of `tail` after this model's layers.
    pub fn stack(&self, tail: &Model) -> Result<Model> {
        let mut layers = self.spec.layers.clone();
        if let Some(last) = layers.last_mut() {
            if last.activation == Activation::Softmax {
                last.activation = Activation::Identity;
            }
        }
        layers.extend_from_slice(&tail.spec.layers);
        let spec = ModelSpec::new(layers)?;
        let mut weights = self.weights.clone();
        weights.extend_from_slice(&tail.weights);
        let mut biases = self.biases.clone();
        biases.extend_from_slice(&tail.biases);
        Ok(Model {
            spec,
            weights,
            biases,
        })
    }

    pub fn forward(&self, batch: &Matrix) -> Result<ActivationTrace> {
        forward(self, batch)
    }

    /// Output of the last layer only.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        let mut x = check_input(self, batch)?.clone();
        for i in 0..self.spec.len() {
            x = self.layer_forward(i, &x)?;
        }
        Ok(x)
    }

    fn layer_forward(&self, i: usize, x: &Matrix) -> Result<Matrix> {
        let act = self.spec.layers[i].activation;
        let mut z = x.matmul(&self.weights[i])?;
        z.add_row_vector(&self.biases[i]);
        if act == Activation::Relu {
            z.as_mut_slice().iter_mut().for_each(|v| *v = act.apply(*v));
        }
        Ok(z)
    }

    /// In-place `θ ← θ − lr·∇`.
    pub fn apply_gradients(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        check_grad_shapes(self, grads)?;
        for (w, g) in self.weights.iter_mut().zip(&grads.weights) {
            for (wv, gv) in w.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *wv -= lr * gv;
            }
        }
        for (b, g) in self.biases.iter_mut().zip(&grads.biases) {
            for (bv, gv) in b.iter_mut().zip(g) {
                *bv -= lr * gv;
            }
        }
        Ok(())
    }
}

fn check_input<'a>(model: &Model, batch: &'a Matrix) -> Result<&'a Matrix> {
    if batch.cols() != model.spec.in_dim() {
        return Err(Error::shape(format!(
            "batch has {} columns, model expects {}",
            batch.cols(),
            model.spec.in_dim()
        )));
    }
    Ok(batch)
}

fn check_grad_shapes(model: &Model, grads: &Gradients) -> Result<()> {
    if grads.weights.len() != model.weights.len() || grads.biases.len() != model.biases.len() {
        return Err(Error::shape("gradient layer count does not match model"));
    }
    for (i, (w, g)) in model.weights.iter().zip(&grads.weights).enumerate() {
        if w.shape() != g.shape() || model.biases[i].len() != grads.biases[i].len() {
            return Err(Error::shape(format!("gradient shape mismatch at layer {i}")));
        }
    }
    Ok(())
}

pub fn forward(model: &Model, batch: &Matrix) -> Result<ActivationTrace> {
    let batch = check_input(model, batch)?;
    let mut layers = Vec::with_capacity(model.spec.len() + 1);
    layers.push(batch.clone());
    for i in 0..model.spec.len() {
        let next = model.layer_forward(i, &layers[i])?;
        layers.push(next);
    }
    Ok(ActivationTrace { layers })
}

/// Training targets for [`cross_entropy`].
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Classes(&'a [usize]),
    /// One probability distribution per row.
    Soft(&'a Matrix),
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &Matrix, targets: Targets<'_>) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    match targets {
        Targets::Classes(labels) => {
            if labels.len() != n {
                return Err(Error::shape(format!(
                    "{} labels for {n} logit rows",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                return Err(Error::data(format!("label {bad} out of range for {c} classes")));
            }
        }
        Targets::Soft(t) => {
            if t.shape() != logits.shape() {
                return Err(Error::shape(format!(
                    "soft targets {:?} do not match logits {:?}",
                    t.shape(),
                    logits.shape()
                )));
            }
        }
    }
    if n == 0 {
        return Err(Error::data("empty batch"));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let g = grad.row_mut(r);
        for (j, (&z, gj)) in row.iter().zip(g.iter_mut()).enumerate() {
            let p = (z - log_z).exp();
            let t = match targets {
                Targets::Classes(labels) => f64::from(u8::from(labels[r] == j)),
                Targets::Soft(t) => t.get(r, j),
            };
            if t != 0.0 {
                loss -= t * (z - log_z);
            }
            *gj = (p - t) * inv_n;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Hard-label cross-entropy.
pub fn cross_entropy_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    cross_entropy(logits, Targets::Classes(labels))
}

pub fn backward(model: &Model, trace: &ActivationTrace, out_grad: &Matrix) -> Result<Gradients> {
    let l = model.spec.len();
    if trace.layers.len() != l + 1 {
        return Err(Error::shape(format!(
            "trace has {} entries, model needs {}",
            trace.layers.len(),
            l + 1
        )));
    }
    if out_grad.shape() != trace.output().shape() {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match output {:?}",
            out_grad.shape(),
            trace.output().shape()
        )));
    }
    let mut w_grads = vec![Matrix::zeros(0, 0); l];
    let mut b_grads = vec![Vec::new(); l];
    let mut upstream = out_grad.clone();
    for i in (0..l).rev() {
        let act = model.spec.layers[i].activation;
        let out = &trace.layers[i + 1];
        let mut dz = upstream;
        if act == Activation::Relu {
            for (d, &a) in dz.as_mut_slice().iter_mut().zip(out.as_slice()) {
                *d *= act.grad_from_output(a);
            }
        }
        w_grads[i] = trace.layers[i].t_matmul(&dz)?;
        b_grads[i] = dz.col_sums();
        upstream = dz.matmul_t(&model.weights[i])?;
    }
    Ok(Gradients {
        weights: w_grads,
        biases: b_grads,
        input: upstream,
    })
}

/// Returns `model` with one SGD step applied.
pub fn sgd_step(model: &Model, grads: &Gradients, lr: f64) -> Result<Model> {
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::config(format!("learning rate must be nonnegative, got {lr}")));
    }
    let mut next = model.clone();
    next.apply_gradients(grads, lr)?;
    Ok(next)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Matrix, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count();
    hits as f64 / labels.len() as f64
}
