//! Small dense networks with explicit forward and backward passes.
//!
//! Layers compute `y = act(x Wᵀ + b)` over a batch of row vectors. A
//! forward pass records a [`TapePass`]; the matching backward pass consumes
//! it and returns parameter gradients plus the gradient at the input, which
//! is how the entropy penalty reaches the encoder through the noise layer.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bounds::NoiseModel;
use crate::error::{CemError, Result};
use crate::numerics::{seeded_rng, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
    Sigmoid,
    /// Row-wise softmax; only sensible on an output layer.
    Softmax,
}

impl Activation {
    fn apply(self, pre: &mut Matrix) {
        match self {
            Activation::Relu => pre.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => pre.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Identity => {}
            Activation::Sigmoid => pre
                .as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            Activation::Softmax => {
                for i in 0..pre.rows() {
                    softmax_in_place(pre.row_mut(i));
                }
            }
        }
    }

    /// Map `∂L/∂y` to `∂L/∂pre` given the layer output `y`.
    fn backprop(self, out: &Matrix, grad: &Matrix) -> Matrix {
        let mut delta = grad.clone();
        match self {
            Activation::Identity => {}
            Activation::Relu => {
                for (d, y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Tanh => {
                for (d, y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= 1.0 - y * y;
                }
            }
            Activation::Sigmoid => {
                for (d, y) in delta.as_mut_slice().iter_mut().zip(out.as_slice()) {
                    *d *= y * (1.0 - y);
                }
            }
            Activation::Softmax => {
                for i in 0..out.rows() {
                    let s = out.row(i);
                    let g = grad.row(i);
                    let gs: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((d, si), gi) in delta.row_mut(i).iter_mut().zip(s).zip(g) {
                        *d = si * (gi - gs);
                    }
                }
            }
        }
        delta
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out × in`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
    w_velocity: Matrix,
    b_velocity: Vec<f64>,
}

impl Dense {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(CemError::ShapeMismatch(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        let (o, i) = weights.shape();
        Ok(Self {
            w_velocity: Matrix::zeros(o, i),
            b_velocity: vec![0.0; o],
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    pub fn zeros_like(m: &NeuralModule) -> Self {
        Self {
            layers: m
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.outputs(), l.inputs()),
                    bias: vec![0.0; l.outputs()],
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.as_slice().iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Values cached by a forward pass.
#[derive(Debug)]
pub struct TapePass {
    version: u64,
    /// Input to each layer; `inputs[0]` is the batch.
    inputs: Vec<Matrix>,
    /// Post-activation output of each layer.
    outputs: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModule {
    layers: Vec<Dense>,
    /// Bumped by every optimizer step; tapes from older versions are stale.
    version: u64,
}

impl NeuralModule {
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CemError::ShapeMismatch("a module needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(CemError::ShapeMismatch(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].outputs(),
                    i + 1,
                    pair[1].inputs()
                )));
            }
        }
        Ok(Self { layers, version: 0 })
    }

    /// Randomly initialized dense stack. `dims` lists layer widths from the
    /// input through the output; `activations` has one entry per layer.
    /// Uniform He initialization for relu layers, Glorot otherwise.
    pub fn dense(dims: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if dims.len() != activations.len() + 1 {
            return Err(CemError::ShapeMismatch(format!(
                "{} widths need {} activations, got {}",
                dims.len(),
                dims.len().saturating_sub(1),
                activations.len()
            )));
        }
        let mut rng = seeded_rng(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = match act {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weights = Matrix::from_vec(
                    fan_out,
                    fan_in,
                    (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect(),
                )?;
                Dense::new(weights, vec![0.0; fan_out], act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// A single bias-free linear layer `z = W x`.
    pub fn linear(weights: Matrix) -> Self {
        let rows = weights.rows();
        Self::from_layers(vec![Dense::new(weights, vec![0.0; rows], Activation::Identity)
            .expect("bias sized from weights")])
        .expect("one layer always chains")
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Direct parameter access. Counts as a state change: outstanding tapes
    /// become stale.
    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.version += 1;
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    fn check_input(&self, batch: &Matrix) -> Result<()> {
        if batch.cols() != self.in_dim() {
            return Err(CemError::ShapeMismatch(format!(
                "module takes {} inputs, batch has {} columns",
                self.in_dim(),
                batch.cols()
            )));
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense, x: &Matrix) -> Matrix {
        let mut pre = x.matmul_t(&layer.weights);
        for i in 0..pre.rows() {
            for (v, b) in pre.row_mut(i).iter_mut().zip(&layer.bias) {
                *v += b;
            }
        }
        layer.activation.apply(&mut pre);
        pre
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, TapePass)> {
        self.check_input(batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut cur = batch.clone();
        for layer in &self.layers {
            let out = Self::layer_forward(layer, &cur);
            inputs.push(cur);
            cur = out.clone();
            outputs.push(out);
        }
        Ok((
            cur,
            TapePass {
                version: self.version,
                inputs,
                outputs,
            },
        ))
    }

    /// Forward pass without recording a tape.
    pub fn predict(&self, batch: &Matrix) -> Result<Matrix> {
        self.check_input(batch)?;
        let mut cur = batch.clone();
        for layer in &self.layers {
            cur = Self::layer_forward(layer, &cur);
        }
        Ok(cur)
    }

    /// Reverse-mode pass. Returns parameter gradients and `∂L/∂input`.
    pub fn backward(&self, tape: TapePass, out_grad: &Matrix) -> Result<(Gradients, Matrix)> {
        if tape.version != self.version || tape.outputs.len() != self.layers.len() {
            return Err(CemError::StaleTape);
        }
        let last = &tape.outputs[tape.outputs.len() - 1];
        if out_grad.shape() != last.shape() {
            return Err(CemError::ShapeMismatch(format!(
                "output gradient is {:?}, forward output was {:?}",
                out_grad.shape(),
                last.shape()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = out_grad.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let delta = layer.activation.backprop(&tape.outputs[idx], &g);
            let w_grad = delta.t_matmul(&tape.inputs[idx]);
            let mut b_grad = vec![0.0; layer.outputs()];
            for row in delta.row_iter() {
                for (b, d) in b_grad.iter_mut().zip(row) {
                    *b += d;
                }
            }
            g = delta.matmul(&layer.weights);
            grads.push(LayerGrad {
                weights: w_grad,
                bias: b_grad,
            });
        }
        grads.reverse();
        Ok((Gradients { layers: grads }, g))
    }

    /// Classic momentum: `v ← μ v + g`, `p ← p − lr v`. Nothing is written
    /// if any updated value would be non-finite.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64, momentum: f64) -> Result<()> {
        if grads.layers.len() != self.layers.len() {
            return Err(CemError::ShapeMismatch(format!(
                "{} gradient layers for {} module layers",
                grads.layers.len(),
                self.layers.len()
            )));
        }
        let mut staged = Vec::with_capacity(self.layers.len());
        for (i, (layer, g)) in self.layers.iter().zip(&grads.layers).enumerate() {
            if g.weights.shape() != layer.weights.shape() || g.bias.len() != layer.bias.len() {
                return Err(CemError::ShapeMismatch(format!("gradient shape differs at layer {i}")));
            }
            let step = |p: &[f64], v: &[f64], g: &[f64]| -> (Vec<f64>, Vec<f64>) {
                let v_new: Vec<f64> = v.iter().zip(g).map(|(v, g)| momentum * v + g).collect();
                let p_new = p.iter().zip(&v_new).map(|(p, v)| p - lr * v).collect();
                (p_new, v_new)
            };
            let (w, wv) = step(
                layer.weights.as_slice(),
                layer.w_velocity.as_slice(),
                g.weights.as_slice(),
            );
            let (b, bv) = step(&layer.bias, &layer.b_velocity, &g.bias);
            if w.iter().chain(&b).any(|v| !v.is_finite()) {
                return Err(CemError::NonFinite(format!("layer {i} parameters after SGD step")));
            }
            staged.push((w, wv, b, bv));
        }
        for (layer, (w, wv, b, bv)) in self.layers.iter_mut().zip(staged) {
            let (o, i) = layer.weights.shape();
            layer.weights = Matrix::from_vec(o, i, w)?;
            layer.w_velocity = Matrix::from_vec(o, i, wv)?;
            layer.bias = b;
            layer.b_velocity = bv;
        }
        self.version += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self) -> ModuleCheckpoint {
        ModuleCheckpoint {
            layers: self
                .layers
                .iter()
                .map(|l| LayerRecord {
                    inputs: l.inputs(),
                    outputs: l.outputs(),
                    activation: l.activation,
                    weights: l.weights.as_slice().to_vec(),
                    bias: l.bias.clone(),
                    w_velocity: l.w_velocity.as_slice().to_vec(),
                    b_velocity: l.b_velocity.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: ModuleCheckpoint) -> Result<Self> {
        let layers = ckpt
            .layers
            .into_iter()
            .map(|r| {
                let mut layer = Dense::new(
                    Matrix::from_vec(r.outputs, r.inputs, r.weights)?,
                    r.bias,
                    r.activation,
                )?;
                layer.w_velocity = Matrix::from_vec(r.outputs, r.inputs, r.w_velocity)?;
                if r.b_velocity.len() != r.outputs {
                    return Err(CemError::ShapeMismatch("bias velocity length".into()));
                }
                layer.b_velocity = r.b_velocity;
                Ok(layer)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint())
            .map_err(|e| CemError::Parse(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CemError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CemError::io(path, e))?;
        let ckpt: ModuleCheckpoint = serde_json::from_str(&text)
            .map_err(|e| CemError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_checkpoint(ckpt)
    }
}

/// On-disk form of a module: shapes, row-major parameters and optimizer
/// velocity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCheckpoint {
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub w_velocity: Vec<f64>,
    pub b_velocity: Vec<f64>,
}

/// `z = ẑ + ε` with i.i.d. `ε ~ 𝒩(0, σ_p²)` per entry. The backward pass
/// is the identity, see [`noise_backward`].
pub fn noise_inject(feats: &Matrix, noise: &NoiseModel, seed: u64) -> Matrix {
    if noise.std() == 0.0 {
        return feats.clone();
    }
    let normal = Normal::new(0.0, noise.std()).expect("std validated by NoiseModel");
    let mut rng = seeded_rng(seed);
    let mut out = feats.clone();
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    out
}

/// Gradient through the additive noise layer.
pub fn noise_backward(out_grad: &Matrix) -> Matrix {
    out_grad.clone()
}

/// Mean softmax cross-entropy in nats and its gradient with respect to the
/// logits.
pub fn task_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(CemError::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n_classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(CemError::LabelOutOfRange { label, n_classes });
    }
    let n = labels.len().max(1) as f64;
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let g = grad.row_mut(i);
        for (t, v) in g.iter_mut().enumerate() {
            let p = (row[t] - lse).exp();
            *v = (p - if t == label { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Index of the largest entry in each row.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_seed;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = seeded_rng(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let m = NeuralModule::linear(Matrix::identity(3));
        let x = random_batch(4, 3, 1);
        let (y, _) = m.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_dead_region_is_zero() {
        let layer = Dense::new(Matrix::identity(2), vec![-5.0, -5.0], Activation::Relu).unwrap();
        let m = NeuralModule::from_layers(vec![layer]).unwrap();
        let (y, _) = m.forward(&random_batch(3, 2, 2)).unwrap();
        assert!(y.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let acts = [Activation::Relu, Activation::Identity];
        let a = NeuralModule::dense(&[5, 7, 3], &acts, 42).unwrap();
        let b = NeuralModule::dense(&[5, 7, 3], &acts, 42).unwrap();
        let x = random_batch(6, 5, 3);
        assert_eq!(a.predict(&x).unwrap(), b.predict(&x).unwrap());
    }

    #[test]
    fn shape_errors() {
        let m = NeuralModule::dense(&[4, 2], &[Activation::Identity], 0).unwrap();
        assert!(matches!(m.forward(&random_batch(2, 3, 0)), Err(CemError::ShapeMismatch(_))));
        assert!(NeuralModule::dense(&[4, 2, 2], &[Activation::Identity], 0).is_err());
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut m = NeuralModule::dense(&[3, 2], &[Activation::Tanh], 1).unwrap();
        let (y, tape) = m.forward(&random_batch(2, 3, 1)).unwrap();
        let grads = Gradients::zeros_like(&m);
        m.sgd_step(&grads, 0.1, 0.0).unwrap();
        assert!(matches!(m.backward(tape, &y), Err(CemError::StaleTape)));
    }

    #[test]
    fn identity_net_at_target_has_zero_gradient() {
        let m = NeuralModule::linear(Matrix::identity(3));
        let x = random_batch(5, 3, 9);
        let (y, tape) = m.forward(&x).unwrap();
        let grad = y.sub(&x).scale(2.0 / 15.0);
        let (g, in_grad) = m.backward(tape, &grad).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
        assert!(in_grad.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_quadratic_gradient_is_residual_projection() {
        // L = ½‖X Wᵀ − Y‖² has ∂L/∂W = (X Wᵀ − Y)ᵀ X.
        let w = random_batch(2, 3, 4);
        let m = NeuralModule::linear(w.clone());
        let x = random_batch(7, 3, 5);
        let y = random_batch(7, 2, 6);
        let (out, tape) = m.forward(&x).unwrap();
        let resid = out.sub(&y);
        let (g, in_grad) = m.backward(tape, &resid).unwrap();
        let expect = resid.t_matmul(&x);
        for (a, b) in g.layers[0].weights.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let expect_in = resid.matmul(&w);
        for (a, b) in in_grad.as_slice().iter().zip(expect_in.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Scalar objective `Σ c ⊙ f(x)` with fixed random weights `c`.
    fn probe_loss(m: &NeuralModule, x: &Matrix, c: &Matrix) -> f64 {
        let y = m.predict(x).unwrap();
        y.as_slice().iter().zip(c.as_slice()).map(|(a, b)| a * b).sum()
    }

    fn check_fd(acts: &[Activation], seed: u64) {
        let dims = [6, 8, 4];
        let m = NeuralModule::dense(&dims, acts, seed).unwrap();
        let x = random_batch(5, 6, seed + 1);
        let c = random_batch(5, 4, seed + 2);
        let (_, tape) = m.forward(&x).unwrap();
        let (grads, in_grad) = m.backward(tape, &c).unwrap();
        let h = 1e-5;
        for li in 0..m.layers().len() {
            let n_w = m.layers()[li].weights.as_slice().len();
            for p in 0..n_w + m.layers()[li].bias.len() {
                let mut plus = m.clone();
                let mut minus = m.clone();
                let bump = |mm: &mut NeuralModule, dv: f64| {
                    let layer = &mut mm.layers_mut()[li];
                    if p < n_w {
                        layer.weights.as_mut_slice()[p] += dv;
                    } else {
                        layer.bias[p - n_w] += dv;
                    }
                };
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let fd = (probe_loss(&plus, &x, &c) - probe_loss(&minus, &x, &c)) / (2.0 * h);
                let g = if p < n_w {
                    grads.layers[li].weights.as_slice()[p]
                } else {
                    grads.layers[li].bias[p - n_w]
                };
                assert!(rel_err(g, fd) <= 1e-4, "layer {li} param {p}: {g} vs {fd}");
            }
        }
        for i in 0..x.rows() {
            for t in 0..x.cols() {
                let mut plus = x.clone();
                plus[(i, t)] += h;
                let mut minus = x.clone();
                minus[(i, t)] -= h;
                let fd = (probe_loss(&m, &plus, &c) - probe_loss(&m, &minus, &c)) / (2.0 * h);
                assert!(rel_err(in_grad[(i, t)], fd) <= 1e-4);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..5 {
            check_fd(&[Activation::Tanh, Activation::Identity], seed * 10);
            check_fd(&[Activation::Relu, Activation::Sigmoid], seed * 10 + 3);
            check_fd(&[Activation::Tanh, Activation::Softmax], seed * 10 + 5);
        }
    }

    #[test]
    fn sgd_step_examples() {
        let mut m = NeuralModule::dense(&[3, 2], &[Activation::Identity], 7).unwrap();
        let before = m.clone();
        let mut grads = Gradients::zeros_like(&m);
        grads.layers[0].weights = random_batch(2, 3, 8);
        grads.layers[0].bias = vec![0.5, -0.25];
        m.sgd_step(&grads, 0.0, 0.9).unwrap();
        assert_eq!(m.layers()[0].weights, before.layers()[0].weights);

        let mut m = before.clone();
        m.sgd_step(&grads, 0.1, 0.0).unwrap();
        for ((p, p0), g) in m.layers()[0]
            .weights
            .as_slice()
            .iter()
            .zip(before.layers()[0].weights.as_slice())
            .zip(grads.layers[0].weights.as_slice())
        {
            assert_eq!(*p, p0 - 0.1 * g);
        }

        let mut m = before.clone();
        grads.layers[0].bias[0] = f64::INFINITY;
        assert!(matches!(m.sgd_step(&grads, 0.1, 0.0), Err(CemError::NonFinite(_))));
        assert_eq!(m.layers()[0].weights, before.layers()[0].weights);
    }

    #[test]
    fn sgd_converges_on_quadratic_bowl() {
        // ½‖X Wᵀ − Y‖² / N with XᵀX / N = I, so every direction contracts
        // by 1 − lr per step.
        let target = random_batch(2, 3, 11);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|i| (0..3).map(|t| if i % 3 == t { 3f64.sqrt() } else { 0.0 }).collect())
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let y = x.matmul_t(&target);
        let mut m = NeuralModule::linear(Matrix::zeros(2, 3));
        let loss_of = |m: &NeuralModule| {
            let r = m.predict(&x).unwrap().sub(&y);
            0.5 * r.as_slice().iter().map(|v| v * v).sum::<f64>() / 30.0
        };
        let mut prev = loss_of(&m);
        for _ in 0..100 {
            let (out, tape) = m.forward(&x).unwrap();
            let (g, _) = m.backward(tape, &out.sub(&y).scale(1.0 / 30.0)).unwrap();
            m.sgd_step(&g, 0.1, 0.0).unwrap();
            let loss = loss_of(&m);
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-6, "loss {prev}");
    }

    #[test]
    fn noise_layer_examples() {
        let x = random_batch(3, 4, 1);
        assert_eq!(noise_inject(&x, &NoiseModel::new(0.0).unwrap(), 5), x);

        let sigma = 0.3;
        let noise = NoiseModel::new(sigma).unwrap();
        let zeros = Matrix::zeros(1000, 1000);
        let z = noise_inject(&zeros, &noise, derive_seed(1, 2, 3));
        let n = z.as_slice().len() as f64;
        let mean = z.as_slice().iter().sum::<f64>() / n;
        let var = z.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 4.0 * sigma / 1e3, "mean {mean}");
        assert!((var / (sigma * sigma) - 1.0).abs() <= 0.01, "var {var}");

        let g = random_batch(3, 4, 2);
        assert_eq!(noise_backward(&g), g);
    }

    #[test]
    fn task_loss_examples() {
        let confident = Matrix::from_rows(&[vec![50.0, 0.0, 0.0], vec![0.0, 0.0, 50.0]]).unwrap();
        let (l, _) = task_loss(&confident, &[0, 2]).unwrap();
        assert!(l < 1e-20);

        let uniform = Matrix::zeros(4, 5);
        let (l, _) = task_loss(&uniform, &[0, 1, 2, 3]).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);

        assert!(matches!(
            task_loss(&uniform, &[0, 1, 2, 7]),
            Err(CemError::LabelOutOfRange { label: 7, n_classes: 5 })
        ));

        let logits = random_batch(6, 4, 3).scale(3.0);
        let labels = [0, 3, 1, 1, 2, 0];
        let (_, grad) = task_loss(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..6 {
            for t in 0..4 {
                let mut p = logits.clone();
                p[(i, t)] += h;
                let mut m = logits.clone();
                m[(i, t)] -= h;
                let fd = (task_loss(&p, &labels).unwrap().0 - task_loss(&m, &labels).unwrap().0) / (2.0 * h);
                assert!(rel_err(grad[(i, t)], fd) <= 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = NeuralModule::dense(&[4, 5, 2], &[Activation::Relu, Activation::Softmax], 3).unwrap();
        let mut g = Gradients::zeros_like(&m);
        g.layers[0].weights = random_batch(5, 4, 4);
        m.sgd_step(&g, 0.05, 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        let back = NeuralModule::load(&path).unwrap();
        assert_eq!(back.layers(), m.layers());

        std::fs::write(&path, "{\"layers\": [").unwrap();
        assert!(matches!(NeuralModule::load(&path), Err(CemError::Parse(_))));
    }
}
