//! Feedforward multi-label classifier with hand-written backpropagation.
//!
//! The network maps an input row to `K` logits; probabilities are the
//! elementwise sigmoid. The activation feeding the output layer (the
//! penultimate activation) is exposed in the trace so the noise head can use
//! it as its feature vector.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datagen::Example;
use crate::error::{check_dim, Error, Result};
use crate::model::{self, Pooling};
use crate::prob::{sigmoid, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One affine layer; `weights` is `(outputs, inputs)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            weights: Array2::from_shape_fn((outputs, inputs), |_| rng.random_range(-limit..limit)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Cached values from one forward pass over a batch of rows.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `activations[0]` is the input; the last entry is the penultimate activation.
    pub activations: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pub pre_activations: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn penultimate(&self) -> &Array2<f64> {
        self.activations.last().expect("trace always holds the input")
    }
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub trace: ForwardTrace,
}

/// Parameter gradients, one `(weights, bias)` pair per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(state: &ClassifierState) -> Self {
        Self {
            layers: state
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl ClassifierState {
    /// Glorot-initialised network `input -> hidden... -> outputs`.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims
            .windows(2)
            .map(|w| Layer::glorot(w[0], w[1], &mut rng))
            .collect();
        Self { layers, activation }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], output_dim: usize, activation: Activation) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("classifier needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_dim("classifier layer chain", pair[0].outputs(), pair[1].inputs())?;
        }
        for l in &layers {
            check_dim("classifier bias", l.outputs(), l.bias.len())?;
        }
        Ok(Self { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(Layer::outputs).unwrap_or(0)
    }

    /// Width of the activation feeding the output layer.
    pub fn penultimate_dim(&self) -> usize {
        self.layers.last().map(Layer::inputs).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<Forward> {
        check_dim("classifier input", self.input_dim(), batch.ncols())?;
        let last = self.layers.len() - 1;
        let mut activations = vec![batch.to_owned()];
        let mut pre_activations = Vec::with_capacity(last);
        for layer in &self.layers[..last] {
            let pre = affine(activations.last().unwrap(), layer);
            activations.push(pre.mapv(|v| self.activation.apply(v)));
            pre_activations.push(pre);
        }
        let logits = affine(activations.last().unwrap(), &self.layers[last]);
        let probs = logits.mapv(sigmoid);
        Ok(Forward {
            logits,
            probs,
            trace: ForwardTrace {
                activations,
                pre_activations,
            },
        })
    }

    /// Backpropagate logit gradients, plus an optional gradient arriving at the
    /// penultimate activation from another head.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        grad_logits: ArrayView2<f64>,
        grad_penultimate: Option<ArrayView2<f64>>,
    ) -> Result<Gradients> {
        let rows = trace.activations[0].nrows();
        check_dim("backward rows", rows, grad_logits.nrows())?;
        check_dim("backward classes", self.output_dim(), grad_logits.ncols())?;
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_logits.to_owned();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let input = &trace.activations[idx];
            grads.push(Layer {
                weights: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            if idx == 0 {
                break;
            }
            let mut upstream = delta.dot(&layer.weights);
            if idx == self.layers.len() - 1 {
                if let Some(extra) = grad_penultimate {
                    check_dim("penultimate gradient", upstream.ncols(), extra.ncols())?;
                    upstream += &extra;
                }
            }
            let pre = &trace.pre_activations[idx - 1];
            upstream.zip_mut_with(pre, |g, &p| *g *= self.activation.derivative(p));
            delta = upstream;
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// `p <- p - lr * g` for every parameter.
    pub fn sgd_step(&mut self, grads: &Gradients, learning_rate: f64) {
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            layer.weights.scaled_add(-learning_rate, &g.weights);
            layer.bias.scaled_add(-learning_rate, &g.bias);
        }
    }

    /// Visit every parameter in a fixed order (layer, weights row-major, then bias).
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            layer.weights.iter_mut().for_each(&mut f);
            layer.bias.iter_mut().for_each(&mut f);
        }
    }
}

fn affine(input: &Array2<f64>, layer: &Layer) -> Array2<f64> {
    let mut out = input.dot(&layer.weights.t());
    out += &layer.bias;
    out
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Minibatch SGD settings shared by the trainers.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub pooling: Pooling,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 3,
            learning_rate: 1.5e-4,
            batch_size: 32,
            pooling: Pooling::Mean,
        }
    }
}

/// Seeded per-epoch permutations, split into minibatches.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Stage-one training: cross-entropy directly against the observed labels.
///
/// Returns the mean per-example training loss of each epoch.
pub fn train_baseline(
    state: &mut ClassifierState,
    data: &[Example],
    options: &TrainOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    train_baseline_with(state, data, options, seed, |_, _, _| {})
}

/// [`train_baseline`] with a callback after each epoch `(epoch, loss, state)`.
pub fn train_baseline_with(
    state: &mut ClassifierState,
    data: &[Example],
    options: &TrainOptions,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &ClassifierState),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(options.epochs);
    for epoch in 0..options.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(data.len(), options.batch_size, &mut rng) {
            let examples: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
            let targets: Vec<&LabelVector> = examples.iter().map(|e| &e.observed).collect();
            let fwd = model::forward_batch(state, &examples, options.pooling)?;
            let (loss, grad_py) = model::bce_and_grad(&fwd.p_y, &targets)?;
            total += loss;
            let grads = model::backward_batch(state, &fwd, grad_py.view(), None)?;
            state.sgd_step(&grads, options.learning_rate);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !state.is_finite() {
            return Err(Error::Divergence(format!("baseline loss {mean} at epoch {epoch}")));
        }
        on_epoch(epoch, mean, state);
        losses.push(mean);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn loss_of(state: &ClassifierState, x: &Array2<f64>, gl: &Array2<f64>, gp: &Array2<f64>) -> f64 {
        // Linear functional of logits and penultimate activations; its
        // gradient is exactly what `backward` propagates.
        let f = state.forward(x.view()).unwrap();
        (&f.logits * gl).sum() + (f.trace.penultimate() * gp).sum()
    }

    #[test]
    fn zero_network_predicts_one_half() {
        let s = ClassifierState::zeros(3, &[4], 2, Activation::Relu);
        let f = s.forward(array![[1.0, -2.0, 3.0]].view()).unwrap();
        assert!(f.probs.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn single_linear_unit_is_a_sigmoid() {
        let mut s = ClassifierState::zeros(1, &[], 1, Activation::Relu);
        s.layers[0].weights[[0, 0]] = 1.0;
        let f = s.forward(array![[0.8]].view()).unwrap();
        assert_eq!(f.probs[[0, 0]], sigmoid(0.8));
    }

    #[test]
    fn input_dimension_is_checked() {
        let s = ClassifierState::zeros(3, &[4], 2, Activation::Relu);
        assert!(s.forward(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let s = ClassifierState::new(5, &[8], 3, Activation::Relu, 9);
        let x = Array2::from_shape_fn((4, 5), |(i, j)| (i as f64 - j as f64) * 0.3);
        let a = s.forward(x.view()).unwrap();
        let b = ClassifierState::new(5, &[8], 3, Activation::Relu, 9).forward(x.view()).unwrap();
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = ClassifierState::new(5, &[8], 3, Activation::Relu, 1);
        let x = Array2::from_elem((2, 5), 0.5);
        let f = s.forward(x.view()).unwrap();
        let g = s.backward(&f.trace, Array2::zeros((2, 3)).view(), None).unwrap();
        assert_eq!(g.max_abs(), 0.0);
    }

    #[test]
    fn single_layer_gradient_is_outer_product() {
        let s = ClassifierState::new(1, &[], 1, Activation::Relu, 2);
        let f = s.forward(array![[1.7]].view()).unwrap();
        let g = s.backward(&f.trace, array![[-0.4]].view(), None).unwrap();
        assert_eq!(g.layers[0].weights[[0, 0]], -0.4 * 1.7);
        assert_eq!(g.layers[0].bias[0], -0.4);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let mut s = ClassifierState::zeros(1, &[], 1, Activation::Relu);
        s.layers[0].weights[[0, 0]] = 2.0;
        let mut g = Gradients::zeros_like(&s);
        g.layers[0].weights[[0, 0]] = 0.5;
        s.sgd_step(&g, 1.0);
        assert_eq!(s.layers[0].weights[[0, 0]], 1.5);

        let before = s.clone();
        s.sgd_step(&Gradients::zeros_like(&s), 0.3);
        assert_eq!(s, before);

        let mut once = ClassifierState::new(3, &[4], 2, Activation::Tanh, 5);
        let mut twice = once.clone();
        let mut g = Gradients::zeros_like(&once);
        g.layers.iter_mut().for_each(|l| l.weights.fill(0.25));
        once.sgd_step(&g, 0.5);
        twice.sgd_step(&g, 0.25);
        twice.sgd_step(&g, 0.25);
        for (a, b) in once.layers.iter().zip(&twice.layers) {
            assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| (x - y).abs() < 1e-15));
        }
    }

    fn check_backprop(activation: Activation, seed: u64) {
        let s = ClassifierState::new(5, &[8], 3, activation, seed);
        let x = Array2::from_shape_fn((3, 5), |(i, j)| ((i * 5 + j) as f64 * 0.37 + seed as f64).sin());
        let gl = Array2::from_shape_fn((3, 3), |(i, j)| ((i + 2 * j) as f64 * 0.9).cos());
        let gp = Array2::from_shape_fn((3, 8), |(i, j)| ((i * 3 + j) as f64 * 0.21).sin() * 0.3);
        let f = s.forward(x.view()).unwrap();
        if activation == Activation::Relu && f.trace.pre_activations[0].iter().any(|v| v.abs() < 1e-3) {
            return;
        }
        let analytic = s.backward(&f.trace, gl.view(), Some(gp.view())).unwrap().flatten();
        let step = 1e-5;
        for k in 0..s.num_params() {
            let mut plus = s.clone();
            let mut minus = s.clone();
            let mut i = 0;
            plus.for_each_param_mut(|p| {
                if i == k {
                    *p += step
                }
                i += 1
            });
            i = 0;
            minus.for_each_param_mut(|p| {
                if i == k {
                    *p -= step
                }
                i += 1
            });
            let fd = (loss_of(&plus, &x, &gl, &gp) - loss_of(&minus, &x, &gl, &gp)) / (2.0 * step);
            let a = analytic[k];
            let scale = a.abs().max(fd.abs()).max(1e-3);
            assert!((a - fd).abs() / scale < 1e-5, "param {k}: {a} vs {fd}");
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for seed in 0..20 {
            check_backprop(Activation::Relu, seed);
            check_backprop(Activation::Tanh, seed);
        }
    }
}
