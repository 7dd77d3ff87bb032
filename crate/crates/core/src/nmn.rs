//! The noise modeling head.
//!
//! For every class the head scores the four transitions `(i, j)` from the
//! pooled feature `h`, normalises each column with a softmax into `Q`, and
//! mixes the classifier's true-label probabilities into observed-label
//! probabilities `p(z = 1 | x) = q11 p + q10 (1 - p)`. The head is trained
//! jointly with the classifier and dropped at test time.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{epoch_batches, ClassifierState, TrainOptions};
use crate::datagen::Example;
use crate::error::{check_dim, Error, Result};
use crate::model::{self, Pooling};
use crate::prob::{column_softmax, dot, LabelVector, NoiseTransition, ProbVector, Transition};

/// Diagonal bias at initialisation; `sigmoid(2.3) ~ 0.909`.
pub const INIT_DIAGONAL_BIAS: f64 = 2.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    FeatureIndependent,
    FeatureDependent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmnState {
    pub mode: NoiseMode,
    pub num_classes: usize,
    pub feature_dim: usize,
    /// `K * 4 * feature_dim` weights, `(class, i, j, d)` row-major; empty when
    /// feature-independent.
    pub u: Vec<f64>,
    pub b: Vec<Transition>,
}

/// Unnormalised transition scores per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap(pub Vec<Transition>);

#[derive(Debug, Clone, PartialEq)]
pub struct NmnForward {
    pub confidence: ConfidenceMap,
    pub transition: NoiseTransition,
    pub p_z: ProbVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmnGrads {
    pub loss: f64,
    pub u: Vec<f64>,
    pub b: Vec<Transition>,
    /// Gradient on the pooled feature.
    pub h: Vec<f64>,
    /// Gradient on `p(y = 1 | x)`.
    pub p_y: Vec<f64>,
    /// Gradient on the classifier logits, valid when `p_y` is a plain sigmoid.
    pub logits: Vec<f64>,
}

impl NmnState {
    /// Near-identity start: diagonal biases `INIT_DIAGONAL_BIAS`, zero weights.
    pub fn new(mode: NoiseMode, num_classes: usize, feature_dim: usize) -> Self {
        Self::with_diagonal(mode, num_classes, feature_dim, INIT_DIAGONAL_BIAS)
    }

    pub fn with_diagonal(mode: NoiseMode, num_classes: usize, feature_dim: usize, diagonal: f64) -> Self {
        let u = match mode {
            NoiseMode::FeatureIndependent => Vec::new(),
            NoiseMode::FeatureDependent => vec![0.0; num_classes * 4 * feature_dim],
        };
        Self {
            mode,
            num_classes,
            feature_dim,
            u,
            b: vec![[[diagonal, 0.0], [0.0, diagonal]]; num_classes],
        }
    }

    /// Biases large enough that the softmax returns exactly the identity.
    pub fn pinned_identity(mode: NoiseMode, num_classes: usize, feature_dim: usize) -> Self {
        Self::with_diagonal(mode, num_classes, feature_dim, 1e3)
    }

    pub fn num_params(&self) -> usize {
        self.u.len() + 4 * self.b.len()
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(self.b.iter().flatten().flatten()).all(|v| v.is_finite())
    }

    fn weights(&self, c: usize, i: usize, j: usize) -> &[f64] {
        let d = self.feature_dim;
        let start = ((c * 4) + 2 * i + j) * d;
        &self.u[start..start + d]
    }

    pub fn confidence(&self, h: &[f64]) -> Result<ConfidenceMap> {
        if self.mode == NoiseMode::FeatureDependent {
            check_dim("noise head feature", self.feature_dim, h.len())?;
        }
        Ok(ConfidenceMap(
            (0..self.num_classes)
                .map(|c| {
                    let mut o = self.b[c];
                    if self.mode == NoiseMode::FeatureDependent {
                        for (i, row) in o.iter_mut().enumerate() {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v += dot(self.weights(c, i, j), h);
                            }
                        }
                    }
                    o
                })
                .collect(),
        ))
    }

    pub fn transition(&self, h: &[f64]) -> Result<NoiseTransition> {
        Ok(NoiseTransition {
            q: self.confidence(h)?.0.iter().map(column_softmax).collect(),
        })
    }

    pub fn forward(&self, h: &[f64], p_y: &ProbVector) -> Result<NmnForward> {
        check_dim("noise head classes", self.num_classes, p_y.len())?;
        let confidence = self.confidence(h)?;
        let transition = NoiseTransition {
            q: confidence.0.iter().map(column_softmax).collect(),
        };
        let p_z = crate::prob::transform(&transition, p_y)?;
        Ok(NmnForward {
            confidence,
            transition,
            p_z,
        })
    }

    /// Loss `-log p(z | x)` (plus the optional trace penalty) and its
    /// gradients with respect to the head parameters, the feature, and the
    /// classifier output.
    pub fn backward(&self, h: &[f64], p_y: &ProbVector, z: &LabelVector, trace_penalty: f64) -> Result<NmnGrads> {
        check_dim("noise head labels", self.num_classes, z.len())?;
        let fwd = self.forward(h, p_y)?;
        let fd = self.mode == NoiseMode::FeatureDependent;
        let d = self.feature_dim;
        let mut grads = NmnGrads {
            loss: 0.0,
            u: vec![0.0; self.u.len()],
            b: vec![[[0.0; 2]; 2]; self.num_classes],
            h: vec![0.0; if fd { d } else { h.len() }],
            p_y: vec![0.0; self.num_classes],
            logits: vec![0.0; self.num_classes],
        };
        for c in 0..self.num_classes {
            let q = &fwd.transition.q[c];
            let p = p_y.0[c];
            let pz = fwd.p_z.0[c];
            let (nll, dl_dpz) = if z.get(c) {
                (-pz.ln(), -1.0 / pz)
            } else {
                (-(1.0 - pz).ln(), 1.0 / (1.0 - pz))
            };
            grads.loss += nll;
            // dL/dp_y through the transformation, then through the sigmoid.
            grads.p_y[c] = dl_dpz * (q[1][1] - q[1][0]);
            grads.logits[c] = grads.p_y[c] * p * (1.0 - p);

            // Gradient on q[1][j]; q[0][j] = 1 - q[1][j].
            let mut dq1 = [dl_dpz * (1.0 - p), dl_dpz * p];
            if trace_penalty != 0.0 {
                grads.loss += trace_penalty * (q[0][0] + q[1][1]);
                // q00 = 1 - q10
                dq1[0] -= trace_penalty;
                dq1[1] += trace_penalty;
            }
            for j in 0..2 {
                let g1 = dq1[j] * q[1][j] * q[0][j];
                grads.b[c][1][j] = g1;
                grads.b[c][0][j] = -g1;
                if fd {
                    for i in 0..2 {
                        let g = if i == 1 { g1 } else { -g1 };
                        let start = ((c * 4) + 2 * i + j) * d;
                        let w = &self.u[start..start + d];
                        for k in 0..d {
                            grads.u[start + k] = g * h[k];
                            grads.h[k] += g * w[k];
                        }
                    }
                }
            }
        }
        Ok(grads)
    }

    pub fn sgd_step(&mut self, grad_u: &[f64], grad_b: &[Transition], learning_rate: f64) {
        for (p, g) in self.u.iter_mut().zip(grad_u) {
            *p -= learning_rate * g;
        }
        for (p, g) in self.b.iter_mut().flatten().flatten().zip(grad_b.iter().flatten().flatten()) {
            *p -= learning_rate * g;
        }
    }

    /// Visit every parameter: weights first, then biases in `(c, i, j)` order.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.u.iter_mut().for_each(&mut f);
        self.b.iter_mut().flatten().flatten().for_each(&mut f);
    }
}

/// Settings of stage-two joint training.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOptions {
    pub train: TrainOptions,
    /// Learning rate of the noise head; defaults to the classifier's.
    pub nmn_learning_rate: f64,
    /// Weight of the trace penalty `sum_c (q00 + q11)`. A positive weight pushes
    /// mass off the diagonal until the classifier can no longer compensate,
    /// which pins down Q when the likelihood alone cannot.
    pub trace_penalty: f64,
    /// Stop the noise head's gradient from reaching the classifier features.
    pub detach_features: bool,
}

impl JointOptions {
    pub fn new(train: TrainOptions) -> Self {
        Self {
            nmn_learning_rate: train.learning_rate,
            train,
            trace_penalty: 0.0,
            detach_features: false,
        }
    }
}

/// Accumulated gradients for one minibatch of joint training.
pub struct JointStep {
    pub loss: f64,
    pub classifier: crate::classifier::Gradients,
    pub u: Vec<f64>,
    pub b: Vec<Transition>,
    /// Per-example logit gradients (rows of the batch; only for mean pooling).
    pub logit_rows: Array2<f64>,
}

/// Gradients of the batch-mean joint loss.
pub fn joint_gradients(
    classifier: &ClassifierState,
    nmn: &NmnState,
    examples: &[&Example],
    pooling: Pooling,
    trace_penalty: f64,
    detach_features: bool,
) -> Result<JointStep> {
    let fwd = model::forward_batch(classifier, examples, pooling)?;
    let n = examples.len() as f64;
    let mut grad_py = Array2::zeros(fwd.p_y.raw_dim());
    let mut grad_h = Array2::zeros(fwd.h.raw_dim());
    let mut u = vec![0.0; nmn.u.len()];
    let mut b = vec![[[0.0; 2]; 2]; nmn.num_classes];
    let mut loss = 0.0;
    for (row, e) in examples.iter().enumerate() {
        let h = fwd.example_feature(row);
        let g = nmn.backward(&h, &fwd.example_probs(row), &e.observed, trace_penalty)?;
        loss += g.loss;
        grad_py.row_mut(row).iter_mut().zip(&g.p_y).for_each(|(d, v)| *d = v / n);
        if nmn.mode == NoiseMode::FeatureDependent {
            grad_h.row_mut(row).iter_mut().zip(&g.h).for_each(|(d, v)| *d = v / n);
        }
        u.iter_mut().zip(&g.u).for_each(|(d, v)| *d += v / n);
        b.iter_mut()
            .flatten()
            .flatten()
            .zip(g.b.iter().flatten().flatten())
            .for_each(|(d, v)| *d += v / n);
    }
    let feed_h = nmn.mode == NoiseMode::FeatureDependent && !detach_features;
    let logit_rows = model::logit_gradients(&fwd, grad_py.view())?;
    let classifier_grads = model::backward_batch(classifier, &fwd, grad_py.view(), feed_h.then(|| grad_h.view()))?;
    Ok(JointStep {
        loss,
        classifier: classifier_grads,
        u,
        b,
        logit_rows,
    })
}

/// Stage two: minimise `-log p(z | x)` over the classifier and the head jointly.
///
/// Returns the mean per-example loss of each epoch.
pub fn train_joint(
    classifier: &mut ClassifierState,
    nmn: &mut NmnState,
    data: &[Example],
    options: &JointOptions,
    seed: u64,
) -> Result<Vec<f64>> {
    train_joint_with(classifier, nmn, data, options, seed, |_, _, _, _| {})
}

/// [`train_joint`] with a callback after each epoch.
pub fn train_joint_with(
    classifier: &mut ClassifierState,
    nmn: &mut NmnState,
    data: &[Example],
    options: &JointOptions,
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64, &ClassifierState, &NmnState),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    check_dim("noise head classes", classifier.output_dim(), nmn.num_classes)?;
    if nmn.mode == NoiseMode::FeatureDependent {
        check_dim("noise head feature", classifier.penultimate_dim(), nmn.feature_dim)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(options.train.epochs);
    for epoch in 0..options.train.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(data.len(), options.train.batch_size, &mut rng) {
            let examples: Vec<&Example> = batch.iter().map(|&i| &data[i]).collect();
            let step = joint_gradients(
                classifier,
                nmn,
                &examples,
                options.train.pooling,
                options.trace_penalty,
                options.detach_features,
            )?;
            total += step.loss;
            classifier.sgd_step(&step.classifier, options.train.learning_rate);
            nmn.sgd_step(&step.u, &step.b, options.nmn_learning_rate);
        }
        let mean = total / data.len() as f64;
        if !mean.is_finite() || !classifier.is_finite() || !nmn.is_finite() {
            return Err(Error::Divergence(format!("joint loss {mean} at epoch {epoch}")));
        }
        on_epoch(epoch, mean, classifier, nmn);
        losses.push(mean);
    }
    Ok(losses)
}

/// Test-time prediction: the noise head is not consulted.
pub fn predict_clean(classifier: &ClassifierState, data: &[Example], pooling: Pooling) -> Result<Array2<f64>> {
    model::predict(classifier, data, pooling)
}

/// Observed-label log-likelihood `sum_n sum_c log p(z_c | x_n)`.
pub fn log_likelihood(classifier: &ClassifierState, nmn: &NmnState, data: &[Example], pooling: Pooling) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(256) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let fwd = model::forward_batch(classifier, &refs, pooling)?;
        for (row, e) in chunk.iter().enumerate() {
            let out = nmn.forward(&fwd.example_feature(row), &fwd.example_probs(row))?;
            total -= crate::prob::bce_loss(&out.p_z, &e.observed)?;
        }
    }
    Ok(total)
}

/// Per-example transitions of a trained head.
pub fn transitions(classifier: &ClassifierState, nmn: &NmnState, data: &[Example], pooling: Pooling) -> Result<Vec<NoiseTransition>> {
    let refs: Vec<&Example> = data.iter().collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in refs.chunks(256) {
        let fwd = model::forward_batch(classifier, chunk, pooling)?;
        for row in 0..chunk.len() {
            out.push(nmn.transition(&fwd.example_feature(row))?);
        }
    }
    Ok(out)
}

/// Mean of `(q10 + q01) / 2` over classes and examples.
pub fn mean_off_diagonal(classifier: &ClassifierState, nmn: &NmnState, data: &[Example], pooling: Pooling) -> Result<f64> {
    let qs = transitions(classifier, nmn, data, pooling)?;
    Ok(qs.iter().map(NoiseTransition::mean_off_diagonal).sum::<f64>() / qs.len().max(1) as f64)
}
