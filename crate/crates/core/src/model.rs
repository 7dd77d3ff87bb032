//! Example-level forward and backward passes.
//!
//! An example is a bag of instance vectors. Without MIL the classifier sees the
//! mean instance; with MIL every instance is classified and the per-instance
//! probabilities are combined by noisy-OR. In both cases the noise head's
//! feature `h` is the mean penultimate activation over the rows of the example.

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;

use crate::classifier::{ClassifierState, Forward, Gradients};
use crate::datagen::Example;
use crate::error::{check_dim, Error, Result};
use crate::mil::{mil_backward, mil_pool};
use crate::prob::{clamp_prob, LabelVector, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// Classify the mean instance.
    Mean,
    /// Classify every instance and pool with noisy-OR.
    NoisyOr,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    pub pooling: Pooling,
    pub rows: Forward,
    /// `offsets[b]..offsets[b + 1]` are the classifier rows of example `b`.
    pub offsets: Vec<usize>,
    /// `p(y = 1 | x)` per example and class.
    pub p_y: Array2<f64>,
    /// Pooled penultimate feature per example.
    pub h: Array2<f64>,
}

impl BatchForward {
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn example_probs(&self, b: usize) -> ProbVector {
        ProbVector(self.p_y.row(b).to_vec())
    }

    pub fn example_feature(&self, b: usize) -> Vec<f64> {
        self.h.row(b).to_vec()
    }
}

fn stack_rows(examples: &[&Example], pooling: Pooling, dim: usize) -> Result<(Array2<f64>, Vec<usize>)> {
    let mut offsets = Vec::with_capacity(examples.len() + 1);
    offsets.push(0);
    let total = match pooling {
        Pooling::Mean => examples.len(),
        Pooling::NoisyOr => examples.iter().map(|e| e.instances.len()).sum(),
    };
    let mut rows = Array2::zeros((total, dim));
    let mut r = 0;
    for e in examples {
        if e.instances.is_empty() {
            return Err(Error::EmptyBag);
        }
        for inst in &e.instances {
            check_dim("instance features", dim, inst.len())?;
        }
        match pooling {
            Pooling::Mean => {
                let inv = 1.0 / e.instances.len() as f64;
                let mut row = rows.row_mut(r);
                for inst in &e.instances {
                    for (dst, &v) in row.iter_mut().zip(inst) {
                        *dst += v * inv;
                    }
                }
                r += 1;
            }
            Pooling::NoisyOr => {
                for inst in &e.instances {
                    rows.row_mut(r).iter_mut().zip(inst).for_each(|(d, &v)| *d = v);
                    r += 1;
                }
            }
        }
        offsets.push(r);
    }
    Ok((rows, offsets))
}

pub fn forward_batch(state: &ClassifierState, examples: &[&Example], pooling: Pooling) -> Result<BatchForward> {
    let (input, offsets) = stack_rows(examples, pooling, state.input_dim())?;
    let rows = state.forward(input.view())?;
    let k = state.output_dim();
    let dh = state.penultimate_dim();
    let n = examples.len();
    let mut p_y = Array2::zeros((n, k));
    let mut h = Array2::zeros((n, dh));
    let penultimate = rows.trace.penultimate();
    for b in 0..n {
        let (lo, hi) = (offsets[b], offsets[b + 1]);
        let pooled = match pooling {
            Pooling::Mean => rows.probs.row(lo).to_vec(),
            Pooling::NoisyOr => {
                let inst: Vec<ProbVector> = (lo..hi).map(|r| ProbVector(rows.probs.row(r).to_vec())).collect();
                mil_pool(&inst)?.0
            }
        };
        p_y.row_mut(b).iter_mut().zip(pooled).for_each(|(d, v)| *d = v);
        let feat = penultimate.slice(s![lo..hi, ..]).mean_axis(ndarray::Axis(0)).expect("nonempty bag");
        h.row_mut(b).assign(&feat);
    }
    Ok(BatchForward {
        pooling,
        rows,
        offsets,
        p_y,
        h,
    })
}

/// Per-row logit gradients from gradients on the pooled probabilities.
pub fn logit_gradients(fwd: &BatchForward, grad_py: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_dim("pooled gradient rows", fwd.len(), grad_py.nrows())?;
    let probs = &fwd.rows.probs;
    let mut grad = Array2::zeros(probs.raw_dim());
    for b in 0..fwd.len() {
        let (lo, hi) = (fwd.offsets[b], fwd.offsets[b + 1]);
        match fwd.pooling {
            Pooling::Mean => {
                for c in 0..probs.ncols() {
                    let p = probs[[lo, c]];
                    grad[[lo, c]] = grad_py[[b, c]] * p * (1.0 - p);
                }
            }
            Pooling::NoisyOr => {
                let inst: Vec<ProbVector> = (lo..hi).map(|r| ProbVector(probs.row(r).to_vec())).collect();
                let per_instance = mil_backward(&inst, grad_py.row(b).as_slice().unwrap_or(&grad_py.row(b).to_vec()))?;
                for (r, g) in (lo..hi).zip(per_instance) {
                    for (c, gc) in g.into_iter().enumerate() {
                        let p = probs[[r, c]];
                        grad[[r, c]] = gc * p * (1.0 - p);
                    }
                }
            }
        }
    }
    Ok(grad)
}

/// Backpropagate gradients on the pooled probabilities (and optionally on the
/// pooled feature `h`) into classifier parameter gradients.
pub fn backward_batch(
    state: &ClassifierState,
    fwd: &BatchForward,
    grad_py: ArrayView2<f64>,
    grad_h: Option<ArrayView2<f64>>,
) -> Result<Gradients> {
    let grad_logits = logit_gradients(fwd, grad_py)?;
    let grad_pen = match grad_h {
        None => None,
        Some(gh) => {
            check_dim("feature gradient rows", fwd.len(), gh.nrows())?;
            let mut rows = Array2::zeros(fwd.rows.trace.penultimate().raw_dim());
            for b in 0..fwd.len() {
                let (lo, hi) = (fwd.offsets[b], fwd.offsets[b + 1]);
                let inv = 1.0 / (hi - lo) as f64;
                for r in lo..hi {
                    rows.row_mut(r).scaled_add(inv, &gh.row(b));
                }
            }
            Some(rows)
        }
    };
    state.backward(&fwd.rows.trace, grad_logits.view(), grad_pen.as_ref().map(|g| g.view()))
}

/// Summed cross-entropy of `p` against hard labels, and the gradient of the
/// batch-mean loss with respect to `p`.
pub fn bce_and_grad(p: &Array2<f64>, targets: &[&LabelVector]) -> Result<(f64, Array2<f64>)> {
    check_dim("bce batch", p.nrows(), targets.len())?;
    let n = p.nrows().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(p.raw_dim());
    for (b, z) in targets.iter().enumerate() {
        check_dim("bce classes", p.ncols(), z.len())?;
        for c in 0..p.ncols() {
            let pc = clamp_prob(p[[b, c]]);
            if z.get(c) {
                loss -= pc.ln();
                grad[[b, c]] = -1.0 / (pc * n);
            } else {
                loss -= (1.0 - pc).ln();
                grad[[b, c]] = 1.0 / ((1.0 - pc) * n);
            }
        }
    }
    Ok((loss, grad))
}

/// Clean predictions `p(y = 1 | x)` for every example, row-aligned with `data`.
pub fn predict(state: &ClassifierState, data: &[Example], pooling: Pooling) -> Result<Array2<f64>> {
    const CHUNK: usize = 256;
    let parts: Vec<Array2<f64>> = data
        .par_chunks(CHUNK)
        .map(|chunk| {
            let refs: Vec<&Example> = chunk.iter().collect();
            forward_batch(state, &refs, pooling).map(|f| f.p_y)
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros((data.len(), state.output_dim()));
    for (i, part) in parts.into_iter().enumerate() {
        let lo = i * CHUNK;
        out.slice_mut(s![lo..lo + part.nrows(), ..]).assign(&part);
    }
    Ok(out)
}
