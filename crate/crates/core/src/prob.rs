//! Probability primitives for the noisy-label likelihood.
//!
//! Everything here is a pure function of its arguments. Noise transitions are
//! stored per class as a 2x2 matrix `q[i][j] = p(z = i | y = j)`: the row is the
//! observed (noisy) label and the column is the hidden true label, so each
//! column is a distribution over the observed label.

use crate::error::{check_dim, Result};

/// Lower clamp for probabilities entering logs and divisions.
pub const PROB_EPS: f64 = 1e-7;

pub type Transition = [[f64; 2]; 2];

#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Logistic function, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
#[inline]
pub fn sigmoid(a: f64) -> f64 {
    let s = if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    };
    clamp_prob(s)
}

/// Per-class probabilities of the positive label.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self(logits.iter().map(|&o| sigmoid(o)).collect())
    }

    pub fn clamped(values: &[f64]) -> Self {
        Self(values.iter().map(|&p| clamp_prob(p)).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Binary indicator per class.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelVector(pub Vec<bool>);

impl LabelVector {
    pub fn zeros(num_classes: usize) -> Self {
        Self(vec![false; num_classes])
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        Self(bits.iter().map(|&b| b != 0).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, c: usize) -> bool {
        self.0[c]
    }

    pub fn set(&mut self, c: usize, value: bool) {
        self.0[c] = value;
    }

    pub fn as_f64(&self, c: usize) -> f64 {
        if self.0[c] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        self.0.iter().copied()
    }
}

/// Per-class column-stochastic 2x2 transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseTransition {
    pub q: Vec<Transition>,
}

impl NoiseTransition {
    pub fn identity(num_classes: usize) -> Self {
        Self {
            q: vec![[[1.0, 0.0], [0.0, 1.0]]; num_classes],
        }
    }

    /// Same flip probabilities for every class: `missing = q01`, `incorrect = q10`.
    pub fn uniform(num_classes: usize, missing: f64, incorrect: f64) -> Self {
        let t = [[1.0 - incorrect, missing], [incorrect, 1.0 - missing]];
        Self {
            q: vec![t; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.q.len()
    }

    /// Largest deviation of any column sum from one.
    pub fn max_column_error(&self) -> f64 {
        self.q
            .iter()
            .flat_map(|t| (0..2).map(move |j| (t[0][j] + t[1][j] - 1.0).abs()))
            .fold(0.0, f64::max)
    }

    /// Mean of `(q10 + q01) / 2` over classes.
    pub fn mean_off_diagonal(&self) -> f64 {
        if self.q.is_empty() {
            return 0.0;
        }
        self.q.iter().map(|t| 0.5 * (t[1][0] + t[0][1])).sum::<f64>() / self.q.len() as f64
    }
}

/// Posterior of the true label given each possible observation:
/// `rho[c][j][i] = p(y = j | z = i, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub rho: Vec<Transition>,
}

impl PosteriorMatrix {
    /// `p(y = 1 | z = observed)` per class.
    pub fn at_observed(&self, z: &LabelVector) -> Vec<f64> {
        self.rho
            .iter()
            .zip(z.iter())
            .map(|(r, zc)| r[1][zc as usize])
            .collect()
    }

    pub fn max_row_error(&self) -> f64 {
        self.rho
            .iter()
            .flat_map(|r| (0..2).map(move |i| (r[0][i] + r[1][i] - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Softmax down each column of a 2x2 score matrix.
pub fn column_softmax(scores: &Transition) -> Transition {
    let mut out = [[0.0; 2]; 2];
    for j in 0..2 {
        let m = scores[0][j].max(scores[1][j]);
        let e0 = (scores[0][j] - m).exp();
        let e1 = (scores[1][j] - m).exp();
        let s = e0 + e1;
        out[0][j] = e0 / s;
        out[1][j] = e1 / s;
    }
    out
}

/// Feature-dependent transition: scores `u[c][i][j] . h + b[c][i][j]`.
///
/// `u` is laid out per class as four weight vectors in `(i, j)` order
/// `00, 01, 10, 11`, each of length `h.len()`.
pub fn transition_fd(u: &[Vec<f64>], b: &[Transition], h: &[f64]) -> Result<NoiseTransition> {
    check_dim("transition_fd classes", b.len(), u.len())?;
    let d = h.len();
    let mut q = Vec::with_capacity(b.len());
    for (uc, bc) in u.iter().zip(b) {
        check_dim("transition_fd weights", 4 * d, uc.len())?;
        let mut scores = *bc;
        for i in 0..2 {
            for j in 0..2 {
                let w = &uc[(2 * i + j) * d..(2 * i + j + 1) * d];
                scores[i][j] += dot(w, h);
            }
        }
        q.push(column_softmax(&scores));
    }
    Ok(NoiseTransition { q })
}

/// Feature-independent transition from biases alone.
pub fn transition_fi(b: &[Transition]) -> NoiseTransition {
    NoiseTransition {
        q: b.iter().map(column_softmax).collect(),
    }
}

/// `p(z = 1 | x) = q11 p(y = 1 | x) + q10 p(y = 0 | x)`, clamped.
pub fn transform(q: &NoiseTransition, p_y: &ProbVector) -> Result<ProbVector> {
    check_dim("transform", q.num_classes(), p_y.len())?;
    Ok(ProbVector(
        q.q.iter()
            .zip(&p_y.0)
            .map(|(t, &p)| clamp_prob(t[1][1] * p + t[1][0] * (1.0 - p)))
            .collect(),
    ))
}

#[inline]
fn posterior_positive(t: &Transition, p: f64, pz1: f64, observed: usize) -> f64 {
    let pz = if observed == 1 { pz1 } else { 1.0 - pz1 };
    (t[observed][1] * p / pz).clamp(0.0, 1.0)
}

/// Bayes posterior of the true label for both possible observations.
pub fn posterior(q: &NoiseTransition, p_y: &ProbVector) -> Result<PosteriorMatrix> {
    let p_z = transform(q, p_y)?;
    let rho = q
        .q
        .iter()
        .zip(p_y.0.iter().zip(&p_z.0))
        .map(|(t, (&p, &pz1))| {
            let mut r = [[0.0; 2]; 2];
            for i in 0..2 {
                let pos = posterior_positive(t, p, pz1, i);
                r[1][i] = pos;
                r[0][i] = 1.0 - pos;
            }
            r
        })
        .collect();
    Ok(PosteriorMatrix { rho })
}

/// `p(y = 1 | z, x)` at the observed labels; the soft targets of the classifier.
pub fn soft_targets(q: &NoiseTransition, p_y: &ProbVector, z: &LabelVector) -> Result<Vec<f64>> {
    check_dim("soft_targets", p_y.len(), z.len())?;
    let p_z = transform(q, p_y)?;
    Ok(q.q
        .iter()
        .zip(p_y.0.iter().zip(&p_z.0))
        .zip(z.iter())
        .map(|((t, (&p, &pz1)), zc)| posterior_positive(t, p, pz1, zc as usize))
        .collect())
}

/// Summed binary cross-entropy, the negated observed-label log-likelihood.
pub fn bce_loss(p: &ProbVector, targets: &LabelVector) -> Result<f64> {
    check_dim("bce_loss", p.len(), targets.len())?;
    Ok(p.0
        .iter()
        .zip(targets.iter())
        .map(|(&pc, zc)| {
            let pc = clamp_prob(pc);
            if zc {
                -pc.ln()
            } else {
                -(1.0 - pc).ln()
            }
        })
        .sum())
}

/// Cross-entropy against soft targets in `[0, 1]`.
pub fn soft_bce_loss(p: &ProbVector, targets: &[f64]) -> Result<f64> {
    check_dim("soft_bce_loss", p.len(), targets.len())?;
    Ok(p.0
        .iter()
        .zip(targets)
        .map(|(&pc, &t)| {
            let pc = clamp_prob(pc);
            -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln())
        })
        .sum())
}

/// Closed-form logit gradient of `bce_loss(transform(q, p_y), z)`:
/// `p(y = 1 | x) - p(y = 1 | z, x)`.
pub fn grad_logit_e2e(q: &NoiseTransition, p_y: &ProbVector, z: &LabelVector) -> Result<Vec<f64>> {
    let rho = soft_targets(q, p_y, z)?;
    Ok(p_y.0.iter().zip(rho).map(|(&p, r)| p - r).collect())
}

/// The same gradient by the chain rule through the transformation:
/// `dL/dp_z * dp_z/dp_y * dp_y/do`.
pub fn grad_logit_chain(
    q: &NoiseTransition,
    p_y: &ProbVector,
    z: &LabelVector,
) -> Result<Vec<f64>> {
    check_dim("grad_logit_chain", p_y.len(), z.len())?;
    let p_z = transform(q, p_y)?;
    Ok(q.q
        .iter()
        .zip(p_y.0.iter().zip(&p_z.0))
        .zip(z.iter())
        .map(|((t, (&p, &pz1)), zc)| {
            let dl_dpz = if zc { -1.0 / pz1 } else { 1.0 / (1.0 - pz1) };
            dl_dpz * (t[1][1] - t[1][0]) * p * (1.0 - p)
        })
        .collect())
}

/// Noise-free logit gradient `p(y = 1 | x) - z`.
pub fn grad_logit_clean(p_y: &ProbVector, z: &LabelVector) -> Vec<f64> {
    p_y.0
        .iter()
        .zip(z.iter())
        .map(|(&p, zc)| p - if zc { 1.0 } else { 0.0 })
        .collect()
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
