//! Expectation-maximisation over the hidden true labels.
//!
//! This is the reference trainer the end-to-end system is checked against. The
//! E-step computes `p(y | z, x)` with the current parameters; the classifier
//! M-step ascends the expected complete-data log-likelihood with those
//! posteriors frozen as soft targets; the noise M-step ascends the observed
//! likelihood with the classifier frozen. Both M-steps are full-batch
//! gradient ascent with step halving, so no inner step ever lowers its
//! objective.

use std::io::Write;

use ndarray::Array2;

use crate::classifier::{ClassifierState, Gradients};
use crate::datagen::Example;
use crate::error::{Error, Result};
use crate::eval::mean_ap;
use crate::model::{self, Pooling};
use crate::nmn::{self, NmnState};
use crate::prob::{clamp_prob, posterior, PosteriorMatrix};

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct EmRecord {
    pub iteration: usize,
    pub log_likelihood: f64,
    pub train_map: f64,
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub classifier: ClassifierState,
    pub nmn: NmnState,
    pub iteration: usize,
    pub trajectory: Vec<EmRecord>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub outer_iterations: usize,
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub pooling: Pooling,
    /// Stop once an outer iteration gains less than this much likelihood.
    pub tolerance: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            outer_iterations: 10,
            inner_steps: 20,
            learning_rate: 0.5,
            pooling: Pooling::Mean,
            tolerance: 1e-6,
        }
    }
}

impl EmState {
    pub fn new(classifier: ClassifierState, nmn: NmnState) -> Self {
        Self {
            classifier,
            nmn,
            iteration: 0,
            trajectory: Vec::new(),
            converged: false,
        }
    }
}

fn refs(data: &[Example]) -> Vec<&Example> {
    data.iter().collect()
}

/// Posterior of the true labels for every example under the current parameters.
pub fn e_step(classifier: &ClassifierState, nmn: &NmnState, data: &[Example], pooling: Pooling) -> Result<Vec<PosteriorMatrix>> {
    let fwd = model::forward_batch(classifier, &refs(data), pooling)?;
    (0..data.len())
        .map(|row| {
            let q = nmn.transition(&fwd.example_feature(row))?;
            posterior(&q, &fwd.example_probs(row))
        })
        .collect()
}

/// `p(y = 1 | z, x)` at the observed labels, as an `(examples, classes)` matrix.
pub fn soft_targets(posteriors: &[PosteriorMatrix], data: &[Example]) -> Array2<f64> {
    let k = posteriors.first().map(|p| p.rho.len()).unwrap_or(0);
    let mut out = Array2::zeros((data.len(), k));
    for (row, (post, e)) in posteriors.iter().zip(data).enumerate() {
        for (c, v) in post.at_observed(&e.observed).into_iter().enumerate() {
            out[[row, c]] = v;
        }
    }
    out
}

/// Expected complete-data log-likelihood of the classifier,
/// `sum rho log p + (1 - rho) log(1 - p)`.
pub fn auxiliary(classifier: &ClassifierState, targets: &Array2<f64>, data: &[Example], pooling: Pooling) -> Result<f64> {
    let fwd = model::forward_batch(classifier, &refs(data), pooling)?;
    Ok(fwd
        .p_y
        .iter()
        .zip(targets.iter())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            t * p.ln() + (1.0 - t) * (1.0 - p).ln()
        })
        .sum())
}

/// Gradient of the negated auxiliary function with respect to the classifier.
///
/// With plain sigmoid outputs the logit gradient is `p(y = 1 | x) - rho`.
pub fn auxiliary_gradient(classifier: &ClassifierState, targets: &Array2<f64>, data: &[Example], pooling: Pooling) -> Result<Gradients> {
    let fwd = model::forward_batch(classifier, &refs(data), pooling)?;
    let grad_py = Array2::from_shape_fn(fwd.p_y.raw_dim(), |(r, c)| {
        let p = clamp_prob(fwd.p_y[[r, c]]);
        let t = targets[[r, c]];
        -(t / p - (1.0 - t) / (1.0 - p))
    });
    model::backward_batch(classifier, &fwd, grad_py.view(), None)
}

/// Gradient ascent on the auxiliary function with the posteriors frozen.
pub fn m_step_classifier(
    classifier: &mut ClassifierState,
    posteriors: &[PosteriorMatrix],
    data: &[Example],
    inner_steps: usize,
    learning_rate: f64,
    pooling: Pooling,
) -> Result<()> {
    let targets = soft_targets(posteriors, data);
    let scale = 1.0 / data.len().max(1) as f64;
    let mut current = auxiliary(classifier, &targets, data, pooling)?;
    for _ in 0..inner_steps {
        let grads = auxiliary_gradient(classifier, &targets, data, pooling)?;
        let mut lr = learning_rate * scale;
        for _ in 0..MAX_HALVINGS {
            let mut trial = classifier.clone();
            trial.sgd_step(&grads, lr);
            let value = auxiliary(&trial, &targets, data, pooling)?;
            if value >= current {
                *classifier = trial;
                current = value;
                break;
            }
            lr *= 0.5;
        }
    }
    Ok(())
}

/// Gradient of the negated observed log-likelihood with respect to the noise
/// head, classifier frozen.
pub fn noise_gradient(classifier: &ClassifierState, nmn: &NmnState, data: &[Example], pooling: Pooling) -> Result<(Vec<f64>, Vec<crate::prob::Transition>)> {
    let fwd = model::forward_batch(classifier, &refs(data), pooling)?;
    let mut gu = vec![0.0; nmn.u.len()];
    let mut gb = vec![[[0.0; 2]; 2]; nmn.num_classes];
    for (row, e) in data.iter().enumerate() {
        let g = nmn.backward(&fwd.example_feature(row), &fwd.example_probs(row), &e.observed, 0.0)?;
        gu.iter_mut().zip(&g.u).for_each(|(d, v)| *d += v);
        gb.iter_mut()
            .flatten()
            .flatten()
            .zip(g.b.iter().flatten().flatten())
            .for_each(|(d, v)| *d += v);
    }
    Ok((gu, gb))
}

/// Gradient ascent on the observed likelihood over the noise head only.
pub fn m_step_noise(
    classifier: &ClassifierState,
    nmn: &mut NmnState,
    data: &[Example],
    inner_steps: usize,
    learning_rate: f64,
    pooling: Pooling,
) -> Result<()> {
    let scale = 1.0 / data.len().max(1) as f64;
    let mut current = nmn::log_likelihood(classifier, nmn, data, pooling)?;
    for _ in 0..inner_steps {
        let (gu, gb) = noise_gradient(classifier, nmn, data, pooling)?;
        let mut lr = learning_rate * scale;
        for _ in 0..MAX_HALVINGS {
            let mut trial = nmn.clone();
            trial.sgd_step(&gu, &gb, lr);
            let value = nmn::log_likelihood(classifier, &trial, data, pooling)?;
            if value >= current {
                *nmn = trial;
                current = value;
                break;
            }
            lr *= 0.5;
        }
    }
    Ok(())
}

fn train_map(classifier: &ClassifierState, data: &[Example], pooling: Pooling) -> Result<f64> {
    let scores = model::predict(classifier, data, pooling)?;
    let k = classifier.output_dim();
    let truths = Array2::from_shape_fn((data.len(), k), |(r, c)| data[r].truth.get(c));
    Ok(mean_ap(&scores, &truths, &[])?.overall)
}

/// Alternate E-step, classifier M-step and noise M-step, recording the
/// observed log-likelihood after every outer iteration (and once before the
/// first).
pub fn train_em(mut state: EmState, data: &[Example], config: &EmConfig) -> Result<EmState> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let record = |s: &EmState| -> Result<EmRecord> {
        Ok(EmRecord {
            iteration: s.iteration,
            log_likelihood: nmn::log_likelihood(&s.classifier, &s.nmn, data, config.pooling)?,
            train_map: train_map(&s.classifier, data, config.pooling)?,
        })
    };
    if state.trajectory.is_empty() {
        let first = record(&state)?;
        state.trajectory.push(first);
    }
    for _ in 0..config.outer_iterations {
        let posteriors = e_step(&state.classifier, &state.nmn, data, config.pooling)?;
        m_step_classifier(
            &mut state.classifier,
            &posteriors,
            data,
            config.inner_steps,
            config.learning_rate,
            config.pooling,
        )?;
        m_step_noise(
            &state.classifier,
            &mut state.nmn,
            data,
            config.inner_steps,
            config.learning_rate,
            config.pooling,
        )?;
        state.iteration += 1;
        let rec = record(&state)?;
        if !rec.log_likelihood.is_finite() {
            return Err(Error::Divergence(format!("EM likelihood at iteration {}", state.iteration)));
        }
        let gain = rec.log_likelihood - state.trajectory.last().map(|r| r.log_likelihood).unwrap_or(f64::NEG_INFINITY);
        state.trajectory.push(rec);
        if gain < config.tolerance {
            state.converged = true;
            break;
        }
    }
    Ok(state)
}

/// Largest per-logit gap between the backpropagated end-to-end gradient and
/// the EM form `p(y = 1 | x) - p(y = 1 | z, x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_deviation: f64,
    pub logits_checked: usize,
}

pub fn gradient_equivalence_check(classifier: &ClassifierState, nmn: &NmnState, batch: &[Example]) -> Result<EquivalenceReport> {
    let pooling = Pooling::Mean;
    let fwd = model::forward_batch(classifier, &refs(batch), pooling)?;
    // (a) chain rule through the transformation layer, then the model's own
    // backward path from pooled probabilities to logits.
    let mut grad_py = Array2::zeros(fwd.p_y.raw_dim());
    for (row, e) in batch.iter().enumerate() {
        let g = nmn.backward(&fwd.example_feature(row), &fwd.example_probs(row), &e.observed, 0.0)?;
        grad_py.row_mut(row).iter_mut().zip(&g.p_y).for_each(|(d, v)| *d = *v);
    }
    let backprop = model::logit_gradients(&fwd, grad_py.view())?;
    // (b) E-step posteriors as soft targets.
    let targets = soft_targets(&e_step(classifier, nmn, batch, pooling)?, batch);
    let mut max_dev: f64 = 0.0;
    for ((a, &p), &rho) in backprop.iter().zip(fwd.p_y.iter()).zip(targets.iter()) {
        max_dev = max_dev.max((a - (p - rho)).abs());
    }
    Ok(EquivalenceReport {
        max_abs_deviation: max_dev,
        logits_checked: backprop.len(),
    })
}

/// `iteration,loglik,train_mAP`.
pub fn write_trajectory_csv<W: Write>(w: W, trajectory: &[EmRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["iteration", "loglik", "train_mAP"])?;
    for r in trajectory {
        out.write_record([r.iteration.to_string(), format!("{:.10}", r.log_likelihood), format!("{:.6}", r.train_map)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Activation;
    use crate::datagen::{generate_clean, GeneratorConfig};
    use crate::nmn::NoiseMode;

    fn tiny() -> Vec<Example> {
        generate_clean(&GeneratorConfig {
            n_examples: 40,
            num_classes: 3,
            feature_dim: 4,
            num_clusters: 1,
            seed: 5,
            ..GeneratorConfig::default()
        })
        .unwrap()
        .examples
    }

    #[test]
    fn identity_posteriors_are_the_observations() {
        let data = tiny();
        let clf = ClassifierState::new(4, &[6], 3, Activation::Relu, 1);
        let head = NmnState::pinned_identity(NoiseMode::FeatureIndependent, 3, 6);
        let post = e_step(&clf, &head, &data, Pooling::Mean).unwrap();
        for (p, e) in post.iter().zip(&data) {
            for (c, v) in p.at_observed(&e.observed).into_iter().enumerate() {
                assert_eq!(v, e.observed.as_f64(c));
            }
        }
    }

    #[test]
    fn self_consistent_targets_give_zero_gradient() {
        let data = tiny();
        let clf = ClassifierState::new(4, &[6], 3, Activation::Relu, 2);
        let targets = model::predict(&clf, &data, Pooling::Mean).unwrap();
        let g = auxiliary_gradient(&clf, &targets, &data, Pooling::Mean).unwrap();
        assert!(g.max_abs() < 1e-12);
        let mut moved = clf.clone();
        let post: Vec<PosteriorMatrix> = (0..data.len())
            .map(|r| PosteriorMatrix {
                rho: (0..3)
                    .map(|c| {
                        let p = targets[[r, c]];
                        [[1.0 - p, 1.0 - p], [p, p]]
                    })
                    .collect(),
            })
            .collect();
        m_step_classifier(&mut moved, &post, &data, 3, 0.5, Pooling::Mean).unwrap();
        for (a, b) in moved.layers.iter().zip(&clf.layers) {
            assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| (x - y).abs() < 1e-12));
        }
    }

    #[test]
    fn zero_iterations_return_initial_state() {
        let data = tiny();
        let clf = ClassifierState::new(4, &[6], 3, Activation::Relu, 3);
        let head = NmnState::new(NoiseMode::FeatureIndependent, 3, 6);
        let cfg = EmConfig {
            outer_iterations: 0,
            ..EmConfig::default()
        };
        let out = train_em(EmState::new(clf.clone(), head.clone()), &data, &cfg).unwrap();
        assert_eq!(out.classifier, clf);
        assert_eq!(out.nmn, head);
        assert_eq!(out.iteration, 0);
        assert_eq!(out.trajectory.len(), 1);
    }

    #[test]
    fn equivalence_on_random_parameters() {
        let data = tiny();
        for seed in 0..20 {
            let clf = ClassifierState::new(4, &[6], 3, Activation::Relu, seed);
            let mut head = NmnState::new(NoiseMode::FeatureDependent, 3, 6);
            let mut k = seed as f64;
            head.for_each_param_mut(|p| {
                k += 1.0;
                *p = (k * 0.7).sin();
            });
            let r = gradient_equivalence_check(&clf, &head, &data).unwrap();
            assert!(r.max_abs_deviation <= 1e-12, "{r:?}");
            assert_eq!(r.logits_checked, 120);
        }
    }
}
