//! Finite-difference verification of every analytic gradient.
//!
//! Each suite draws small random configurations (shapes, parameters, inputs,
//! labels), computes the analytic gradient, and compares every component with
//! a central difference. Draws that sit within a rectifier kink of the step
//! are redrawn so the comparison is between two estimates of the same
//! derivative.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{Activation, ClassifierState};
use crate::datagen::{mix_seed, Example};
use crate::em::{self, gradient_equivalence_check};
use crate::error::Result;
use crate::mil::{mil_backward, mil_pool};
use crate::model::Pooling;
use crate::nmn::{joint_gradients, NmnState, NoiseMode};
use crate::prob::{grad_logit_e2e, sigmoid, transform, LabelVector, NoiseTransition, ProbVector};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
/// Denominator floor for the relative error, so components that are zero
/// analytically are compared on an absolute scale.
pub const SCALE_FLOOR: f64 = 1e-4;
// Rectifier draws with a pre-activation closer to zero than this are redrawn.
const KINK_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Suite {
    /// `d(-log p(z|x)) / d logit` through the transformation layer.
    TransformLogits,
    Classifier,
    NoiseHeadWeights,
    NoiseHeadBiases,
    NoiseHeadFeature,
    Mil,
    EmAuxiliary,
    /// Joint loss through classifier, pooling and noise head together.
    EndToEnd,
}

impl Suite {
    pub const ALL: [Suite; 8] = [
        Suite::TransformLogits,
        Suite::Classifier,
        Suite::NoiseHeadWeights,
        Suite::NoiseHeadBiases,
        Suite::NoiseHeadFeature,
        Suite::Mil,
        Suite::EmAuxiliary,
        Suite::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::TransformLogits => "transform-logits",
            Suite::Classifier => "classifier-backprop",
            Suite::NoiseHeadWeights => "noise-head-u",
            Suite::NoiseHeadBiases => "noise-head-b",
            Suite::NoiseHeadFeature => "noise-head-h",
            Suite::Mil => "mil-backward",
            Suite::EmAuxiliary => "em-auxiliary",
            Suite::EndToEnd => "end-to-end",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOptions {
    pub configs: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Deliberately perturb one suite's analytic gradient; the check must
    /// then fail. Used as a negative control.
    pub corrupt: Option<Suite>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            configs: 1000,
            seed: 0,
            step: FD_STEP,
            tolerance: TOLERANCE,
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub configs: usize,
    /// Gradient components compared.
    pub entries: usize,
    pub max_rel_error: f64,
    pub worst_config: usize,
    /// Configurations with at least one component over tolerance.
    pub failures: usize,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0 && self.configs > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Central difference of `loss` with respect to parameter `index`, where
/// `perturb(state, index, delta)` shifts that one parameter.
fn central_params<S: Clone>(
    state: &S,
    count: usize,
    step: f64,
    perturb: impl Fn(&mut S, usize, f64),
    loss: impl Fn(&S) -> f64,
) -> Vec<f64> {
    (0..count)
        .map(|i| {
            let mut plus = state.clone();
            perturb(&mut plus, i, step);
            let mut minus = state.clone();
            perturb(&mut minus, i, -step);
            (loss(&plus) - loss(&minus)) / (2.0 * step)
        })
        .collect()
}

fn central_vec(x: &[f64], step: f64, loss: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    central_params(
        &x.to_vec(),
        x.len(),
        step,
        |v, i, d| v[i] += d,
        |v| loss(v),
    )
}

fn shift_classifier(state: &mut ClassifierState, index: usize, delta: f64) {
    let mut k = 0;
    state.for_each_param_mut(|p| {
        if k == index {
            *p += delta;
        }
        k += 1;
    });
}

fn shift_head(state: &mut NmnState, index: usize, delta: f64) {
    let mut k = 0;
    state.for_each_param_mut(|p| {
        if k == index {
            *p += delta;
        }
        k += 1;
    });
}

// ---------------------------------------------------------------------------
// Random draws

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, lo, hi)).collect()
}

fn random_labels(rng: &mut ChaCha8Rng, k: usize) -> LabelVector {
    LabelVector((0..k).map(|_| rng.random_bool(0.5)).collect())
}

fn random_probs(rng: &mut ChaCha8Rng, k: usize) -> ProbVector {
    ProbVector(random_vec(rng, k, 0.02, 0.98))
}

fn random_classifier(rng: &mut ChaCha8Rng, input: usize, k: usize) -> ClassifierState {
    let depth = rng.random_range(0..3);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..6)).collect();
    let activation = if rng.random_bool(0.5) { Activation::Relu } else { Activation::Tanh };
    let mut clf = ClassifierState::new(input, &hidden, k, activation, rng.random());
    // Non-zero biases so rectifier units are not all switched on at once.
    clf.for_each_param_mut(|p| *p += uniform(rng, -0.3, 0.3));
    clf
}

fn random_head(rng: &mut ChaCha8Rng, mode: NoiseMode, k: usize, d: usize) -> NmnState {
    let mut head = NmnState::new(mode, k, d);
    head.for_each_param_mut(|p| *p = uniform(rng, -1.5, 1.5));
    head
}

fn random_examples(rng: &mut ChaCha8Rng, n: usize, instances: usize, d: usize, k: usize) -> Vec<Example> {
    (0..n)
        .map(|id| {
            let bag = rng.random_range(1..=instances);
            let truth = random_labels(rng, k);
            Example {
                id,
                instances: (0..bag).map(|_| random_vec(rng, d, -1.5, 1.5)).collect(),
                observed: random_labels(rng, k),
                truth,
            }
        })
        .collect()
}

/// Smallest |pre-activation| over every row the pooled forward pass can see.
fn kink_distance(clf: &ClassifierState, examples: &[Example]) -> f64 {
    if clf.activation != Activation::Relu || clf.layers.len() == 1 {
        return f64::INFINITY;
    }
    let mut rows: Vec<Vec<f64>> = examples.iter().flat_map(|e| e.instances.iter().cloned()).collect();
    for e in examples {
        let n = e.instances.len() as f64;
        let mut mean = vec![0.0; clf.input_dim()];
        for inst in &e.instances {
            mean.iter_mut().zip(inst).for_each(|(m, v)| *m += v / n);
        }
        rows.push(mean);
    }
    let d = clf.input_dim();
    let batch = Array2::from_shape_vec((rows.len(), d), rows.concat()).expect("rows have the input width");
    let fwd = clf.forward(batch.view()).expect("input width checked");
    fwd.trace
        .pre_activations
        .iter()
        .flat_map(|a| a.iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

fn random_pooling(rng: &mut ChaCha8Rng) -> Pooling {
    if rng.random_bool(0.5) {
        Pooling::Mean
    } else {
        Pooling::NoisyOr
    }
}

// ---------------------------------------------------------------------------
// Suites. Each returns (analytic, numeric) pairs, or None to redraw.

type Pairs = Vec<(f64, f64)>;

fn zip_pairs(analytic: Vec<f64>, numeric: Vec<f64>) -> Pairs {
    analytic.into_iter().zip(numeric).collect()
}

fn transform_logits(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Pairs>> {
    let k = rng.random_range(1..6);
    let head = random_head(rng, NoiseMode::FeatureIndependent, k, 1);
    let q = head.transition(&[0.0])?;
    let logits = random_vec(rng, k, -3.0, 3.0);
    let z = random_labels(rng, k);
    let loss = |a: &[f64]| -> f64 {
        let p = ProbVector(a.iter().map(|&v| sigmoid(v)).collect());
        let pz = transform(&q, &p).expect("shapes match");
        (0..k)
            .map(|c| if z.get(c) { -pz.0[c].ln() } else { -(1.0 - pz.0[c]).ln() })
            .sum()
    };
    let p = ProbVector::from_logits(&logits);
    let analytic = grad_logit_e2e(&q, &p, &z)?;
    Ok(Some(zip_pairs(analytic, central_vec(&logits, h, loss))))
}

fn classifier_suite(rng: &mut ChaCha8Rng, h: f64) -> Result<Option<Pairs>> {
    let d = rng.random_range(1..6);
    let k = rng.random_range(1..5);
    let n = rng.random_range(1..5);
    let clf = random_classifier(rng, d, k);
    let examples = random_examples(rng, n, 1, d, k);
    if kink_distance(&clf, &examples) < KINK_MARGIN {
        return Ok(None);
    }
    let x = Array2::from_shape_fn((n, d), |(r, c)| examples[r].instances[0][c]);
    let targets = Array2::from_shape_fn((n, k), |(r, c)| examples[r].observed.as_f64(c));
    let penult_dim = clf.penultimate_dim();
    // A second head reading the penultimate activation: loss += sum(w * a).
    let extra = Array2::from_shape_fn((n, penult_dim), |_| uniform(rng, -1.0, 1.0));
    let loss = |s: &ClassifierState| -> f64 {
        let f = s.forward(x.view()).expect("input width checked");
        // Binary cross-entropy written on logits, free of clamping.
        let bce: f64 = f
            .logits
            .iter()
            .zip(targets.iter())
            .map(|(&a, &t)| a.max(0.0) + (-a.abs()).exp().ln_1p() - t * a)
            .sum();
        let side = if s.layers.len() > 1 {
            (f.trace.penultimate() * &extra).sum()
        } else {
            0.0
        };
        bce + side
    };
    let fwd = clf.forward(x.view())?;
    let grad_logits = Array2::from_shape_fn((n, k), |(r, c)| sigmoid_exact(fwd.logits[[r, c]]) - targets[[r, c]]);
    let grads = clf.backward(&fwd.trace, grad_logits.view(), (clf.layers.len() > 1).then(|| extra.view()))?;
    let numeric = central_params(&clf, clf.num_params(), h, shift_classifier, loss);
    Ok(Some(zip_pairs(grads.flatten(), numeric)))
}

fn sigmoid_exact(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

struct HeadDraw {
    head: NmnState,
    h: Vec<f64>,
    p: ProbVector,
    z: LabelVector,
    penalty: f64,
}

fn head_draw(rng: &mut ChaCha8Rng, mode: NoiseMode) -> HeadDraw {
    let k = rng.random_range(1..5);
    let d = rng.random_range(1..6);
    let head = random_head(rng, mode, k, d);
    HeadDraw {
        h: random_vec(rng, d, -1.0, 1.0),
        p: random_probs(rng, k),
        z: random_labels(rng, k),
        penalty: if rng.random_bool(0.3) { uniform(rng, 0.0, 0.5) } else { 0.0 },
        head,
    }
}

fn head_loss(head: &NmnState, draw: &HeadDraw, h: &[f64]) -> f64 {
    head.backward(h, &draw.p, &draw.z, draw.penalty).expect("shapes match").loss
}

fn noise_head_weights(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    let draw = head_draw(rng, NoiseMode::FeatureDependent);
    let g = draw.head.backward(&draw.h, &draw.p, &draw.z, draw.penalty)?;
    let numeric = central_params(&draw.head, draw.head.u.len(), step, shift_head, |s| head_loss(s, &draw, &draw.h));
    Ok(Some(zip_pairs(g.u, numeric)))
}

fn noise_head_biases(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    let mode = if rng.random_bool(0.5) {
        NoiseMode::FeatureDependent
    } else {
        NoiseMode::FeatureIndependent
    };
    let draw = head_draw(rng, mode);
    let g = draw.head.backward(&draw.h, &draw.p, &draw.z, draw.penalty)?;
    let offset = draw.head.u.len();
    let numeric = central_params(
        &draw.head,
        4 * draw.head.num_classes,
        step,
        |s, i, d| shift_head(s, offset + i, d),
        |s| head_loss(s, &draw, &draw.h),
    );
    let mut pairs = zip_pairs(g.b.iter().flatten().flatten().copied().collect(), numeric);
    // The head's gradient on p(y = 1 | x) rides along.
    let p_numeric = central_vec(&draw.p.0, step, |p| {
        draw.head
            .backward(&draw.h, &ProbVector(p.to_vec()), &draw.z, draw.penalty)
            .expect("shapes match")
            .loss
    });
    pairs.extend(zip_pairs(g.p_y, p_numeric));
    Ok(Some(pairs))
}

fn noise_head_feature(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    let draw = head_draw(rng, NoiseMode::FeatureDependent);
    let g = draw.head.backward(&draw.h, &draw.p, &draw.z, draw.penalty)?;
    let numeric = central_vec(&draw.h, step, |h| head_loss(&draw.head, &draw, h));
    Ok(Some(zip_pairs(g.h, numeric)))
}

fn mil_suite(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    let k = rng.random_range(1..5);
    let bag = rng.random_range(1..8);
    let probs: Vec<ProbVector> = (0..bag).map(|_| ProbVector(random_vec(rng, k, 0.01, 0.99))).collect();
    let weights = random_vec(rng, k, -1.0, 1.0);
    let analytic: Vec<f64> = mil_backward(&probs, &weights)?.into_iter().flatten().collect();
    let flat: Vec<f64> = probs.iter().flat_map(|p| p.0.iter().copied()).collect();
    let numeric = central_vec(&flat, step, |x| {
        let bag: Vec<ProbVector> = x.chunks(k).map(|c| ProbVector(c.to_vec())).collect();
        let pooled = mil_pool(&bag).expect("non-empty bag");
        pooled.0.iter().zip(&weights).map(|(p, w)| p * w).sum()
    });
    Ok(Some(zip_pairs(analytic, numeric)))
}

fn em_auxiliary(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    let d = rng.random_range(1..5);
    let k = rng.random_range(1..4);
    let n = rng.random_range(1..5);
    let pooling = random_pooling(rng);
    let clf = random_classifier(rng, d, k);
    let examples = random_examples(rng, n, 3, d, k);
    if kink_distance(&clf, &examples) < KINK_MARGIN {
        return Ok(None);
    }
    let targets = Array2::from_shape_fn((n, k), |_| uniform(rng, 0.0, 1.0));
    let grads = em::auxiliary_gradient(&clf, &targets, &examples, pooling)?;
    let numeric = central_params(&clf, clf.num_params(), step, shift_classifier, |s| {
        -em::auxiliary(s, &targets, &examples, pooling).expect("shapes match")
    });
    Ok(Some(zip_pairs(grads.flatten(), numeric)))
}

fn end_to_end(rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    let d = rng.random_range(1..5);
    let k = rng.random_range(1..4);
    let n = rng.random_range(1..4);
    let pooling = random_pooling(rng);
    let mode = if rng.random_bool(0.5) {
        NoiseMode::FeatureDependent
    } else {
        NoiseMode::FeatureIndependent
    };
    let clf = random_classifier(rng, d, k);
    let head = random_head(rng, mode, k, clf.penultimate_dim());
    let examples = random_examples(rng, n, 3, d, k);
    if kink_distance(&clf, &examples) < KINK_MARGIN {
        return Ok(None);
    }
    let refs: Vec<&Example> = examples.iter().collect();
    let penalty = if rng.random_bool(0.3) { uniform(rng, 0.0, 0.5) } else { 0.0 };
    let step_grads = joint_gradients(&clf, &head, &refs, pooling, penalty, false)?;
    let mean_loss = |c: &ClassifierState, q: &NmnState| {
        joint_gradients(c, q, &refs, pooling, penalty, false).expect("shapes match").loss / n as f64
    };
    let mut pairs = zip_pairs(
        step_grads.classifier.flatten(),
        central_params(&clf, clf.num_params(), step, shift_classifier, |s| mean_loss(s, &head)),
    );
    let head_analytic: Vec<f64> = step_grads
        .u
        .iter()
        .copied()
        .chain(step_grads.b.iter().flatten().flatten().copied())
        .collect();
    pairs.extend(zip_pairs(
        head_analytic,
        central_params(&head, head.num_params(), step, shift_head, |s| mean_loss(&clf, s)),
    ));
    Ok(Some(pairs))
}

fn draw(suite: Suite, rng: &mut ChaCha8Rng, step: f64) -> Result<Option<Pairs>> {
    match suite {
        Suite::TransformLogits => transform_logits(rng, step),
        Suite::Classifier => classifier_suite(rng, step),
        Suite::NoiseHeadWeights => noise_head_weights(rng, step),
        Suite::NoiseHeadBiases => noise_head_biases(rng, step),
        Suite::NoiseHeadFeature => noise_head_feature(rng, step),
        Suite::Mil => mil_suite(rng, step),
        Suite::EmAuxiliary => em_auxiliary(rng, step),
        Suite::EndToEnd => end_to_end(rng, step),
    }
}

fn suite_index(suite: Suite) -> u64 {
    Suite::ALL.iter().position(|&s| s == suite).expect("listed") as u64
}

/// Worst relative error of one configuration, or None if no usable draw was
/// found within the redraw budget.
fn check_config(suite: Suite, opts: &CheckOptions, index: usize) -> Result<Option<(f64, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(opts.seed, 0x6772_6164 + suite_index(suite)), index as u64));
    for _ in 0..MAX_REDRAWS {
        if let Some(mut pairs) = draw(suite, &mut rng, opts.step)? {
            if opts.corrupt == Some(suite) {
                if let Some(first) = pairs.first_mut() {
                    first.0 += 1e-3 * first.0.abs().max(1.0);
                }
            }
            let worst = pairs.iter().map(|&(a, n)| relative_error(a, n)).fold(0.0, f64::max);
            return Ok(Some((worst, pairs.len())));
        }
    }
    Ok(None)
}

pub fn check_suite(suite: Suite, opts: &CheckOptions) -> Result<SuiteReport> {
    let results: Vec<Option<(f64, usize)>> = (0..opts.configs)
        .into_par_iter()
        .map(|i| check_config(suite, opts, i))
        .collect::<Result<_>>()?;
    let mut report = SuiteReport {
        suite,
        configs: 0,
        entries: 0,
        max_rel_error: 0.0,
        worst_config: 0,
        failures: 0,
    };
    for (i, r) in results.into_iter().enumerate() {
        let Some((worst, entries)) = r else { continue };
        report.configs += 1;
        report.entries += entries;
        // NaN counts as a failure and as the worst case.
        if worst.is_nan() || worst > report.max_rel_error {
            report.max_rel_error = if worst.is_nan() { f64::INFINITY } else { worst };
            report.worst_config = i;
        }
        if !(worst < opts.tolerance) {
            report.failures += 1;
        }
    }
    Ok(report)
}

pub fn run(opts: &CheckOptions) -> Result<Vec<SuiteReport>> {
    Suite::ALL.iter().map(|&s| check_suite(s, opts)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceSummary {
    pub configs: usize,
    pub logits: usize,
    pub max_abs_deviation: f64,
}

/// Compare backpropagated logit gradients with the E-step form `p - rho` on
/// random classifiers, heads (both modes) and batches.
pub fn equivalence(configs: usize, seed: u64) -> Result<EquivalenceSummary> {
    let reports: Vec<_> = (0..configs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x6571_7576), i as u64));
            let d = rng.random_range(1..6);
            let k = rng.random_range(1..6);
            let n = rng.random_range(1..6);
            let mode = if rng.random_bool(0.5) {
                NoiseMode::FeatureDependent
            } else {
                NoiseMode::FeatureIndependent
            };
            let clf = random_classifier(&mut rng, d, k);
            let head = random_head(&mut rng, mode, k, clf.penultimate_dim());
            let batch = random_examples(&mut rng, n, 3, d, k);
            gradient_equivalence_check(&clf, &head, &batch)
        })
        .collect::<Result<_>>()?;
    Ok(EquivalenceSummary {
        configs,
        logits: reports.iter().map(|r| r.logits_checked).sum(),
        max_abs_deviation: reports.iter().map(|r| r.max_abs_deviation).fold(0.0, f64::max),
    })
}

/// Stochasticity of Q columns and normalisation of posterior rows on random
/// draws; returns the largest violation seen.
pub fn normalization(configs: usize, seed: u64) -> Result<f64> {
    let worst: Vec<f64> = (0..configs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, 0x6e6f_726d), i as u64));
            let k = rng.random_range(1..8);
            let d = rng.random_range(1..6);
            let mut head = NmnState::new(NoiseMode::FeatureDependent, k, d);
            head.for_each_param_mut(|p| *p = uniform(&mut rng, -8.0, 8.0));
            let q: NoiseTransition = head.transition(&random_vec(&mut rng, d, -3.0, 3.0))?;
            let p = ProbVector(random_vec(&mut rng, k, 0.0, 1.0));
            let rho = crate::prob::posterior(&q, &p)?;
            Ok(q.max_column_error().max(rho.max_row_error()))
        })
        .collect::<Result<_>>()?;
    Ok(worst.into_iter().fold(0.0, f64::max))
}
