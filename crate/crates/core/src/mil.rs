//! Noisy-OR multiple-instance pooling.
//!
//! A bag is positive for a class if any of its instances is. The pooled
//! probability `1 - prod_s (1 - p_s)` is accumulated in log space so that large
//! bags do not underflow.

use crate::error::{check_dim, Error, Result};
use crate::prob::{clamp_prob, LabelVector, ProbVector, PROB_EPS};

/// A borrowed view of one bag: its instances and its bag-level labels.
#[derive(Debug, Clone, Copy)]
pub struct Bag<'a> {
    pub id: usize,
    pub instances: &'a [Vec<f64>],
    pub labels: &'a LabelVector,
}

impl<'a> Bag<'a> {
    pub fn new(id: usize, instances: &'a [Vec<f64>], labels: &'a LabelVector) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyBag);
        }
        Ok(Self {
            id,
            instances,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}

#[inline]
fn log_complement(p: f64) -> f64 {
    (-p.clamp(0.0, 1.0 - PROB_EPS)).ln_1p()
}

fn check_bag(instance_probs: &[ProbVector]) -> Result<usize> {
    let first = instance_probs.first().ok_or(Error::EmptyBag)?;
    let k = first.len();
    for p in instance_probs {
        check_dim("mil instance classes", k, p.len())?;
    }
    Ok(k)
}

/// Per-class `sum_s ln(1 - p_s)`.
fn log_none(instance_probs: &[ProbVector], k: usize) -> Vec<f64> {
    let mut acc = vec![0.0; k];
    for p in instance_probs {
        for (a, &v) in acc.iter_mut().zip(&p.0) {
            *a += log_complement(v);
        }
    }
    acc
}

/// Noisy-OR bag probability per class.
pub fn mil_pool(instance_probs: &[ProbVector]) -> Result<ProbVector> {
    let k = check_bag(instance_probs)?;
    Ok(ProbVector(
        log_none(instance_probs, k)
            .into_iter()
            .map(|s| clamp_prob(-s.exp_m1()))
            .collect(),
    ))
}

/// Video reading: every region of every frame is an instance of one bag.
pub fn mil_pool_video(frames: &[Vec<ProbVector>]) -> Result<ProbVector> {
    let flat: Vec<ProbVector> = frames.iter().flatten().cloned().collect();
    mil_pool(&flat)
}

/// Gradient of a loss with respect to each instance probability, given the
/// gradient with respect to the pooled bag probability.
///
/// `d p_bag / d p_s = prod_{t != s} (1 - p_t)`.
pub fn mil_backward(instance_probs: &[ProbVector], grad_bag_prob: &[f64]) -> Result<Vec<Vec<f64>>> {
    let k = check_bag(instance_probs)?;
    check_dim("mil_backward gradient", k, grad_bag_prob.len())?;
    let total = log_none(instance_probs, k);
    Ok(instance_probs
        .iter()
        .map(|p| {
            p.0.iter()
                .zip(&total)
                .zip(grad_bag_prob)
                .map(|((&ps, &s), &g)| g * (s - log_complement(ps)).exp())
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn direct_product(instance_probs: &[ProbVector], c: usize) -> f64 {
        1.0 - instance_probs.iter().map(|p| 1.0 - p.0[c]).product::<f64>()
    }

    #[test]
    fn single_instance_passes_through() {
        let p = ProbVector(vec![0.2, 0.7, 0.5]);
        let pooled = mil_pool(std::slice::from_ref(&p)).unwrap();
        for (a, b) in pooled.0.iter().zip(&p.0) {
            assert!((a - b).abs() < 1e-15);
        }
        let g = mil_backward(&[p], &[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(g[0], vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn two_halves() {
        let bag = [ProbVector(vec![0.5]), ProbVector(vec![0.5])];
        assert!((mil_pool(&bag).unwrap().0[0] - 0.75).abs() < 1e-15);
        let g = mil_backward(&bag, &[1.0]).unwrap();
        assert!((g[0][0] - 0.5).abs() < 1e-15);
        assert!((g[1][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn saturated_instance_absorbs() {
        let bag = [ProbVector(vec![0.1]), ProbVector(vec![1.0 - PROB_EPS])];
        assert!(mil_pool(&bag).unwrap().0[0] >= 1.0 - PROB_EPS);
    }

    #[test]
    fn empty_bag_is_an_error() {
        assert!(matches!(mil_pool(&[]), Err(Error::EmptyBag)));
        let labels = LabelVector::zeros(2);
        assert!(Bag::new(0, &[], &labels).is_err());
    }

    #[test]
    fn video_is_flattened_image_pooling() {
        let frames = vec![
            vec![ProbVector(vec![0.1, 0.4]), ProbVector(vec![0.3, 0.2])],
            vec![ProbVector(vec![0.6, 0.05])],
        ];
        let flat: Vec<ProbVector> = frames.iter().flatten().cloned().collect();
        assert_eq!(mil_pool_video(&frames).unwrap(), mil_pool(&flat).unwrap());
    }

    #[test]
    fn large_bags_do_not_underflow() {
        let bag = vec![ProbVector(vec![1e-4]); 100_000];
        let pooled = mil_pool(&bag).unwrap().0[0];
        let expected = -(100_000.0 * (-1e-4f64).ln_1p()).exp_m1();
        assert!((pooled - expected).abs() < 1e-12);
    }

    fn bag_strategy() -> impl Strategy<Value = Vec<ProbVector>> {
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, 3), 1..=10)
            .prop_map(|rows| rows.into_iter().map(ProbVector).collect())
    }

    proptest! {
        #[test]
        fn log_space_matches_direct_product(bag in bag_strategy()) {
            let pooled = mil_pool(&bag).unwrap();
            for c in 0..3 {
                let direct = clamp_prob(direct_product(&bag, c));
                prop_assert!((pooled.0[c] - direct).abs() <= 1e-12);
            }
        }

        #[test]
        fn pooled_dominates_every_instance(bag in bag_strategy()) {
            let pooled = mil_pool(&bag).unwrap();
            for p in &bag {
                for c in 0..3 {
                    prop_assert!(pooled.0[c] >= clamp_prob(p.0[c]) - 1e-15);
                }
            }
        }

        #[test]
        fn order_does_not_matter(bag in bag_strategy(), rot in 0usize..10) {
            let mut shuffled = bag.clone();
            shuffled.reverse();
            let n = shuffled.len();
            shuffled.rotate_left(rot % n);
            let a = mil_pool(&bag).unwrap();
            let b = mil_pool(&shuffled).unwrap();
            for c in 0..3 {
                prop_assert!((a.0[c] - b.0[c]).abs() <= 1e-12);
            }
        }

        #[test]
        fn backward_matches_finite_differences(
            bag in prop::collection::vec(prop::collection::vec(0.01..0.99f64, 2), 1..=6),
        ) {
            let bag: Vec<ProbVector> = bag.into_iter().map(ProbVector).collect();
            let grad = mil_backward(&bag, &[1.0, 1.0]).unwrap();
            let step = 1e-5;
            for s in 0..bag.len() {
                for c in 0..2 {
                    let at = |d: f64| {
                        let mut b = bag.clone();
                        b[s].0[c] += d;
                        mil_pool(&b).unwrap().0[c]
                    };
                    let fd = (at(step) - at(-step)) / (2.0 * step);
                    let scale = fd.abs().max(grad[s][c].abs()).max(1e-3);
                    prop_assert!((fd - grad[s][c]).abs() / scale < 1e-6);
                }
            }
        }
    }
}
