//! Noisy-OR pooling of instance probabilities into a bag probability.

use nmn::mil::{mil_backward, mil_pool};
use nmn::prob::ProbVector;

fn main() -> nmn::Result<()> {
    let instances = vec![
        ProbVector(vec![0.10, 0.70, 0.01]),
        ProbVector(vec![0.20, 0.05, 0.01]),
        ProbVector(vec![0.30, 0.05, 0.01]),
    ];
    let bag = mil_pool(&instances)?;
    for (c, p) in bag.0.iter().enumerate() {
        let direct = 1.0 - instances.iter().map(|i| 1.0 - i.0[c]).product::<f64>();
        println!("class {c}: bag {p:.6}  (1 - prod(1 - p) = {direct:.6})");
    }

    // d bag / d p_i is the product of the other instances' (1 - p).
    let grads = mil_backward(&instances, &[1.0, 0.0, 0.0])?;
    for (i, g) in grads.iter().enumerate() {
        println!("instance {i}: d bag_0 / d p_{i},0 = {:.4}", g[0]);
    }
    Ok(())
}
