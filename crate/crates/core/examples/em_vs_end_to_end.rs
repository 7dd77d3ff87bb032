//! EM and end-to-end training on the same small noisy problem.

use nmn::config::Config;
use nmn::harness::em_compare;

fn main() -> nmn::Result<()> {
    let cfg = Config::default().with_seed(std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0));
    let cmp = em_compare(&cfg)?;
    println!("iter  EM loglik        e2e loglik");
    for (a, b) in cmp.em.iter().zip(&cmp.end_to_end) {
        println!("{:>4}  {:>14.6}  {:>14.6}", a.iteration, a.log_likelihood, b.log_likelihood);
    }
    println!("test mAP: EM {:.4}, end-to-end {:.4}", cmp.em_test_map, cmp.end_to_end_test_map);
    println!("EM vs backprop logit gradients: max |diff| {:.2e}", cmp.max_gradient_deviation);
    Ok(())
}
