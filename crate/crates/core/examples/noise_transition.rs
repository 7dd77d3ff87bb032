//! How a per-class 2x2 transition turns clean probabilities into noisy ones,
//! and what the posterior over the true label looks like given a noisy label.

use nmn::prob::{posterior, transform, LabelVector, NoiseTransition, ProbVector};

fn main() -> nmn::Result<()> {
    // Three classes, 30% of positives go missing, 5% of negatives get a wrong tag.
    let q = NoiseTransition::uniform(3, 0.3, 0.05);
    let p_y = ProbVector(vec![0.9, 0.5, 0.05]);
    let p_z = transform(&q, &p_y)?;
    println!("class  p(y=1)  p(z=1)");
    for c in 0..3 {
        println!("{c:>5}  {:>6.3}  {:>6.3}", p_y.0[c], p_z.0[c]);
    }

    let rho = posterior(&q, &p_y)?;
    let z = LabelVector(vec![false, false, true]);
    // A missing tag on a confident positive is still believed positive.
    println!("\np(y=1 | z) for z = {:?}", z.0);
    for (c, r) in rho.at_observed(&z).iter().enumerate() {
        println!("{c:>5}  {r:.3}");
    }
    println!("\nmax |column sum - 1| {:.1e}", q.max_column_error());
    Ok(())
}
