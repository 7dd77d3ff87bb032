//! Check every analytic gradient against central differences.
//!
//! ```text
//! cargo run --release --example gradient_check -- [configs] [seed]
//! ```

use std::time::Instant;

use nmn::gradcheck::{self, CheckOptions};

fn main() -> nmn::Result<()> {
    let mut args = std::env::args().skip(1);
    let configs = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let opts = CheckOptions { configs, seed, ..CheckOptions::default() };

    let start = Instant::now();
    println!("{:<20} {:>7} {:>9} {:>12}  verdict", "suite", "configs", "entries", "max rel err");
    for r in gradcheck::run(&opts)? {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<20} {:>7} {:>9} {:>12.3e}  {verdict}", r.suite.name(), r.configs, r.entries, r.max_rel_error);
    }
    let eq = gradcheck::equivalence(configs, seed)?;
    println!("EM vs backprop logit gradients: max |diff| {:.3e} over {} logits", eq.max_abs_deviation, eq.logits);
    println!("Q column / posterior row sums: max error {:.3e}", gradcheck::normalization(configs, seed)?);
    println!("{:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}
