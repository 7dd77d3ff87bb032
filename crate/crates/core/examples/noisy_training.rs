//! Two-stage training of all four variants on one noisy synthetic problem.
//!
//! ```text
//! cargo run --release --example noisy_training -- [missing|incorrect|symmetric|replace] [level] [seed]
//! ```

use nmn::config::Config;
use nmn::harness::{clean_splits, noisy_train, run_variants};

fn main() -> nmn::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = Config::default();
    if let Some(kind) = args.next() {
        cfg.data.noise = kind.parse()?;
    }
    let level: f64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0.4);
    let cfg = cfg.with_seed(args.next().and_then(|s| s.parse().ok()).unwrap_or(0));

    let splits = clean_splits(&cfg)?;
    let train = noisy_train(&cfg, &splits.train, level)?;
    println!("{} train / {} test, {:?} noise at {level}", train.len(), splits.test.len(), cfg.data.noise);
    for (model, report) in run_variants(&cfg, &splits, &train, &cfg.train.variants)? {
        let groups: Vec<String> = report.groups.iter().map(|(_, v)| v.map_or("-".into(), |v| format!("{v:.4}"))).collect();
        println!("{:<15} mAP {:.4}  groups [{}]", model.variant.name(), report.overall, groups.join(" "));
    }
    Ok(())
}
