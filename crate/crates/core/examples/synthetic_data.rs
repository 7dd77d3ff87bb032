//! Generate a clean dataset, corrupt it, and count what changed.

use nmn::datagen::{generate_clean, inject_incorrect, inject_missing, replace_label_sets, GeneratorConfig, NoiseCounts};

fn main() -> nmn::Result<()> {
    let clean = generate_clean(&GeneratorConfig::default())?;
    let priors = clean.class_priors();
    println!(
        "{} examples, {} classes, {} features; priors {:.3}..{:.3}",
        clean.len(),
        clean.num_classes,
        clean.feature_dim,
        priors.iter().cloned().fold(f64::INFINITY, f64::min),
        priors.iter().cloned().fold(0.0, f64::max)
    );
    let show = |name: &str, c: NoiseCounts| {
        println!(
            "{name:<16} missing {:.3}  incorrect {:.3}  false-positive share {:.3}",
            c.missing_rate(),
            c.incorrect_rate(),
            c.false_positive_share()
        )
    };
    show("missing 0.3", NoiseCounts::of(&inject_missing(clean.clone(), 0.3, 1)?));
    show("incorrect 0.3", NoiseCounts::of(&inject_incorrect(clean.clone(), 0.3, 1)?));
    for f in [0.2, 0.4, 0.6, 0.8] {
        show(&format!("replace {f}"), NoiseCounts::of(&replace_label_sets(clean.clone(), f, 1)?));
    }
    Ok(())
}
