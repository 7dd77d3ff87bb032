//! Non-interpolated average precision and grouped mAP.

use ndarray::array;
use nmn::eval::{average_precision, contiguous_groups, mean_ap};

fn main() -> nmn::Result<()> {
    let scores = [0.9, 0.8, 0.7, 0.6];
    let truths = [true, false, true, false];
    // Hits at ranks 1 and 3: (1/1 + 2/3) / 2.
    println!("AP = {:.4}", average_precision(&scores, &truths).unwrap_or(f64::NAN));
    println!("AP without positives = {:?}", average_precision(&scores, &[false; 4]));

    let s = array![[0.9, 0.2, 0.4, 0.1], [0.1, 0.8, 0.3, 0.2], [0.5, 0.6, 0.9, 0.3]];
    let t = array![[true, false, false, false], [false, true, true, false], [true, false, true, false]];
    let report = mean_ap(&s, &t, &contiguous_groups(4, 2))?;
    for (name, v) in &report.groups {
        println!("{name}: {v:?}");
    }
    println!("mAP {:.4}, excluded classes {:?}", report.overall, report.excluded_classes());
    Ok(())
}
