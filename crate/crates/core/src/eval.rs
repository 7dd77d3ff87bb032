//! Ranking metrics: non-interpolated average precision and its class means.

use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{check_dim, Result};

/// Non-interpolated average precision.
///
/// Examples are ranked by descending score; equal scores keep their input
/// order. AP is the mean, over positives, of the precision at each positive's
/// rank. Returns `None` when there are no positives.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), truths.len(), "scores and truths must align");
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // `sort_by` is stable, which fixes the tie order.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if truths[i] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// A named set of classes whose APs are averaged together.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassGroup {
    pub name: String,
    pub classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    /// `None` for classes without any positive example.
    pub per_class: Vec<Option<f64>>,
    /// Group means; `None` for groups without any scorable class.
    pub groups: Vec<(String, Option<f64>)>,
    pub overall: f64,
}

impl MapReport {
    pub fn excluded_classes(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .enumerate()
            .filter_map(|(c, ap)| ap.is_none().then_some(c))
            .collect()
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Per-class AP, group means and the overall mean over scorable classes.
///
/// `scores` and `truths` are `(examples, classes)`.
pub fn mean_ap(scores: &Array2<f64>, truths: &Array2<bool>, groups: &[ClassGroup]) -> Result<MapReport> {
    check_dim("mean_ap rows", scores.nrows(), truths.nrows())?;
    check_dim("mean_ap classes", scores.ncols(), truths.ncols())?;
    let per_class: Vec<Option<f64>> = (0..scores.ncols())
        .into_par_iter()
        .map(|c| {
            let s = scores.column(c).to_vec();
            let t = truths.column(c).to_vec();
            average_precision(&s, &t)
        })
        .collect();
    let groups = groups
        .iter()
        .map(|g| {
            let m = mean_of(g.classes.iter().filter_map(|&c| per_class.get(c).copied().flatten()));
            (g.name.clone(), m)
        })
        .collect();
    let overall = mean_of(per_class.iter().filter_map(|&v| v)).unwrap_or(0.0);
    Ok(MapReport {
        per_class,
        groups,
        overall,
    })
}

/// Split `0..num_classes` into `n` contiguous groups named `G1..Gn`.
pub fn contiguous_groups(num_classes: usize, n: usize) -> Vec<ClassGroup> {
    let n = n.clamp(1, num_classes.max(1));
    (0..n)
        .map(|g| ClassGroup {
            name: format!("G{}", g + 1),
            classes: (g * num_classes / n..(g + 1) * num_classes / n).collect(),
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into())
}

/// One row per labelled run: group columns then `All`.
pub fn write_summary_csv<W: Write>(w: W, rows: &[(String, MapReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if let Some((_, first)) = rows.first() {
        let mut header = vec!["variant".to_string()];
        header.extend(first.groups.iter().map(|(n, _)| n.clone()));
        header.push("All".into());
        out.write_record(&header)?;
    }
    for (label, report) in rows {
        let mut rec = vec![label.clone()];
        rec.extend(report.groups.iter().map(|(_, v)| cell(*v)));
        rec.push(cell(Some(report.overall)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Long format: `variant, class, ap`.
pub fn write_per_class_csv<W: Write>(w: W, rows: &[(String, MapReport)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["variant", "class", "ap"])?;
    for (label, report) in rows {
        for (c, ap) in report.per_class.iter().enumerate() {
            out.write_record([label.clone(), c.to_string(), cell(*ap)])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    /// Precision at each positive's rank, by explicitly listing the ranking.
    pub(crate) fn brute_force_ap(scores: &[f64], truths: &[bool]) -> Option<f64> {
        let n = scores.len();
        // Rank of i = number of items strictly ahead of it under (score desc, index asc).
        let rank = |i: usize| {
            (0..n)
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count()
                + 1
        };
        let positives: Vec<usize> = (0..n).filter(|&i| truths[i]).collect();
        if positives.is_empty() {
            return None;
        }
        let total: f64 = positives
            .iter()
            .map(|&i| {
                let r = rank(i);
                let above = positives.iter().filter(|&&j| rank(j) <= r).count();
                above as f64 / r as f64
            })
            .sum();
        Some(total / positives.len() as f64)
    }

    #[test]
    fn hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_empty() {
        assert_eq!(average_precision(&[0.9, 0.5, 0.1], &[true, true, false]), Some(1.0));
        assert_eq!(average_precision(&[0.9, 0.5], &[false, false]), None);
    }

    #[test]
    fn ties_follow_input_order() {
        let scores = [0.5; 5];
        let truths = [false, true, false, false, true];
        // Ranks 2 and 5: (1/2 + 2/5) / 2.
        assert!((average_precision(&scores, &truths).unwrap() - 0.45).abs() < 1e-15);
        assert_eq!(average_precision(&scores, &truths), brute_force_ap(&scores, &truths));
    }

    #[test]
    fn mean_ap_arithmetic() {
        let scores = array![[0.9, 0.1], [0.1, 0.9], [0.5, 0.5]];
        let truths = array![[true, false], [false, false], [false, true]];
        let r = mean_ap(&scores, &truths, &[]).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(0.5)]);
        assert!((r.overall - 0.75).abs() < 1e-15);

        let single = mean_ap(&scores.slice(ndarray::s![.., 0..1]).to_owned(), &truths.slice(ndarray::s![.., 0..1]).to_owned(), &[]).unwrap();
        assert_eq!(single.overall, 1.0);
    }

    #[test]
    fn classes_without_positives_are_excluded() {
        let scores = array![[0.9, 0.1], [0.1, 0.9]];
        let truths = array![[true, false], [false, false]];
        let groups = vec![ClassGroup { name: "a".into(), classes: vec![1] }];
        let r = mean_ap(&scores, &truths, &groups).unwrap();
        assert_eq!(r.excluded_classes(), vec![1]);
        assert_eq!(r.groups[0].1, None);
        assert_eq!(r.overall, 1.0);
    }

    #[test]
    fn csv_layout() {
        let scores = array![[0.9, 0.1, 0.3], [0.1, 0.9, 0.2]];
        let truths = array![[true, false, true], [false, true, false]];
        let r = mean_ap(&scores, &truths, &contiguous_groups(3, 2)).unwrap();
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &[("baseline".into(), r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("variant,G1,G2,All"));
        assert_eq!(text.lines().nth(1), Some("baseline,1.000000,1.000000,1.000000"));
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(
            v in prop::collection::vec((-5.0..5.0f64, any::<bool>()), 1..30)
        ) {
            let scores: Vec<f64> = v.iter().map(|x| x.0).collect();
            let truths: Vec<bool> = v.iter().map(|x| x.1).collect();
            let squashed: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 3.0).collect();
            prop_assert_eq!(average_precision(&scores, &truths), average_precision(&squashed, &truths));
        }

        #[test]
        fn group_means_recombine_to_overall(
            rows in prop::collection::vec(prop::collection::vec((0.0..1.0f64, any::<bool>()), 7), 2..20),
            cut in 1usize..7,
        ) {
            let n = rows.len();
            let scores = Array2::from_shape_fn((n, 7), |(i, c)| rows[i][c].0);
            let truths = Array2::from_shape_fn((n, 7), |(i, c)| rows[i][c].1);
            let groups = vec![
                ClassGroup { name: "a".into(), classes: (0..cut).collect() },
                ClassGroup { name: "b".into(), classes: (cut..7).collect() },
            ];
            let r = mean_ap(&scores, &truths, &groups).unwrap();
            let mut weighted = 0.0;
            let mut count = 0usize;
            for (g, (_, mean)) in groups.iter().zip(&r.groups) {
                let scorable = g.classes.iter().filter(|&&c| r.per_class[c].is_some()).count();
                if let Some(m) = mean {
                    weighted += m * scorable as f64;
                    count += scorable;
                }
            }
            if count > 0 {
                prop_assert!((weighted / count as f64 - r.overall).abs() <= 1e-12);
            }
        }
    }
}
