//! Experiment runner behind the command-line tool.
//!
//! The protocol: generate clean data, split it, corrupt the training split,
//! train the classifier on the noisy labels (stage one), then either continue
//! plain training for the stage-two budget or attach a noise head and
//! fine-tune both jointly. Test predictions come from the classifier alone and
//! are scored against the hidden true labels.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::classifier::{train_baseline_with, Activation, ClassifierState, TrainOptions};
use crate::config::{Config, NoiseSpec, Variant};
use crate::datagen::{
    generate_clean, inject_incorrect, inject_missing, inject_symmetric, load_dataset, mix_seed, noise_report,
    replace_label_sets, save_dataset, GeneratorConfig, SyntheticDataset,
};
use crate::em::{gradient_equivalence_check, train_em, write_trajectory_csv, EmConfig, EmRecord, EmState};
use crate::error::{Error, Result};
use crate::eval::{contiguous_groups, mean_ap, write_per_class_csv, write_summary_csv, MapReport};
use crate::model::Pooling;
use crate::nmn::{self, train_joint_with, JointOptions, NmnState, NoiseMode};

// Seed streams derived from the run seed.
const STREAM_INIT: u64 = 101;
const STREAM_STAGE1: u64 = 102;
const STREAM_STAGE2: u64 = 103;
const STREAM_NOISE: u64 = 104;
const STREAM_SPLIT: u64 = 105;

pub struct Splits {
    pub train: SyntheticDataset,
    pub val: SyntheticDataset,
    pub test: SyntheticDataset,
}

pub fn apply_noise(data: SyntheticDataset, spec: NoiseSpec, level: f64, seed: u64) -> Result<SyntheticDataset> {
    match spec {
        NoiseSpec::None => Ok(data),
        NoiseSpec::Missing => inject_missing(data, level, seed),
        NoiseSpec::Incorrect => inject_incorrect(data, level, seed),
        NoiseSpec::Symmetric => inject_symmetric(data, level, seed),
        NoiseSpec::Replace => replace_label_sets(data, level, seed),
    }
}

/// Clean train/validation/test splits; the same for every noise level.
pub fn clean_splits(cfg: &Config) -> Result<Splits> {
    let generator = GeneratorConfig {
        seed: cfg.seed,
        ..cfg.data.generator.clone()
    };
    let clean = generate_clean(&generator)?;
    let mut parts = clean.split(&cfg.data.split, mix_seed(cfg.seed, STREAM_SPLIT)).into_iter();
    let (train, val, test) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    Ok(Splits { train, val, test })
}

/// Noisy training split at `level`. The noise stream does not depend on the
/// level, so flips at a lower rate are a subset of flips at a higher one for
/// the independent-flip processes.
pub fn noisy_train(cfg: &Config, clean_train: &SyntheticDataset, level: f64) -> Result<SyntheticDataset> {
    apply_noise(clean_train.clone(), cfg.data.noise, level, mix_seed(cfg.seed, STREAM_NOISE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub stage: u8,
    pub train_loss: f64,
    pub val_map: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub variant: Variant,
    pub classifier: ClassifierState,
    pub nmn: Option<NmnState>,
    pub log: Vec<LogRow>,
}

fn truth_matrix(data: &SyntheticDataset) -> Array2<bool> {
    Array2::from_shape_fn((data.len(), data.num_classes), |(r, c)| data.examples[r].truth.get(c))
}

/// Score a classifier against the hidden true labels of `data`.
pub fn evaluate(classifier: &ClassifierState, data: &SyntheticDataset, pooling: Pooling, groups: usize) -> Result<MapReport> {
    let scores = nmn::predict_clean(classifier, &data.examples, pooling)?;
    mean_ap(&scores, &truth_matrix(data), &contiguous_groups(data.num_classes, groups))
}

fn options(cfg: &Config, epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        learning_rate: cfg.train.learning_rate,
        batch_size: cfg.train.batch_size,
        pooling: cfg.pooling(),
    }
}

/// Stage one: classifier trained directly on the noisy labels.
pub fn stage_one(cfg: &Config, train: &SyntheticDataset, val: &SyntheticDataset) -> Result<(ClassifierState, Vec<LogRow>)> {
    let mut clf = ClassifierState::new(
        train.feature_dim,
        &cfg.train.hidden,
        train.num_classes,
        Activation::Relu,
        mix_seed(cfg.seed, STREAM_INIT),
    );
    let mut log = Vec::new();
    let pooling = cfg.pooling();
    let mut eval_err = None;
    train_baseline_with(
        &mut clf,
        &train.examples,
        &options(cfg, cfg.train.stage1_epochs),
        mix_seed(cfg.seed, STREAM_STAGE1),
        |epoch, loss, state| match evaluate(state, val, pooling, 1) {
            Ok(r) => log.push(LogRow {
                epoch,
                stage: 1,
                train_loss: loss,
                val_map: r.overall,
            }),
            Err(e) => eval_err = Some(e),
        },
    )?;
    match eval_err {
        Some(e) => Err(e),
        None => Ok((clf, log)),
    }
}

/// Stage two for one variant, starting from the stage-one classifier.
pub fn stage_two(
    cfg: &Config,
    variant: Variant,
    stage1: &ClassifierState,
    train: &SyntheticDataset,
    val: &SyntheticDataset,
) -> Result<TrainedModel> {
    let pooling = cfg.pooling();
    let mut clf = stage1.clone();
    let mut log = Vec::new();
    let mut eval_err = None;
    let seed = mix_seed(cfg.seed, STREAM_STAGE2);
    let offset = cfg.train.stage1_epochs;
    let mut record = |epoch: usize, loss: f64, state: &ClassifierState| match evaluate(state, val, pooling, 1) {
        Ok(r) => log.push(LogRow {
            epoch: offset + epoch,
            stage: 2,
            train_loss: loss,
            val_map: r.overall,
        }),
        Err(e) => eval_err = Some(e),
    };
    let nmn = match variant {
        Variant::Baseline => None,
        Variant::BaselineExtra => {
            train_baseline_with(&mut clf, &train.examples, &options(cfg, cfg.train.stage2_epochs), seed, &mut record)?;
            None
        }
        Variant::NmnFi | Variant::NmnFd => {
            let mode = if variant == Variant::NmnFi {
                NoiseMode::FeatureIndependent
            } else {
                NoiseMode::FeatureDependent
            };
            let mut head = NmnState::with_diagonal(mode, train.num_classes, clf.penultimate_dim(), cfg.train.init_diagonal);
            let mut joint = JointOptions::new(options(cfg, cfg.train.stage2_epochs));
            joint.nmn_learning_rate = cfg.train.nmn_learning_rate.unwrap_or(cfg.train.learning_rate);
            joint.trace_penalty = cfg.train.trace_penalty;
            joint.detach_features = cfg.train.detach_features;
            train_joint_with(&mut clf, &mut head, &train.examples, &joint, seed, |e, l, s, _| record(e, l, s))?;
            Some(head)
        }
    };
    if let Some(e) = eval_err {
        return Err(e);
    }
    Ok(TrainedModel {
        variant,
        classifier: clf,
        nmn,
        log,
    })
}

/// Train every requested variant from one shared stage-one model and return
/// the test reports, in variant order.
pub fn run_variants(cfg: &Config, splits: &Splits, train: &SyntheticDataset, variants: &[Variant]) -> Result<Vec<(TrainedModel, MapReport)>> {
    let (stage1, log1) = stage_one(cfg, train, &splits.val)?;
    variants
        .iter()
        .map(|&v| {
            let mut model = stage_two(cfg, v, &stage1, train, &splits.val)?;
            let mut log = log1.clone();
            log.append(&mut model.log);
            model.log = log;
            let report = evaluate(&model.classifier, &splits.test, cfg.pooling(), cfg.eval.class_groups)?;
            Ok((model, report))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Commands

fn level_tag(cfg: &Config, level: f64) -> String {
    if cfg.data.noise_levels.len() == 1 {
        String::new()
    } else {
        format!("_{level}")
    }
}

fn train_file(out: &Path, cfg: &Config, level: f64) -> PathBuf {
    out.join(format!("train{}.nmndat", level_tag(cfg, level)))
}

fn checkpoint_file(out: &Path, cfg: &Config, variant: Variant, level: f64) -> PathBuf {
    let mil = if cfg.train.mil { "-mil" } else { "" };
    out.join(format!("{}{mil}{}.ckpt", variant.name(), level_tag(cfg, level)))
}

fn stage1_file(out: &Path, cfg: &Config, level: f64) -> PathBuf {
    let mil = if cfg.train.mil { "-mil" } else { "" };
    out.join(format!("stage1{mil}{}.ckpt", level_tag(cfg, level)))
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing input file {}", path.display())))
    }
}

/// Write train/val/test splits, one training file per noise level, and a
/// noise summary. Returns the written paths.
pub fn cmd_generate(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out)?;
    let splits = clean_splits(cfg)?;
    let mut written = Vec::new();
    let mut report = String::new();
    for &level in &cfg.data.noise_levels {
        let train = noisy_train(cfg, &splits.train, level)?;
        let path = train_file(out, cfg, level);
        save_dataset(&path, &train)?;
        report.push_str(&format!("# training split, noise level {level}\n"));
        report.push_str(&noise_report(&train));
        written.push(path);
    }
    for (name, data) in [("val", &splits.val), ("test", &splits.test)] {
        let path = out.join(format!("{name}.nmndat"));
        save_dataset(&path, data)?;
        written.push(path);
    }
    let path = out.join("noise_report.txt");
    fs::write(&path, report)?;
    written.push(path);
    Ok(written)
}

fn write_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "stage", "train_loss", "val_mAP"])?;
    for r in log {
        w.write_record([r.epoch.to_string(), r.stage.to_string(), format!("{:.10}", r.train_loss), format!("{:.6}", r.val_map)])?;
    }
    w.flush()?;
    Ok(())
}

/// Train the configured variants on the generated files. The stage-one model is
/// written once per noise level and loaded by every variant.
pub fn cmd_train(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let val_path = out.join("val.nmndat");
    require(&val_path)?;
    let val = load_dataset(&val_path)?;
    let mut written = Vec::new();
    for &level in &cfg.data.noise_levels {
        let path = train_file(out, cfg, level);
        require(&path)?;
        let train = load_dataset(&path)?;
        let s1_path = stage1_file(out, cfg, level);
        let (stage1, log1) = stage_one(cfg, &train, &val)?;
        save_checkpoint(&s1_path, &Checkpoint { classifier: stage1, nmn: None })?;
        written.push(s1_path.clone());
        for &variant in &cfg.train.variants {
            let stage1 = load_checkpoint(&s1_path)?.classifier;
            let model = stage_two(cfg, variant, &stage1, &train, &val)?;
            let ckpt = checkpoint_file(out, cfg, variant, level);
            save_checkpoint(
                &ckpt,
                &Checkpoint {
                    classifier: model.classifier,
                    nmn: model.nmn,
                },
            )?;
            let mut log = log1.clone();
            log.extend(model.log);
            let log_path = ckpt.with_extension("log.csv");
            write_log(&log_path, &log)?;
            written.push(ckpt);
            written.push(log_path);
        }
    }
    Ok(written)
}

/// Score every trained checkpoint on the test split: `metrics.csv` (one row
/// per variant and level) and `per_class.csv`.
pub fn cmd_evaluate(cfg: &Config, out: &Path) -> Result<Vec<PathBuf>> {
    let test_path = out.join("test.nmndat");
    require(&test_path)?;
    let test = load_dataset(&test_path)?;
    let mut rows = Vec::new();
    for &level in &cfg.data.noise_levels {
        for &variant in &cfg.train.variants {
            let path = checkpoint_file(out, cfg, variant, level);
            require(&path)?;
            let ckpt = load_checkpoint(&path)?;
            if ckpt.classifier.input_dim() != test.feature_dim || ckpt.classifier.output_dim() != test.num_classes {
                return Err(Error::Config(format!("{} does not match the test split's shape", path.display())));
            }
            let mil = if cfg.train.mil { "-mil" } else { "" };
            let label = format!("{}{mil}@{level}", variant.name());
            rows.push((label, evaluate(&ckpt.classifier, &test, cfg.pooling(), cfg.eval.class_groups)?));
        }
    }
    let metrics = out.join("metrics.csv");
    write_summary_csv(fs::File::create(&metrics)?, &rows)?;
    let per_class = out.join("per_class.csv");
    write_per_class_csv(fs::File::create(&per_class)?, &rows)?;
    Ok(vec![metrics, per_class])
}

/// Result of training EM and end-to-end models on the same small problem.
#[derive(Debug, Clone)]
pub struct EmComparison {
    pub em: Vec<EmRecord>,
    pub end_to_end: Vec<EmRecord>,
    pub em_test_map: f64,
    pub end_to_end_test_map: f64,
    pub max_gradient_deviation: f64,
}

/// The small EM instance: clean generator with `[em]` sizes, symmetric flips
/// at `[em] noise_rate` on the training split.
pub fn em_problem(cfg: &Config) -> Result<Splits> {
    let mut small = cfg.clone();
    small.data.generator.n_examples = cfg.em.n_examples * 2;
    small.data.generator.num_classes = cfg.em.num_classes;
    small.data.generator.num_clusters = cfg.em.num_classes.div_ceil(2);
    small.data.split = [0.5, 0.0001, 0.4999];
    let splits = clean_splits(&small)?;
    let train = inject_symmetric(splits.train, cfg.em.noise_rate, mix_seed(cfg.seed, STREAM_NOISE))?;
    Ok(Splits { train, ..splits })
}

pub fn em_config(cfg: &Config) -> EmConfig {
    EmConfig {
        outer_iterations: cfg.em.outer_iterations,
        inner_steps: cfg.em.inner_steps,
        learning_rate: cfg.em.learning_rate,
        pooling: Pooling::Mean,
        tolerance: cfg.em.tolerance,
    }
}

/// EM versus full-batch end-to-end gradient descent from the same start, with
/// the same number of gradient steps and the same step size.
pub fn em_compare(cfg: &Config) -> Result<EmComparison> {
    let splits = em_problem(cfg)?;
    let train = &splits.train;
    let k = train.num_classes;
    let clf = ClassifierState::new(train.feature_dim, &cfg.em.hidden, k, Activation::Relu, mix_seed(cfg.seed, STREAM_INIT));
    let head = NmnState::with_diagonal(NoiseMode::FeatureIndependent, k, clf.penultimate_dim(), cfg.train.init_diagonal);
    let em_cfg = EmConfig {
        tolerance: f64::NEG_INFINITY,
        ..em_config(cfg)
    };
    let em = train_em(EmState::new(clf.clone(), head.clone()), &train.examples, &em_cfg)?;

    // Each EM outer iteration spends `2 * inner_steps` gradient steps.
    let mut e2e_clf = clf.clone();
    let mut e2e_head = head.clone();
    let mut joint = JointOptions::new(TrainOptions {
        epochs: 2 * cfg.em.inner_steps,
        learning_rate: cfg.em.learning_rate,
        batch_size: train.len(),
        pooling: Pooling::Mean,
    });
    joint.nmn_learning_rate = cfg.em.learning_rate;
    let mut e2e = Vec::with_capacity(em.trajectory.len());
    let record = |clf: &ClassifierState, head: &NmnState, iteration: usize| -> Result<EmRecord> {
        Ok(EmRecord {
            iteration,
            log_likelihood: nmn::log_likelihood(clf, head, &train.examples, Pooling::Mean)?,
            train_map: evaluate(clf, train, Pooling::Mean, 1)?.overall,
        })
    };
    e2e.push(record(&e2e_clf, &e2e_head, 0)?);
    for it in 1..em.trajectory.len() {
        nmn::train_joint(&mut e2e_clf, &mut e2e_head, &train.examples, &joint, mix_seed(cfg.seed, STREAM_STAGE2))?;
        e2e.push(record(&e2e_clf, &e2e_head, it)?);
    }
    let check = gradient_equivalence_check(&em.classifier, &em.nmn, &train.examples)?;
    Ok(EmComparison {
        em_test_map: evaluate(&em.classifier, &splits.test, Pooling::Mean, 1)?.overall,
        end_to_end_test_map: evaluate(&e2e_clf, &splits.test, Pooling::Mean, 1)?.overall,
        em: em.trajectory,
        end_to_end: e2e,
        max_gradient_deviation: check.max_abs_deviation,
    })
}

/// First iteration whose likelihood is within 1% of the final EM likelihood.
fn steps_to_threshold(traj: &[EmRecord], target: f64) -> Option<usize> {
    traj.iter().find(|r| r.log_likelihood >= target).map(|r| r.iteration)
}

pub fn cmd_em_compare(cfg: &Config, out: &Path) -> Result<(EmComparison, Vec<PathBuf>)> {
    fs::create_dir_all(out)?;
    let cmp = em_compare(cfg)?;
    let em_path = out.join("em_trajectory.csv");
    write_trajectory_csv(fs::File::create(&em_path)?, &cmp.em)?;
    let e2e_path = out.join("e2e_trajectory.csv");
    write_trajectory_csv(fs::File::create(&e2e_path)?, &cmp.end_to_end)?;
    let report_path = out.join("em_compare.txt");
    let mut f = fs::File::create(&report_path)?;
    let final_em = cmp.em.last().map(|r| r.log_likelihood).unwrap_or(f64::NAN);
    let final_e2e = cmp.end_to_end.last().map(|r| r.log_likelihood).unwrap_or(f64::NAN);
    let best = final_em.max(final_e2e);
    let target = best - 0.01 * best.abs();
    writeln!(f, "method\tfinal_loglik\ttest_mAP\titerations_to_within_1pct")?;
    for (name, traj, map) in [("em", &cmp.em, cmp.em_test_map), ("end-to-end", &cmp.end_to_end, cmp.end_to_end_test_map)] {
        let steps = steps_to_threshold(traj, target).map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        writeln!(f, "{name}\t{:.10}\t{map:.6}\t{steps}", traj.last().map(|r| r.log_likelihood).unwrap_or(f64::NAN))?;
    }
    writeln!(f, "max_gradient_deviation\t{:.3e}", cmp.max_gradient_deviation)?;
    Ok((cmp, vec![em_path, e2e_path, report_path]))
}
