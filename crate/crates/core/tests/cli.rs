//! End-to-end runs of the `nmn` binary: files, formats and exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nmn::checkpoint::{load_checkpoint, save_checkpoint};
use nmn::datagen::{load_dataset, write_dataset, Example, SyntheticDataset};
use nmn::prob::LabelVector;

const SMALL: &str = "\
seed = 3
[data]
n_examples = 600
num_classes = 6
num_clusters = 3
[train]
hidden = 16
stage1_epochs = 2
stage2_epochs = 1
";

fn nmn(args: &[&str], dir: &Path, config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nmn"));
    cmd.args(args).arg("--out").arg(dir);
    if let Some(text) = config {
        let path = dir.with_extension("ini");
        fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn generate_writes_declared_splits() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    ok(&nmn(&["generate"], &dir, None));
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|s| load_dataset(&dir.join(format!("{s}.nmndat"))).unwrap().len())
        .collect();
    assert_eq!(sizes, vec![3500, 750, 750]);
    assert!(fs::read_to_string(dir.join("noise_report.txt")).unwrap().contains("missing"));
}

#[test]
fn sweep_writes_one_training_file_per_level() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("sweep");
    let cfg = SMALL.replace("[train]", "noise_levels = 0.2, 0.4, 0.6, 0.8\n[train]");
    ok(&nmn(&["generate"], &dir, Some(&cfg)));
    for level in ["0.2", "0.4", "0.6", "0.8"] {
        let data = load_dataset(&dir.join(format!("train_{level}.nmndat"))).unwrap();
        assert_eq!(data.len(), 420);
    }
    assert!(!dir.join("train.nmndat").exists());
}

#[test]
fn dataset_bytes_follow_the_layout() {
    let data = SyntheticDataset {
        examples: vec![Example {
            id: 0,
            instances: vec![vec![1.5, -2.0]],
            truth: LabelVector(vec![true, false, false, false, false, false, false, false, true]),
            observed: LabelVector(vec![false, true, false, false, false, false, false, false, false]),
        }],
        num_classes: 9,
        feature_dim: 2,
        instances_per_bag: 1,
        seed: 0,
        noise: Vec::new(),
    };
    let mut buf = Vec::new();
    write_dataset(&mut buf, &data).unwrap();
    let mut expected = b"NMNDAT1".to_vec();
    for v in [1u64, 9, 2, 1] {
        expected.extend(v.to_le_bytes());
    }
    expected.extend(1.5f64.to_le_bytes());
    expected.extend((-2.0f64).to_le_bytes());
    // Bit c of byte c / 8, least significant first.
    expected.extend([0b0000_0001, 0b0000_0001]);
    expected.extend([0b0000_0010, 0b0000_0000]);
    assert_eq!(buf, expected);
}

#[test]
fn train_and_evaluate_follow_the_protocol() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("run");
    ok(&nmn(&["generate"], &dir, Some(SMALL)));
    ok(&nmn(&["train"], &dir, Some(SMALL)));

    let rows = |name: &str| -> Vec<String> {
        fs::read_to_string(dir.join(name)).unwrap().lines().skip(1).map(String::from).collect()
    };
    assert_eq!(fs::read_to_string(dir.join("nmn-fd.log.csv")).unwrap().lines().next(), Some("epoch,stage,train_loss,val_mAP"));
    let base = rows("baseline.log.csv");
    let extra = rows("baseline-extra.log.csv");
    let fi = rows("nmn-fi.log.csv");
    // Stage one (2 epochs) is shared; baseline-extra adds exactly one more.
    assert_eq!(base.len(), 2);
    assert_eq!(extra.len(), 3);
    assert_eq!(&extra[..2], &base[..]);
    assert_eq!(&fi[..2], &base[..]);
    assert_eq!(extra[2].split(',').nth(1), Some("2"));

    ok(&nmn(&["evaluate"], &dir, Some(SMALL)));
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert!(lines[0].starts_with("variant,") && lines[0].ends_with(",All"));
    assert_eq!(lines.len(), 5);

    // Perturbing the stored noise head must not change any metric.
    let path = dir.join("nmn-fd.ckpt");
    let mut ckpt = load_checkpoint(&path).unwrap();
    ckpt.nmn.as_mut().unwrap().for_each_param_mut(|p| *p += 0.5);
    save_checkpoint(&path, &ckpt).unwrap();
    ok(&nmn(&["evaluate"], &dir, Some(SMALL)));
    assert_eq!(fs::read_to_string(dir.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn exit_codes() {
    let root = tempfile::tempdir().unwrap();
    let code = |out: Output| out.status.code().unwrap();

    assert_eq!(code(nmn(&["generate"], &root.path().join("a"), Some("[data]\nbogus = 1\n"))), 2);
    assert_eq!(code(nmn(&["train"], &root.path().join("empty"), None)), 2);
    assert_eq!(code(nmn(&["evaluate"], &root.path().join("empty"), None)), 2);
    assert_eq!(code(nmn(&["nonsense"], root.path(), None)), 2);

    let diverge = SMALL.replace("hidden = 16", "hidden = 16\nlearning_rate = 1e300");
    let dir = root.path().join("nan");
    ok(&nmn(&["generate"], &dir, Some(&diverge)));
    let out = nmn(&["train"], &dir, Some(&diverge));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));

    let out = nmn(&["gradcheck", "--configs", "20", "--corrupt", "noise-head-b"], root.path(), None);
    assert_eq!(out.status.code(), Some(1));
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.lines().any(|l| l.starts_with("FAIL") && l.contains("noise-head-b")));
    assert_eq!(report.lines().filter(|l| l.starts_with("FAIL")).count(), 1);

    let out = nmn(&["gradcheck", "--configs", "20"], root.path(), None);
    assert_eq!(out.status.code(), Some(0));

    let out = Command::new(env!("CARGO_BIN_EXE_nmn"))
        .args(["gradcheck", "--configs", "1"])
        .env("NMN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn em_compare_reports_both_methods() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("em");
    let out = nmn(&["em-compare"], &dir, None);
    ok(&out);
    let report = fs::read_to_string(dir.join("em_compare.txt")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("em\t")));
    assert!(report.lines().any(|l| l.starts_with("end-to-end\t")));
    let em = fs::read_to_string(dir.join("em_trajectory.csv")).unwrap();
    assert_eq!(em.lines().next(), Some("iteration,loglik,train_mAP"));
    assert_eq!(em.lines().count(), 12);
}
