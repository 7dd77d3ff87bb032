//! Synthetic multi-label data with hidden ground truth and controlled label noise.
//!
//! Every example keeps its true labels `truth` next to the observed labels
//! `observed`. Noise processes only ever rewrite `observed`; training code reads
//! `observed` and evaluation reads `truth`.
//!
//! Generation is a pure function of the parameters and the seed: each example
//! draws from its own ChaCha stream keyed by `mix_seed(seed, index)`, so the
//! output does not depend on thread count.

use std::fmt::Write as _;
use std::io::{Read, Write};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mil::Bag;
use crate::prob::LabelVector;

/// Number of label partitions ("captions") per example in label-set replacement.
pub const LABEL_PARTITIONS: usize = 5;

const DATASET_MAGIC: &[u8; 7] = b"NMNDAT1";

/// SplitMix64 finaliser applied to `seed + stream * golden`.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, domain), index))
}

// Stream domains, so the different random decisions never share draws.
const DOMAIN_CLASSES: u64 = 1;
const DOMAIN_EXAMPLES: u64 = 2;
const DOMAIN_MISSING: u64 = 3;
const DOMAIN_INCORRECT: u64 = 4;
const DOMAIN_PARTITION: u64 = 5;
const DOMAIN_REPLACE: u64 = 6;
const DOMAIN_SYMMETRIC: u64 = 7;
const DOMAIN_SPLIT: u64 = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: usize,
    pub instances: Vec<Vec<f64>>,
    pub truth: LabelVector,
    pub observed: LabelVector,
}

impl Example {
    pub fn bag(&self) -> Result<Bag<'_>> {
        Bag::new(self.id, &self.instances, &self.observed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    Missing,
    Incorrect,
    SymmetricFlip,
    LabelSetReplacement,
}

impl NoiseKind {
    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::Missing => "missing",
            NoiseKind::Incorrect => "incorrect",
            NoiseKind::SymmetricFlip => "symmetric",
            NoiseKind::LabelSetReplacement => "replace",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseRecord {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub instances_per_bag: usize,
    pub seed: u64,
    pub noise: Vec<NoiseRecord>,
}

/// Knobs of the clean generator.
///
/// Classes are grouped into clusters; each example picks one cluster as its
/// "scene", and classes of that cluster are far more likely to co-occur. A
/// present class contributes its prototype, scaled by a per-example
/// prominence, to the instances that contain it.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_examples: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub instances_per_bag: usize,
    pub seed: u64,
    pub num_clusters: usize,
    /// Presence probability of a class inside the example's scene cluster.
    pub in_cluster_rate: f64,
    /// Presence probability of a class outside it.
    pub background_rate: f64,
    /// Norm of each class prototype.
    pub prototype_norm: f64,
    /// Standard deviation of the isotropic feature noise.
    pub feature_noise: f64,
    /// Prominence is drawn uniformly from `[min_prominence, 1]`.
    pub min_prominence: f64,
    /// Probability that a present class shows up in a non-anchor instance of a bag.
    pub instance_presence: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_examples: 5000,
            num_classes: 20,
            feature_dim: 16,
            instances_per_bag: 1,
            seed: 0,
            num_clusters: 5,
            in_cluster_rate: 0.4,
            background_rate: 0.03,
            prototype_norm: 5.0,
            feature_noise: 0.5,
            min_prominence: 0.4,
            instance_presence: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_examples", self.n_examples),
            ("num_classes", self.num_classes),
            ("feature_dim", self.feature_dim),
            ("instances_per_bag", self.instances_per_bag),
            ("num_clusters", self.num_clusters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        for (name, v) in [
            ("in_cluster_rate", self.in_cluster_rate),
            ("background_rate", self.background_rate),
            ("min_prominence", self.min_prominence),
            ("instance_presence", self.instance_presence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Class prototypes and cluster assignment, shared by every example.
fn class_structure(cfg: &GeneratorConfig) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = stream_rng(cfg.seed, DOMAIN_CLASSES, 0);
    let prototypes = (0..cfg.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.feature_dim).map(|_| gaussian(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x * cfg.prototype_norm / norm).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..cfg.num_classes).collect();
    order.shuffle(&mut rng);
    let mut cluster = vec![0; cfg.num_classes];
    for (rank, &c) in order.iter().enumerate() {
        cluster[c] = rank % cfg.num_clusters;
    }
    (prototypes, cluster)
}

fn generate_example(cfg: &GeneratorConfig, prototypes: &[Vec<f64>], cluster: &[usize], id: usize) -> Example {
    let mut rng = stream_rng(cfg.seed, DOMAIN_EXAMPLES, id as u64);
    let scene = rng.random_range(0..cfg.num_clusters);
    let truth = LabelVector(
        cluster
            .iter()
            .map(|&g| {
                let rate = if g == scene { cfg.in_cluster_rate } else { cfg.background_rate };
                rng.random_bool(rate)
            })
            .collect(),
    );
    let mut instances: Vec<Vec<f64>> = (0..cfg.instances_per_bag)
        .map(|_| (0..cfg.feature_dim).map(|_| cfg.feature_noise * gaussian(&mut rng)).collect())
        .collect();
    for c in (0..cfg.num_classes).filter(|&c| truth.get(c)) {
        let prominence = rng.random_range(cfg.min_prominence..=1.0);
        let anchor = rng.random_range(0..cfg.instances_per_bag);
        for (s, inst) in instances.iter_mut().enumerate() {
            let present = s == anchor || rng.random_bool(cfg.instance_presence);
            if present {
                for (x, &m) in inst.iter_mut().zip(&prototypes[c]) {
                    *x += prominence * m;
                }
            }
        }
    }
    Example {
        id,
        instances,
        observed: truth.clone(),
        truth,
    }
}

/// Clean dataset: `observed == truth` for every example.
pub fn generate_clean(cfg: &GeneratorConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let (prototypes, cluster) = class_structure(cfg);
    let examples = (0..cfg.n_examples)
        .into_par_iter()
        .map(|i| generate_example(cfg, &prototypes, &cluster, i))
        .collect();
    Ok(SyntheticDataset {
        examples,
        num_classes: cfg.num_classes,
        feature_dim: cfg.feature_dim,
        instances_per_bag: cfg.instances_per_bag,
        seed: cfg.seed,
        noise: Vec::new(),
    })
}

fn check_rate(rate: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("noise rate must lie in [0, 1], got {rate}")))
    }
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Fraction of examples whose true label set contains each class.
    pub fn class_priors(&self) -> Vec<f64> {
        let n = self.examples.len().max(1) as f64;
        (0..self.num_classes)
            .map(|c| self.examples.iter().filter(|e| e.truth.get(c)).count() as f64 / n)
            .collect()
    }

    fn with_noise(mut self, kind: NoiseKind, rate: f64, seed: u64) -> Self {
        self.noise.push(NoiseRecord { kind, rate, seed });
        self
    }

    /// Split into contiguous shuffled parts with the given fractions.
    pub fn split(&self, fractions: &[f64], seed: u64) -> Vec<SyntheticDataset> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream_rng(seed, DOMAIN_SPLIT, 0));
        let mut parts = Vec::with_capacity(fractions.len());
        let mut start = 0;
        for (k, f) in fractions.iter().enumerate() {
            let end = if k + 1 == fractions.len() {
                self.len()
            } else {
                (start + (f * self.len() as f64).round() as usize).min(self.len())
            };
            let mut idx = order[start..end].to_vec();
            idx.sort_unstable();
            parts.push(SyntheticDataset {
                examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
                ..self.empty_like()
            });
            start = end;
        }
        parts
    }

    fn empty_like(&self) -> SyntheticDataset {
        SyntheticDataset {
            examples: Vec::new(),
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
            instances_per_bag: self.instances_per_bag,
            seed: self.seed,
            noise: self.noise.clone(),
        }
    }
}

/// Each truly positive label is independently dropped from `observed` with
/// probability `rate`.
pub fn inject_missing(mut data: SyntheticDataset, rate: f64, seed: u64) -> Result<SyntheticDataset> {
    check_rate(rate)?;
    data.examples.par_iter_mut().for_each(|e| {
        let mut rng = stream_rng(seed, DOMAIN_MISSING, e.id as u64);
        for c in 0..e.truth.len() {
            if e.truth.get(c) && rng.random_bool(rate) {
                e.observed.set(c, false);
            }
        }
    });
    Ok(data.with_noise(NoiseKind::Missing, rate, seed))
}

/// Each truly negative label is independently switched on with probability
/// `rate * prior(c)`.
pub fn inject_incorrect(mut data: SyntheticDataset, rate: f64, seed: u64) -> Result<SyntheticDataset> {
    check_rate(rate)?;
    let priors = data.class_priors();
    data.examples.par_iter_mut().for_each(|e| {
        let mut rng = stream_rng(seed, DOMAIN_INCORRECT, e.id as u64);
        for (c, &prior) in priors.iter().enumerate() {
            if !e.truth.get(c) && rng.random_bool((rate * prior).clamp(0.0, 1.0)) {
                e.observed.set(c, true);
            }
        }
    });
    Ok(data.with_noise(NoiseKind::Incorrect, rate, seed))
}

/// Every observed label is flipped independently with probability `rate`,
/// the same in both directions and for every class.
pub fn inject_symmetric(mut data: SyntheticDataset, rate: f64, seed: u64) -> Result<SyntheticDataset> {
    check_rate(rate)?;
    data.examples.par_iter_mut().for_each(|e| {
        let mut rng = stream_rng(seed, DOMAIN_SYMMETRIC, e.id as u64);
        for c in 0..e.observed.len() {
            if rng.random_bool(rate) {
                let v = e.observed.get(c);
                e.observed.set(c, !v);
            }
        }
    });
    Ok(data.with_noise(NoiseKind::SymmetricFlip, rate, seed))
}

/// Deal an example's true labels into `LABEL_PARTITIONS` near-equal groups.
pub fn label_partitions(example: &Example, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = stream_rng(seed, DOMAIN_PARTITION, example.id as u64);
    let mut labels: Vec<usize> = (0..example.truth.len()).filter(|&c| example.truth.get(c)).collect();
    labels.shuffle(&mut rng);
    let mut parts = vec![Vec::new(); LABEL_PARTITIONS];
    // Rotate the starting partition so small label sets do not always fill
    // the first groups.
    let offset = rng.random_range(0..LABEL_PARTITIONS);
    for (k, c) in labels.into_iter().enumerate() {
        parts[(k + offset) % LABEL_PARTITIONS].push(c);
    }
    parts
}

/// Number of partitions replaced for a noise fraction.
pub fn partitions_replaced(fraction: f64) -> usize {
    ((LABEL_PARTITIONS as f64 * fraction) - 1e-9).ceil().max(0.0) as usize
}

/// Replace `ceil(5 * fraction)` of each example's label partitions with
/// partitions of uniformly chosen other examples. The observed labels become
/// the union of the kept and imported partitions, which introduces incorrect
/// labels (imports) and missing labels (dropped partitions).
pub fn replace_label_sets(mut data: SyntheticDataset, fraction: f64, seed: u64) -> Result<SyntheticDataset> {
    check_rate(fraction)?;
    let n = data.examples.len();
    let replaced = partitions_replaced(fraction);
    if replaced > 0 && n < 2 {
        return Err(Error::InvalidArgument("label-set replacement needs at least two examples".into()));
    }
    let partitions: Vec<Vec<Vec<usize>>> = data.examples.par_iter().map(|e| label_partitions(e, seed)).collect();
    let observed: Vec<LabelVector> = data
        .examples
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = stream_rng(seed, DOMAIN_REPLACE, e.id as u64);
            let drop = index::sample(&mut rng, LABEL_PARTITIONS, replaced).into_vec();
            let mut z = LabelVector::zeros(e.truth.len());
            for (p, labels) in partitions[i].iter().enumerate() {
                if !drop.contains(&p) {
                    labels.iter().for_each(|&c| z.set(c, true));
                }
            }
            for _ in 0..replaced {
                let mut donor = rng.random_range(0..n - 1);
                if donor >= i {
                    donor += 1;
                }
                let caption = rng.random_range(0..LABEL_PARTITIONS);
                partitions[donor][caption].iter().for_each(|&c| z.set(c, true));
            }
            z
        })
        .collect();
    for (e, z) in data.examples.iter_mut().zip(observed) {
        e.observed = z;
    }
    Ok(data.with_noise(NoiseKind::LabelSetReplacement, fraction, seed))
}

/// Counts of the disagreements between `observed` and `truth`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NoiseCounts {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub missing: Vec<usize>,
    pub incorrect: Vec<usize>,
}

impl NoiseCounts {
    pub fn of(data: &SyntheticDataset) -> Self {
        let k = data.num_classes;
        let mut counts = NoiseCounts {
            positives: vec![0; k],
            negatives: vec![0; k],
            missing: vec![0; k],
            incorrect: vec![0; k],
        };
        for e in &data.examples {
            for c in 0..k {
                match (e.truth.get(c), e.observed.get(c)) {
                    (true, true) => counts.positives[c] += 1,
                    (true, false) => {
                        counts.positives[c] += 1;
                        counts.missing[c] += 1;
                    }
                    (false, true) => {
                        counts.negatives[c] += 1;
                        counts.incorrect[c] += 1;
                    }
                    (false, false) => counts.negatives[c] += 1,
                }
            }
        }
        counts
    }

    pub fn missing_rate(&self) -> f64 {
        ratio(self.missing.iter().sum(), self.positives.iter().sum())
    }

    pub fn incorrect_rate(&self) -> f64 {
        ratio(self.incorrect.iter().sum(), self.negatives.iter().sum())
    }

    /// Fraction of observed positives that are not true positives.
    pub fn false_positive_share(&self) -> f64 {
        let kept: usize = self.positives.iter().sum::<usize>() - self.missing.iter().sum::<usize>();
        let wrong: usize = self.incorrect.iter().sum();
        ratio(wrong, kept + wrong)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Plain-text per-class summary of the injected noise.
pub fn noise_report(data: &SyntheticDataset) -> String {
    let counts = NoiseCounts::of(data);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "examples {} classes {} features {} instances_per_bag {} seed {}",
        data.len(),
        data.num_classes,
        data.feature_dim,
        data.instances_per_bag,
        data.seed
    );
    for r in &data.noise {
        let _ = writeln!(out, "noise {} rate {} seed {}", r.kind.name(), r.rate, r.seed);
    }
    let _ = writeln!(out, "class\tpositives\tnegatives\tmissing\tincorrect");
    for c in 0..data.num_classes {
        let _ = writeln!(
            out,
            "{c}\t{}\t{}\t{}\t{}",
            counts.positives[c], counts.negatives[c], counts.missing[c], counts.incorrect[c]
        );
    }
    let _ = writeln!(
        out,
        "total missing rate {:.6} incorrect rate {:.6}",
        counts.missing_rate(),
        counts.incorrect_rate()
    );
    out
}

fn write_bits<W: Write>(w: &mut W, labels: &LabelVector) -> std::io::Result<()> {
    let mut bytes = vec![0u8; labels.len().div_ceil(8)];
    for (c, bit) in labels.iter().enumerate() {
        if bit {
            bytes[c / 8] |= 1 << (c % 8);
        }
    }
    w.write_all(&bytes)
}

fn read_bits<R: Read>(r: &mut R, k: usize) -> std::io::Result<LabelVector> {
    let mut bytes = vec![0u8; k.div_ceil(8)];
    r.read_exact(&mut bytes)?;
    Ok(LabelVector((0..k).map(|c| bytes[c / 8] >> (c % 8) & 1 == 1).collect()))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Serialize in the `NMNDAT1` layout.
pub fn write_dataset<W: Write>(w: &mut W, data: &SyntheticDataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    for v in [data.len(), data.num_classes, data.feature_dim, data.instances_per_bag] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for e in &data.examples {
        if e.instances.len() != data.instances_per_bag {
            return Err(Error::Format(format!(
                "example {} has {} instances, header says {}",
                e.id,
                e.instances.len(),
                data.instances_per_bag
            )));
        }
        for inst in &e.instances {
            for v in inst {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        write_bits(w, &e.truth)?;
        write_bits(w, &e.observed)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<SyntheticDataset> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("missing NMNDAT1 magic".into()));
    }
    let n = read_u64(r)? as usize;
    let k = read_u64(r)? as usize;
    let d = read_u64(r)? as usize;
    let ipb = read_u64(r)? as usize;
    if k == 0 || d == 0 || ipb == 0 {
        return Err(Error::Format(format!("degenerate header: K={k} D={d} instances={ipb}")));
    }
    let mut examples = Vec::with_capacity(n.min(1 << 20));
    for id in 0..n {
        let instances = (0..ipb)
            .map(|_| (0..d).map(|_| read_f64(r)).collect::<std::io::Result<Vec<_>>>())
            .collect::<std::io::Result<Vec<_>>>()?;
        let truth = read_bits(r, k)?;
        let observed = read_bits(r, k)?;
        examples.push(Example {
            id,
            instances,
            truth,
            observed,
        });
    }
    Ok(SyntheticDataset {
        examples,
        num_classes: k,
        feature_dim: d,
        instances_per_bag: ipb,
        seed: 0,
        noise: Vec::new(),
    })
}

pub fn save_dataset(path: &std::path::Path, data: &SyntheticDataset) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(&mut w, data)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &std::path::Path) -> Result<SyntheticDataset> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_dataset(&mut r)
}
