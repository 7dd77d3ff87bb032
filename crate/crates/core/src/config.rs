//! Experiment configuration.
//!
//! Flat `key = value` lines grouped under `[section]` headers. Every key has
//! a default, and unknown sections or keys are rejected. Lists are
//! comma-separated.
//!
//! ```text
//! [data]
//! n_examples = 5000
//! noise = replace
//! noise_levels = 0.4
//!
//! [train]
//! variants = baseline, baseline-extra, nmn-fi, nmn-fd
//! mil = false
//! ```

use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use crate::datagen::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::Pooling;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Stage one only.
    Baseline,
    /// Stage one followed by as many extra plain epochs as stage two has.
    BaselineExtra,
    NmnFi,
    NmnFd,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::BaselineExtra, Variant::NmnFi, Variant::NmnFd];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::BaselineExtra => "baseline-extra",
            Variant::NmnFi => "nmn-fi",
            Variant::NmnFd => "nmn-fd",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSpec {
    None,
    Missing,
    Incorrect,
    Symmetric,
    Replace,
}

impl FromStr for NoiseSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => NoiseSpec::None,
            "missing" => NoiseSpec::Missing,
            "incorrect" => NoiseSpec::Incorrect,
            "symmetric" => NoiseSpec::Symmetric,
            "replace" => NoiseSpec::Replace,
            other => return Err(Error::Config(format!("unknown noise kind `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub generator: GeneratorConfig,
    pub noise: NoiseSpec,
    pub noise_levels: Vec<f64>,
    /// Train/validation/test fractions.
    pub split: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variants: Vec<Variant>,
    pub mil: bool,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub nmn_learning_rate: Option<f64>,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub init_diagonal: f64,
    pub trace_penalty: f64,
    pub detach_features: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub class_groups: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmSection {
    pub n_examples: usize,
    pub num_classes: usize,
    pub noise_rate: f64,
    /// Classifier hidden widths for the small instance; empty means linear.
    pub hidden: Vec<usize>,
    pub outer_iterations: usize,
    pub inner_steps: usize,
    pub learning_rate: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub em: EmSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig {
                generator: GeneratorConfig::default(),
                noise: NoiseSpec::Replace,
                noise_levels: vec![0.4],
                split: [0.7, 0.15, 0.15],
            },
            train: TrainConfig {
                variants: Variant::ALL.to_vec(),
                mil: false,
                hidden: vec![64, 64],
                learning_rate: 0.25,
                nmn_learning_rate: Some(0.02),
                batch_size: 32,
                stage1_epochs: 6,
                stage2_epochs: 4,
                init_diagonal: crate::nmn::INIT_DIAGONAL_BIAS,
                trace_penalty: 0.0,
                detach_features: false,
            },
            eval: EvalConfig { class_groups: 4 },
            em: EmSection {
                n_examples: 200,
                num_classes: 3,
                noise_rate: 0.2,
                hidden: Vec::new(),
                outer_iterations: 10,
                inner_steps: 20,
                learning_rate: 0.5,
                tolerance: 1e-6,
            },
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("[{section}] {key}: cannot parse `{value}`")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("[{section}] {key}: expected a boolean, got `{value}`"))),
    }
}

fn parse_list<T: FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

impl Config {
    pub fn from_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = Config::default();
        for (section, props) in ini.iter() {
            let section = section.unwrap_or("");
            for (key, value) in props.iter() {
                cfg.set(section, key, value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let g = &mut self.data.generator;
        let t = &mut self.train;
        let em = &mut self.em;
        match (section, key) {
            ("" | "run", "seed") => {
                self.seed = parse(section, key, v)?;
                g.seed = self.seed;
            }
            ("data", "n_examples") => g.n_examples = parse(section, key, v)?,
            ("data", "num_classes") => g.num_classes = parse(section, key, v)?,
            ("data", "feature_dim") => g.feature_dim = parse(section, key, v)?,
            ("data", "instances_per_bag") => g.instances_per_bag = parse(section, key, v)?,
            ("data", "num_clusters") => g.num_clusters = parse(section, key, v)?,
            ("data", "in_cluster_rate") => g.in_cluster_rate = parse(section, key, v)?,
            ("data", "background_rate") => g.background_rate = parse(section, key, v)?,
            ("data", "prototype_norm") => g.prototype_norm = parse(section, key, v)?,
            ("data", "feature_noise") => g.feature_noise = parse(section, key, v)?,
            ("data", "min_prominence") => g.min_prominence = parse(section, key, v)?,
            ("data", "instance_presence") => g.instance_presence = parse(section, key, v)?,
            ("data", "noise") => self.data.noise = parse(section, key, v)?,
            ("data", "noise_levels") => self.data.noise_levels = parse_list(section, key, v)?,
            ("data", "split") => {
                let parts: Vec<f64> = parse_list(section, key, v)?;
                self.data.split = parts
                    .try_into()
                    .map_err(|_| Error::Config("[data] split: expected three fractions".into()))?;
            }
            ("train", "variants" | "variant") => t.variants = parse_list(section, key, v)?,
            ("train", "mil") => t.mil = parse_bool(section, key, v)?,
            ("train", "hidden") => t.hidden = parse_list(section, key, v)?,
            ("train", "learning_rate") => t.learning_rate = parse(section, key, v)?,
            ("train", "nmn_learning_rate") => t.nmn_learning_rate = Some(parse(section, key, v)?),
            ("train", "batch_size") => t.batch_size = parse(section, key, v)?,
            ("train", "stage1_epochs") => t.stage1_epochs = parse(section, key, v)?,
            ("train", "stage2_epochs") => t.stage2_epochs = parse(section, key, v)?,
            ("train", "init_diagonal") => t.init_diagonal = parse(section, key, v)?,
            ("train", "trace_penalty") => t.trace_penalty = parse(section, key, v)?,
            ("train", "detach_features") => t.detach_features = parse_bool(section, key, v)?,
            ("eval", "class_groups") => self.eval.class_groups = parse(section, key, v)?,
            ("em", "n_examples") => em.n_examples = parse(section, key, v)?,
            ("em", "num_classes") => em.num_classes = parse(section, key, v)?,
            ("em", "noise_rate") => em.noise_rate = parse(section, key, v)?,
            ("em", "hidden") => em.hidden = parse_list(section, key, v)?,
            ("em", "outer_iterations") => em.outer_iterations = parse(section, key, v)?,
            ("em", "inner_steps") => em.inner_steps = parse(section, key, v)?,
            ("em", "learning_rate") => em.learning_rate = parse(section, key, v)?,
            ("em", "tolerance") => em.tolerance = parse(section, key, v)?,
            _ => {
                return Err(Error::Config(if section.is_empty() {
                    format!("unknown key `{key}`")
                } else {
                    format!("unknown key `{key}` in [{section}]")
                }))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data
            .generator
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.data.noise_levels.is_empty() {
            return Err(Error::Config("[data] noise_levels must list at least one level".into()));
        }
        if let Some(bad) = self.data.noise_levels.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::Config(format!("[data] noise level {bad} outside [0, 1]")));
        }
        let total: f64 = self.data.split.iter().sum();
        if (total - 1.0).abs() > 1e-9 || self.data.split.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("[data] split fractions must be positive and sum to 1".into()));
        }
        if self.train.variants.is_empty() {
            return Err(Error::Config("[train] variants must not be empty".into()));
        }
        if self.train.learning_rate <= 0.0 || self.train.nmn_learning_rate.is_some_and(|v| v <= 0.0) {
            return Err(Error::Config("[train] learning rates must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("[train] batch_size must be positive".into()));
        }
        if self.train.hidden.contains(&0) || self.em.hidden.contains(&0) {
            return Err(Error::Config("[train] hidden widths must be positive".into()));
        }
        if self.eval.class_groups == 0 {
            return Err(Error::Config("[eval] class_groups must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.generator.seed = seed;
        self
    }

    pub fn pooling(&self) -> Pooling {
        if self.train.mil {
            Pooling::NoisyOr
        } else {
            Pooling::Mean
        }
    }
}
