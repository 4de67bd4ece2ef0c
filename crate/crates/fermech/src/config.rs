//! Run configuration: a flat `section.key = value` file with `#` comments.
//!
//! Relative paths in the file resolve against the file's directory. Keys
//! not listed in [`KEYS`] are rejected so that typos surface early.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fermech_core::backbone::{BackboneConfig, MRE_LEARNING_RATE};
use fermech_core::correction::{CorrectionConfig, VoteRule};
use fermech_core::data::AugmentConfig;
use fermech_core::ensemble::EnsembleWeights;
use fermech_core::gus::{DegreeSource, GusConfig};
use fermech_core::losses::LossConfig;
use fermech_core::mre::MreConfig;
use fermech_core::train::{PipelineConfig, TrainConfig};

use crate::error::{CliError, Result};

/// Every accepted key.
pub const KEYS: &[&str] = &[
    "seed",
    "output.dir",
    "data.train_features",
    "data.train_labels",
    "data.eval_features",
    "data.eval_labels",
    "data.finetune_features",
    "data.finetune_labels",
    "synthetic.dim",
    "synthetic.train_per_class",
    "synthetic.eval_per_class",
    "synthetic.separation",
    "synthetic.sigma",
    "backbone.mid_channels",
    "backbone.mid_height",
    "backbone.mid_width",
    "backbone.high_dim",
    "mre.lambda",
    "mre.noise_ratio",
    "mre.lr",
    "gus.layers",
    "gus.clamp_negative_sim",
    "gus.degree_source",
    "gus.lr",
    "loss.omega1",
    "loss.omega2",
    "loss.omega3",
    "loss.gamma",
    "loss.tau",
    "train.epochs",
    "train.batch_size",
    "train.oversample",
    "train.augment",
    "train.finetune_epochs",
    "augment.flip_prob",
    "augment.crop_prob",
    "augment.crop_ratio",
    "augment.blur_prob",
    "augment.blur_sigma_min",
    "augment.blur_sigma_max",
    "augment.image_size",
    "ensemble.scheme",
    "ensemble.weights",
    "merge.gus_scores",
    "merge.mre_scores",
    "merge.dmue_scores",
    "correct.predictions",
    "correct.features",
    "correction.threshold",
    "correction.vote_fraction",
    "correction.min_subset",
    "correction.rule",
    "report.labels",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// Pairwise distance between class means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataPaths {
    pub train_features: PathBuf,
    pub train_labels: PathBuf,
    pub eval_features: PathBuf,
    pub eval_labels: PathBuf,
    pub finetune_features: Option<PathBuf>,
    pub finetune_labels: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeInputs {
    pub gus_scores: PathBuf,
    pub mre_scores: PathBuf,
    /// External third source; merged only when given.
    pub dmue_scores: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataPaths,
    pub synthetic: SyntheticConfig,
    pub pipeline: PipelineConfig,
    pub finetune_epochs: usize,
    /// Image side length for image payloads; unused for feature vectors.
    pub image_size: usize,
    pub weights: EnsembleWeights,
    pub merge: MergeInputs,
    pub correct_predictions: PathBuf,
    pub correct_features: PathBuf,
    pub report_labels: PathBuf,
    pub correction: CorrectionConfig,
}

/// Raw key/value pairs before typing.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
    base_dir: PathBuf,
}

impl RawConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("line {}", n + 1), "expected `key = value`")
            })?;
            let key = key.trim();
            if !KEYS.contains(&key) {
                return Err(CliError::config(key, "unknown key"));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(CliError::config(key, "given more than once"));
            }
        }
        Ok(RawConfig {
            values,
            base_dir: base_dir.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, &base)
    }

    /// Command-line override of a single key.
    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KEYS.contains(&key) {
            return Err(CliError::config(key, "unknown key"));
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    pub fn unset(&mut self, key: &str) {
        self.values.remove(key);
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| CliError::config(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.values.get(key).map(|v| self.base_dir.join(v))
    }

    /// Types and validates every section. `out_override` replaces
    /// `output.dir` and is taken relative to the working directory.
    pub fn resolve(&self, out_override: Option<&Path>) -> Result<RunConfig> {
        let seed: u64 = self.get("seed", 7)?;
        let out_dir = match out_override {
            Some(p) => p.to_path_buf(),
            None => self.path("output.dir").unwrap_or_else(|| self.base_dir.join("out")),
        };
        let in_out = |key: &str, name: &str| self.path(key).unwrap_or_else(|| out_dir.join(name));

        let data = DataPaths {
            train_features: in_out("data.train_features", "train_features.csv"),
            train_labels: in_out("data.train_labels", "train_labels.csv"),
            eval_features: in_out("data.eval_features", "eval_features.csv"),
            eval_labels: in_out("data.eval_labels", "eval_labels.csv"),
            finetune_features: self.path("data.finetune_features"),
            finetune_labels: self.path("data.finetune_labels"),
        };
        if data.finetune_features.is_some() != data.finetune_labels.is_some() {
            return Err(CliError::config(
                "data.finetune_features",
                "finetune features and labels must be given together",
            ));
        }

        let synthetic = SyntheticConfig {
            dim: self.get("synthetic.dim", 32)?,
            train_per_class: self.get("synthetic.train_per_class", 100)?,
            eval_per_class: self.get("synthetic.eval_per_class", 50)?,
            separation: self.get("synthetic.separation", 6.0)?,
            sigma: self.get("synthetic.sigma", 1.0)?,
        };
        for (key, v) in [
            ("synthetic.dim", synthetic.dim),
            ("synthetic.train_per_class", synthetic.train_per_class),
            ("synthetic.eval_per_class", synthetic.eval_per_class),
        ] {
            if v == 0 {
                return Err(CliError::config(key, "must be at least 1"));
            }
        }
        if !(synthetic.sigma > 0.0) || !synthetic.sigma.is_finite() {
            return Err(CliError::config("synthetic.sigma", "must be a finite value > 0"));
        }
        if !(synthetic.separation >= 0.0) || !synthetic.separation.is_finite() {
            return Err(CliError::config("synthetic.separation", "must be finite and >= 0"));
        }

        // The input width is fixed later by the feature file.
        let high_dim: usize = self.get("backbone.high_dim", 32)?;
        let backbone = BackboneConfig::for_vectors(
            synthetic.dim,
            self.get("backbone.mid_channels", 8)?,
            (self.get("backbone.mid_height", 4)?, self.get("backbone.mid_width", 4)?),
            high_dim,
            seed,
        );
        let mre = MreConfig {
            lambda: self.get("mre.lambda", 1.0)?,
            noise_ratio: self.get("mre.noise_ratio", 0.25)?,
            seed,
        };
        let gus = GusConfig {
            layer_dims: match self.values.get("gus.layers") {
                None => vec![high_dim, 6],
                Some(v) => parse_list("gus.layers", v)?,
            },
            clamp_negative_sim: self.get("gus.clamp_negative_sim", true)?,
            degree_source: match self.get("gus.degree_source", "self_loops".to_string())?.as_str() {
                "self_loops" => DegreeSource::WithSelfLoops,
                "raw" => DegreeSource::Raw,
                other => {
                    return Err(CliError::config(
                        "gus.degree_source",
                        format!("expected self_loops or raw, got `{other}`"),
                    ))
                }
            },
            lr: self.get("gus.lr", fermech_core::backbone::GUS_LEARNING_RATE)?,
            seed,
        };
        let defaults = LossConfig::default();
        let loss = LossConfig {
            omega1: self.get("loss.omega1", defaults.omega1)?,
            omega2: self.get("loss.omega2", defaults.omega2)?,
            omega3: self.get("loss.omega3", defaults.omega3)?,
            gamma: self.get("loss.gamma", defaults.gamma)?,
            tau: self.get("loss.tau", defaults.tau)?,
        };
        let aug = AugmentConfig::default();
        let train = TrainConfig {
            epochs: self.get("train.epochs", 30)?,
            batch_size: self.get("train.batch_size", 32)?,
            mre_lr: self.get("mre.lr", MRE_LEARNING_RATE)?,
            oversample: self.get("train.oversample", true)?,
            augment: self.get("train.augment", true)?,
            augment_cfg: AugmentConfig {
                flip_prob: self.get("augment.flip_prob", aug.flip_prob)?,
                crop_prob: self.get("augment.crop_prob", aug.crop_prob)?,
                crop_ratio: self.get("augment.crop_ratio", aug.crop_ratio)?,
                blur_prob: self.get("augment.blur_prob", aug.blur_prob)?,
                blur_sigma_min: self.get("augment.blur_sigma_min", aug.blur_sigma_min)?,
                blur_sigma_max: self.get("augment.blur_sigma_max", aug.blur_sigma_max)?,
            },
            seed,
        };
        let pipeline = PipelineConfig {
            backbone,
            mre,
            gus,
            loss,
            train,
        };
        pipeline.validate()?;

        let weights = match self.values.get("ensemble.weights") {
            Some(v) => {
                let w: Vec<f64> = parse_list("ensemble.weights", v)?;
                if w.len() != 3 {
                    return Err(CliError::config("ensemble.weights", "expected three weights g,m,d"));
                }
                EnsembleWeights::new(w[0], w[1], w[2])?
            }
            None => match self.get("ensemble.scheme", "s1".to_string())?.as_str() {
                "s1" => EnsembleWeights::S1,
                "s2" => EnsembleWeights::S2,
                other => {
                    return Err(CliError::config(
                        "ensemble.scheme",
                        format!("expected s1 or s2, got `{other}`"),
                    ))
                }
            },
        };

        let cdef = CorrectionConfig::default();
        let correction = CorrectionConfig {
            threshold: self.get("correction.threshold", cdef.threshold)?,
            vote_fraction: match self.values.get("correction.vote_fraction") {
                None => cdef.vote_fraction,
                Some(v) => parse_fraction("correction.vote_fraction", v)?,
            },
            min_subset: self.get("correction.min_subset", cdef.min_subset)?,
            rule: match self.get("correction.rule", "inclusive".to_string())?.as_str() {
                "inclusive" => VoteRule::Inclusive,
                "strict" => VoteRule::Strict,
                other => {
                    return Err(CliError::config(
                        "correction.rule",
                        format!("expected inclusive or strict, got `{other}`"),
                    ))
                }
            },
        };
        correction.validate()?;

        let image_size: usize = self.get("augment.image_size", 224)?;
        if image_size == 0 {
            return Err(CliError::config("augment.image_size", "must be at least 1"));
        }

        Ok(RunConfig {
            seed,
            merge: MergeInputs {
                gus_scores: in_out("merge.gus_scores", "scores_gus.csv"),
                mre_scores: in_out("merge.mre_scores", "scores_mre.csv"),
                dmue_scores: self.path("merge.dmue_scores"),
            },
            correct_predictions: in_out("correct.predictions", "merged_predictions.csv"),
            correct_features: in_out("correct.features", "embeddings.csv"),
            report_labels: self.path("report.labels").unwrap_or_else(|| data.eval_labels.clone()),
            out_dir,
            data,
            synthetic,
            pipeline,
            finetune_epochs: self.get("train.finetune_epochs", 0)?,
            image_size,
            weights,
            correction,
        })
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| CliError::config(key, format!("cannot parse `{s}`: {e}")))
        })
        .collect()
}

/// Accepts `a/b` as well as a decimal.
fn parse_fraction(key: &str, v: &str) -> Result<f64> {
    let bad = |e: String| CliError::config(key, format!("cannot parse `{v}`: {e}"));
    match v.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            let b: f64 = b.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?;
            Ok(a / b)
        }
        None => v.trim().parse().map_err(|e: std::num::ParseFloatError| bad(e.to_string())),
    }
}
