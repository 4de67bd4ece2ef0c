//! Joint training of the MRE and GUS paths and batch evaluation.
//!
//! One backbone feeds both the MRE heads (high-level classifier plus the
//! mixing branch) and the GUS graph head. Every mini-batch yields an MRE
//! gradient and a GUS gradient at the same parameters; the backbone takes
//! both in one SGD step, each scaled by its own learning rate. Batch
//! objectives are sums over samples.

use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::backbone::{sgd_update, BackboneConfig, BackboneState, MRE_LEARNING_RATE};
use crate::data::{augment, oversample, AugmentConfig, LabeledSample};
use crate::ensemble::predict;
use crate::error::{Error, Result};
use crate::gus::{GusConfig, GusGrads, GusHead, GusModel};
use crate::label::Label;
use crate::losses::LossConfig;
use crate::metrics::macro_f1;
use crate::mre::{MreConfig, MreGrads, MreModel};

/// Independent random streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    MreInit = 1,
    GusInit = 2,
    Shuffle = 3,
    Mixing = 4,
    Augment = 5,
    Oversample = 6,
    Finetune = 7,
}

pub fn stream_rng(seed: u64, stream: Stream) -> crate::Rng {
    let mut rng = crate::rng_from_seed(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub mre_lr: f64,
    pub oversample: bool,
    pub augment: bool,
    pub augment_cfg: AugmentConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            mre_lr: MRE_LEARNING_RATE,
            oversample: true,
            augment: true,
            augment_cfg: AugmentConfig::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.mre_lr > 0.0) || !self.mre_lr.is_finite() {
            return Err(Error::config("mre.lr", "must be a finite value > 0"));
        }
        self.augment_cfg.validate()
    }
}

/// Everything needed to build and train both sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Its seed is ignored in favor of streams derived from `train.seed`.
    pub backbone: BackboneConfig,
    pub mre: MreConfig,
    pub gus: GusConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.mre.validate()?;
        self.gus.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    /// Backbone, high-level head and mixing branch.
    pub mre: MreModel,
    /// Graph head reading the same backbone's high-level features.
    pub gus_head: GusHead,
}

impl Models {
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let mut bb = cfg.backbone.clone();
        bb.seed = seed.wrapping_add(Stream::MreInit as u64);
        let backbone = BackboneState::init(bb)?;
        let gus_head = GusHead::init(
            backbone.config().high_dim,
            &cfg.gus,
            &mut stream_rng(seed, Stream::GusInit),
        )?;
        let mre = MreModel::new(backbone, &mut stream_rng(seed, Stream::MreInit));
        Ok(Models { mre, gus_head })
    }

    pub fn backbone(&self) -> &BackboneState {
        &self.mre.backbone
    }

    /// The GUS path as a standalone model.
    pub fn gus(&self) -> GusModel {
        GusModel {
            backbone: self.mre.backbone.clone(),
            head: self.gus_head.clone(),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: &'static str,
    pub epoch: usize,
    /// Mean per-sample MRE objective and its two terms.
    pub mre_loss: f64,
    pub mre_high_loss: f64,
    pub mre_branch_loss: f64,
    /// Mean per-sample GUS loss.
    pub gus_loss: f64,
    /// Macro F1 of each head on the un-oversampled training data.
    pub mre_mean_f1: f64,
    pub gus_mean_f1: f64,
}

/// Trains both sub-networks for `epochs` epochs on `dataset`.
pub fn train(
    models: &mut Models,
    dataset: &[LabeledSample],
    cfg: &PipelineConfig,
    epochs: usize,
    phase: &'static str,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::config("data", "training set is empty"));
    }
    let seed = match phase {
        "finetune" => cfg.train.seed.wrapping_add(Stream::Finetune as u64),
        _ => cfg.train.seed,
    };
    let mut pool = if cfg.train.oversample {
        oversample(dataset, &mut stream_rng(seed, Stream::Oversample))?
    } else {
        dataset.to_vec()
    };
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut mix_rng = stream_rng(seed.wrapping_add(cfg.mre.seed), Stream::Mixing);
    let mut aug_rng = stream_rng(seed, Stream::Augment);

    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        pool.shuffle(&mut shuffle_rng);
        let (mut mre_total, mut mre_high, mut mre_branch, mut gus_total) = (0.0, 0.0, 0.0, 0.0);
        for chunk in pool.chunks(cfg.train.batch_size) {
            let batch: Vec<LabeledSample> = if cfg.train.augment {
                chunk
                    .iter()
                    .map(|s| augment(s, &mut aug_rng, &cfg.train.augment_cfg))
                    .collect()
            } else {
                chunk.to_vec()
            };
            let m = models
                .mre
                .batch_gradients(&batch, &cfg.mre, &cfg.loss, &mut mix_rng)?;
            let g = models.gus().batch_gradients(&batch, &cfg.gus, &cfg.loss)?;
            step(models, &m.grads, &g.grads, cfg)?;
            mre_total += m.total;
            mre_high += m.high;
            mre_branch += m.branch;
            gus_total += g.total;
        }
        let n = pool.len() as f64;
        let eval = evaluate(models, dataset, &cfg.gus, cfg.train.batch_size)?;
        let truth: Vec<Label> = dataset.iter().map(|s| s.label).collect();
        let record = EpochRecord {
            phase,
            epoch,
            mre_loss: mre_total / n,
            mre_high_loss: mre_high / n,
            mre_branch_loss: mre_branch / n,
            gus_loss: gus_total / n,
            mre_mean_f1: macro_f1(&truth, &argmax_all(&eval.mre_scores))?,
            gus_mean_f1: macro_f1(&truth, &argmax_all(&eval.gus_scores))?,
        };
        for (name, v) in [("MRE", record.mre_loss), ("GUS", record.gus_loss)] {
            if !v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: alloc::format!("{name} loss at epoch {epoch}"),
                });
            }
        }
        log::info!(
            "{phase} epoch {epoch}: mre loss {:.4} gus loss {:.4} mre F1 {:.4} gus F1 {:.4}",
            record.mre_loss,
            record.gus_loss,
            record.mre_mean_f1,
            record.gus_mean_f1
        );
        log.push(record);
    }
    Ok(log)
}

fn step(models: &mut Models, m: &MreGrads, g: &GusGrads, cfg: &PipelineConfig) -> Result<()> {
    let (mre_lr, gus_lr) = (cfg.train.mre_lr, cfg.gus.lr);
    let backbone = models
        .mre
        .backbone
        .sgd_step_multi(&[(&m.backbone, mre_lr), (&g.backbone, gus_lr)])?;
    let mut branch = models.mre.branch.clone();
    for ((name, p), (_, d)) in branch.tensors_mut().into_iter().zip(m.branch.tensors()) {
        sgd_update(p, d, mre_lr, name)?;
    }
    for (l, (layer, d)) in models.gus_head.layers.iter_mut().zip(&g.layers).enumerate() {
        sgd_update(&mut layer.w, d, gus_lr, &alloc::format!("gcn_w{l}"))?;
    }
    models.mre = MreModel { backbone, branch };
    Ok(())
}

/// Per-sample outputs of both paths, in dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutput {
    pub gus_scores: Vec<Vec<f64>>,
    pub mre_scores: Vec<Vec<f64>>,
    /// High-level backbone features, the GUS graph nodes.
    pub embeddings: Vec<Vec<f64>>,
}

/// Scores every sample. GUS graphs are built over consecutive chunks of
/// `batch_size` samples in dataset order.
pub fn evaluate(
    models: &Models,
    dataset: &[LabeledSample],
    gus_cfg: &GusConfig,
    batch_size: usize,
) -> Result<EvalOutput> {
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be at least 1"));
    }
    let mre_scores = dataset
        .iter()
        .map(|s| models.mre.predict_scores(s))
        .collect::<Result<Vec<_>>>()?;
    let gus = models.gus();
    let mut gus_scores = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(batch_size) {
        gus_scores.extend(gus.predict_scores(chunk, gus_cfg)?);
    }
    Ok(EvalOutput {
        gus_scores,
        mre_scores,
        embeddings: gus.embed(dataset)?,
    })
}

pub fn argmax_all(scores: &[Vec<f64>]) -> Vec<Label> {
    scores.iter().map(|s| predict(s)).collect()
}
