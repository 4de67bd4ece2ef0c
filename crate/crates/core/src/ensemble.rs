//! Weighted merging of per-source class scores and argmax decoding.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};

/// Tolerance on the unit sum of a post-softmax score vector.
pub const SCORE_SUM_TOLERANCE: f64 = 1e-9;

/// Six nonnegative class scores summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreVector([f64; NUM_CLASSES]);

impl ScoreVector {
    pub fn new(probs: &[f64]) -> core::result::Result<Self, String> {
        Self::with_tolerance(probs, SCORE_SUM_TOLERANCE)
    }

    pub fn with_tolerance(probs: &[f64], tolerance: f64) -> core::result::Result<Self, String> {
        let arr: [f64; NUM_CLASSES] = probs
            .try_into()
            .map_err(|_| format!("expected {NUM_CLASSES} scores, got {}", probs.len()))?;
        if let Some(k) = arr.iter().position(|p| !p.is_finite() || *p < 0.0) {
            return Err(format!("score {k} is negative or not finite"));
        }
        let sum: f64 = arr.iter().sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(format!("scores sum to {sum}"));
        }
        Ok(ScoreVector(arr))
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnsembleWeights {
    pub gus: f64,
    pub mre: f64,
    pub dmue: f64,
}

impl EnsembleWeights {
    /// Leans on the GUS sub-network.
    pub const S1: EnsembleWeights = EnsembleWeights {
        gus: 0.6,
        mre: 0.2,
        dmue: 0.2,
    };
    /// Leans on the MRE and DMUE sub-networks.
    pub const S2: EnsembleWeights = EnsembleWeights {
        gus: 0.4,
        mre: 0.3,
        dmue: 0.3,
    };

    pub fn new(gus: f64, mre: f64, dmue: f64) -> Result<Self> {
        let w = EnsembleWeights { gus, mre, dmue };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.gus, self.mre, self.dmue];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("ensemble.weights", "weights must be finite and >= 0"));
        }
        if all.iter().all(|w| *w == 0.0) {
            return Err(Error::config("ensemble.weights", "weights must not all be zero"));
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        EnsembleWeights {
            gus: self.gus * c,
            mre: self.mre * c,
            dmue: self.dmue * c,
        }
    }
}

/// One named score source with its merge weight.
#[derive(Debug, Clone, Copy)]
pub struct ScoreSource<'a> {
    pub name: &'a str,
    pub scores: &'a [f64],
    pub weight: f64,
}

/// `sum_s w_s * scores_s`, not renormalized. Every source is validated as a
/// score vector first; errors name the offending source.
pub fn merge_sources(sources: &[ScoreSource<'_>]) -> Result<[f64; NUM_CLASSES]> {
    if sources.is_empty() {
        return Err(Error::config("ensemble", "at least one score source is required"));
    }
    let mut merged = [0.0; NUM_CLASSES];
    for src in sources {
        let v = ScoreVector::new(src.scores).map_err(|reason| Error::InvalidScores {
            source_name: src.name.into(),
            reason,
        })?;
        if !src.weight.is_finite() || src.weight < 0.0 {
            return Err(Error::config("ensemble.weights", format!("bad weight for {}", src.name)));
        }
        for (m, p) in merged.iter_mut().zip(v.probs()) {
            *m += src.weight * p;
        }
    }
    Ok(merged)
}

/// Merges the GUS, MRE and DMUE scores of one sample.
pub fn merge_scores(
    gus: &[f64],
    mre: &[f64],
    dmue: &[f64],
    w: &EnsembleWeights,
) -> Result<[f64; NUM_CLASSES]> {
    merge_sources(&[
        ScoreSource {
            name: "gus",
            scores: gus,
            weight: w.gus,
        },
        ScoreSource {
            name: "mre",
            scores: mre,
            weight: w.mre,
        },
        ScoreSource {
            name: "dmue",
            scores: dmue,
            weight: w.dmue,
        },
    ])
}

/// Index of the largest entry; ties go to the lowest class index.
pub fn predict(merged: &[f64]) -> Label {
    let mut best = 0;
    for (k, v) in merged.iter().enumerate().take(NUM_CLASSES) {
        if *v > merged[best] {
            best = k;
        }
    }
    Label::ALL[best]
}

/// Merges aligned per-sample score lists and decodes every sample.
pub fn merge_batch(sources: &[(&str, &[Vec<f64>], f64)]) -> Result<Vec<Label>> {
    let n = sources.first().map(|s| s.1.len()).unwrap_or(0);
    if let Some(bad) = sources.iter().find(|s| s.1.len() != n) {
        return Err(Error::shape("merge_batch", &[n], &[bad.1.len()]));
    }
    let mut out = vec![Label::Anger; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let row: Vec<ScoreSource<'_>> = sources
            .iter()
            .map(|(name, scores, weight)| ScoreSource {
                name,
                scores: &scores[i],
                weight: *weight,
            })
            .collect();
        *slot = predict(&merge_sources(&row)?);
    }
    Ok(out)
}
