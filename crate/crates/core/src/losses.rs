//! Classification losses on raw logits, each returned together with its
//! analytic gradient with respect to the logits.
//!
//! The training objective is the weighted combination
//! `omega1 * CE + omega2 * focal + omega3 * sparse`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::numerics::{log_softmax, softmax};

/// Weights and shape parameters of the mixed loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    /// Focal focusing exponent.
    pub gamma: f64,
    /// Exponent of the sparse regularizer, in `(0, 1]`.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            omega1: 1.0,
            omega2: 0.5,
            omega3: 0.1,
            gamma: 2.0,
            tau: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, w) in [
            ("loss.omega1", self.omega1),
            ("loss.omega2", self.omega2),
            ("loss.omega3", self.omega3),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::config(key, "must be a finite value >= 0"));
            }
        }
        if !(self.omega1 + self.omega2 + self.omega3 > 0.0) {
            return Err(Error::config("loss.omega1", "omega weights must not all be zero"));
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::config("loss.gamma", "must be a finite value >= 0"));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::config("loss.tau", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A loss value and its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Mixed loss with the individual (unweighted) terms kept for logging.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLoss {
    pub total: f64,
    pub ce: f64,
    pub focal: f64,
    pub sparse: f64,
    pub grad: Vec<f64>,
}

/// Per-sample classification loss used by the training objectives.
pub trait ClassificationLoss {
    fn evaluate(&self, logits: &[f64], label: Label) -> Result<LossValue>;
}

/// Plain cross-entropy as a [`ClassificationLoss`].
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl ClassificationLoss for CrossEntropy {
    fn evaluate(&self, logits: &[f64], label: Label) -> Result<LossValue> {
        cross_entropy_with_grad(logits, label)
    }
}

impl ClassificationLoss for LossConfig {
    fn evaluate(&self, logits: &[f64], label: Label) -> Result<LossValue> {
        let m = mixed_loss_with_grad(logits, label, self)?;
        Ok(LossValue {
            value: m.total,
            grad: m.grad,
        })
    }
}

fn check_label(logits: &[f64], label: Label) -> Result<usize> {
    let t = label.index();
    if t >= logits.len() {
        return Err(Error::InvalidLabel(t));
    }
    Ok(t)
}

pub fn cross_entropy(logits: &[f64], label: Label) -> Result<f64> {
    let t = check_label(logits, label)?;
    Ok(-log_softmax(logits)?[t])
}

/// Cross-entropy; the gradient is `softmax - onehot`.
pub fn cross_entropy_with_grad(logits: &[f64], label: Label) -> Result<LossValue> {
    let t = check_label(logits, label)?;
    let value = -log_softmax(logits)?[t];
    let mut grad = softmax(logits)?;
    grad[t] -= 1.0;
    Ok(LossValue { value, grad })
}

pub fn focal_loss(logits: &[f64], label: Label, gamma: f64) -> Result<f64> {
    focal_loss_with_grad(logits, label, gamma).map(|l| l.value)
}

/// `-(1 - p_t)^gamma * log p_t`.
pub fn focal_loss_with_grad(logits: &[f64], label: Label, gamma: f64) -> Result<LossValue> {
    let t = check_label(logits, label)?;
    if !(gamma >= 0.0) {
        return Err(Error::domain("focal_loss", "gamma must be >= 0"));
    }
    let log_pt = log_softmax(logits)?[t];
    let p = softmax(logits)?;
    // 1 - p_t, summed from the other classes to keep precision near p_t = 1
    let q: f64 = p
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != t)
        .map(|(_, v)| v)
        .sum();
    let modulator = if gamma == 0.0 { 1.0 } else { libm::pow(q, gamma) };
    let value = -modulator * log_pt;

    // dL/dz_k = c * (delta_tk - p_k)
    let slope = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * libm::pow(q, gamma - 1.0) * log_pt * p[t]
    };
    let c = slope - modulator;
    let grad = p
        .iter()
        .enumerate()
        .map(|(k, pk)| if k == t { c * q } else { -c * pk })
        .collect();
    Ok(LossValue { value, grad })
}

pub fn sparse_reg_loss(logits: &[f64], tau: f64) -> Result<f64> {
    sparse_reg_loss_with_grad(logits, tau).map(|l| l.value)
}

/// `sum_k p_k^tau - 1`, zero exactly when the prediction is one-hot (and
/// identically zero for `tau = 1`).
pub fn sparse_reg_loss_with_grad(logits: &[f64], tau: f64) -> Result<LossValue> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::domain("sparse_reg_loss", "tau must lie in (0, 1]"));
    }
    let p = softmax(logits)?;
    if tau == 1.0 {
        return Ok(LossValue {
            value: 0.0,
            grad: alloc::vec![0.0; p.len()],
        });
    }
    let powered: Vec<f64> = p.iter().map(|x| libm::pow(*x, tau)).collect();
    let total: f64 = powered.iter().sum();
    let grad = p
        .iter()
        .zip(&powered)
        .map(|(pj, pj_tau)| tau * pj_tau - tau * pj * total)
        .collect();
    Ok(LossValue {
        value: (total - 1.0).max(0.0),
        grad,
    })
}

pub fn mixed_loss(logits: &[f64], label: Label, cfg: &LossConfig) -> Result<f64> {
    mixed_loss_with_grad(logits, label, cfg).map(|m| m.total)
}

pub fn mixed_loss_with_grad(logits: &[f64], label: Label, cfg: &LossConfig) -> Result<MixedLoss> {
    let ce = cross_entropy_with_grad(logits, label)?;
    let fl = focal_loss_with_grad(logits, label, cfg.gamma)?;
    let sr = sparse_reg_loss_with_grad(logits, cfg.tau)?;
    let total = cfg.omega1 * ce.value + cfg.omega2 * fl.value + cfg.omega3 * sr.value;
    let grad = (0..logits.len())
        .map(|k| cfg.omega1 * ce.grad[k] + cfg.omega2 * fl.grad[k] + cfg.omega3 * sr.grad[k])
        .collect();
    Ok(MixedLoss {
        total,
        ce: ce.value,
        focal: fl.value,
        sparse: sr.value,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_rel_error, Tensor};
    use crate::rng_from_seed;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::Rng as _;

    const LN6: f64 = 1.791_759_469_228_055;

    fn random_logits(rng: &mut crate::Rng) -> Vec<f64> {
        (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    fn check_grad<F>(f: F, grad: &[f64], at: &[f64])
    where
        F: Fn(&[f64]) -> f64,
    {
        let x = Tensor::vector(at.to_vec());
        let fd = finite_diff_grad(|t| f(t.data()), &x, 1e-5).unwrap();
        let err = max_rel_error(grad, fd.data());
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&[0.7; 6], Label::Fear).unwrap();
        assert!((ce - LN6).abs() < 1e-12);
        let mut logits = [0.0; 6];
        logits[3] = 50.0;
        assert!(cross_entropy(&logits, Label::Happiness).unwrap() < 1e-9);
        assert_eq!(
            cross_entropy(&[0.0; 3], Label::Sadness),
            Err(Error::InvalidLabel(4))
        );
    }

    #[test]
    fn focal_examples() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let z = random_logits(&mut rng);
            let label = Label::from_index(rng.random_range(0..6)).unwrap();
            assert_eq!(
                focal_loss(&z, label, 0.0).unwrap(),
                cross_entropy(&z, label).unwrap()
            );
        }
        // p_t = 0.5 on two classes
        let z = [0.0, 0.0, -1e3, -1e3, -1e3, -1e3];
        let fl = focal_loss(&z, Label::Anger, 2.0).unwrap();
        assert!((fl - 0.25 * core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn focal_not_above_ce_when_confident() {
        let mut rng = rng_from_seed(4);
        for _ in 0..200 {
            let z = random_logits(&mut rng);
            let p = softmax(&z).unwrap();
            let t = (0..6).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap();
            let label = Label::from_index(t).unwrap();
            if p[t] > 1.0 - 1.0 / core::f64::consts::E {
                let fl = focal_loss(&z, label, 2.0).unwrap();
                assert!(fl <= cross_entropy(&z, label).unwrap());
            }
        }
    }

    #[test]
    fn sparse_examples() {
        let mut z = [0.0; 6];
        z[2] = 50.0;
        assert!(sparse_reg_loss(&z, 0.5).unwrap() <= 1e-6);
        let s = sparse_reg_loss(&[0.0; 6], 0.5).unwrap();
        assert!((s - (libm::sqrt(6.0) - 1.0)).abs() < 1e-12);
        assert_eq!(sparse_reg_loss(&[1.0, -2.0, 0.3, 4.0, 0.0, 0.1], 1.0).unwrap(), 0.0);
        assert!(sparse_reg_loss(&[0.0; 6], 0.0).is_err());
    }

    #[test]
    fn mixed_examples() {
        let mut rng = rng_from_seed(5);
        let z = random_logits(&mut rng);
        let ce = cross_entropy(&z, Label::Disgust).unwrap();
        let only_ce = LossConfig {
            omega1: 1.0,
            omega2: 0.0,
            omega3: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(mixed_loss(&z, Label::Disgust, &only_ce).unwrap(), ce);
        let doubled = LossConfig {
            omega1: 1.0,
            omega2: 1.0,
            omega3: 0.0,
            gamma: 0.0,
            tau: 0.5,
        };
        assert_eq!(mixed_loss(&z, Label::Disgust, &doubled).unwrap(), 2.0 * ce);

        let cfg = LossConfig {
            omega1: 0.7,
            omega2: 0.2,
            omega3: 0.1,
            gamma: 2.0,
            tau: 0.5,
        };
        let expected = 0.7 * LN6 + 0.2 * (25.0 / 36.0) * LN6 + 0.1 * (libm::sqrt(6.0) - 1.0);
        let got = mixed_loss(&[0.0; 6], Label::Anger, &cfg).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn config_validation_names_key() {
        let bad = LossConfig {
            tau: 1.5,
            ..LossConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config { key, .. }) if key == "loss.tau"));
        let zero = LossConfig {
            omega1: 0.0,
            omega2: 0.0,
            omega3: 0.0,
            ..LossConfig::default()
        };
        assert!(zero.validate().is_err());
        assert!(LossConfig::default().validate().is_ok());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng_from_seed(11);
        for _ in 0..10 {
            let z = random_logits(&mut rng);
            let label = Label::from_index(rng.random_range(0..6)).unwrap();
            let gamma = rng.random_range(0.0..3.0);
            let tau = rng.random_range(0.2..1.0);

            let g = cross_entropy_with_grad(&z, label).unwrap().grad;
            check_grad(|x| cross_entropy(x, label).unwrap(), &g, &z);

            let g = focal_loss_with_grad(&z, label, gamma).unwrap().grad;
            check_grad(|x| focal_loss(x, label, gamma).unwrap(), &g, &z);

            let g = sparse_reg_loss_with_grad(&z, tau).unwrap().grad;
            check_grad(|x| sparse_reg_loss(x, tau).unwrap(), &g, &z);

            let cfg = LossConfig {
                omega1: rng.random_range(0.0..1.0),
                omega2: rng.random_range(0.0..1.0),
                omega3: rng.random_range(0.0..1.0),
                gamma,
                tau,
            };
            let g = mixed_loss_with_grad(&z, label, &cfg).unwrap().grad;
            check_grad(|x| mixed_loss(x, label, &cfg).unwrap(), &g, &z);
        }
    }

    proptest! {
        #[test]
        fn losses_nonnegative(z in prop::collection::vec(-40.0f64..40.0, 6), t in 0usize..6,
                              gamma in 0.0f64..5.0, tau in 0.05f64..=1.0) {
            let label = Label::from_index(t).unwrap();
            prop_assert!(cross_entropy(&z, label).unwrap() >= 0.0);
            prop_assert!(focal_loss(&z, label, gamma).unwrap() >= 0.0);
            prop_assert!(sparse_reg_loss(&z, tau).unwrap() >= 0.0);
            let cfg = LossConfig { gamma, tau, ..LossConfig::default() };
            prop_assert!(mixed_loss(&z, label, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn mixed_loss_linear_in_weights(z in prop::collection::vec(-5.0f64..5.0, 6), t in 0usize..6,
                                        w in prop::collection::vec(0.0f64..2.0, 3)) {
            let label = Label::from_index(t).unwrap();
            let cfg = LossConfig { omega1: w[0], omega2: w[1], omega3: w[2], gamma: 2.0, tau: 0.5 };
            let expected = w[0] * cross_entropy(&z, label).unwrap()
                + w[1] * focal_loss(&z, label, 2.0).unwrap()
                + w[2] * sparse_reg_loss(&z, 0.5).unwrap();
            prop_assert_eq!(mixed_loss(&z, label, &cfg).unwrap(), expected);
        }
    }

    #[test]
    fn trait_objects_agree_with_functions() {
        let z = vec![0.2, -0.1, 0.0, 1.0, 0.5, -2.0];
        let cfg = LossConfig::default();
        let via_trait = cfg.evaluate(&z, Label::Surprise).unwrap().value;
        assert_eq!(via_trait, mixed_loss(&z, Label::Surprise, &cfg).unwrap());
        let ce = CrossEntropy.evaluate(&z, Label::Surprise).unwrap().value;
        assert_eq!(ce, cross_entropy(&z, Label::Surprise).unwrap());
    }
}
