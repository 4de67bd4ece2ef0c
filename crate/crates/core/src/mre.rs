//! Mid-level representation enhancement.
//!
//! During training each sample's mid-level map has a uniformly sampled set
//! of spatial positions replaced by the map of a partner sample carrying a
//! different expression. The mixed map feeds an auxiliary GAP classifier,
//! and the training objective is `loss(high) + lambda * loss(branch)` with
//! the sample's own label on both terms.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::backbone::{
    check_taps,
    affine, affine_backward, check_lr, gap, gap_backward, sgd_update, uniform_init,
    BackboneParams, BackboneState, FeatureMap,
};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};
use crate::losses::ClassificationLoss;
use crate::numerics::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MreConfig {
    pub lambda: f64,
    /// Fraction of mid-level grid positions replaced by the partner.
    pub noise_ratio: f64,
    pub seed: u64,
}

impl Default for MreConfig {
    fn default() -> Self {
        MreConfig {
            lambda: 1.0,
            noise_ratio: 0.25,
            seed: 0,
        }
    }
}

impl MreConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::config("mre.lambda", "must be a finite value >= 0"));
        }
        if !(0.0..=1.0).contains(&self.noise_ratio) {
            return Err(Error::config("mre.noise_ratio", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Set of spatial positions `(h, w)` whose values come from the partner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MixMask {
    grid: (usize, usize),
    positions: BTreeSet<(usize, usize)>,
}

impl MixMask {
    pub fn new(grid: (usize, usize), positions: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let positions: BTreeSet<_> = positions.into_iter().collect();
        if let Some(p) = positions.iter().find(|(h, w)| *h >= grid.0 || *w >= grid.1) {
            return Err(Error::shape("mix_mask", &[grid.0, grid.1], &[p.0, p.1]));
        }
        Ok(MixMask { grid, positions })
    }

    pub fn empty(grid: (usize, usize)) -> Self {
        MixMask {
            grid,
            positions: BTreeSet::new(),
        }
    }

    pub fn full(grid: (usize, usize)) -> Self {
        Self::empty(grid).complement()
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn contains(&self, h: usize, w: usize) -> bool {
        self.positions.contains(&(h, w))
    }

    pub fn positions(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.positions.iter()
    }

    pub fn complement(&self) -> MixMask {
        let (gh, gw) = self.grid;
        MixMask {
            grid: self.grid,
            positions: (0..gh)
                .flat_map(|h| (0..gw).map(move |w| (h, w)))
                .filter(|p| !self.positions.contains(p))
                .collect(),
        }
    }
}

/// Samples `round(noise_ratio * H * W)` distinct positions uniformly.
pub fn sample_mix_mask(grid: (usize, usize), noise_ratio: f64, rng: &mut crate::Rng) -> Result<MixMask> {
    if grid.0 == 0 || grid.1 == 0 {
        return Err(Error::domain("sample_mix_mask", "grid must be positive"));
    }
    if !(0.0..=1.0).contains(&noise_ratio) {
        return Err(Error::domain("sample_mix_mask", "noise ratio must lie in [0, 1]"));
    }
    let cells = grid.0 * grid.1;
    let k = libm::round(noise_ratio * cells as f64) as usize;
    let picked = rand::seq::index::sample(rng, cells, k.min(cells));
    Ok(MixMask {
        grid,
        positions: picked.into_iter().map(|i| (i / grid.1, i % grid.1)).collect(),
    })
}

/// Replaces every channel at the masked positions of `r_i` with `r_j`.
///
/// The partner must carry a different expression label.
pub fn mix_representations(
    r_i: &FeatureMap,
    label_i: Label,
    r_j: &FeatureMap,
    label_j: Label,
    mask: &MixMask,
) -> Result<FeatureMap> {
    if r_i.shape() != r_j.shape() {
        let (a, b) = (r_i.shape(), r_j.shape());
        return Err(Error::shape("mix_representations", &[a.0, a.1, a.2], &[b.0, b.1, b.2]));
    }
    if mask.grid() != r_i.grid() {
        let (a, b) = (r_i.grid(), mask.grid());
        return Err(Error::shape("mix_representations", &[a.0, a.1], &[b.0, b.1]));
    }
    if label_i == label_j {
        return Err(Error::Contract(format!(
            "mixing partner must have a different expression (both {label_i})"
        )));
    }
    let mut out = r_i.clone();
    for &(h, w) in mask.positions() {
        for c in 0..r_i.channels() {
            out.set(c, h, w, r_j.get(c, h, w));
        }
    }
    Ok(out)
}

/// Splits the gradient at a mixed map into the parts owed to `r_i`
/// (unmasked cells) and `r_j` (masked cells).
pub fn split_mix_grad(d_mixed: &FeatureMap, mask: &MixMask) -> (Vec<f64>, Vec<f64>) {
    let (c, gh, gw) = d_mixed.shape();
    let mut to_i = d_mixed.data().to_vec();
    let mut to_j = vec![0.0; to_i.len()];
    for ch in 0..c {
        for h in 0..gh {
            for w in 0..gw {
                if mask.contains(h, w) {
                    let idx = d_mixed.index(ch, h, w);
                    to_j[idx] = to_i[idx];
                    to_i[idx] = 0.0;
                }
            }
        }
    }
    (to_i, to_j)
}

/// Affine classifier on globally pooled mid-level maps.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    /// `[channels, 6]`
    pub w: Tensor,
    pub b: Tensor,
}

impl BranchParams {
    pub fn zeros(channels: usize) -> Self {
        BranchParams {
            w: Tensor::zeros(&[channels, NUM_CLASSES]),
            b: Tensor::zeros(&[NUM_CLASSES]),
        }
    }

    pub fn init(channels: usize, rng: &mut crate::Rng) -> Self {
        BranchParams {
            w: uniform_init(rng, channels, &[channels, NUM_CLASSES]),
            b: uniform_init(rng, channels, &[NUM_CLASSES]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 2] {
        [("branch_w", &self.w), ("branch_b", &self.b)]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 2] {
        [("branch_w", &mut self.w), ("branch_b", &mut self.b)]
    }
}

/// Branch logits `gap(mixed) W + b`.
pub fn mre_branch(mixed: &FeatureMap, branch: &BranchParams) -> Result<Vec<f64>> {
    if branch.w.shape() != [mixed.channels(), NUM_CLASSES] || branch.b.len() != NUM_CLASSES {
        return Err(Error::shape(
            "mre_branch",
            &[mixed.channels(), NUM_CLASSES],
            branch.w.shape(),
        ));
    }
    Ok(affine(&gap(mixed), &branch.w, &branch.b))
}

/// Accumulates branch parameter gradients and returns the gradient with
/// respect to the mixed map.
pub fn mre_branch_backward(
    mixed: &FeatureMap,
    branch: &BranchParams,
    d_logits: &[f64],
    grads: &mut BranchParams,
) -> Result<FeatureMap> {
    let (c, h, w) = mixed.shape();
    let d_pooled = affine_backward(&gap(mixed), &branch.w, d_logits, &mut grads.w, &mut grads.b);
    FeatureMap::new(c, h, w, gap_backward(&d_pooled, c, h, w))
}

/// Per-sample objective value and its gradients at both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MreLoss {
    pub total: f64,
    pub high: f64,
    pub branch: f64,
    pub d_high_logits: Vec<f64>,
    pub d_branch_logits: Vec<f64>,
}

pub fn mre_loss<L: ClassificationLoss + ?Sized>(
    high_logits: &[f64],
    branch_logits: &[f64],
    label: Label,
    cfg: &MreConfig,
    base: &L,
) -> Result<f64> {
    mre_loss_with_grad(high_logits, branch_logits, label, cfg, base).map(|l| l.total)
}

pub fn mre_loss_with_grad<L: ClassificationLoss + ?Sized>(
    high_logits: &[f64],
    branch_logits: &[f64],
    label: Label,
    cfg: &MreConfig,
    base: &L,
) -> Result<MreLoss> {
    let high = base.evaluate(high_logits, label)?;
    let branch = base.evaluate(branch_logits, label)?;
    Ok(MreLoss {
        total: high.value + cfg.lambda * branch.value,
        high: high.value,
        branch: branch.value,
        d_high_logits: high.grad,
        d_branch_logits: branch.grad.iter().map(|g| cfg.lambda * g).collect(),
    })
}

/// Uniformly chosen batch member whose label differs from `batch[i]`.
pub fn choose_partner(labels: &[Label], i: usize, rng: &mut crate::Rng) -> Option<usize> {
    let candidates: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != labels[i]).collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

/// Backbone plus auxiliary mid-level branch.
#[derive(Debug, Clone, PartialEq)]
pub struct MreModel {
    pub backbone: BackboneState,
    pub branch: BranchParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MreGrads {
    pub backbone: BackboneParams,
    pub branch: BranchParams,
}

/// Summed batch objective with its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct MreBatch {
    pub total: f64,
    pub high: f64,
    pub branch: f64,
    pub mixed_samples: usize,
    pub grads: MreGrads,
}

impl MreModel {
    pub fn new(backbone: BackboneState, rng: &mut crate::Rng) -> Self {
        let branch = BranchParams::init(backbone.config().mid_channels, rng);
        MreModel { backbone, branch }
    }

    /// Summed objective and gradients over a batch, mixing each sample
    /// with one partner of a different label. Samples without any eligible
    /// partner in the batch are left unmixed.
    pub fn batch_gradients<L: ClassificationLoss + ?Sized>(
        &self,
        batch: &[LabeledSample],
        cfg: &MreConfig,
        base: &L,
        rng: &mut crate::Rng,
    ) -> Result<MreBatch> {
        let taps = batch
            .iter()
            .map(|s| {
                let t = self.backbone.forward_sample(s)?;
                check_taps(&t, &s.id)?;
                Ok(t)
            })
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<Label> = batch.iter().map(|s| s.label).collect();
        let bcfg = self.backbone.config();
        let grid = (bcfg.mid_height, bcfg.mid_width);
        let mut d_mid = vec![vec![0.0; bcfg.mid_len()]; batch.len()];
        let mut d_logits = Vec::with_capacity(batch.len());
        let mut branch_grads = BranchParams::zeros(bcfg.mid_channels);
        let (mut total, mut high, mut branch, mut mixed_samples) = (0.0, 0.0, 0.0, 0);

        for i in 0..batch.len() {
            let partner = match choose_partner(&labels, i, rng) {
                Some(j) => Some((j, sample_mix_mask(grid, cfg.noise_ratio, rng)?)),
                None => {
                    log::debug!("sample {} has no different-label partner; left unmixed", batch[i].id);
                    None
                }
            };
            let mixed = match &partner {
                Some((j, mask)) => {
                    mixed_samples += 1;
                    mix_representations(&taps[i].mid, labels[i], &taps[*j].mid, labels[*j], mask)?
                }
                None => taps[i].mid.clone(),
            };
            let branch_logits = mre_branch(&mixed, &self.branch)?;
            let loss = mre_loss_with_grad(&taps[i].logits, &branch_logits, labels[i], cfg, base)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    context: format!("MRE objective for sample {}", batch[i].id),
                });
            }
            total += loss.total;
            high += loss.high;
            branch += loss.branch;

            let d_mixed = mre_branch_backward(&mixed, &self.branch, &loss.d_branch_logits, &mut branch_grads)?;
            match &partner {
                Some((j, mask)) => {
                    let (to_i, to_j) = split_mix_grad(&d_mixed, mask);
                    d_mid[i].iter_mut().zip(&to_i).for_each(|(a, b)| *a += b);
                    d_mid[*j].iter_mut().zip(&to_j).for_each(|(a, b)| *a += b);
                }
                None => d_mid[i].iter_mut().zip(d_mixed.data()).for_each(|(a, b)| *a += b),
            }
            d_logits.push(loss.d_high_logits);
        }

        let mut backbone_grads = BackboneParams::zeros(bcfg);
        for (i, sample) in batch.iter().enumerate() {
            let g = self.backbone.backward(
                sample.payload.as_slice(),
                &taps[i],
                &d_logits[i],
                Some(&d_mid[i]),
                None,
            )?;
            backbone_grads.add_assign(&g)?;
        }
        Ok(MreBatch {
            total,
            high,
            branch,
            mixed_samples,
            grads: MreGrads {
                backbone: backbone_grads,
                branch: branch_grads,
            },
        })
    }

    pub fn sgd_step(&self, grads: &MreGrads, lr: f64) -> Result<MreModel> {
        check_lr(lr)?;
        let backbone = self.backbone.sgd_step(&grads.backbone, lr)?;
        let mut branch = self.branch.clone();
        for ((name, p), (_, g)) in branch.tensors_mut().into_iter().zip(grads.branch.tensors()) {
            sgd_update(p, g, lr, name)?;
        }
        Ok(MreModel { backbone, branch })
    }

    /// Class scores from the high-level head.
    pub fn predict_scores(&self, sample: &LabeledSample) -> Result<Vec<f64>> {
        softmax(&self.backbone.forward_sample(sample)?.logits)
    }

    /// Class scores from the branch on the unmixed mid-level map.
    pub fn branch_scores(&self, sample: &LabeledSample) -> Result<Vec<f64>> {
        let taps = self.backbone.forward_sample(sample)?;
        softmax(&mre_branch(&taps.mid, &self.branch)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::Payload;
    use crate::losses::{cross_entropy, CrossEntropy, LossConfig};
    use crate::numerics::{finite_diff_grad, max_rel_error};
    use crate::rng_from_seed;

    fn random_map(rng: &mut crate::Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn mask_boundaries() {
        let mut rng = rng_from_seed(1);
        assert!(sample_mix_mask((3, 5), 0.0, &mut rng).unwrap().is_empty());
        assert_eq!(sample_mix_mask((3, 5), 1.0, &mut rng).unwrap(), MixMask::full((3, 5)));
        let m = sample_mix_mask((4, 4), 0.25, &mut rng).unwrap();
        assert_eq!(m.len(), 4);
        assert!(m.positions().all(|(h, w)| *h < 4 && *w < 4));
        assert!(MixMask::new((2, 2), [(2, 0)]).is_err());
    }

    #[test]
    fn mask_cells_selected_uniformly() {
        let mut rng = rng_from_seed(2024);
        let trials = 10_000;
        let mut hits = [0usize; 16];
        for _ in 0..trials {
            for (h, w) in sample_mix_mask((4, 4), 0.25, &mut rng).unwrap().positions() {
                hits[h * 4 + w] += 1;
            }
        }
        let sigma = libm::sqrt(trials as f64 * 0.25 * 0.75);
        for h in hits {
            assert!((h as f64 - trials as f64 * 0.25).abs() <= 3.0 * sigma, "{h}");
        }
    }

    #[test]
    fn mix_examples() {
        let mut rng = rng_from_seed(3);
        let a = random_map(&mut rng, 3, 2, 2);
        let b = random_map(&mut rng, 3, 2, 2);
        let (x, y) = (Label::Anger, Label::Fear);
        assert_eq!(mix_representations(&a, x, &b, y, &MixMask::empty((2, 2))).unwrap(), a);
        assert_eq!(mix_representations(&a, x, &b, y, &MixMask::full((2, 2))).unwrap(), b);

        let ones = FeatureMap::filled(3, 2, 2, 1.0);
        let fives = FeatureMap::filled(3, 2, 2, 5.0);
        let m = MixMask::new((2, 2), [(0, 0)]).unwrap();
        let out = mix_representations(&ones, x, &fives, y, &m).unwrap();
        for c in 0..3 {
            assert_eq!(out.get(c, 0, 0), 5.0);
            assert_eq!(out.get(c, 0, 1), 1.0);
            assert_eq!(out.get(c, 1, 0), 1.0);
            assert_eq!(out.get(c, 1, 1), 1.0);
        }
    }

    #[test]
    fn mix_errors() {
        let a = FeatureMap::filled(2, 2, 2, 0.0);
        let b = FeatureMap::filled(2, 2, 3, 0.0);
        let m = MixMask::empty((2, 2));
        assert!(matches!(
            mix_representations(&a, Label::Anger, &b, Label::Fear, &m),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            mix_representations(&a, Label::Anger, &a, Label::Anger, &m),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn branch_examples() {
        let mixed = FeatureMap::filled(4, 2, 2, 0.7);
        let zero = BranchParams::zeros(4);
        assert_eq!(mre_branch(&mixed, &zero).unwrap(), vec![0.0; 6]);

        let branch = BranchParams::init(4, &mut rng_from_seed(5));
        let mut scrambled = FeatureMap::filled(4, 2, 2, 0.0);
        let values = [1.0, 2.0, 3.0, 4.0];
        for c in 0..4 {
            for (k, v) in values.iter().enumerate() {
                scrambled.set(c, k / 2, k % 2, *v);
            }
        }
        let mut swapped = scrambled.clone();
        for c in 0..4 {
            swapped.set(c, 0, 0, 4.0);
            swapped.set(c, 1, 1, 1.0);
        }
        assert_eq!(
            mre_branch(&scrambled, &branch).unwrap(),
            mre_branch(&swapped, &branch).unwrap()
        );
        let constant = mre_branch(&FeatureMap::filled(4, 2, 2, 2.5), &branch).unwrap();
        assert_eq!(constant, affine(&[2.5; 4], &branch.w, &branch.b));
    }

    #[test]
    fn branch_gradient_matches_finite_differences() {
        let mut rng = rng_from_seed(6);
        let mixed = random_map(&mut rng, 4, 2, 2);
        let branch = BranchParams::init(4, &mut rng);
        let label = Label::Happiness;
        let loss = |m: &FeatureMap, b: &BranchParams| cross_entropy(&mre_branch(m, b).unwrap(), label).unwrap();
        let logits = mre_branch(&mixed, &branch).unwrap();
        let d = crate::losses::cross_entropy_with_grad(&logits, label).unwrap().grad;
        let mut g = BranchParams::zeros(4);
        let d_mixed = mre_branch_backward(&mixed, &branch, &d, &mut g).unwrap();

        let fd_w = finite_diff_grad(
            |t| loss(&mixed, &BranchParams { w: t.clone(), b: branch.b.clone() }),
            &branch.w,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(g.w.data(), fd_w.data()) <= 1e-4);
        let fd_b = finite_diff_grad(
            |t| loss(&mixed, &BranchParams { w: branch.w.clone(), b: t.clone() }),
            &branch.b,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(g.b.data(), fd_b.data()) <= 1e-4);
        let flat = Tensor::vector(mixed.data().to_vec());
        let fd_m = finite_diff_grad(
            |t| loss(&FeatureMap::new(4, 2, 2, t.data().to_vec()).unwrap(), &branch),
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(d_mixed.data(), fd_m.data()) <= 1e-4);
    }

    #[test]
    fn loss_examples() {
        let z: Vec<f64> = vec![0.3, -1.0, 0.2, 2.0, 0.0, 0.5];
        let plain = cross_entropy(&z, Label::Disgust).unwrap();
        let cfg0 = MreConfig { lambda: 0.0, ..MreConfig::default() };
        assert_eq!(mre_loss(&z, &[9.0; 6], Label::Disgust, &cfg0, &CrossEntropy).unwrap(), plain);
        let cfg1 = MreConfig { lambda: 1.0, ..MreConfig::default() };
        assert_eq!(mre_loss(&z, &z, Label::Disgust, &cfg1, &CrossEntropy).unwrap(), 2.0 * plain);

        let mut onehot = [0.0; 6];
        onehot[1] = 60.0;
        let cfg = MreConfig { lambda: 0.5, ..MreConfig::default() };
        let v = mre_loss(&[0.0; 6], &onehot, Label::Disgust, &cfg, &CrossEntropy).unwrap();
        assert!((v - 1.791_759_469_228_055).abs() < 1e-9);
        assert!((v - 1.79176).abs() < 1e-5);
    }

    #[test]
    fn loss_monotone_in_lambda() {
        let z = [0.1, 0.4, -0.3, 0.0, 0.2, 0.9];
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let cfg = MreConfig { lambda: k as f64 * 0.25, ..MreConfig::default() };
            let v = mre_loss(&z, &z, Label::Anger, &cfg, &LossConfig::default()).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    fn toy_batch() -> Vec<LabeledSample> {
        let mut rng = rng_from_seed(8);
        (0..6)
            .map(|k| {
                let x = (0..8).map(|_| rng.random_range(-1.0..1.5)).collect();
                LabeledSample::new(alloc::format!("t{k}"), Payload::Vector(x), Label::ALL[k % 3])
            })
            .collect()
    }

    #[test]
    fn zero_noise_ratio_branch_sees_unmixed_map() {
        let backbone = BackboneState::init(BackboneConfig::for_vectors(8, 4, (2, 2), 8, 1)).unwrap();
        let model = MreModel::new(backbone, &mut rng_from_seed(2));
        let batch = toy_batch();
        let cfg = MreConfig { lambda: 1.0, noise_ratio: 0.0, seed: 0 };
        let got = model.batch_gradients(&batch, &cfg, &CrossEntropy, &mut rng_from_seed(3)).unwrap();
        let mut expected = 0.0;
        for s in &batch {
            let taps = model.backbone.forward_sample(s).unwrap();
            expected += cross_entropy(&taps.logits, s.label).unwrap()
                + cross_entropy(&mre_branch(&taps.mid, &model.branch).unwrap(), s.label).unwrap();
        }
        assert!((got.total - expected).abs() < 1e-12);
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let backbone = BackboneState::init(BackboneConfig::for_vectors(8, 4, (2, 2), 8, 1)).unwrap();
        let model = MreModel::new(backbone, &mut rng_from_seed(2));
        let batch = toy_batch();
        let cfg = MreConfig { lambda: 0.7, noise_ratio: 0.5, seed: 0 };
        let loss_cfg = LossConfig::default();
        let eval = |m: &MreModel| {
            m.batch_gradients(&batch, &cfg, &loss_cfg, &mut rng_from_seed(77)).unwrap()
        };
        let analytic = eval(&model);
        assert_eq!(analytic.mixed_samples, batch.len());

        for idx in 0..6 {
            let base = model.backbone.params().tensors()[idx].1.clone();
            let fd = finite_diff_grad(
                |t| {
                    let mut m = model.clone();
                    *m.backbone.params_mut().tensors_mut()[idx].1 = t.clone();
                    eval(&m).total
                },
                &base,
                1e-5,
            )
            .unwrap();
            let err = max_rel_error(analytic.grads.backbone.tensors()[idx].1.data(), fd.data());
            assert!(err <= 1e-4, "{}: {err}", BackboneParams::NAMES[idx]);
        }
        let fd = finite_diff_grad(
            |t| {
                let mut m = model.clone();
                m.branch.w = t.clone();
                eval(&m).total
            },
            &model.branch.w,
            1e-5,
        )
        .unwrap();
        assert!(max_rel_error(analytic.grads.branch.w.data(), fd.data()) <= 1e-4);
    }
}
