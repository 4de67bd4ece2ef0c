//! Prediction correction by similarity voting.
//!
//! Samples whose features are more similar than a threshold are linked and
//! the connected components form subsets. Inside every subset that is large
//! enough, a label holding at least the vote fraction of the predictions
//! overwrites the remaining predictions.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::fmt::Debug;

use crate::error::{Error, Result};
use crate::label::{Label, NUM_CLASSES};
use crate::numerics::{cosine_similarity, norm, DEGENERATE_NORM};

/// Whether a label needs `share >= fraction` or `share > fraction`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteRule {
    #[default]
    Inclusive,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrectionConfig {
    /// Pairs with cosine similarity strictly above this are linked.
    pub threshold: f64,
    pub vote_fraction: f64,
    /// Smallest subset that is voted on.
    pub min_subset: usize,
    pub rule: VoteRule,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        CorrectionConfig {
            threshold: 0.93,
            vote_fraction: 2.0 / 3.0,
            min_subset: 3,
            rule: VoteRule::Inclusive,
        }
    }
}

impl CorrectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(Error::config("correction.threshold", "must lie in (-1, 1]"));
        }
        if !(self.vote_fraction > 0.5 && self.vote_fraction <= 1.0) {
            return Err(Error::config("correction.vote_fraction", "must lie in (0.5, 1]"));
        }
        if self.min_subset < 2 {
            return Err(Error::config("correction.min_subset", "must be at least 2"));
        }
        Ok(())
    }

    fn wins(&self, count: usize, size: usize) -> bool {
        // small slack so that 2 of 3 meets a fraction of 2/3 written in decimal
        let need = self.vote_fraction * size as f64;
        match self.rule {
            VoteRule::Inclusive => count as f64 >= need - 1e-9,
            VoteRule::Strict => count as f64 > need + 1e-9,
        }
    }
}

/// Disjoint groups covering every input id, each sorted, ordered by their
/// smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetPartition<K> {
    groups: Vec<Vec<K>>,
}

impl<K: Ord + Clone> SubsetPartition<K> {
    /// Normalizes the ordering and checks the groups are disjoint and
    /// nonempty.
    pub fn new(mut groups: Vec<Vec<K>>) -> Result<Self>
    where
        K: Debug,
    {
        for g in &mut groups {
            if g.is_empty() {
                return Err(Error::Contract("empty subset in partition".into()));
            }
            g.sort();
        }
        groups.sort_by(|a, b| a[0].cmp(&b[0]));
        let mut all: Vec<&K> = groups.iter().flatten().collect();
        all.sort();
        if let Some(w) = all.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Contract(format!("id {:?} appears in two subsets", w[0])));
        }
        Ok(SubsetPartition { groups })
    }

    pub fn groups(&self) -> &[Vec<K>] {
        &self.groups
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Connected components of the graph linking pairs with similarity above
/// the threshold. Zero-norm features become singletons with a warning.
pub fn group_by_similarity<K>(features: &[(K, Vec<f64>)], cfg: &CorrectionConfig) -> Result<SubsetPartition<K>>
where
    K: Ord + Clone + Debug,
{
    let n = features.len();
    let degenerate: Vec<bool> = features
        .iter()
        .map(|(id, f)| {
            let bad = !(norm(f) > DEGENERATE_NORM);
            if bad {
                log::warn!("feature for {id:?} has zero norm; kept as a singleton");
            }
            bad
        })
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        if degenerate[i] {
            continue;
        }
        for j in i + 1..n {
            if degenerate[j] {
                continue;
            }
            if cosine_similarity(&features[i].1, &features[j].1)? > cfg.threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<K>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(features[i].0.clone());
    }
    SubsetPartition::new(groups.into_values().collect())
}

/// Majority relabeling inside each eligible subset. Ids in `preds` that are
/// not covered by the partition keep their prediction.
pub fn vote_correct<K>(
    partition: &SubsetPartition<K>,
    preds: &BTreeMap<K, Label>,
    cfg: &CorrectionConfig,
) -> Result<BTreeMap<K, Label>>
where
    K: Ord + Clone + Debug,
{
    let mut out = preds.clone();
    for group in partition.groups() {
        let mut counts = [0usize; NUM_CLASSES];
        for id in group {
            let label = preds
                .get(id)
                .ok_or_else(|| Error::MissingPrediction(format!("{id:?}")))?;
            counts[label.index()] += 1;
        }
        if group.len() < cfg.min_subset {
            continue;
        }
        let winner = (0..NUM_CLASSES).find(|&k| cfg.wins(counts[k], group.len()));
        if let Some(k) = winner {
            for id in group {
                out.insert(id.clone(), Label::ALL[k]);
            }
        }
    }
    Ok(out)
}

/// Number of ids whose label differs between two prediction maps.
pub fn count_changes<K: Ord>(before: &BTreeMap<K, Label>, after: &BTreeMap<K, Label>) -> usize {
    before
        .iter()
        .filter(|(k, v)| after.get(*k).is_some_and(|a| a != *v))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng_from_seed;
    use alloc::vec;
    use rand::Rng as _;

    fn unit(angle_deg: f64) -> Vec<f64> {
        let r = angle_deg.to_radians();
        vec![libm::cos(r), libm::sin(r)]
    }

    fn preds(pairs: &[(&'static str, Label)]) -> BTreeMap<&'static str, Label> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn threshold_one_gives_singletons() {
        let mut rng = rng_from_seed(1);
        let feats: Vec<(usize, Vec<f64>)> = (0..8)
            .map(|i| (i, (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let cfg = CorrectionConfig { threshold: 1.0, ..CorrectionConfig::default() };
        let p = group_by_similarity(&feats, &cfg).unwrap();
        assert_eq!(p.groups().len(), 8);
    }

    #[test]
    fn clique_and_chain_components() {
        // cos(18.19 deg) ~= 0.95
        let a = libm::acos(0.95).to_degrees();
        let clique = vec![("a", unit(0.0)), ("b", unit(a / 2.0)), ("c", unit(-a / 2.0)), ("z", unit(90.0))];
        let p = group_by_similarity(&clique, &CorrectionConfig::default()).unwrap();
        assert_eq!(p.groups(), &[vec!["a", "b", "c"], vec!["z"]]);

        // a~b and b~c at 0.95, a~c at cos(2 * 18.19 deg) ~= 0.805
        let chain = vec![("a", unit(0.0)), ("b", unit(a)), ("c", unit(2.0 * a))];
        let p = group_by_similarity(&chain, &CorrectionConfig::default()).unwrap();
        assert_eq!(p.groups(), &[vec!["a", "b", "c"]]);
    }

    #[test]
    fn degenerate_feature_is_singleton() {
        let feats = vec![("a", vec![1.0, 0.0]), ("b", vec![0.0, 0.0]), ("c", vec![1.0, 0.0])];
        let p = group_by_similarity(&feats, &CorrectionConfig::default()).unwrap();
        assert_eq!(p.groups(), &[vec!["a", "c"], vec!["b"]]);
    }

    #[test]
    fn vote_examples() {
        let cfg = CorrectionConfig::default();
        let abc = SubsetPartition::new(vec![vec!["a", "b", "c"]]).unwrap();
        let out = vote_correct(
            &abc,
            &preds(&[("a", Label::Happiness), ("b", Label::Happiness), ("c", Label::Sadness)]),
            &cfg,
        )
        .unwrap();
        assert!(out.values().all(|l| *l == Label::Happiness));

        let ab = SubsetPartition::new(vec![vec!["a", "b"]]).unwrap();
        let p = preds(&[("a", Label::Happiness), ("b", Label::Sadness)]);
        assert_eq!(vote_correct(&ab, &p, &cfg).unwrap(), p);

        let p = preds(&[("a", Label::Happiness), ("b", Label::Sadness), ("c", Label::Fear)]);
        assert_eq!(vote_correct(&abc, &p, &cfg).unwrap(), p);
    }

    #[test]
    fn strict_rule_needs_unanimity_for_three() {
        let cfg = CorrectionConfig { rule: VoteRule::Strict, ..CorrectionConfig::default() };
        let abc = SubsetPartition::new(vec![vec!["a", "b", "c"]]).unwrap();
        let p = preds(&[("a", Label::Happiness), ("b", Label::Happiness), ("c", Label::Sadness)]);
        assert_eq!(vote_correct(&abc, &p, &cfg).unwrap(), p);
    }

    #[test]
    fn missing_prediction_is_an_error() {
        let abc = SubsetPartition::new(vec![vec!["a", "b", "c"]]).unwrap();
        let p = preds(&[("a", Label::Happiness), ("b", Label::Happiness)]);
        assert!(matches!(
            vote_correct(&abc, &p, &CorrectionConfig::default()),
            Err(Error::MissingPrediction(_))
        ));
    }

    #[test]
    fn partition_rejects_overlap() {
        assert!(SubsetPartition::new(vec![vec![1, 2], vec![2, 3]]).is_err());
        assert!(SubsetPartition::<u8>::new(vec![vec![]]).is_err());
        let p = SubsetPartition::new(vec![vec![5, 3], vec![1]]).unwrap();
        assert_eq!(p.groups(), &[vec![1], vec![3, 5]]);
    }

    #[test]
    fn config_validation() {
        assert!(CorrectionConfig::default().validate().is_ok());
        let bad = CorrectionConfig { vote_fraction: 0.5, ..CorrectionConfig::default() };
        assert!(bad.validate().is_err());
        let bad = CorrectionConfig { min_subset: 1, ..CorrectionConfig::default() };
        assert!(bad.validate().is_err());
    }
}
