//! Label distributions and posterior reweighting.
//!
//! A classifier trained against one label marginal can be rebalanced toward
//! another at prediction time: scale each class probability by the ratio of
//! the target prior to the training-pool prior, then renormalize. When the
//! target prior is unknown it can be estimated by fixed-point iteration:
//! realign the predictions under the current estimate, average them, repeat.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shiftgen::DomainDataset;

/// Floor applied to pool probabilities before dividing.
pub const ALIGN_EPS: f64 = 1e-12;

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    probs: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("empty label distribution".into()));
        }
        if probs.iter().any(|&p| !(0.0..=1.0).contains(&p) || !p.is_finite()) {
            return Err(Error::Config(
                "label distribution entries must lie in [0, 1]".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "label distribution sums to {sum}, expected 1"
            )));
        }
        Ok(LabelDistribution { probs })
    }

    pub fn uniform(n_classes: usize) -> Self {
        LabelDistribution {
            probs: vec![1.0 / n_classes as f64; n_classes],
        }
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(LabelDistribution {
            probs: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.probs.len()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Total-variation distance to another distribution over the same classes.
    pub fn tv_distance(&self, other: &LabelDistribution) -> Result<f64> {
        if self.n_classes() != other.n_classes() {
            return Err(Error::InvalidShape(
                "distributions have different class counts".into(),
            ));
        }
        Ok(0.5
            * self
                .probs
                .iter()
                .zip(&other.probs)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }
}

/// Empirical class frequencies of a label list.
pub fn estimate_from_counts(labels: &[usize], n_classes: usize) -> Result<LabelDistribution> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts = vec![0usize; n_classes];
    for &l in labels {
        if l >= n_classes {
            return Err(Error::InvalidLabel {
                label: l,
                classes: n_classes,
            });
        }
        counts[l] += 1;
    }
    LabelDistribution::from_counts(&counts)
}

/// Class frequencies of several datasets pooled together, weighted by size.
pub fn pooled(datasets: &[DomainDataset]) -> Result<LabelDistribution> {
    let Some(first) = datasets.first() else {
        return Err(Error::EmptyDataset);
    };
    let k = first.n_classes;
    let mut counts = vec![0usize; k];
    for ds in datasets {
        if ds.n_classes != k {
            return Err(Error::Config(format!(
                "datasets disagree on class count: {} vs {k}",
                ds.n_classes
            )));
        }
        for &l in &ds.labels {
            if l >= k {
                return Err(Error::InvalidLabel { label: l, classes: k });
            }
            counts[l] += 1;
        }
    }
    LabelDistribution::from_counts(&counts)
}

/// Reweights a posterior `base` from the pool prior toward `p_dom`:
/// out_k proportional to (p_dom_k / p_pool_k) * base_k. Equal priors are an
/// exact identity. Pool entries are floored at [`ALIGN_EPS`] before
/// division; if every reweighted entry is zero the alignment is degenerate.
pub fn posterior_align(
    base: &[f64],
    p_dom: &LabelDistribution,
    p_pool: &LabelDistribution,
) -> Result<Vec<f64>> {
    let k = base.len();
    if p_dom.n_classes() != k || p_pool.n_classes() != k {
        return Err(Error::Config(format!(
            "prior dimension mismatch: base has {k} classes, priors have {} and {}",
            p_dom.n_classes(),
            p_pool.n_classes()
        )));
    }
    let sum: f64 = base.iter().sum();
    if base.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "base prediction is not a probability vector (sum {sum})"
        )));
    }
    if p_dom.probs() == p_pool.probs() {
        return Ok(base.to_vec());
    }
    let weighted: Vec<f64> = (0..k)
        .map(|j| p_dom.probs()[j] / p_pool.probs()[j].max(ALIGN_EPS) * base[j])
        .collect();
    let total: f64 = weighted.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::DegenerateAlignment);
    }
    Ok(weighted.iter().map(|w| w / total).collect())
}

/// Fixed-point estimate of an unknown target prior from unaligned posterior
/// rows. Each iteration aligns every row with the current estimate and
/// averages; stops when the L1 change drops below `tol` or after
/// `max_iters`. Returns the final estimate.
pub fn refine_target_prior(
    rows: &[Vec<f64>],
    p_pool: &LabelDistribution,
    p_init: &LabelDistribution,
    max_iters: usize,
    tol: f64,
) -> Result<LabelDistribution> {
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = p_pool.n_classes();
    if p_init.n_classes() != k || rows.iter().any(|r| r.len() != k) {
        return Err(Error::Config(
            "refine_target_prior: inconsistent class counts".into(),
        ));
    }
    let mut current = p_init.clone();
    for _ in 0..max_iters {
        let mut mean = vec![0.0; k];
        for row in rows {
            let aligned = posterior_align(row, &current, p_pool)?;
            for j in 0..k {
                mean[j] += aligned[j];
            }
        }
        for m in &mut mean {
            *m /= rows.len() as f64;
        }
        // Guard against rounding drift before revalidating.
        let total: f64 = mean.iter().sum();
        let next = LabelDistribution::new(mean.iter().map(|m| m / total).collect())?;
        let change: f64 = next
            .probs()
            .iter()
            .zip(current.probs())
            .map(|(a, b)| (a - b).abs())
            .sum();
        current = next;
        if change < tol {
            break;
        }
    }
    Ok(current)
}

/// KL(p || q) over classes, with 0 ln 0 = 0 and q floored at [`ALIGN_EPS`].
pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    if p.n_classes() != q.n_classes() {
        return Err(Error::InvalidShape(
            "distributions have different class counts".into(),
        ));
    }
    Ok(p.probs()
        .iter()
        .zip(q.probs())
        .map(|(&pj, &qj)| {
            if pj == 0.0 {
                0.0
            } else {
                pj * (pj / qj.max(ALIGN_EPS)).ln()
            }
        })
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn estimate_from_small_label_list() {
        let d = estimate_from_counts(&[0, 0, 1, 1], 2).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn estimate_rejects_empty_and_out_of_range() {
        assert!(matches!(estimate_from_counts(&[], 3), Err(Error::EmptyDataset)));
        assert!(matches!(
            estimate_from_counts(&[0, 3], 3),
            Err(Error::InvalidLabel { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn class_frequency_fixtures_are_exact() {
        // Seven-class object counts for two collections; frequencies must be
        // exact ratios of counts, no tolerance.
        let art = [184usize, 295, 285, 449, 201, 379, 255];
        let photo = [186usize, 280, 182, 432, 199, 189, 202];
        assert_eq!(art.iter().sum::<usize>(), 2048);
        assert_eq!(photo.iter().sum::<usize>(), 1670);

        let d_art = LabelDistribution::from_counts(&art).unwrap();
        assert_eq!(d_art.probs()[0], 184.0 / 2048.0);
        assert_eq!(d_art.probs()[0], 0.08984375);

        let d_photo = LabelDistribution::from_counts(&photo).unwrap();
        assert_eq!(d_photo.probs()[0], 186.0 / 1670.0);

        // The same numbers must come out of a raw label list.
        let mut labels = Vec::new();
        for (class, &count) in art.iter().enumerate() {
            labels.extend(std::iter::repeat(class).take(count));
        }
        let est = estimate_from_counts(&labels, 7).unwrap();
        assert_eq!(est.probs(), d_art.probs());
    }

    #[test]
    fn pooled_of_two_identical_domains_is_unchanged() {
        let mk = |id: usize| DomainDataset {
            name: format!("d{id}"),
            domain_id: id,
            n_classes: 2,
            feature_dim: 1,
            features: vec![0.0; 4],
            labels: vec![0, 0, 0, 1],
        };
        let single = estimate_from_counts(&[0, 0, 0, 1], 2).unwrap();
        let both = pooled(&[mk(0), mk(1)]).unwrap();
        assert_eq!(both.probs(), single.probs());
    }

    #[test]
    fn pooled_weights_by_dataset_size() {
        // 10 samples of class 0 and 30 of class 1 pool to [0.25, 0.75].
        let a = DomainDataset {
            name: "a".into(),
            domain_id: 0,
            n_classes: 2,
            feature_dim: 1,
            features: vec![0.0; 10],
            labels: vec![0; 10],
        };
        let b = DomainDataset {
            name: "b".into(),
            domain_id: 1,
            n_classes: 2,
            feature_dim: 1,
            features: vec![0.0; 30],
            labels: vec![1; 30],
        };
        let p = pooled(&[a, b]).unwrap();
        assert_eq!(p.probs(), &[0.25, 0.75]);
    }

    #[test]
    fn align_with_equal_priors_is_exact_identity() {
        let p = LabelDistribution::new(vec![0.3, 0.7]).unwrap();
        let base = [0.55, 0.45];
        let out = posterior_align(&base, &p, &p).unwrap();
        assert_eq!(out, base.to_vec());
    }

    #[test]
    fn align_worked_example() {
        let base = [0.6, 0.4];
        let p_dom = LabelDistribution::new(vec![0.8, 0.2]).unwrap();
        let p_pool = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        let out = posterior_align(&base, &p_dom, &p_pool).unwrap();
        assert!((out[0] - 6.0 / 7.0).abs() < 1e-12, "out = {out:?}");
        assert!((out[1] - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn align_preserves_supported_one_hot() {
        let base = [0.0, 1.0, 0.0];
        let p_dom = LabelDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let p_pool = LabelDistribution::uniform(3);
        let out = posterior_align(&base, &p_dom, &p_pool).unwrap();
        assert_eq!(out, base.to_vec());
    }

    #[test]
    fn align_degenerates_when_all_mass_lands_on_zero_prior() {
        let base = [1.0, 0.0];
        let p_dom = LabelDistribution::new(vec![0.0, 1.0]).unwrap();
        let p_pool = LabelDistribution::uniform(2);
        assert!(matches!(
            posterior_align(&base, &p_dom, &p_pool),
            Err(Error::DegenerateAlignment)
        ));
    }

    #[test]
    fn refine_recovers_fixed_point_immediately() {
        // Rows that already average to the pool prior do not move a pool
        // initialization.
        let p_pool = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        let rows = vec![vec![0.6, 0.4], vec![0.4, 0.6]];
        let out = refine_target_prior(&rows, &p_pool, &p_pool, 5, 1e-9).unwrap();
        assert_eq!(out.probs(), p_pool.probs());
    }

    #[test]
    fn refine_single_step_matches_hand_computation() {
        let p_pool = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        let p_init = LabelDistribution::new(vec![0.8, 0.2]).unwrap();
        let rows = vec![vec![0.6, 0.4], vec![0.2, 0.8]];
        // Row 1: weights [1.6, 0.4] -> [0.96, 0.16] -> [6/7, 1/7].
        // Row 2: [0.32, 0.32] -> [0.5, 0.5]. Mean = [0.678571..., 0.321428...].
        let out = refine_target_prior(&rows, &p_pool, &p_init, 1, 0.0).unwrap();
        let expect0 = (6.0 / 7.0 + 0.5) / 2.0;
        assert!((out.probs()[0] - expect0).abs() < 1e-12, "got {:?}", out.probs());
        assert!((out.probs()[1] - (1.0 - expect0)).abs() < 1e-12);
    }

    #[test]
    fn kl_divergence_fixtures() {
        let p = LabelDistribution::new(vec![1.0, 0.0]).unwrap();
        let q = LabelDistribution::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&p, &q).unwrap() - 2.0f64.ln()).abs() < 1e-15);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn distribution_validation_rejects_bad_input() {
        assert!(LabelDistribution::new(vec![]).is_err());
        assert!(LabelDistribution::new(vec![0.5, 0.4]).is_err());
        assert!(LabelDistribution::new(vec![-0.1, 1.1]).is_err());
        assert!(LabelDistribution::new(vec![0.25; 4]).is_ok());
    }

    fn arb_distribution(k: usize) -> impl Strategy<Value = LabelDistribution> {
        proptest::collection::vec(0.01..1.0f64, k).prop_map(|raw| {
            let sum: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            let correction: f64 = probs.iter().sum();
            LabelDistribution::new(probs.iter().map(|p| p / correction).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn align_is_scale_invariant_in_base(
            raw in proptest::collection::vec(0.05..1.0f64, 3),
            p_dom in arb_distribution(3),
            p_pool in arb_distribution(3),
        ) {
            let sum: f64 = raw.iter().sum();
            let base: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            let direct = posterior_align(&base, &p_dom, &p_pool).unwrap();
            // Feeding a rescaled copy through renormalization first changes
            // nothing.
            let rescaled: Vec<f64> = base.iter().map(|b| b * 3.0).collect();
            let renorm_sum: f64 = rescaled.iter().sum();
            let renorm: Vec<f64> = rescaled.iter().map(|r| r / renorm_sum).collect();
            let indirect = posterior_align(&renorm, &p_dom, &p_pool).unwrap();
            for j in 0..3 {
                prop_assert!((direct[j] - indirect[j]).abs() < 1e-9);
            }
        }

        #[test]
        fn align_output_is_a_distribution(
            raw in proptest::collection::vec(0.05..1.0f64, 4),
            p_dom in arb_distribution(4),
            p_pool in arb_distribution(4),
        ) {
            let sum: f64 = raw.iter().sum();
            let base: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            let out = posterior_align(&base, &p_dom, &p_pool).unwrap();
            let total: f64 = out.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(out.iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn kl_divergence_is_nonnegative(
            p in arb_distribution(4),
            q in arb_distribution(4),
        ) {
            prop_assert!(kl_divergence(&p, &q).unwrap() >= -1e-12);
        }
    }
}
