//! Mini-batch training over pooled source domains.
//!
//! Every run is a pure function of the datasets, configuration, weights, and
//! variant: one master stream seeds parameter initialization and a per-epoch
//! stream, the per-epoch stream drives the pooled shuffle and the
//! reparameterization noise, and nothing else draws randomness.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Sgd, Tape};
use crate::error::{Error, Result};
use crate::labelshift::{pooled, posterior_align, LabelDistribution};
use crate::shiftgen::DomainDataset;

use super::losses::{
    build_training_loss, Batch, DomainBlock, LossBreakdown, LossInputs, LossSettings,
};
use super::{
    argmax_lowest, LossWeights, ModelDims, ModelParams, TrainConfig, Variant, GROUP_LABEL_PRIOR,
};

/// Running training losses and end-of-epoch accuracy for one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Sample-weighted mean of the per-batch loss values.
    pub losses: LossBreakdown,
    /// Accuracy over all training rows, each domain aligned to its own
    /// empirical prior.
    pub train_accuracy: f64,
}

/// A trained model with its epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub active_networks: Vec<String>,
}

fn check_datasets(datasets: &[DomainDataset]) -> Result<(usize, usize)> {
    if datasets.len() < 2 {
        return Err(Error::Config(format!(
            "training pools source domains; got {} dataset(s), need at least two",
            datasets.len()
        )));
    }
    let (d, k) = (datasets[0].feature_dim, datasets[0].n_classes);
    for ds in datasets {
        if ds.n() == 0 {
            return Err(Error::EmptyDataset);
        }
        if ds.feature_dim != d || ds.n_classes != k {
            return Err(Error::Config(format!(
                "dataset {} is {}-dimensional with {} classes; first dataset has {d} and {k}",
                ds.name, ds.feature_dim, ds.n_classes
            )));
        }
        if let Some(&bad) = ds.labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: k,
            });
        }
    }
    Ok((d, k))
}

/// Trains a model on the given source domains (indexed by slice position)
/// and reports per-epoch statistics. `erm` updates only the label-prior
/// head; every other variant updates all four networks from the routed
/// objective in a single backward pass per batch.
pub fn train(
    datasets: &[DomainDataset],
    config: &TrainConfig,
    weights: &LossWeights,
    variant: Variant,
) -> Result<TrainOutcome> {
    config.validate()?;
    weights.validate()?;
    let (feature_dim, n_classes) = check_datasets(datasets)?;
    let dims = ModelDims {
        feature_dim,
        n_classes,
        n_domains: datasets.len(),
        latent_dim: config.latent_dim,
        hidden_dim: config.hidden_dim,
    };
    dims.validate()?;

    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed: u64 = master.gen();
    let mut params = ModelParams::init(dims, init_seed)?;

    let priors: Vec<LabelDistribution> = datasets
        .iter()
        .map(|ds| ds.label_prior())
        .collect::<Result<_>>()?;
    let pooled_prior = pooled(datasets)?;
    let settings = LossSettings::for_variant(config, *weights, variant);

    let multipliers = vec![
        1.0,
        1.0,
        config.classifier_lr_multiplier,
        config.classifier_lr_multiplier,
    ];
    let mut opt = Sgd::new(
        &params.set,
        config.lr,
        config.momentum,
        config.weight_decay,
        multipliers,
    )?;
    let drop_epoch = (config.lr_drop_fraction * config.epochs as f64).floor() as usize;

    let all_rows: Vec<(usize, usize)> = datasets
        .iter()
        .enumerate()
        .flat_map(|(d, ds)| (0..ds.n()).map(move |r| (d, r)))
        .collect();

    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut epoch_rng = ChaCha8Rng::seed_from_u64(master.gen());
        opt.set_lr_scale(if epoch >= drop_epoch {
            config.lr_drop_factor
        } else {
            1.0
        });

        let mut order = all_rows.clone();
        order.shuffle(&mut epoch_rng);

        let mut loss_sums = [0.0f64; 6];
        let mut seen = 0usize;
        for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut by_domain: BTreeMap<usize, (Vec<f64>, Vec<usize>)> = BTreeMap::new();
            for &(d, r) in chunk {
                let entry = by_domain.entry(d).or_default();
                entry.0.extend_from_slice(datasets[d].feature_row(r));
                entry.1.push(datasets[d].labels[r]);
            }
            let batch = Batch {
                blocks: by_domain
                    .into_iter()
                    .map(|(domain, (x, labels))| DomainBlock { domain, x, labels })
                    .collect(),
            };
            let n = batch.n();
            let eps: Vec<f64> = (0..n * dims.latent_dim)
                .map(|_| epoch_rng.sample(StandardNormal))
                .collect();

            let mut tape = Tape::new();
            let inputs = LossInputs {
                batch: &batch,
                priors: &priors,
                pooled: &pooled_prior,
                eps: &eps,
                pseudo_labels: None,
            };
            let (root, b) = build_training_loss(&mut tape, &params, &inputs, &settings)?;
            let terms = [b.l1, b.l2, b.l_ce1, b.l_ce2, b.l_yhat, b.total_f];
            if terms.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_index,
                    message: format!(
                        "non-finite loss (l1={} l2={} ce1={} ce2={} lyhat={})",
                        b.l1, b.l2, b.l_ce1, b.l_ce2, b.l_yhat
                    ),
                });
            }
            tape.backward(root, &mut params.set)?;
            if variant == Variant::Erm {
                opt.step_groups(&mut params.set, |g| g == GROUP_LABEL_PRIOR)?;
            } else {
                opt.step(&mut params.set)?;
            }

            for (sum, term) in loss_sums.iter_mut().zip(terms) {
                *sum += term * n as f64;
            }
            seen += n;
        }

        let inv = 1.0 / seen as f64;
        history.push(EpochStats {
            epoch: epoch + 1,
            losses: LossBreakdown {
                l1: loss_sums[0] * inv,
                l2: loss_sums[1] * inv,
                l_ce1: loss_sums[2] * inv,
                l_ce2: loss_sums[3] * inv,
                l_yhat: loss_sums[4] * inv,
                total_f: loss_sums[5] * inv,
            },
            train_accuracy: training_accuracy(&params, datasets, &priors, &pooled_prior, variant)?,
        });
    }

    Ok(TrainOutcome {
        params,
        history,
        active_networks: variant.active_networks(),
    })
}

fn training_accuracy(
    params: &ModelParams,
    datasets: &[DomainDataset],
    priors: &[LabelDistribution],
    pooled_prior: &LabelDistribution,
    variant: Variant,
) -> Result<f64> {
    let k = params.dims.n_classes;
    let mut correct = 0usize;
    let mut total = 0usize;
    for (d, ds) in datasets.iter().enumerate() {
        let base = params.classifier_base_probs(variant, &ds.features, ds.n())?;
        for r in 0..ds.n() {
            let row = &base[r * k..(r + 1) * k];
            let probs = if variant.aligns_prediction() {
                posterior_align(row, &priors[d], pooled_prior)?
            } else {
                row.to_vec()
            };
            if argmax_lowest(&probs) == ds.labels[r] {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}
