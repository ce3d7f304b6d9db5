//! Mini-batch loss assembly with partitioned gradient routing.
//!
//! One backward pass serves four networks with different objectives. The
//! trick is a gradient-scaling node that is the identity in the forward
//! direction: the reconstruction term is decoded from `grad_scale(z, alpha)`
//! and the classifier term from `grad_scale(z, beta)`, so decoder and
//! classifier parameters receive plain unweighted gradients while the
//! encoder receives `alpha`- and `beta`-weighted ones through `z`. The
//! label-prior head only appears in its own cross-entropy; the soft
//! pseudo-label it emits is copied onto the tape as a constant, so no other
//! term backpropagates into it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, FdReport, Tape, TensorId};
use crate::distributions::KlFormula;
use crate::error::{Error, Result};
use crate::labelshift::{LabelDistribution, ALIGN_EPS};

use super::{
    one_hot, softmax, EncoderLabelSource, LossWeights, ModelParams, TrainConfig, Variant,
};

/// Samples of one domain inside a batch.
#[derive(Debug, Clone)]
pub struct DomainBlock {
    /// Decoder-branch and prior index.
    pub domain: usize,
    /// Row-major feature block, `n x feature_dim`.
    pub x: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DomainBlock {
    pub fn n(&self) -> usize {
        self.labels.len()
    }
}

/// One mini-batch, grouped by domain.
#[derive(Debug, Clone)]
pub struct Batch {
    pub blocks: Vec<DomainBlock>,
}

impl Batch {
    pub fn n(&self) -> usize {
        self.blocks.iter().map(|b| b.n()).sum()
    }
}

/// Batch-mean values of the five loss terms. `total_f` is the encoder's
/// objective: `l1 + alpha * l2 + beta * l_ce2 + theta * l_yhat`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l_ce1: f64,
    pub l_ce2: f64,
    pub l_yhat: f64,
    pub total_f: f64,
}

/// Label vector fed to the encoder (and decoder) during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderLabel {
    GroundTruth,
    Pseudo,
    Uniform,
}

impl From<EncoderLabelSource> for EncoderLabel {
    fn from(s: EncoderLabelSource) -> Self {
        match s {
            EncoderLabelSource::GroundTruth => EncoderLabel::GroundTruth,
            EncoderLabelSource::Pseudo => EncoderLabel::Pseudo,
        }
    }
}

/// Everything that shapes the loss graph besides the data itself.
#[derive(Debug, Clone, Copy)]
pub struct LossSettings {
    pub weights: LossWeights,
    pub label_smoothing: f64,
    pub kl_formula: KlFormula,
    pub encoder_label: EncoderLabel,
    /// Whether the classifier cross-entropy is prior-aligned per domain.
    pub align_ce2: bool,
}

impl LossSettings {
    pub fn from_config(config: &TrainConfig, weights: LossWeights) -> Self {
        LossSettings::for_variant(config, weights, Variant::Vbcls)
    }

    /// Applies a variant's training-time overrides: `vbcls_no_lyhat` zeroes
    /// `theta`, `vbcls_no_pa` trains the classifier unaligned, and
    /// `uniform_yhat` fixes the encoder label input to the uniform vector.
    pub fn for_variant(config: &TrainConfig, weights: LossWeights, variant: Variant) -> Self {
        let mut weights = weights;
        if variant == Variant::VbclsNoLyhat {
            weights.theta = 0.0;
        }
        LossSettings {
            weights,
            label_smoothing: config.label_smoothing,
            kl_formula: config.kl_formula,
            encoder_label: if variant == Variant::UniformYhat {
                EncoderLabel::Uniform
            } else {
                config.encoder_label_source.into()
            },
            align_ce2: variant.aligns_training_ce(),
        }
    }
}

/// One of the five loss terms, for isolated gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    /// KL of the encoder posterior to the standard-normal prior.
    LatentPrior,
    /// Squared reconstruction error through the domain's decoder branch.
    Reconstruction,
    /// Cross-entropy of the label-prior head against ground truth.
    LabelPriorCe,
    /// Aligned cross-entropy of the latent classifier against ground truth.
    ClassifierCe,
    /// KL between the posteriors under the true and pseudo label inputs.
    PseudoConsistency,
}

/// Data entering one loss evaluation.
pub struct LossInputs<'a> {
    pub batch: &'a Batch,
    /// Per-domain label priors, indexed by `DomainBlock::domain`.
    pub priors: &'a [LabelDistribution],
    pub pooled: &'a LabelDistribution,
    /// Reparameterization noise, `batch.n() x latent_dim`, rows in block
    /// order.
    pub eps: &'a [f64],
    /// Pinned soft pseudo-labels, `batch.n() x n_classes`, rows in block
    /// order. `None` lets the graph reuse the label-prior head's current
    /// forward output; component graphs require `Some` so the loss is a pure
    /// function of the parameters.
    pub pseudo_labels: Option<&'a [f64]>,
}

/// Soft pseudo-labels the loss graph would compute internally: the softmax
/// of the label-prior head on every batch row, flattened in block order.
pub fn pseudo_labels(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    let k = params.dims.n_classes;
    let mut out = Vec::with_capacity(batch.n() * k);
    for block in &batch.blocks {
        let mut tape = Tape::new();
        let x = tape.constant(block.n(), params.dims.feature_dim, block.x.clone())?;
        let logits = params.label_prior_on_tape(&mut tape, x)?;
        let vals = tape.value(logits);
        for r in 0..block.n() {
            out.extend(softmax(&vals[r * k..(r + 1) * k]));
        }
    }
    Ok(out)
}

/// Batch-mean loss values under a variant's wiring (no gradients).
pub fn compute_losses(
    params: &ModelParams,
    inputs: &LossInputs,
    settings: &LossSettings,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    Ok(assemble(&mut tape, params, inputs, settings, Mode::Routed)?.breakdown)
}

/// Builds the full partitioned training objective on a caller tape. One
/// backward pass from the returned root gives every network its own
/// gradient: the encoder sees `l1 + alpha l2 + beta l_ce2 + theta l_yhat`,
/// the decoders plain `l2`, the label-prior head plain `l_ce1`, and the
/// classifier plain `l_ce2`.
pub fn build_training_loss(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &LossInputs,
    settings: &LossSettings,
) -> Result<(TensorId, LossBreakdown)> {
    let a = assemble(tape, params, inputs, settings, Mode::Routed)?;
    Ok((a.root, a.breakdown))
}

/// Builds one isolated, unrouted loss term on a caller tape, for gradient
/// checking. Requires pinned pseudo-labels.
pub fn build_loss_component(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &LossInputs,
    settings: &LossSettings,
    component: LossComponent,
) -> Result<TensorId> {
    if inputs.pseudo_labels.is_none() {
        return Err(Error::Config(
            "component graphs need pinned pseudo-labels (see LossInputs::pseudo_labels)".into(),
        ));
    }
    Ok(assemble(tape, params, inputs, settings, Mode::Single(component))?.root)
}

/// Finite-difference check of one loss component at the current parameters.
/// `inputs.pseudo_labels` must be pinned so the loss is a pure function of
/// the parameters being perturbed.
pub fn check_component_gradients(
    params: &ModelParams,
    inputs: &LossInputs,
    settings: &LossSettings,
    component: LossComponent,
    step: f64,
) -> Result<FdReport> {
    let mut set = params.set.clone();
    finite_diff_check(
        &mut set,
        |tape, set| {
            let view = ModelParams {
                dims: params.dims,
                set: set.clone(),
                ids: params.ids.clone(),
            };
            build_loss_component(tape, &view, inputs, settings, component)
        },
        step,
    )
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Routed,
    Single(LossComponent),
}

struct Assembled {
    root: TensorId,
    breakdown: LossBreakdown,
}

fn onehot_rows(labels: &[usize], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(labels.len() * k);
    for &l in labels {
        out.extend(one_hot(l, k));
    }
    out
}

/// Logit offsets equivalent to posterior alignment: adding
/// `ln(p_dom_j / p_pool_j)` to logit `j` and taking the softmax reproduces
/// the reweighted, renormalized prediction exactly.
fn alignment_offsets(p_dom: &LabelDistribution, p_pool: &LabelDistribution) -> Vec<f64> {
    p_dom
        .probs()
        .iter()
        .zip(p_pool.probs())
        .map(|(&d, &p)| (d.max(ALIGN_EPS) / p.max(ALIGN_EPS)).ln())
        .collect()
}

fn validate(params: &ModelParams, inputs: &LossInputs, settings: &LossSettings) -> Result<()> {
    settings.weights.validate()?;
    let dims = &params.dims;
    if inputs.batch.blocks.is_empty() || inputs.batch.blocks.iter().any(|b| b.n() == 0) {
        return Err(Error::EmptyDataset);
    }
    for block in &inputs.batch.blocks {
        if block.x.len() != block.n() * dims.feature_dim {
            return Err(Error::InvalidShape(format!(
                "block for domain {} has {} feature values for {} rows",
                block.domain,
                block.x.len(),
                block.n()
            )));
        }
        if let Some(&bad) = block.labels.iter().find(|&&l| l >= dims.n_classes) {
            return Err(Error::InvalidLabel {
                label: bad,
                classes: dims.n_classes,
            });
        }
        if block.domain >= dims.n_domains {
            return Err(Error::UnknownDomain {
                domain: block.domain,
                branches: dims.n_domains,
            });
        }
        if block.domain >= inputs.priors.len() {
            return Err(Error::Config(format!(
                "no label prior for domain {} ({} priors given)",
                block.domain,
                inputs.priors.len()
            )));
        }
        if inputs.priors[block.domain].n_classes() != dims.n_classes {
            return Err(Error::Config(format!(
                "prior for domain {} has {} classes, model has {}",
                block.domain,
                inputs.priors[block.domain].n_classes(),
                dims.n_classes
            )));
        }
    }
    if inputs.pooled.n_classes() != dims.n_classes {
        return Err(Error::Config(format!(
            "pooled prior has {} classes, model has {}",
            inputs.pooled.n_classes(),
            dims.n_classes
        )));
    }
    let n = inputs.batch.n();
    if inputs.eps.len() != n * dims.latent_dim {
        return Err(Error::InvalidShape(format!(
            "noise has {} entries, batch needs {} x {}",
            inputs.eps.len(),
            n,
            dims.latent_dim
        )));
    }
    if let Some(pseudo) = inputs.pseudo_labels {
        if pseudo.len() != n * dims.n_classes {
            return Err(Error::InvalidShape(format!(
                "pseudo-labels have {} entries, batch needs {} x {}",
                pseudo.len(),
                n,
                dims.n_classes
            )));
        }
        if pseudo.iter().any(|&v| !v.is_finite() || v < 0.0) {
            return Err(Error::Config(
                "pseudo-labels must be finite and nonnegative".into(),
            ));
        }
    }
    Ok(())
}

fn mean_of(tape: &mut Tape, sums: &[TensorId], inv_m: f64) -> Result<Option<TensorId>> {
    let Some(&first) = sums.first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &s in &sums[1..] {
        acc = tape.add(acc, s)?;
    }
    Ok(Some(tape.scale(acc, inv_m)))
}

fn assemble(
    tape: &mut Tape,
    params: &ModelParams,
    inputs: &LossInputs,
    settings: &LossSettings,
    mode: Mode,
) -> Result<Assembled> {
    validate(params, inputs, settings)?;
    let dims = params.dims;
    let (d, k, z) = (dims.feature_dim, dims.n_classes, dims.latent_dim);
    let w = settings.weights;
    let routed = mode == Mode::Routed;
    let need = |c: LossComponent| routed || mode == Mode::Single(c);

    let build_lyhat = match mode {
        Mode::Routed => w.theta != 0.0 && settings.encoder_label != EncoderLabel::Uniform,
        Mode::Single(LossComponent::PseudoConsistency) => {
            if settings.encoder_label == EncoderLabel::Uniform {
                return Err(Error::Config(
                    "the pseudo-consistency term is identically zero with a uniform encoder \
                     label input"
                        .into(),
                ));
            }
            true
        }
        Mode::Single(_) => false,
    };
    let need_l1 = need(LossComponent::LatentPrior);
    let need_l2 = need(LossComponent::Reconstruction);
    let need_ce1 = need(LossComponent::LabelPriorCe);
    let need_ce2 = need(LossComponent::ClassifierCe);
    let need_encode = need_l1 || need_l2 || need_ce2 || build_lyhat;
    let need_z = need_l2 || need_ce2;
    let need_yhat = build_lyhat || settings.encoder_label == EncoderLabel::Pseudo;

    let mut l1_sums = Vec::new();
    let mut l2_sums = Vec::new();
    let mut ce1_sums = Vec::new();
    let mut ce2_sums = Vec::new();
    let mut lyhat_sums = Vec::new();

    let prior_mean = vec![0.0; z];
    let prior_std = vec![1.0; z];
    let mut row0 = 0usize;
    for block in &inputs.batch.blocks {
        let n = block.n();
        let x_const = tape.constant(n, d, block.x.clone())?;

        let mut lp_logits = None;
        if need_ce1 {
            let logits = params.label_prior_on_tape(tape, x_const)?;
            ce1_sums.push(tape.softmax_cross_entropy(
                logits,
                &block.labels,
                settings.label_smoothing,
            )?);
            lp_logits = Some(logits);
        }

        // The soft pseudo-label is always a detached constant: from the
        // pinned inputs when given, otherwise a copy of the label-prior
        // head's forward values.
        let yhat_rows: Option<Vec<f64>> = if need_yhat {
            Some(match inputs.pseudo_labels {
                Some(p) => p[row0 * k..(row0 + n) * k].to_vec(),
                None => {
                    let logits = lp_logits.expect("routed mode builds the label-prior forward");
                    let vals = tape.value(logits);
                    let mut out = Vec::with_capacity(n * k);
                    for r in 0..n {
                        out.extend(softmax(&vals[r * k..(r + 1) * k]));
                    }
                    out
                }
            })
        } else {
            None
        };

        if need_encode {
            let y_enc = match settings.encoder_label {
                EncoderLabel::GroundTruth => onehot_rows(&block.labels, k),
                EncoderLabel::Pseudo => yhat_rows.clone().expect("pseudo mode needs yhat"),
                EncoderLabel::Uniform => vec![1.0 / k as f64; n * k],
            };
            let y_enc_const = tape.constant(n, k, y_enc)?;
            let xy = tape.concat(x_const, y_enc_const)?;
            let (mu, lv) = params.encode_on_tape(tape, xy)?;

            if need_l1 {
                l1_sums.push(tape.kl_to_prior(
                    mu,
                    lv,
                    &prior_mean,
                    &prior_std,
                    settings.kl_formula,
                )?);
            }

            if need_z {
                let eps_block = &inputs.eps[row0 * z..(row0 + n) * z];
                let zt = tape.reparameterize(mu, lv, eps_block)?;
                if need_l2 {
                    let z_dec = if routed { tape.grad_scale(zt, w.alpha) } else { zt };
                    let y_dec = match settings.encoder_label {
                        EncoderLabel::Pseudo => {
                            yhat_rows.clone().expect("pseudo mode needs yhat")
                        }
                        _ => onehot_rows(&block.labels, k),
                    };
                    let y_dec_const = tape.constant(n, k, y_dec)?;
                    let zy = tape.concat(z_dec, y_dec_const)?;
                    let xhat = params.decode_on_tape(tape, block.domain, zy)?;
                    l2_sums.push(tape.squared_error(xhat, x_const)?);
                }
                if need_ce2 {
                    let z_cls = if routed { tape.grad_scale(zt, w.beta) } else { zt };
                    let mut logits = params.classifier_on_tape(tape, z_cls)?;
                    if settings.align_ce2 {
                        let offsets =
                            alignment_offsets(&inputs.priors[block.domain], inputs.pooled);
                        logits = tape.add_row(logits, &offsets)?;
                    }
                    ce2_sums.push(tape.softmax_cross_entropy(
                        logits,
                        &block.labels,
                        settings.label_smoothing,
                    )?);
                }
            }

            if build_lyhat {
                let yhat = yhat_rows.clone().expect("consistency term needs yhat");
                match settings.encoder_label {
                    EncoderLabel::GroundTruth => {
                        let y2 = tape.constant(n, k, yhat)?;
                        let xy2 = tape.concat(x_const, y2)?;
                        let (mu2, lv2) = params.encode_on_tape(tape, xy2)?;
                        lyhat_sums.push(tape.kl_diag(mu, lv, mu2, lv2)?);
                    }
                    EncoderLabel::Pseudo => {
                        let y2 = tape.constant(n, k, onehot_rows(&block.labels, k))?;
                        let xy2 = tape.concat(x_const, y2)?;
                        let (mu_gt, lv_gt) = params.encode_on_tape(tape, xy2)?;
                        lyhat_sums.push(tape.kl_diag(mu_gt, lv_gt, mu, lv)?);
                    }
                    EncoderLabel::Uniform => unreachable!("excluded above"),
                }
            }
        }
        row0 += n;
    }

    let inv_m = 1.0 / inputs.batch.n() as f64;
    let l1_mean = mean_of(tape, &l1_sums, inv_m)?;
    let l2_mean = mean_of(tape, &l2_sums, inv_m)?;
    let ce1_mean = mean_of(tape, &ce1_sums, inv_m)?;
    let ce2_mean = mean_of(tape, &ce2_sums, inv_m)?;
    let lyhat_mean = mean_of(tape, &lyhat_sums, inv_m)?;

    let value = |t: Option<TensorId>, tape: &Tape| t.map(|id| tape.scalar(id)).unwrap_or(0.0);
    let breakdown = {
        let l1 = value(l1_mean, tape);
        let l2 = value(l2_mean, tape);
        let l_ce1 = value(ce1_mean, tape);
        let l_ce2 = value(ce2_mean, tape);
        let l_yhat = value(lyhat_mean, tape);
        LossBreakdown {
            l1,
            l2,
            l_ce1,
            l_ce2,
            l_yhat,
            total_f: l1 + w.alpha * l2 + w.beta * l_ce2 + w.theta * l_yhat,
        }
    };

    let root = match mode {
        Mode::Routed => {
            let mut parts = vec![
                l1_mean.expect("routed mode builds every term"),
                l2_mean.expect("routed mode builds every term"),
                ce1_mean.expect("routed mode builds every term"),
                ce2_mean.expect("routed mode builds every term"),
            ];
            if let Some(ly) = lyhat_mean {
                parts.push(tape.scale(ly, w.theta));
            }
            let mut acc = parts[0];
            for &p in &parts[1..] {
                acc = tape.add(acc, p)?;
            }
            acc
        }
        Mode::Single(c) => match c {
            LossComponent::LatentPrior => l1_mean,
            LossComponent::Reconstruction => l2_mean,
            LossComponent::LabelPriorCe => ce1_mean,
            LossComponent::ClassifierCe => ce2_mean,
            LossComponent::PseudoConsistency => lyhat_mean,
        }
        .expect("single mode builds the requested term"),
    };

    Ok(Assembled { root, breakdown })
}
