//! The four networks, their losses, the training loop, and checkpoints.
//!
//! An encoder maps `(x, label vector)` to a diagonal Gaussian over the
//! latent space. Per-domain decoder branches reconstruct `x` from
//! `(z, label vector)`. A label-prior head maps raw features to class
//! logits and supplies the soft pseudo-label used at prediction time. A
//! classifier head maps latent vectors to class logits whose softmax is
//! then prior-aligned. All layers are affine-relu-affine over `f64`.

pub mod checkpoint;
pub mod losses;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, TensorId};
use crate::distributions::{kl_diag, DiagGaussian, KlFormula};
use crate::error::{Error, Result};
use crate::labelshift::{posterior_align, LabelDistribution};
use crate::shiftgen::DomainDataset;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use losses::{
    build_loss_component, build_training_loss, check_component_gradients, compute_losses,
    pseudo_labels, Batch, DomainBlock, EncoderLabel, LossBreakdown, LossComponent, LossInputs,
    LossSettings,
};
pub use train::{train, EpochStats, TrainOutcome};

/// Parameter group of the encoder.
pub const GROUP_ENCODER: usize = 0;
/// Parameter group shared by all decoder branches.
pub const GROUP_DECODER: usize = 1;
/// Parameter group of the label-prior head.
pub const GROUP_LABEL_PRIOR: usize = 2;
/// Parameter group of the latent classifier head.
pub const GROUP_CLASSIFIER: usize = 3;

/// Variance floor when fitting Gaussians to sets of latent means.
const FIT_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub n_classes: usize,
    pub n_domains: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.n_classes < 2
            || self.n_domains == 0
            || self.latent_dim == 0
            || self.hidden_dim == 0
        {
            return Err(Error::Config(format!(
                "bad model dimensions: {self:?} (need feature_dim, n_domains, latent_dim, \
                 hidden_dim >= 1 and n_classes >= 2)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct AffineIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct DecoderIds {
    l1: AffineIds,
    out: AffineIds,
}

#[derive(Debug, Clone)]
struct LayerIds {
    encoder_l1: AffineIds,
    encoder_mean: AffineIds,
    encoder_logvar: AffineIds,
    decoders: Vec<DecoderIds>,
    label_prior_l1: AffineIds,
    label_prior_out: AffineIds,
    classifier_l1: AffineIds,
    classifier_out: AffineIds,
}

fn add_affine<F>(
    set: &mut ParamSet,
    weight: &mut F,
    name: &str,
    group: usize,
    fan_in: usize,
    fan_out: usize,
) -> AffineIds
where
    F: FnMut(usize, usize) -> Vec<f64>,
{
    AffineIds {
        w: set.add(format!("{name}.w"), group, fan_in, fan_out, weight(fan_in, fan_out)),
        b: set.add(format!("{name}.b"), group, 1, fan_out, vec![0.0; fan_out]),
    }
}

/// Registers every layer in canonical order. The order fixes parameter ids,
/// optimizer state layout, and checkpoint payload order.
fn build_layout<F>(dims: &ModelDims, set: &mut ParamSet, weight: &mut F) -> LayerIds
where
    F: FnMut(usize, usize) -> Vec<f64>,
{
    let (d, k, z, h) = (
        dims.feature_dim,
        dims.n_classes,
        dims.latent_dim,
        dims.hidden_dim,
    );
    LayerIds {
        encoder_l1: add_affine(set, weight, "encoder.l1", GROUP_ENCODER, d + k, h),
        encoder_mean: add_affine(set, weight, "encoder.mean", GROUP_ENCODER, h, z),
        encoder_logvar: add_affine(set, weight, "encoder.logvar", GROUP_ENCODER, h, z),
        decoders: (0..dims.n_domains)
            .map(|i| DecoderIds {
                l1: add_affine(set, weight, &format!("decoder{i}.l1"), GROUP_DECODER, z + k, h),
                out: add_affine(set, weight, &format!("decoder{i}.out"), GROUP_DECODER, h, d),
            })
            .collect(),
        label_prior_l1: add_affine(set, weight, "label_prior.l1", GROUP_LABEL_PRIOR, d, h),
        label_prior_out: add_affine(set, weight, "label_prior.out", GROUP_LABEL_PRIOR, h, k),
        classifier_l1: add_affine(set, weight, "classifier.l1", GROUP_CLASSIFIER, z, h),
        classifier_out: add_affine(set, weight, "classifier.out", GROUP_CLASSIFIER, h, k),
    }
}

/// All network parameters plus the dimension record they satisfy.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub set: ParamSet,
    ids: LayerIds,
}

impl ModelParams {
    /// Fresh parameters: weights uniform in the fan-balanced range
    /// `[-sqrt(6 / (fan_in + fan_out)), +...]`, biases zero, all drawn from
    /// one seeded generator.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weight = |fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-limit..=limit))
                .collect()
        };
        let mut set = ParamSet::new();
        let ids = build_layout(&dims, &mut set, &mut weight);
        Ok(ModelParams { dims, set, ids })
    }

    /// Same layout as [`ModelParams::init`] with all-zero weights; the
    /// checkpoint loader fills the data in afterwards.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let mut weight = |fan_in: usize, fan_out: usize| vec![0.0; fan_in * fan_out];
        let mut set = ParamSet::new();
        let ids = build_layout(&dims, &mut set, &mut weight);
        Ok(ModelParams { dims, set, ids })
    }

    fn affine_on_tape(&self, tape: &mut Tape, ids: AffineIds, x: TensorId) -> Result<TensorId> {
        let w = tape.param(&self.set, ids.w);
        let b = tape.param(&self.set, ids.b);
        tape.affine(x, w, b)
    }

    /// Encoder forward on a caller tape. `xy` is a batch of rows, each a
    /// feature vector concatenated with a label vector. Returns
    /// `(mean, log_var)`, both batch x latent.
    pub fn encode_on_tape(&self, tape: &mut Tape, xy: TensorId) -> Result<(TensorId, TensorId)> {
        let pre = self.affine_on_tape(tape, self.ids.encoder_l1, xy)?;
        let h = tape.relu(pre);
        let mean = self.affine_on_tape(tape, self.ids.encoder_mean, h)?;
        let log_var = self.affine_on_tape(tape, self.ids.encoder_logvar, h)?;
        Ok((mean, log_var))
    }

    /// One decoder branch forward. `zy` rows are latent vectors concatenated
    /// with label vectors; the output is a batch of reconstructed features.
    /// Only branch `domain` is touched.
    pub fn decode_on_tape(&self, tape: &mut Tape, domain: usize, zy: TensorId) -> Result<TensorId> {
        let branch = self.ids.decoders.get(domain).ok_or(Error::UnknownDomain {
            domain,
            branches: self.dims.n_domains,
        })?;
        let pre = self.affine_on_tape(tape, branch.l1, zy)?;
        let h = tape.relu(pre);
        self.affine_on_tape(tape, branch.out, h)
    }

    /// Label-prior logits for a batch of raw feature rows.
    pub fn label_prior_on_tape(&self, tape: &mut Tape, x: TensorId) -> Result<TensorId> {
        let pre = self.affine_on_tape(tape, self.ids.label_prior_l1, x)?;
        let h = tape.relu(pre);
        self.affine_on_tape(tape, self.ids.label_prior_out, h)
    }

    /// Classifier logits for a batch of latent rows.
    pub fn classifier_on_tape(&self, tape: &mut Tape, z: TensorId) -> Result<TensorId> {
        let pre = self.affine_on_tape(tape, self.ids.classifier_l1, z)?;
        let h = tape.relu(pre);
        self.affine_on_tape(tape, self.ids.classifier_out, h)
    }

    fn check_label_vec(&self, y_vec: &[f64]) -> Result<()> {
        if y_vec.len() != self.dims.n_classes {
            return Err(Error::InvalidShape(format!(
                "label vector has {} entries, model has {} classes",
                y_vec.len(),
                self.dims.n_classes
            )));
        }
        if y_vec.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Config(
                "label vector entries must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    fn check_feature_vec(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dims.feature_dim {
            return Err(Error::InvalidShape(format!(
                "feature vector has {} entries, model expects {}",
                x.len(),
                self.dims.feature_dim
            )));
        }
        Ok(())
    }

    /// Encodes a batch of feature rows with per-row label vectors, off-tape.
    /// Returns the posterior `(means, log_vars)`, each `n x latent_dim`.
    pub(crate) fn encode_block(
        &self,
        xs: &[f64],
        y_rows: &[f64],
        n: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let x = tape.constant(n, self.dims.feature_dim, xs.to_vec())?;
        let y = tape.constant(n, self.dims.n_classes, y_rows.to_vec())?;
        let xy = tape.concat(x, y)?;
        let (mean, log_var) = self.encode_on_tape(&mut tape, xy)?;
        Ok((tape.value(mean).to_vec(), tape.value(log_var).to_vec()))
    }

    /// Posterior over the latent space for one sample, `q(z | x, y_vec)`.
    pub fn encode(&self, x: &[f64], y_vec: &[f64]) -> Result<DiagGaussian> {
        self.check_feature_vec(x)?;
        self.check_label_vec(y_vec)?;
        let (mean, log_var) = self.encode_block(x, y_vec, 1)?;
        DiagGaussian::new(mean, log_var)
    }

    /// Reconstruction of one sample from branch `domain`.
    pub fn decode(&self, z: &[f64], y_vec: &[f64], domain: usize) -> Result<Vec<f64>> {
        if z.len() != self.dims.latent_dim {
            return Err(Error::InvalidShape(format!(
                "latent vector has {} entries, model expects {}",
                z.len(),
                self.dims.latent_dim
            )));
        }
        self.check_label_vec(y_vec)?;
        let mut tape = Tape::new();
        let zt = tape.constant(1, self.dims.latent_dim, z.to_vec())?;
        let yt = tape.constant(1, self.dims.n_classes, y_vec.to_vec())?;
        let zy = tape.concat(zt, yt)?;
        let out = self.decode_on_tape(&mut tape, domain, zy)?;
        Ok(tape.value(out).to_vec())
    }

    /// Soft pseudo-label for one sample: softmax of the label-prior head.
    pub fn label_prior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_feature_vec(x)?;
        let mut tape = Tape::new();
        let xt = tape.constant(1, self.dims.feature_dim, x.to_vec())?;
        let logits = self.label_prior_on_tape(&mut tape, xt)?;
        Ok(softmax(tape.value(logits)))
    }

    /// Unaligned class probabilities for one latent vector.
    pub fn classify(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims.latent_dim {
            return Err(Error::InvalidShape(format!(
                "latent vector has {} entries, model expects {}",
                z.len(),
                self.dims.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let zt = tape.constant(1, self.dims.latent_dim, z.to_vec())?;
        let logits = self.classifier_on_tape(&mut tape, zt)?;
        Ok(softmax(tape.value(logits)))
    }

    /// Full prediction path: pseudo-label, encode with it, classify the
    /// posterior mean (no sampling), then reweight from the pooled source
    /// prior toward the target prior. Decoder branches are never touched.
    pub fn predict(
        &self,
        x: &[f64],
        p_dom: &LabelDistribution,
        p_pool: &LabelDistribution,
    ) -> Result<Vec<f64>> {
        let yhat = self.label_prior(x)?;
        let q = self.encode(x, &yhat)?;
        let base = self.classify(q.mean())?;
        posterior_align(&base, p_dom, p_pool)
    }

    /// Prediction with a variant's test-time wiring. `erm` answers with the
    /// label-prior head alone and no alignment; `vbcls_no_pa` runs the full
    /// path unaligned; `uniform_yhat` feeds the encoder a uniform label
    /// vector; the others use [`ModelParams::predict`].
    pub fn predict_variant(
        &self,
        variant: Variant,
        x: &[f64],
        p_dom: &LabelDistribution,
        p_pool: &LabelDistribution,
    ) -> Result<Vec<f64>> {
        match variant {
            Variant::Erm => self.label_prior(x),
            Variant::VbclsNoPa => {
                let yhat = self.label_prior(x)?;
                let q = self.encode(x, &yhat)?;
                self.classify(q.mean())
            }
            Variant::UniformYhat => {
                let uniform = vec![1.0 / self.dims.n_classes as f64; self.dims.n_classes];
                let q = self.encode(x, &uniform)?;
                let base = self.classify(q.mean())?;
                posterior_align(&base, p_dom, p_pool)
            }
            Variant::Vbcls | Variant::VbclsNoLyhat => self.predict(x, p_dom, p_pool),
        }
    }

    /// Batched unaligned class probabilities for `n` feature rows under a
    /// variant's test-time wiring, flattened `n x n_classes`. Row for row
    /// this matches [`ModelParams::predict_variant`] before its alignment
    /// step; callers that align apply `posterior_align` per row.
    pub(crate) fn classifier_base_probs(
        &self,
        variant: Variant,
        xs: &[f64],
        n: usize,
    ) -> Result<Vec<f64>> {
        let (d, k) = (self.dims.feature_dim, self.dims.n_classes);
        if xs.len() != n * d {
            return Err(Error::InvalidShape(format!(
                "feature block has {} values for {n} rows of width {d}",
                xs.len()
            )));
        }
        let softmax_rows = |flat: &[f64]| {
            let mut out = Vec::with_capacity(n * k);
            for r in 0..n {
                out.extend(softmax(&flat[r * k..(r + 1) * k]));
            }
            out
        };
        if variant == Variant::Erm {
            let mut tape = Tape::new();
            let x = tape.constant(n, d, xs.to_vec())?;
            let logits = self.label_prior_on_tape(&mut tape, x)?;
            return Ok(softmax_rows(tape.value(logits)));
        }
        let y_rows = if variant == Variant::UniformYhat {
            vec![1.0 / k as f64; n * k]
        } else {
            let mut tape = Tape::new();
            let x = tape.constant(n, d, xs.to_vec())?;
            let logits = self.label_prior_on_tape(&mut tape, x)?;
            softmax_rows(tape.value(logits))
        };
        let (means, _) = self.encode_block(xs, &y_rows, n)?;
        let mut tape = Tape::new();
        let z = tape.constant(n, self.dims.latent_dim, means)?;
        let logits = self.classifier_on_tape(&mut tape, z)?;
        Ok(softmax_rows(tape.value(logits)))
    }
}

/// Index of the largest entry, lowest index on ties.
pub(crate) fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Max-shifted softmax of one logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Indicator vector of length `n_classes` with a one at `class`.
pub fn one_hot(class: usize, n_classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; n_classes];
    v[class] = 1.0;
    v
}

/// How strongly latent class posteriors still differ across domains: for
/// every class, fit one diagonal Gaussian to the posterior means of that
/// class's samples per domain, then average the symmetric KL over all
/// domain pairs and classes. Pairs need two or more samples on both sides.
pub fn class_posterior_divergence(
    params: &ModelParams,
    datasets: &[DomainDataset],
) -> Result<f64> {
    let k = params.dims.n_classes;
    let z = params.dims.latent_dim;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for class in 0..k {
        let mut fitted: Vec<DiagGaussian> = Vec::new();
        for ds in datasets {
            if ds.n_classes != k || ds.feature_dim != params.dims.feature_dim {
                return Err(Error::Config(
                    "dataset shape does not match the model".into(),
                ));
            }
            let rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.labels[i] == class).collect();
            if rows.len() < 2 {
                continue;
            }
            let mut xs = Vec::with_capacity(rows.len() * ds.feature_dim);
            let mut ys = Vec::with_capacity(rows.len() * k);
            for &i in &rows {
                xs.extend_from_slice(ds.feature_row(i));
                ys.extend_from_slice(&one_hot(class, k));
            }
            let (means, _) = params.encode_block(&xs, &ys, rows.len())?;
            let m = rows.len() as f64;
            let mut mean = vec![0.0; z];
            for r in 0..rows.len() {
                for j in 0..z {
                    mean[j] += means[r * z + j];
                }
            }
            for v in &mut mean {
                *v /= m;
            }
            let mut var = vec![0.0; z];
            for r in 0..rows.len() {
                for j in 0..z {
                    let d = means[r * z + j] - mean[j];
                    var[j] += d * d;
                }
            }
            for v in &mut var {
                *v = (*v / m).max(FIT_VAR_FLOOR);
            }
            fitted.push(DiagGaussian::from_mean_var(mean, var)?);
        }
        for a in 0..fitted.len() {
            for b in (a + 1)..fitted.len() {
                total += kl_diag(&fitted[a], &fitted[b])? + kl_diag(&fitted[b], &fitted[a])?;
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::Config(
            "no class has two domains with at least two samples each".into(),
        ));
    }
    Ok(total / pairs as f64)
}

/// Method switchboard: the full method, its ablations, and the plain
/// label-prior baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Vbcls,
    VbclsNoPa,
    VbclsNoLyhat,
    UniformYhat,
    Erm,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Vbcls,
        Variant::VbclsNoPa,
        Variant::VbclsNoLyhat,
        Variant::UniformYhat,
        Variant::Erm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vbcls => "vbcls",
            Variant::VbclsNoPa => "vbcls_no_pa",
            Variant::VbclsNoLyhat => "vbcls_no_lyhat",
            Variant::UniformYhat => "uniform_yhat",
            Variant::Erm => "erm",
        }
    }

    /// Which networks the variant actually trains and consults.
    pub fn active_networks(&self) -> Vec<String> {
        match self {
            Variant::Erm => vec!["label_prior".to_string()],
            _ => ["encoder", "decoders", "label_prior", "classifier"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }

    /// Whether the training cross-entropy on the classifier head is
    /// prior-aligned per source domain.
    pub fn aligns_training_ce(&self) -> bool {
        !matches!(self, Variant::VbclsNoPa)
    }

    /// Whether predictions are reweighted toward the deployment prior at
    /// test time.
    pub fn aligns_prediction(&self) -> bool {
        !matches!(self, Variant::VbclsNoPa | Variant::Erm)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown variant '{s}', expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Label vector the encoder (and decoder) sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderLabelSource {
    GroundTruth,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// When the step-size drop kicks in, as a fraction of total epochs.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Extra step-size factor for the label-prior and classifier heads.
    pub classifier_lr_multiplier: f64,
    pub label_smoothing: f64,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub seed: u64,
    pub encoder_label_source: EncoderLabelSource,
    pub kl_formula: KlFormula,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drop_fraction: 0.8,
            lr_drop_factor: 0.1,
            classifier_lr_multiplier: 10.0,
            label_smoothing: 0.1,
            latent_dim: 8,
            hidden_dim: 32,
            seed: 0,
            encoder_label_source: EncoderLabelSource::GroundTruth,
            kl_formula: KlFormula::Standard,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.lr_drop_fraction > 0.0 && self.lr_drop_fraction <= 1.0) {
            return Err(Error::Config("lr_drop_fraction must lie in (0, 1]".into()));
        }
        if !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("lr_drop_factor must be positive".into()));
        }
        if !(self.classifier_lr_multiplier > 0.0) {
            return Err(Error::Config(
                "classifier_lr_multiplier must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.latent_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "latent_dim and hidden_dim must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Coefficients of the encoder objective: reconstruction (`alpha`), aligned
/// classification (`beta`), and pseudo-label consistency (`theta`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub theta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 1.0,
            theta: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.alpha, self.beta, self.theta];
        if all.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::Config(
                "loss weights must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }
}
