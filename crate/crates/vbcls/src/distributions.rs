//! Diagonal Gaussians: reparameterized sampling, closed-form KL divergences,
//! and a seeded Monte-Carlo KL estimator used as an independent check on the
//! closed forms.
//!
//! Two forms of the KL-to-prior term are available. `Standard` is the actual
//! divergence KL(q || p) and is what training uses by default. `Verbatim`
//! keeps an alternative with the variance ratio inverted; it is not a valid
//! divergence (it goes negative once q is wider than the prior) and exists
//! only so the two can be compared side by side.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Factorized Gaussian stored as per-dimension mean and log-variance.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != log_var.len() {
            return Err(Error::InvalidShape(format!(
                "mean has {} entries, log_var has {}",
                mean.len(),
                log_var.len()
            )));
        }
        if !mean.iter().chain(log_var.iter()).all(|v| v.is_finite()) {
            return Err(Error::NumericInstability(
                "non-finite Gaussian parameter".into(),
            ));
        }
        Ok(DiagGaussian { mean, log_var })
    }

    /// Builds from mean and variance; variances must be strictly positive.
    pub fn from_mean_var(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if var.iter().any(|&v| v <= 0.0) {
            return Err(Error::NumericInstability(
                "non-positive variance".into(),
            ));
        }
        let log_var = var.iter().map(|v| v.ln()).collect();
        DiagGaussian::new(mean, log_var)
    }

    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_var.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Prior used by the KL-to-prior term: independent Gaussians with the given
/// per-dimension mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl PriorSpec {
    pub fn standard(dim: usize) -> Self {
        PriorSpec {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() || self.mean.len() != self.std.len() {
            return Err(Error::InvalidShape(
                "prior mean and std lengths differ".into(),
            ));
        }
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config("prior std must be positive".into()));
        }
        Ok(())
    }
}

/// Which algebraic form the KL-to-prior term takes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlFormula {
    #[default]
    Standard,
    Verbatim,
}

// Shared per-dimension kernels. The tape ops in `autodiff` sum exactly these,
// so the pure functions below and the differentiable path agree bitwise.

#[inline]
pub(crate) fn reparam_elem(mean: f64, log_var: f64, eps: f64) -> f64 {
    mean + (0.5 * log_var).exp() * eps
}

#[inline]
pub(crate) fn kl_term_standard(mu: f64, lv: f64, pm: f64, ps: f64) -> f64 {
    let d = mu - pm;
    ps.ln() - 0.5 * lv + (lv.exp() + d * d) / (2.0 * ps * ps) - 0.5
}

#[inline]
pub(crate) fn kl_term_verbatim(mu: f64, lv: f64, pm: f64, ps: f64) -> f64 {
    let d = pm - mu;
    -(0.5 * lv - ps.ln()) + (ps * ps + d * d) * (-lv).exp() / 2.0 - 0.5
}

// Written with exp(lv1 - lv2) so that identical arguments give exactly zero.
#[inline]
pub(crate) fn kl_term_diag(m1: f64, lv1: f64, m2: f64, lv2: f64) -> f64 {
    let d = m1 - m2;
    0.5 * (lv2 - lv1) + 0.5 * (lv1 - lv2).exp() + 0.5 * d * d * (-lv2).exp() - 0.5
}

#[inline]
pub(crate) fn log_normal_pdf(z: f64, mean: f64, log_var: f64) -> f64 {
    let d = z - mean;
    -0.5 * (LN_2PI + log_var + d * d * (-log_var).exp())
}

/// z = mean + std * eps, elementwise. Differentiable in mean and log_var for
/// a fixed eps; the matching tape op lives in `autodiff`.
pub fn reparameterize(q: &DiagGaussian, eps: &[f64]) -> Result<Vec<f64>> {
    if eps.len() != q.dim() {
        return Err(Error::InvalidShape(format!(
            "epsilon has {} entries, distribution has {}",
            eps.len(),
            q.dim()
        )));
    }
    Ok((0..q.dim())
        .map(|j| reparam_elem(q.mean[j], q.log_var[j], eps[j]))
        .collect())
}

/// Closed-form divergence between `q` and an independent-Gaussian prior,
/// summed over dimensions.
pub fn kl_to_prior(q: &DiagGaussian, prior: &PriorSpec, formula: KlFormula) -> Result<f64> {
    prior.validate()?;
    if prior.mean.len() != q.dim() {
        return Err(Error::InvalidShape(format!(
            "prior has {} dimensions, distribution has {}",
            prior.mean.len(),
            q.dim()
        )));
    }
    let total: f64 = (0..q.dim())
        .map(|j| match formula {
            KlFormula::Standard => {
                kl_term_standard(q.mean[j], q.log_var[j], prior.mean[j], prior.std[j])
            }
            KlFormula::Verbatim => {
                kl_term_verbatim(q.mean[j], q.log_var[j], prior.mean[j], prior.std[j])
            }
        })
        .sum();
    if !total.is_finite() {
        return Err(Error::NumericInstability("KL evaluated non-finite".into()));
    }
    Ok(total)
}

/// KL(a || b) between two diagonal Gaussians, summed over dimensions.
/// Exactly zero when the arguments are identical.
pub fn kl_diag(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidShape(format!(
            "distributions have {} and {} dimensions",
            a.dim(),
            b.dim()
        )));
    }
    let total: f64 = (0..a.dim())
        .map(|j| kl_term_diag(a.mean[j], a.log_var[j], b.mean[j], b.log_var[j]))
        .sum();
    if !total.is_finite() {
        return Err(Error::NumericInstability("KL evaluated non-finite".into()));
    }
    Ok(total)
}

/// Monte-Carlo estimate of KL(a || b): draws from `a` with a seeded generator
/// and averages log a(z) - log b(z). Deliberately independent of the closed
/// forms above so it can serve as an oracle for them. Deterministic per seed.
pub fn mc_kl(a: &DiagGaussian, b: &DiagGaussian, n_samples: usize, seed: u64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidShape(format!(
            "distributions have {} and {} dimensions",
            a.dim(),
            b.dim()
        )));
    }
    if n_samples == 0 {
        return Err(Error::Config("mc_kl needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        for j in 0..a.dim() {
            let eps: f64 = rng.sample(StandardNormal);
            let z = reparam_elem(a.mean[j], a.log_var[j], eps);
            acc += log_normal_pdf(z, a.mean[j], a.log_var[j])
                - log_normal_pdf(z, b.mean[j], b.log_var[j]);
        }
    }
    Ok(acc / n_samples as f64)
}
