//! When every domain is the same distribution, nothing about the method
//! should hurt: each variant must land near the best possible classifier.

use vbcls::harness::evaluate_variant;
use vbcls::labelshift::pooled;
use vbcls::model::{train, LossWeights, TrainConfig, Variant};
use vbcls::shiftgen::{generate_domain, make_domain_specs, DomainDataset, Scenario};

/// Abramowitz-Stegun 7.1.26 rational approximation, max abs error 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

#[test]
fn every_variant_tracks_the_ideal_classifier_on_iid_domains() {
    let specs = make_domain_specs(Scenario::CovariateOnly, 3, 2, 4, 1500, 0.0, 424242).unwrap();
    for spec in &specs[1..] {
        assert_eq!(spec.class_means, specs[0].class_means, "severity 0 is i.i.d.");
        assert_eq!(spec.class_priors, specs[0].class_priors);
    }
    // Balanced unit-variance two-Gaussian mixture: the best classifier picks
    // the nearer mean and its accuracy is Phi(distance / 2).
    let gap: f64 = specs[0].class_means[0]
        .iter()
        .zip(&specs[0].class_means[1])
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let bayes = standard_normal_cdf(gap / 2.0);
    assert!(bayes > 0.6, "degenerate geometry: means only {gap:.3} apart");

    let datasets: Vec<DomainDataset> = specs
        .iter()
        .enumerate()
        .map(|(i, spec)| generate_domain(spec, i).unwrap())
        .collect();
    let sources = &datasets[..2];
    let target = &datasets[2];
    let p_pool = pooled(sources).unwrap();

    let config = TrainConfig {
        epochs: 60,
        seed: 3,
        ..TrainConfig::default()
    };
    let weights = LossWeights {
        alpha: 0.1,
        beta: 10.0,
        theta: 5.0,
    };
    for variant in Variant::ALL {
        let outcome = train(sources, &config, &weights, variant).unwrap();
        let summary = evaluate_variant(&outcome.params, variant, target, &p_pool, &p_pool).unwrap();
        assert!(
            summary.accuracy >= 0.9 * bayes,
            "{variant} reached {:.4}, needs 0.9 x {bayes:.4}",
            summary.accuracy
        );
    }
}
