//! Synthetic multi-domain classification benchmarks with controlled shift.
//!
//! Every domain draws features from per-class isotropic Gaussians. The three
//! scenarios move different pieces: `conditional_and_label` rotates each
//! class mean around a shared base point and skews the label priors,
//! `covariate_only` translates all classes of a domain by one shared offset,
//! and `label_shift` keeps the class conditionals bit-identical and skews
//! only the priors. Severity scales both the geometric offset and the skew.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelshift::{estimate_from_counts, LabelDistribution};

/// Distance from the origin to each base class mean. Chosen so the classes
/// overlap enough that label-prior information visibly moves the decision
/// boundary; larger values make every method saturate.
pub const BASE_SEPARATION: f64 = 1.2;

/// Which distribution pieces vary across the generated domains: the shared
/// input geometry, the class-conditional means, the label priors, or both of
/// the latter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    CovariateOnly,
    ConditionalShift,
    LabelShift,
    ConditionalAndLabel,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [
        Scenario::CovariateOnly,
        Scenario::ConditionalShift,
        Scenario::LabelShift,
        Scenario::ConditionalAndLabel,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::CovariateOnly => "covariate_only",
            Scenario::ConditionalShift => "conditional_shift",
            Scenario::LabelShift => "label_shift",
            Scenario::ConditionalAndLabel => "conditional_and_label",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .find(|v| v.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<&str> = Scenario::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!(
                    "unknown scenario '{s}', expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

/// Full recipe for one domain: sampling it again reproduces it exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub class_priors: LabelDistribution,
    /// Per-class mean vectors, all the same length.
    pub class_means: Vec<Vec<f64>>,
    /// Per-class isotropic standard deviations.
    pub class_scales: Vec<f64>,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub domain_id: usize,
    pub n_classes: usize,
    pub feature_dim: usize,
    /// Row-major, `n() * feature_dim` entries.
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl DomainDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Empirical label distribution of this dataset.
    pub fn label_prior(&self) -> Result<LabelDistribution> {
        estimate_from_counts(&self.labels, self.n_classes)
    }
}

/// Apportions `total` into integer counts proportional to `probs`: floor
/// each share, then hand the leftovers to the largest fractional remainders,
/// lowest index first on ties.
pub fn largest_remainder(probs: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(probs.len());
    let mut fractions: Vec<(usize, f64)> = Vec::with_capacity(probs.len());
    for (j, &p) in probs.iter().enumerate() {
        let exact = p * total as f64;
        let floor = exact.floor();
        counts.push(floor as usize);
        fractions.push((j, exact - floor));
    }
    let assigned: usize = counts.iter().sum();
    fractions.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for r in 0..total.saturating_sub(assigned) {
        counts[fractions[r % fractions.len()].0] += 1;
    }
    counts
}

/// Samples one domain. Class counts follow the priors by largest-remainder
/// apportionment, rows are drawn class by class and then shuffled, all from
/// a generator seeded by `spec.seed`.
pub fn generate_domain(spec: &DomainSpec, domain_id: usize) -> Result<DomainDataset> {
    let k = spec.class_priors.n_classes();
    if spec.class_means.len() != k || spec.class_scales.len() != k {
        return Err(Error::Config(format!(
            "domain '{}': {k} priors but {} means and {} scales",
            spec.name,
            spec.class_means.len(),
            spec.class_scales.len()
        )));
    }
    let dim = spec.class_means[0].len();
    if dim == 0 || spec.class_means.iter().any(|m| m.len() != dim) {
        return Err(Error::Config(format!(
            "domain '{}': class means must share one nonzero length",
            spec.name
        )));
    }
    if spec.class_scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Config(format!(
            "domain '{}': class scales must be positive",
            spec.name
        )));
    }
    if spec.n_samples == 0 {
        return Err(Error::EmptyDataset);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let counts = largest_remainder(spec.class_priors.probs(), spec.n_samples);
    let n = spec.n_samples;

    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for j in 0..dim {
                let eps: f64 = rng.sample(StandardNormal);
                features.push(spec.class_means[class][j] + spec.class_scales[class] * eps);
            }
            labels.push(class);
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut shuffled_features = Vec::with_capacity(n * dim);
    let mut shuffled_labels = Vec::with_capacity(n);
    for &i in &order {
        shuffled_features.extend_from_slice(&features[i * dim..(i + 1) * dim]);
        shuffled_labels.push(labels[i]);
    }

    Ok(DomainDataset {
        name: spec.name.clone(),
        domain_id,
        n_classes: k,
        feature_dim: dim,
        features: shuffled_features,
        labels: shuffled_labels,
    })
}

fn sample_unit_vector(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Two orthonormal vectors spanning a random plane.
fn sample_plane(dim: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let u = sample_unit_vector(dim, rng);
    loop {
        let raw = sample_unit_vector(dim, rng);
        let dot: f64 = u.iter().zip(&raw).map(|(a, b)| a * b).sum();
        let mut v: Vec<f64> = raw.iter().zip(&u).map(|(r, uj)| r - dot * uj).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            return (u, v);
        }
    }
}

/// Prior proportional to `uniform + severity * one_hot(favored)`.
fn skewed_prior(n_classes: usize, favored: usize, severity: f64) -> LabelDistribution {
    let base = 1.0 / n_classes as f64;
    let probs: Vec<f64> = (0..n_classes)
        .map(|j| {
            let extra = if j == favored { severity } else { 0.0 };
            (base + extra) / (1.0 + severity)
        })
        .collect();
    LabelDistribution::new(probs).expect("skewed prior is a valid distribution")
}

/// Builds the per-domain recipes for a benchmark without sampling them.
///
/// Base class means sit at distance [`BASE_SEPARATION`] from the origin in
/// random directions. Domain `i` is placed at angle `2 pi i / n_domains` on
/// a circle of radius `severity`: per class for `conditional_and_label`,
/// around one shared plane for `covariate_only`, nowhere for `label_shift`.
/// Scenarios with label skew favor class `i mod n_classes` in domain `i`.
pub fn make_domain_specs(
    scenario: Scenario,
    n_domains: usize,
    n_classes: usize,
    feature_dim: usize,
    n_per_domain: usize,
    severity: f64,
    seed: u64,
) -> Result<Vec<DomainSpec>> {
    if n_domains == 0 {
        return Err(Error::Config("benchmark needs at least one domain".into()));
    }
    if n_classes < 2 {
        return Err(Error::Config("benchmark needs at least two classes".into()));
    }
    if feature_dim < 2 {
        return Err(Error::Config(
            "benchmark needs feature_dim >= 2 to place shift planes".into(),
        ));
    }
    if n_per_domain == 0 {
        return Err(Error::EmptyDataset);
    }
    if !(severity >= 0.0) || !severity.is_finite() {
        return Err(Error::Config("severity must be finite and >= 0".into()));
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let base_means: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            sample_unit_vector(feature_dim, &mut master)
                .iter()
                .map(|x| x * BASE_SEPARATION)
                .collect()
        })
        .collect();
    let planes: Vec<(Vec<f64>, Vec<f64>)> = match scenario {
        Scenario::ConditionalAndLabel | Scenario::ConditionalShift => (0..n_classes)
            .map(|_| sample_plane(feature_dim, &mut master))
            .collect(),
        Scenario::CovariateOnly => vec![sample_plane(feature_dim, &mut master)],
        Scenario::LabelShift => Vec::new(),
    };
    let domain_seeds: Vec<u64> = (0..n_domains).map(|_| master.gen()).collect();

    let mut specs = Vec::with_capacity(n_domains);
    for i in 0..n_domains {
        let angle = 2.0 * std::f64::consts::PI * i as f64 / n_domains as f64;
        let offset_in = |plane: &(Vec<f64>, Vec<f64>), j: usize| {
            severity * (angle.cos() * plane.0[j] + angle.sin() * plane.1[j])
        };
        let class_means: Vec<Vec<f64>> = match scenario {
            Scenario::ConditionalAndLabel | Scenario::ConditionalShift => (0..n_classes)
                .map(|k| {
                    (0..feature_dim)
                        .map(|j| base_means[k][j] + offset_in(&planes[k], j))
                        .collect()
                })
                .collect(),
            Scenario::CovariateOnly => (0..n_classes)
                .map(|k| {
                    (0..feature_dim)
                        .map(|j| base_means[k][j] + offset_in(&planes[0], j))
                        .collect()
                })
                .collect(),
            Scenario::LabelShift => base_means.clone(),
        };
        let class_priors = match scenario {
            Scenario::CovariateOnly | Scenario::ConditionalShift => {
                LabelDistribution::uniform(n_classes)
            }
            Scenario::LabelShift | Scenario::ConditionalAndLabel => {
                skewed_prior(n_classes, i % n_classes, severity)
            }
        };
        specs.push(DomainSpec {
            name: format!("domain{i}"),
            class_priors,
            class_means,
            class_scales: vec![1.0; n_classes],
            n_samples: n_per_domain,
            seed: domain_seeds[i],
        });
    }
    Ok(specs)
}

/// Builds and samples a full benchmark in one call.
pub fn make_benchmark(
    scenario: Scenario,
    n_domains: usize,
    n_classes: usize,
    feature_dim: usize,
    n_per_domain: usize,
    severity: f64,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    let specs = make_domain_specs(
        scenario,
        n_domains,
        n_classes,
        feature_dim,
        n_per_domain,
        severity,
        seed,
    )?;
    specs
        .iter()
        .enumerate()
        .map(|(i, spec)| generate_domain(spec, i))
        .collect()
}

/// Splits one dataset into train and test parts after a seeded shuffle. The
/// train side gets the first `floor(train_fraction * n)` shuffled rows; a
/// split that leaves either side empty is rejected.
pub fn split(
    ds: &DomainDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction {train_fraction} must lie strictly between 0 and 1"
        )));
    }
    let n = ds.n();
    let n_train = (train_fraction * n as f64).floor() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::Config(format!(
            "splitting {n} rows at {train_fraction} leaves a side empty"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let take = |idx: &[usize]| {
        let mut features = Vec::with_capacity(idx.len() * ds.feature_dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            features.extend_from_slice(ds.feature_row(i));
            labels.push(ds.labels[i]);
        }
        DomainDataset {
            name: ds.name.clone(),
            domain_id: ds.domain_id,
            n_classes: ds.n_classes,
            feature_dim: ds.feature_dim,
            features,
            labels,
        }
    };
    Ok((take(&order[..n_train]), take(&order[n_train..])))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::CsvFormat {
            path: path.to_path_buf(),
            line,
            message: format!("{other:?}"),
        },
    }
}

fn format_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::CsvFormat {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Writes one domain as CSV with header `domain,label,f0..f{D-1}`. Floats
/// use the shortest decimal form that parses back to the same bits.
pub fn write_feature_csv(path: &Path, ds: &DomainDataset) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["domain".to_string(), "label".to_string()];
    for j in 0..ds.feature_dim {
        header.push(format!("f{j}"));
    }
    writer.write_record(&header).map_err(|e| csv_error(path, e))?;
    for i in 0..ds.n() {
        let mut record = vec![ds.name.clone(), ds.labels[i].to_string()];
        for v in ds.feature_row(i) {
            record.push(format!("{v}"));
        }
        writer.write_record(&record).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads one domain from CSV. The file must carry a single domain name;
/// labels must lie below `n_classes`. The loaded `domain_id` is 0, callers
/// assign real ids. Errors cite the 1-based line.
pub fn load_feature_csv(path: &Path, n_classes: usize) -> Result<DomainDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut records = reader.records();

    let header = match records.next() {
        Some(r) => r.map_err(|e| csv_error(path, e))?,
        None => return Err(Error::EmptyDataset),
    };
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(format_error(
            path,
            1,
            "header must be domain,label,f0,..".to_string(),
        ));
    }
    let feature_dim = header.len() - 2;
    for j in 0..feature_dim {
        if &header[j + 2] != format!("f{j}").as_str() {
            return Err(format_error(path, 1, format!("expected column f{j}")));
        }
    }

    let mut name: Option<String> = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for record in records {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != feature_dim + 2 {
            return Err(format_error(
                path,
                line,
                format!("expected {} fields, found {}", feature_dim + 2, record.len()),
            ));
        }
        match &name {
            None => name = Some(record[0].to_string()),
            Some(n) if n != &record[0] => {
                return Err(format_error(
                    path,
                    line,
                    format!("file mixes domains '{n}' and '{}'", &record[0]),
                ));
            }
            Some(_) => {}
        }
        let label: usize = record[1]
            .parse()
            .map_err(|_| format_error(path, line, format!("bad label '{}'", &record[1])))?;
        if label >= n_classes {
            return Err(Error::InvalidLabel {
                label,
                classes: n_classes,
            });
        }
        labels.push(label);
        for j in 0..feature_dim {
            let v: f64 = record[j + 2].parse().map_err(|_| {
                format_error(path, line, format!("bad float '{}' in f{j}", &record[j + 2]))
            })?;
            features.push(v);
        }
    }
    let Some(name) = name else {
        return Err(Error::EmptyDataset);
    };
    Ok(DomainDataset {
        name,
        domain_id: 0,
        n_classes,
        feature_dim,
        features,
        labels,
    })
}
