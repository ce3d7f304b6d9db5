//! Leave-one-domain-out experiment runner and evaluation metrics.
//!
//! Every run is a pure function of its [`ExperimentConfig`]: data generation,
//! source splitting, training, and evaluation all derive their randomness
//! from the configured seeds, and reports carry no timestamps or other
//! nondeterministic content (wall-clock duration lives only in memory).

mod report;

use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labelshift::{kl_divergence, pooled, posterior_align, refine_target_prior, LabelDistribution};
use crate::model::{
    argmax_lowest, train, EpochStats, LossWeights, ModelParams, TrainConfig, Variant,
};
use crate::shiftgen::{load_feature_csv, make_benchmark, split, DomainDataset, Scenario};

pub use report::{emit_report, history_csv};

/// Iteration cap and stopping tolerance for test-time prior refinement.
pub const REFINE_MAX_ITERS: usize = 10;
pub const REFINE_TOL: f64 = 1e-6;

/// Fraction of each source domain used for training within a fold.
pub const SOURCE_TRAIN_FRACTION: f64 = 0.7;

/// Where the experiment's domains come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic benchmark sampled by `shiftgen`.
    Scenario {
        scenario: Scenario,
        domains: usize,
        classes: usize,
        dim: usize,
        n_per_domain: usize,
        severity: f64,
        seed: u64,
    },
    /// One feature CSV per domain; domain ids follow list order.
    Csv { paths: Vec<PathBuf>, classes: usize },
}

/// How the deployment-side label prior is chosen at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetPriorMode {
    /// Use the pooled source prior; alignment reduces to the identity.
    #[default]
    Pooled,
    /// Use the target's empirical label distribution.
    Oracle,
    /// Estimate the target prior by fixed-point refinement on the model's
    /// own predictions.
    Refined,
}

impl TargetPriorMode {
    pub fn name(&self) -> &'static str {
        match self {
            TargetPriorMode::Pooled => "pooled",
            TargetPriorMode::Oracle => "oracle",
            TargetPriorMode::Refined => "refined",
        }
    }
}

impl std::fmt::Display for TargetPriorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for TargetPriorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(TargetPriorMode::Pooled),
            "oracle" => Ok(TargetPriorMode::Oracle),
            "refined" => Ok(TargetPriorMode::Refined),
            other => Err(Error::Config(format!(
                "unknown target prior mode {other:?}; expected pooled, oracle, or refined"
            ))),
        }
    }
}

fn default_n_seeds() -> usize {
    1
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Complete description of one experiment. JSON config files mirror these
/// field names; omitted fields take the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub target_prior_mode: TargetPriorMode,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be at least 1".into()));
        }
        self.train.validate()?;
        self.weights.validate()?;
        if let DataSource::Csv { paths, .. } = &self.data {
            if paths.is_empty() {
                return Err(Error::Config("data.paths must not be empty".into()));
            }
        }
        Ok(())
    }

    /// Reads and validates a JSON config file.
    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }
}

/// Materializes the experiment's domains.
pub fn load_domains(source: &DataSource) -> Result<Vec<DomainDataset>> {
    match source {
        DataSource::Scenario {
            scenario,
            domains,
            classes,
            dim,
            n_per_domain,
            severity,
            seed,
        } => make_benchmark(
            *scenario,
            *domains,
            *classes,
            *dim,
            *n_per_domain,
            *severity,
            *seed,
        ),
        DataSource::Csv { paths, classes } => paths
            .iter()
            .enumerate()
            .map(|(i, path)| {
                let mut ds = load_feature_csv(path, *classes)?;
                ds.domain_id = i;
                Ok(ds)
            })
            .collect(),
    }
}

/// Accuracy, per-class accuracy (None for classes absent from the data),
/// and the confusion matrix `confusion[true_class][predicted]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub per_class: Vec<Option<f64>>,
    pub confusion: Vec<Vec<usize>>,
}

/// Evaluates the full prediction path (pseudo-label, encode, classify,
/// align) over a dataset. Argmax ties break toward the lowest class index.
pub fn evaluate(
    params: &ModelParams,
    dataset: &DomainDataset,
    p_dom: &LabelDistribution,
    p_pool: &LabelDistribution,
) -> Result<EvalSummary> {
    evaluate_variant(params, Variant::Vbcls, dataset, p_dom, p_pool)
}

/// [`evaluate`] under a variant's test-time wiring.
pub fn evaluate_variant(
    params: &ModelParams,
    variant: Variant,
    dataset: &DomainDataset,
    p_dom: &LabelDistribution,
    p_pool: &LabelDistribution,
) -> Result<EvalSummary> {
    let n = dataset.n();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = params.dims.n_classes;
    if dataset.n_classes != k || dataset.feature_dim != params.dims.feature_dim {
        return Err(Error::Config(format!(
            "dataset {} does not match the model's dimensions",
            dataset.name
        )));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: k,
        });
    }

    let base = params.classifier_base_probs(variant, &dataset.features, n)?;
    let mut confusion = vec![vec![0usize; k]; k];
    for r in 0..n {
        let row = &base[r * k..(r + 1) * k];
        let predicted = if variant.aligns_prediction() {
            argmax_lowest(&posterior_align(row, p_dom, p_pool)?)
        } else {
            argmax_lowest(row)
        };
        confusion[dataset.labels[r]][predicted] += 1;
    }
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| confusion[c][c] as f64 / total as f64)
        })
        .collect();
    Ok(EvalSummary {
        accuracy: correct as f64 / n as f64,
        per_class,
        confusion,
    })
}

/// One training-and-evaluation attempt. A failed attempt keeps its error
/// text and leaves the result fields empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    /// Derived seed that drove this fold's splits and training.
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
    pub history: Vec<EpochStats>,
    pub eval: Option<EvalSummary>,
}

/// All seeds of one held-out target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: String,
    /// Mean over the seeds that succeeded; None if every seed failed.
    pub mean_accuracy: Option<f64>,
    /// Population standard deviation over the succeeded seeds.
    pub sd_accuracy: Option<f64>,
    pub seeds: Vec<SeedRun>,
}

/// KL divergence between the empirical label priors of one ordered domain
/// pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorPairKl {
    pub from: String,
    pub to: String,
    pub kl: f64,
}

/// Full outcome of a leave-one-domain-out run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub config: ExperimentConfig,
    pub targets: Vec<TargetReport>,
    /// Label-prior KL for every ordered pair of input domains.
    pub prior_shift: Vec<PriorPairKl>,
    pub active_networks: Vec<String>,
    /// Wall-clock seconds; never serialized, so reports stay reproducible.
    #[serde(skip)]
    pub duration_secs: f64,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix64(a.rotate_left(17) ^ splitmix64(b))
}

/// Population (1/n) mean and standard deviation.
pub(crate) fn mean_sd(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Picks the deployment prior handed to posterior alignment: the pooled
/// source prior for non-aligning variants and `pooled` mode, the dataset's
/// own empirical prior under `oracle`, and under `refined` the fixed-point
/// estimate computed from the model's unaligned posteriors on the dataset.
pub fn target_prior(
    params: &ModelParams,
    variant: Variant,
    target: &DomainDataset,
    p_pool: &LabelDistribution,
    mode: TargetPriorMode,
) -> Result<LabelDistribution> {
    if !variant.aligns_prediction() {
        return Ok(p_pool.clone());
    }
    match mode {
        TargetPriorMode::Pooled => Ok(p_pool.clone()),
        TargetPriorMode::Oracle => target.label_prior(),
        TargetPriorMode::Refined => {
            let k = params.dims.n_classes;
            let base = params.classifier_base_probs(variant, &target.features, target.n())?;
            let rows: Vec<Vec<f64>> = base.chunks(k).map(|c| c.to_vec()).collect();
            refine_target_prior(
                &rows,
                p_pool,
                &LabelDistribution::uniform(k),
                REFINE_MAX_ITERS,
                REFINE_TOL,
            )
        }
    }
}

fn run_seed(
    variant: Variant,
    sources: &[DomainDataset],
    target: &DomainDataset,
    config: &ExperimentConfig,
    fold_seed: u64,
) -> Result<(Vec<EpochStats>, EvalSummary)> {
    let mut train_sides = Vec::with_capacity(sources.len());
    for (i, src) in sources.iter().enumerate() {
        let (train_side, _held_out) = split(src, SOURCE_TRAIN_FRACTION, mix(fold_seed, i as u64))?;
        train_sides.push(train_side);
    }
    let run_config = TrainConfig {
        seed: fold_seed,
        ..config.train
    };
    let outcome = train(&train_sides, &run_config, &config.weights, variant)?;
    let p_pool = pooled(&train_sides)?;
    let p_dom = target_prior(
        &outcome.params,
        variant,
        target,
        &p_pool,
        config.target_prior_mode,
    )?;
    let eval = evaluate_variant(&outcome.params, variant, target, &p_dom, &p_pool)?;
    Ok((outcome.history, eval))
}

/// Runs every seed of one held-out target. Divergence or evaluation failure
/// in a fold is recorded on that fold's entry and the remaining seeds still
/// run.
pub fn run_variant(
    variant: Variant,
    sources: &[DomainDataset],
    target: &DomainDataset,
    config: &ExperimentConfig,
) -> Result<TargetReport> {
    let mut seeds = Vec::with_capacity(config.n_seeds);
    for seed_idx in 0..config.n_seeds {
        let fold_seed = mix(
            config.train.seed,
            ((target.domain_id as u64) << 32) | seed_idx as u64,
        );
        let run = match run_seed(variant, sources, target, config, fold_seed) {
            Ok((history, eval)) => SeedRun {
                seed: fold_seed,
                accuracy: Some(eval.accuracy),
                error: None,
                history,
                eval: Some(eval),
            },
            Err(e) => SeedRun {
                seed: fold_seed,
                accuracy: None,
                error: Some(e.to_string()),
                history: Vec::new(),
                eval: None,
            },
        };
        seeds.push(run);
    }
    let ok: Vec<f64> = seeds.iter().filter_map(|s| s.accuracy).collect();
    let stats = mean_sd(&ok);
    Ok(TargetReport {
        target: target.name.clone(),
        mean_accuracy: stats.map(|(m, _)| m),
        sd_accuracy: stats.map(|(_, s)| s),
        seeds,
    })
}

/// Holds out each domain in turn, trains the configured variant on the rest
/// (70/30-splitting each source with the fold's seed), evaluates the full
/// target domain, and writes the report files into `config.out_dir`.
pub fn run_leave_one_out(config: &ExperimentConfig) -> Result<RunReport> {
    let started = Instant::now();
    config.validate()?;
    let datasets = load_domains(&config.data)?;
    if datasets.len() < 3 {
        return Err(Error::Config(format!(
            "leave-one-domain-out needs at least 3 domains, got {}",
            datasets.len()
        )));
    }

    let priors: Vec<LabelDistribution> = datasets
        .iter()
        .map(|ds| ds.label_prior())
        .collect::<Result<_>>()?;
    let mut prior_shift = Vec::new();
    for i in 0..datasets.len() {
        for j in 0..datasets.len() {
            if i != j {
                prior_shift.push(PriorPairKl {
                    from: datasets[i].name.clone(),
                    to: datasets[j].name.clone(),
                    kl: kl_divergence(&priors[i], &priors[j])?,
                });
            }
        }
    }

    let mut targets = Vec::with_capacity(datasets.len());
    for t in 0..datasets.len() {
        let sources: Vec<DomainDataset> = datasets
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != t)
            .map(|(_, ds)| ds.clone())
            .collect();
        targets.push(run_variant(config.variant, &sources, &datasets[t], config)?);
    }

    let report = RunReport {
        variant: config.variant,
        config: config.clone(),
        targets,
        prior_shift,
        active_networks: config.variant.active_networks(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    emit_report(&report, &config.out_dir)?;
    Ok(report)
}
