//! Reusable synthetic experiments.
//!
//! Each function is a full run, from data generation to a measured number,
//! shared by the test suites and the `lcpo verify` / `lcpo ablate` commands.
//! Data is drawn in calibrated mode (`p* = sigmoid(theta* . (phi_a - phi_b))`)
//! so that the linear score model can represent the truth exactly.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::em::{run_lcpo, run_vanilla, EmConfig, EmError, EpochMetrics};
use crate::losses::{LossKind, LossSpec};
use crate::numeric::dot;
use crate::score_model::{LrSchedule, OptimizerConfig, PolicyParams};
use crate::synth::{generate, inject_noise, merge_annotators, DataError, GeneratorSpec, PStarLaw, PreferencePair};
use crate::theory::{CalibratedBatch, TheoryError};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Em(#[from] EmError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error("invalid loss: {0}")]
    Loss(#[from] crate::losses::LossError),
}

/// `theta*` with entries `+-scale / sqrt(dim)`, alternating in sign, so that
/// `|theta*| = scale`.
pub fn alternating_theta(dim: usize, scale: f64) -> Vec<f64> {
    let m = scale / (dim as f64).sqrt();
    (0..dim).map(|j| if j % 2 == 0 { m } else { -m }).collect()
}

/// Generator spec in calibrated mode for the given annotators.
pub fn calibrated_spec(
    n_pairs: usize,
    eta_true: Vec<f64>,
    frequencies: Vec<f64>,
    feature_dim: usize,
    theta_scale: f64,
    seed: u64,
) -> GeneratorSpec {
    GeneratorSpec {
        n_pairs,
        k_annotators: eta_true.len(),
        eta_true,
        annotator_frequencies: frequencies,
        feature_dim,
        theta_star: Some(alternating_theta(feature_dim, theta_scale)),
        p_star_law: PStarLaw::FromThetaStar,
        seed,
        ..GeneratorSpec::default()
    }
}

/// Settings shared by the end-to-end training experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetup {
    pub n_pairs: usize,
    pub feature_dim: usize,
    pub theta_scale: f64,
    pub loss_beta: f64,
    pub em: EmConfig,
    pub opt: OptimizerConfig,
    pub seed: u64,
    /// Reported reliabilities average the epoch-end values of this many final
    /// epochs; the per-batch EMA alone carries visible batch noise.
    pub tail_epochs: usize,
}

impl Default for TrainingSetup {
    fn default() -> Self {
        Self {
            n_pairs: 10_000,
            feature_dim: 8,
            theta_scale: 6.0,
            loss_beta: 1.0,
            em: EmConfig::default(),
            opt: OptimizerConfig {
                learning_rate: 0.5,
                epochs: 100,
                batch_size: 64,
                seed: 1,
                momentum: 0.0,
                schedule: LrSchedule::Cosine,
            },
            seed: 7,
            tail_epochs: 10,
        }
    }
}

impl TrainingSetup {
    fn dpo(&self) -> Result<LossSpec, ExperimentError> {
        Ok(LossSpec::dpo(self.loss_beta)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecoveryPoint {
    pub eta_true: f64,
    pub eta_hat: f64,
    /// Table value after the last batch.
    pub eta_last: f64,
    pub elapsed: Duration,
    pub metrics: Vec<EpochMetrics>,
}

impl RecoveryPoint {
    pub fn abs_error(&self) -> f64 {
        (self.eta_hat - self.eta_true).abs()
    }
}

/// LCPO on a single annotator of reliability `eta_true`, starting from
/// `theta = 0`. Timing covers generation and training.
pub fn single_annotator_recovery(eta_true: f64, setup: &TrainingSetup) -> Result<RecoveryPoint, ExperimentError> {
    let start = Instant::now();
    let spec = calibrated_spec(setup.n_pairs, vec![eta_true], vec![1.0], setup.feature_dim, setup.theta_scale, setup.seed);
    let data = generate(&spec)?;
    let out = run_lcpo(&data, PolicyParams::zeros(setup.feature_dim), &setup.dpo()?, &setup.em, &setup.opt)?;
    Ok(RecoveryPoint {
        eta_true,
        eta_hat: tail_mean_eta(&out.metrics, 0, setup.tail_epochs),
        eta_last: out.table.etas()[0],
        elapsed: start.elapsed(),
        metrics: out.metrics,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoAnnotatorPoint {
    pub flip_fraction: f64,
    pub eta_true: [f64; 2],
    pub eta_hat: [f64; 2],
    pub metrics: Vec<EpochMetrics>,
}

/// Two copies of one base dataset of reliability `base_eta`: annotator 0
/// keeps it as is, annotator 1 gets `flip_fraction` extra noise.
pub fn two_annotator_recovery(
    base_eta: f64,
    flip_fraction: f64,
    setup: &TrainingSetup,
) -> Result<TwoAnnotatorPoint, ExperimentError> {
    let spec = calibrated_spec(setup.n_pairs, vec![base_eta], vec![1.0], setup.feature_dim, setup.theta_scale, setup.seed);
    let base = generate(&spec)?;
    let mut noisy = inject_noise(&base, flip_fraction, setup.seed ^ 0x9e37_79b9)?;
    let offset = base.len() as u64;
    for p in &mut noisy {
        p.id += offset;
        p.annotator_id = 1;
    }
    let mut data = base;
    data.extend(noisy);
    let out = run_lcpo(&data, PolicyParams::zeros(setup.feature_dim), &setup.dpo()?, &setup.em, &setup.opt)?;
    Ok(TwoAnnotatorPoint {
        flip_fraction,
        eta_true: [base_eta, crate::synth::effective_reliability(base_eta, flip_fraction)],
        eta_hat: [0, 1].map(|k| tail_mean_eta(&out.metrics, k, setup.tail_epochs)),
        metrics: out.metrics,
    })
}

/// Annotators of reliabilities `eta_a` and `eta_b` at equal frequency,
/// relabelled as one. Returns the single estimated reliability.
pub fn merged_annotator_recovery(eta_a: f64, eta_b: f64, setup: &TrainingSetup) -> Result<f64, ExperimentError> {
    let spec = calibrated_spec(
        setup.n_pairs,
        vec![eta_a, eta_b],
        vec![0.5, 0.5],
        setup.feature_dim,
        setup.theta_scale,
        setup.seed,
    );
    let data = merge_annotators(&generate(&spec)?, 0);
    let out = run_lcpo(&data, PolicyParams::zeros(setup.feature_dim), &setup.dpo()?, &setup.em, &setup.opt)?;
    Ok(tail_mean_eta(&out.metrics, 0, setup.tail_epochs))
}

/// Mean of annotator `k`'s epoch-end reliability over the last `window`
/// epochs (all of them if fewer). NaN if there are no metrics.
pub fn tail_mean_eta(metrics: &[EpochMetrics], k: usize, window: usize) -> f64 {
    let tail = &metrics[metrics.len().saturating_sub(window.max(1))..];
    tail.iter().map(|m| m.eta[k]).sum::<f64>() / tail.len() as f64
}

/// Fraction of pairs where `theta` ranks the truly preferred response higher.
/// Ties count as misses.
pub fn true_preference_accuracy(theta: &[f64], pairs: &[PreferencePair]) -> f64 {
    let hits = pairs
        .iter()
        .filter(|p| {
            let stored_correct = p.truth.map(|t| t.z).unwrap_or(true);
            let m = dot(theta, &p.features.difference());
            if stored_correct { m > 0.0 } else { m < 0.0 }
        })
        .count();
    hits as f64 / pairs.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoisingSetup {
    pub n_train: usize,
    pub n_test: usize,
    pub eta_true: f64,
    pub feature_dim: usize,
    pub theta_scale: f64,
    pub beta: f64,
    /// Margin for SimPO; the other kinds ignore it.
    pub simpo_gamma: f64,
    pub em: EmConfig,
    pub opt: OptimizerConfig,
}

impl Default for DenoisingSetup {
    fn default() -> Self {
        Self {
            n_train: 300,
            n_test: 5000,
            eta_true: 0.7,
            feature_dim: 8,
            theta_scale: 6.0,
            beta: 1.0,
            simpo_gamma: 0.5,
            em: EmConfig::default(),
            opt: OptimizerConfig {
                learning_rate: 0.5,
                epochs: 200,
                batch_size: 64,
                seed: 0,
                momentum: 0.0,
                schedule: LrSchedule::Cosine,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoisingResult {
    pub kind: LossKind,
    pub seeds: Vec<u64>,
    pub lcpo_accuracy: f64,
    pub vanilla_accuracy: f64,
}

impl DenoisingResult {
    pub fn gain(&self) -> f64 {
        self.lcpo_accuracy - self.vanilla_accuracy
    }
}

/// Held-out true-preference accuracy of LCPO against plain training on the
/// same loss, averaged over `seeds`. Both start from `theta = 0` and see the
/// same batches.
pub fn denoising_benefit(
    kind: LossKind,
    seeds: &[u64],
    setup: &DenoisingSetup,
) -> Result<DenoisingResult, ExperimentError> {
    let gamma = if kind == LossKind::SimPo { setup.simpo_gamma } else { 0.0 };
    let loss = LossSpec::new(kind, setup.beta, gamma)?;
    let (mut lcpo, mut vanilla) = (0.0, 0.0);
    for &seed in seeds {
        let spec = calibrated_spec(
            setup.n_train + setup.n_test,
            vec![setup.eta_true],
            vec![1.0],
            setup.feature_dim,
            setup.theta_scale,
            seed,
        );
        let all = generate(&spec)?;
        let (train, test) = all.split_at(setup.n_train);
        let opt = OptimizerConfig { seed, ..setup.opt.clone() };
        let init = PolicyParams::zeros(setup.feature_dim);
        let a = run_lcpo(train, init.clone(), &loss, &setup.em, &opt)?;
        let b = run_vanilla(train, init, &loss, &opt)?;
        lcpo += true_preference_accuracy(&a.params.theta, test);
        vanilla += true_preference_accuracy(&b.params.theta, test);
    }
    let n = seeds.len().max(1) as f64;
    Ok(DenoisingResult { kind, seeds: seeds.to_vec(), lcpo_accuracy: lcpo / n, vanilla_accuracy: vanilla / n })
}

/// First epoch at which `|eta_k - target| < threshold`.
pub fn epochs_to_threshold(metrics: &[EpochMetrics], annotator: usize, target: f64, threshold: f64) -> Option<usize> {
    metrics
        .iter()
        .find(|m| m.eta.get(annotator).is_some_and(|e| (e - target).abs() < threshold))
        .map(|m| m.epoch)
}

/// Generative `p*` of a calibrated single-annotator dataset, as a batch for
/// the full-batch theory.
pub fn calibrated_batch(
    n_pairs: usize,
    eta_true: f64,
    feature_dim: usize,
    theta_scale: f64,
    seed: u64,
) -> Result<CalibratedBatch, ExperimentError> {
    let spec = calibrated_spec(n_pairs, vec![eta_true], vec![1.0], feature_dim, theta_scale, seed);
    Ok(CalibratedBatch::from_pairs(&generate(&spec)?)?)
}
