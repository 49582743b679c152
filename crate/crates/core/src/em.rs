//! The LCPO training loop: E-step confidences, weighted policy update and
//! annotator reliability updates.
//!
//! For a pair `i` labelled by annotator `k`, with model preference
//! probability `p_i = p(w >* l | theta)`:
//!
//! ```text
//! E-step   w_i   = p_i eta_k / (p_i eta_k + (1 - p_i)(1 - eta_k))
//! M-step   L(θ)  = -sum_i [ w_i log p_i + (1 - w_i) log(1 - p_i) ]
//! closed   eta_k = mean of w_i over the labels of k
//! EMA      eta_k = (1 - alpha) eta_k + alpha * mean of w_i over k's labels in the batch
//! ```
//!
//! Weights are computed with the parameters from before the batch update and
//! are then held constant; no gradient flows through them.

use std::borrow::Borrow;
use std::fmt::Write as _;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{
    log_pref_probabilities, loss_forward, loss_gradient, pref_logit, pref_logit_gradient, pref_probability, LossError,
    LossSpec,
};
use crate::numeric::{clamp_prob, sigmoid, PROB_EPS};
use crate::score_model::{add_scaled_gradient, score_pair, ModelError, OptimizerConfig, Optimizer, PolicyParams};
use crate::synth::PreferencePair;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("annotator id {id} is out of range for {k} annotators")]
    UnknownAnnotator { id: usize, k: usize },
    #[error("annotator {0} has no labels")]
    NoLabels(usize),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid EM config: {0}")]
    InvalidConfig(String),
    #[error("{weights} weights for {pairs} pairs")]
    Misaligned { weights: usize, pairs: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
}

/// Per-annotator reliabilities `eta_k` and label counts `N_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorTable {
    eta: Vec<f64>,
    counts: Vec<usize>,
}

impl AnnotatorTable {
    pub fn new(k: usize, eta_init: f64) -> Result<Self, EmError> {
        if k == 0 {
            return Err(EmError::InvalidConfig("need at least one annotator".into()));
        }
        Ok(Self { eta: vec![clamp_prob(eta_init); k], counts: vec![0; k] })
    }

    pub fn from_etas(etas: &[f64]) -> Result<Self, EmError> {
        if etas.is_empty() {
            return Err(EmError::InvalidConfig("need at least one annotator".into()));
        }
        Ok(Self { eta: etas.iter().map(|e| clamp_prob(*e)).collect(), counts: vec![0; etas.len()] })
    }

    /// Table sized for `dataset` with `N_k` filled in.
    pub fn for_dataset<P: Borrow<PreferencePair>>(pairs: &[P], eta_init: f64) -> Result<Self, EmError> {
        let k = pairs.iter().map(|p| p.borrow().annotator_id).max().ok_or(EmError::EmptyDataset)? + 1;
        let mut table = Self::new(k, eta_init)?;
        for p in pairs {
            table.counts[p.borrow().annotator_id] += 1;
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn eta(&self, k: usize) -> Result<f64, EmError> {
        self.eta.get(k).copied().ok_or(EmError::UnknownAnnotator { id: k, k: self.len() })
    }

    pub fn etas(&self) -> &[f64] {
        &self.eta
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    /// Set `eta_k`, clamped to `[eps, 1 - eps]`.
    pub fn set(&mut self, k: usize, value: f64) -> Result<(), EmError> {
        let n = self.len();
        let slot = self.eta.get_mut(k).ok_or(EmError::UnknownAnnotator { id: k, k: n })?;
        *slot = clamp_prob(value);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateMode {
    /// Soft update of each annotator present in a batch, after the batch.
    EmaPerBatch,
    /// Average of all E-step weights of the epoch, applied after the epoch.
    ClosedFormPerEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub eta_init: f64,
    pub alpha: f64,
    pub update_mode: UpdateMode,
    /// Skip the E-step and train with `w_i = 1`; reliabilities stay at `1 - eps`.
    pub unit_weights: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { eta_init: 0.9, alpha: 0.1, update_mode: UpdateMode::EmaPerBatch, unit_weights: false }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), EmError> {
        if !(0.5..=1.0).contains(&self.eta_init) {
            return Err(EmError::InvalidConfig(format!("eta_init must lie in [0.5, 1], got {}", self.eta_init)));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(EmError::InvalidConfig(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// E-step confidences for one batch, aligned with the batch's pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    pub ids: Vec<u64>,
    pub annotators: Vec<usize>,
    pub w: Vec<f64>,
}

impl BatchWeights {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }

    /// `w_i = 1` for every pair.
    pub fn unit<P: Borrow<PreferencePair>>(pairs: &[P]) -> Self {
        Self {
            ids: pairs.iter().map(|p| p.borrow().id).collect(),
            annotators: pairs.iter().map(|p| p.borrow().annotator_id).collect(),
            w: vec![1.0; pairs.len()],
        }
    }

    /// Weights of annotator `k` in this batch.
    pub fn for_annotator(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.annotators.iter().zip(&self.w).filter(move |(a, _)| **a == k).map(|(_, w)| *w)
    }
}

/// Posterior probability that a label is correct.
pub fn e_step_weight(p_star: f64, eta: f64) -> f64 {
    let p = clamp_prob(p_star);
    let eta = clamp_prob(eta);
    let agree = p * eta;
    agree / (agree + (1.0 - p) * (1.0 - eta))
}

pub fn batch_e_step<P: Borrow<PreferencePair>>(
    params: &PolicyParams,
    pairs: &[P],
    spec: &LossSpec,
    table: &AnnotatorTable,
) -> Result<BatchWeights, EmError> {
    let mut out = BatchWeights {
        ids: Vec::with_capacity(pairs.len()),
        annotators: Vec::with_capacity(pairs.len()),
        w: Vec::with_capacity(pairs.len()),
    };
    for pair in pairs {
        let pair = pair.borrow();
        let eta = table.eta(pair.annotator_id)?;
        let p = pref_probability(spec, &score_pair(params, &pair.features)?)?;
        out.ids.push(pair.id);
        out.annotators.push(pair.annotator_id);
        out.w.push(e_step_weight(p, eta));
    }
    Ok(out)
}

/// Weighted LCPO loss (a sum over the batch) and its gradient over `theta`.
pub fn lcpo_loss<P: Borrow<PreferencePair>>(
    weights: &BatchWeights,
    params: &PolicyParams,
    pairs: &[P],
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>), EmError> {
    if weights.len() != pairs.len() {
        return Err(EmError::Misaligned { weights: weights.len(), pairs: pairs.len() });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.dim()];
    for (pair, &w) in pairs.iter().zip(&weights.w) {
        let f = &pair.borrow().features;
        let s = score_pair(params, f)?;
        let logit = pref_logit(spec, &s)?;
        let (log_fwd, log_rev) = log_pref_probabilities(spec, &s)?;
        loss -= w * log_fwd + (1.0 - w) * log_rev;
        // d/dlogit of -[w log sigmoid(D) + (1-w) log sigmoid(-D)] = sigmoid(D) - w
        add_scaled_gradient(&mut grad, f, pref_logit_gradient(spec, &s), sigmoid(logit) - w);
    }
    Ok((loss, grad))
}

/// `sum_i w_i log eta_k + (1 - w_i) log(1 - eta_k)`: the part of the EM
/// Q-function that depends only on reliabilities.
pub fn q_eta_part(weights: &BatchWeights, table: &AnnotatorTable) -> Result<f64, EmError> {
    let mut q = 0.0;
    for (&k, &w) in weights.annotators.iter().zip(&weights.w) {
        let eta = table.eta(k)?;
        q += w * eta.ln() + (1.0 - w) * (1.0 - eta).ln();
    }
    Ok(q)
}

/// The full Q-function `sum_i w_i log(p_i eta) + (1 - w_i) log((1 - p_i)(1 - eta))`,
/// evaluated directly from the preference probabilities.
pub fn q_function<P: Borrow<PreferencePair>>(
    weights: &BatchWeights,
    params: &PolicyParams,
    pairs: &[P],
    spec: &LossSpec,
    table: &AnnotatorTable,
) -> Result<f64, EmError> {
    if weights.len() != pairs.len() {
        return Err(EmError::Misaligned { weights: weights.len(), pairs: pairs.len() });
    }
    let mut q = 0.0;
    for (pair, &w) in pairs.iter().zip(&weights.w) {
        let pair = pair.borrow();
        let eta = table.eta(pair.annotator_id)?;
        let p = pref_probability(spec, &score_pair(params, &pair.features)?)?;
        q += w * (p * eta).ln() + (1.0 - w) * ((1.0 - p) * (1.0 - eta)).ln();
    }
    Ok(q)
}

/// Closed-form reliability: the average confidence of an annotator's labels.
pub fn eta_closed_form(weights: &[f64]) -> Result<f64, EmError> {
    if weights.is_empty() {
        return Err(EmError::NoLabels(0));
    }
    Ok(clamp_prob(weights.iter().sum::<f64>() / weights.len() as f64))
}

/// EMA update of `eta_k` from the weights of `k`'s labels in the batch.
/// Leaves the table untouched when `k` is absent from the batch.
pub fn eta_ema_update(
    table: &mut AnnotatorTable,
    k: usize,
    batch: &BatchWeights,
    alpha: f64,
) -> Result<(), EmError> {
    let (sum, n) = batch.for_annotator(k).fold((0.0, 0usize), |(s, n), w| (s + w, n + 1));
    if n == 0 {
        return Ok(());
    }
    let old = table.eta(k)?;
    table.set(k, (1.0 - alpha) * old + alpha * sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Batches processed so far, across epochs.
    pub batch: usize,
    /// Weighted loss per pair, each batch evaluated before its update.
    pub mean_loss: f64,
    pub mean_w: f64,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub table: AnnotatorTable,
    pub metrics: Vec<EpochMetrics>,
}

/// Run LCPO: for each epoch and batch, E-step, policy step,
/// then reliability update.
pub fn run_lcpo(
    dataset: &[PreferencePair],
    params: PolicyParams,
    spec: &LossSpec,
    em: &EmConfig,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome, EmError> {
    train(dataset, params, spec, em, opt, Mode::Lcpo)
}

/// Plain training on the loss itself, `mean_i L(theta; x_i, y_w, y_l)`, with
/// the same shuffling and batching as [`run_lcpo`]. This is the baseline LCPO
/// wraps. For DPO it coincides with `unit_weights`; for the other kinds the
/// unit-weight LCPO objective `-log sigma(D)` is a different function.
pub fn run_vanilla(
    dataset: &[PreferencePair],
    params: PolicyParams,
    spec: &LossSpec,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome, EmError> {
    let em = EmConfig { unit_weights: true, ..EmConfig::default() };
    train(dataset, params, spec, &em, opt, Mode::Vanilla)
}

/// Same loop with the policy held fixed: only confidences and reliabilities
/// move. With a calibrated policy this is the full-batch EM of the theory.
pub fn estimate_reliability_frozen(
    dataset: &[PreferencePair],
    params: PolicyParams,
    spec: &LossSpec,
    em: &EmConfig,
    opt: &OptimizerConfig,
) -> Result<TrainOutcome, EmError> {
    train(dataset, params, spec, em, opt, Mode::Frozen)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Lcpo,
    Frozen,
    Vanilla,
}

fn vanilla_loss(batch: &[&PreferencePair], params: &PolicyParams, spec: &LossSpec) -> Result<(f64, Vec<f64>), EmError> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; params.dim()];
    for pair in batch {
        let s = score_pair(params, &pair.features)?;
        loss += loss_forward(spec, &s)?;
        add_scaled_gradient(&mut grad, &pair.features, loss_gradient(spec, &s), 1.0);
    }
    Ok((loss, grad))
}

/// Overflow inside a batch is reported with its position in the run.
fn locate(e: EmError, epoch: usize, batch: usize) -> EmError {
    match e {
        EmError::Loss(LossError::NumericOverflow { .. }) => EmError::NonFiniteLoss { epoch, batch },
        // parameters that blew up produce infinite scores before the loss sees them
        EmError::Loss(LossError::InvalidScores(ref m)) if m.contains("finite") => EmError::NonFiniteLoss { epoch, batch },
        other => other,
    }
}

fn train(
    dataset: &[PreferencePair],
    mut params: PolicyParams,
    spec: &LossSpec,
    em: &EmConfig,
    opt: &OptimizerConfig,
    mode: Mode,
) -> Result<TrainOutcome, EmError> {
    em.validate()?;
    opt.validate()?;
    let init = if em.unit_weights { 1.0 } else { em.eta_init };
    let mut table = AnnotatorTable::for_dataset(dataset, init)?;
    if let Some(f) = dataset.iter().find(|p| p.features.dim() != params.dim()) {
        return Err(ModelError::DimensionMismatch { expected: params.dim(), actual: f.features.dim() }.into());
    }

    let k = table.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut optimizer = Optimizer::new(opt.clone(), params.dim(), opt.epochs * dataset.len().div_ceil(opt.batch_size));
    let mut metrics = Vec::with_capacity(opt.epochs);
    let mut global_batch = 0;

    for epoch in 1..=opt.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut w_sum = 0.0;
        // E-step weights of the epoch by dataset index, so the closed-form
        // average is summed in dataset order regardless of shuffling.
        let mut epoch_w = vec![0.0; dataset.len()];

        for (b, chunk) in order.chunks(opt.batch_size).enumerate() {
            global_batch += 1;
            let batch: Vec<&PreferencePair> = chunk.iter().map(|&i| &dataset[i]).collect();
            let weights = if em.unit_weights {
                BatchWeights::unit(&batch)
            } else {
                batch_e_step(&params, &batch, spec, &table).map_err(|e| locate(e, epoch, b + 1))?
            };
            let (loss, mut grad) = if mode == Mode::Vanilla {
                vanilla_loss(&batch, &params, spec).map_err(|e| locate(e, epoch, b + 1))?
            } else {
                lcpo_loss(&weights, &params, &batch, spec).map_err(|e| locate(e, epoch, b + 1))?
            };
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(EmError::NonFiniteLoss { epoch, batch: b + 1 });
            }
            loss_sum += loss;
            w_sum += weights.w.iter().sum::<f64>();

            if mode != Mode::Frozen {
                let scale = 1.0 / batch.len() as f64;
                grad.iter_mut().for_each(|g| *g *= scale);
                optimizer.step(&mut params, &grad);
            }

            if em.unit_weights {
                continue;
            }
            match em.update_mode {
                UpdateMode::EmaPerBatch => {
                    let mut present: Vec<usize> = weights.annotators.clone();
                    present.sort_unstable();
                    present.dedup();
                    for a in present {
                        eta_ema_update(&mut table, a, &weights, em.alpha)?;
                    }
                }
                UpdateMode::ClosedFormPerEpoch => {
                    for (&i, &w) in chunk.iter().zip(&weights.w) {
                        epoch_w[i] = w;
                    }
                }
            }
        }

        if !em.unit_weights && em.update_mode == UpdateMode::ClosedFormPerEpoch {
            let mut sums = vec![(0.0, 0usize); k];
            for (pair, &w) in dataset.iter().zip(&epoch_w) {
                let slot = &mut sums[pair.annotator_id];
                slot.0 += w;
                slot.1 += 1;
            }
            for (a, &(sum, n)) in sums.iter().enumerate() {
                if n > 0 {
                    table.set(a, sum / n as f64)?;
                }
            }
        }

        let n = dataset.len() as f64;
        metrics.push(EpochMetrics {
            epoch,
            batch: global_batch,
            mean_loss: loss_sum / n,
            mean_w: w_sum / n,
            eta: table.etas().to_vec(),
        });
    }

    Ok(TrainOutcome { params, table, metrics })
}

/// Largest reliability a table can hold.
pub const ETA_MAX: f64 = 1.0 - PROB_EPS;

/// Metrics as CSV: `epoch,batch,mean_loss,mean_w,eta_1..eta_K`.
pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let k = metrics.first().map_or(0, |m| m.eta.len());
    let mut out = String::from("epoch,batch,mean_loss,mean_w");
    for i in 1..=k {
        let _ = write!(out, ",eta_{i}");
    }
    out.push('\n');
    for m in metrics {
        let _ = write!(out, "{},{},{},{}", m.epoch, m.batch, m.mean_loss, m.mean_w);
        for e in &m.eta {
            let _ = write!(out, ",{e}");
        }
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv<W: Write>(metrics: &[EpochMetrics], mut out: W) -> std::io::Result<()> {
    out.write_all(metrics_csv(metrics).as_bytes())
}
