//! Full-batch reliability EM under a perfectly calibrated policy.
//!
//! With calibrated preference probabilities `p_i` for the labels of one
//! annotator, the EM update on `eta` is the averaging operator
//!
//! ```text
//! T(eta) = (1/N) sum_i p_i eta / d_i(eta),   d_i(eta) = p_i eta + (1 - p_i)(1 - eta)
//! ```
//!
//! and the observed-data log-likelihood is `l(eta) = sum_i log d_i(eta)`.
//! The two are tied by `l'(eta) = N / (eta (1 - eta)) * (T(eta) - eta)`, so
//! fixed points of `T` are exactly the stationary points of `l`. When some
//! `p_i != 1/2`, `l` is strictly concave and the fixed point is unique; when
//! every `p_i = 1/2`, `T` is the identity and `eta` is unidentifiable.

use std::borrow::Borrow;
use std::fmt::Write as _;

use crate::numeric::PROB_EPS;
use crate::synth::PreferencePair;

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TheoryError {
    #[error("calibrated batch is empty")]
    Empty,
    #[error("probability {value} at index {index} lies outside [eps, 1 - eps]")]
    OutOfRange { index: usize, value: f64 },
    #[error("pair {0} carries no ground truth")]
    MissingTruth(u64),
}

/// Calibrated probabilities `p_i = p(y_w,i >* y_l,i | x_i)` for the labels
/// of one annotator, oriented as annotated.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedBatch {
    p_star: Vec<f64>,
}

impl CalibratedBatch {
    pub fn new(p_star: Vec<f64>) -> Result<Self, TheoryError> {
        if p_star.is_empty() {
            return Err(TheoryError::Empty);
        }
        if let Some((index, &value)) = p_star
            .iter()
            .enumerate()
            .find(|(_, p)| !(**p >= PROB_EPS && **p <= 1.0 - PROB_EPS))
        {
            return Err(TheoryError::OutOfRange { index, value });
        }
        Ok(Self { p_star })
    }

    /// Clamp into `[eps, 1 - eps]` instead of rejecting.
    pub fn clamped(p_star: Vec<f64>) -> Result<Self, TheoryError> {
        Self::new(p_star.into_iter().map(crate::numeric::clamp_prob).collect())
    }

    /// Generative `p*` of each pair, in dataset order.
    pub fn from_pairs<P: Borrow<PreferencePair>>(pairs: &[P]) -> Result<Self, TheoryError> {
        let p = pairs
            .iter()
            .map(|p| {
                let p = p.borrow();
                p.truth.map(|t| t.oriented_p_star()).ok_or(TheoryError::MissingTruth(p.id))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::clamped(p)
    }

    pub fn p_star(&self) -> &[f64] {
        &self.p_star
    }

    pub fn len(&self) -> usize {
        self.p_star.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p_star.is_empty()
    }

    /// Every `p_i` is exactly one half: the likelihood is flat in `eta`.
    pub fn is_degenerate(&self) -> bool {
        self.p_star.iter().all(|&p| p == 0.5)
    }
}

pub fn operator_t(batch: &CalibratedBatch, eta: f64) -> f64 {
    let sum: f64 = batch
        .p_star
        .iter()
        .map(|&p| {
            let agree = p * eta;
            agree / (agree + (1.0 - p) * (1.0 - eta))
        })
        .sum();
    sum / batch.len() as f64
}

pub fn loglik_eta(batch: &CalibratedBatch, eta: f64) -> f64 {
    batch.p_star.iter().map(|&p| (p * eta + (1.0 - p) * (1.0 - eta)).ln()).sum()
}

/// `l'(eta) = sum_i (2 p_i - 1) / d_i(eta)`.
pub fn loglik_derivative(batch: &CalibratedBatch, eta: f64) -> f64 {
    batch
        .p_star
        .iter()
        .map(|&p| (2.0 * p - 1.0) / ((1.0 - p) + (2.0 * p - 1.0) * eta))
        .sum()
}

/// `l''(eta) = -sum_i (2 p_i - 1)^2 / d_i(eta)^2`.
pub fn loglik_second_derivative(batch: &CalibratedBatch, eta: f64) -> f64 {
    -batch
        .p_star
        .iter()
        .map(|&p| {
            let d = (1.0 - p) + (2.0 * p - 1.0) * eta;
            (2.0 * p - 1.0).powi(2) / (d * d)
        })
        .sum::<f64>()
}

/// `|l'(eta) - N / (eta (1 - eta)) (T(eta) - eta)|`.
pub fn derivative_identity_residual(batch: &CalibratedBatch, eta: f64) -> f64 {
    let lhs = loglik_derivative(batch, eta);
    let rhs = batch.len() as f64 / (eta * (1.0 - eta)) * (operator_t(batch, eta) - eta);
    (lhs - rhs).abs()
}

/// `|T(eta*) - eta*|` on an empirical batch drawn with true reliability `eta*`.
pub fn fixed_point_residual_at_truth(batch: &CalibratedBatch, eta_star: f64) -> f64 {
    (operator_t(batch, eta_star) - eta_star).abs()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub eta_hat: f64,
    pub iterations: usize,
    /// `eta_0, eta_1, ..., eta_hat`.
    pub trajectory: Vec<f64>,
    pub converged: bool,
    /// All `p_i = 1/2`; `eta_hat` is just `eta_0`.
    pub degenerate: bool,
}

/// Iterate `eta <- T(eta)` until successive iterates differ by less than `tol`.
pub fn iterate_to_fixed_point(batch: &CalibratedBatch, eta0: f64, tol: f64, max_iters: usize) -> FixedPoint {
    if batch.is_degenerate() {
        return FixedPoint { eta_hat: eta0, iterations: 0, trajectory: vec![eta0], converged: true, degenerate: true };
    }
    let mut trajectory = vec![eta0];
    let mut eta = eta0;
    let mut converged = false;
    for _ in 0..max_iters {
        let next = operator_t(batch, eta);
        trajectory.push(next);
        let step = (next - eta).abs();
        eta = next;
        if step < tol {
            converged = true;
            break;
        }
    }
    FixedPoint { eta_hat: eta, iterations: trajectory.len() - 1, trajectory, converged, degenerate: false }
}

/// Number of steps along a trajectory where the log-likelihood went down by
/// more than `slack`.
pub fn ascent_violations(batch: &CalibratedBatch, trajectory: &[f64], slack: f64) -> usize {
    let ll: Vec<f64> = trajectory.iter().map(|&e| loglik_eta(batch, e)).collect();
    ll.windows(2).filter(|w| w[1] < w[0] - slack).count()
}

/// Sign changes of `T(eta) - eta` on the interior grid `j / (n + 1)`, `j = 1..=n`.
/// Grid points where the difference is exactly zero are skipped.
pub fn fixed_point_sign_changes(batch: &CalibratedBatch, n: usize) -> usize {
    let mut changes = 0;
    let mut last_sign = 0i8;
    for j in 1..=n {
        let eta = j as f64 / (n + 1) as f64;
        let diff = operator_t(batch, eta) - eta;
        let sign = if diff > 0.0 { 1 } else if diff < 0.0 { -1 } else { 0 };
        if sign != 0 {
            if last_sign != 0 && sign != last_sign {
                changes += 1;
            }
            last_sign = sign;
        }
    }
    changes
}

/// Geometric-mean contraction ratio `|e_{t+1} - e_t| / |e_t - e_{t-1}|` over
/// the steps whose size is still above `floor`. `None` if fewer than two
/// such steps.
pub fn empirical_rate(trajectory: &[f64], floor: f64) -> Option<f64> {
    let steps: Vec<f64> = trajectory.windows(2).map(|w| (w[1] - w[0]).abs()).take_while(|s| *s > floor).collect();
    if steps.len() < 2 {
        return None;
    }
    let log_sum: f64 = steps.windows(2).map(|w| (w[1] / w[0]).ln()).sum();
    Some((log_sum / (steps.len() - 1) as f64).exp())
}

/// Trajectory dump: `t,eta_t,loglik_t,residual_t` with `residual_t = |T(eta_t) - eta_t|`.
pub fn trajectory_csv(batch: &CalibratedBatch, trajectory: &[f64]) -> String {
    let mut out = String::from("t,eta_t,loglik_t,residual_t\n");
    for (t, &eta) in trajectory.iter().enumerate() {
        let _ = writeln!(
            out,
            "{t},{eta},{},{}",
            loglik_eta(batch, eta),
            (operator_t(batch, eta) - eta).abs()
        );
    }
    out
}
