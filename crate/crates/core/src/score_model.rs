//! Linear score model standing in for the policy.
//!
//! `log pi(y|x) = theta . phi(x, y)` and `log pi_ref(y|x) = theta_ref . phi(x, y)`.
//! The reference parameters are frozen at construction.

use serde::{Deserialize, Serialize};

use crate::losses::{LossSpec, ScorePair};
use crate::numeric::dot;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
    #[error("lengths must be at least 1")]
    ZeroLength,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub theta: Vec<f64>,
    theta_ref: Vec<f64>,
}

impl PolicyParams {
    pub fn new(theta: Vec<f64>, theta_ref: Vec<f64>) -> Result<Self, ModelError> {
        if theta.len() != theta_ref.len() {
            return Err(ModelError::DimensionMismatch {
                expected: theta_ref.len(),
                actual: theta.len(),
            });
        }
        if theta.iter().chain(&theta_ref).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("parameters"));
        }
        Ok(Self { theta, theta_ref })
    }

    /// `theta = theta_ref = 0`.
    pub fn zeros(dim: usize) -> Self {
        Self { theta: vec![0.0; dim], theta_ref: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.theta_ref.len()
    }

    pub fn theta_ref(&self) -> &[f64] {
        &self.theta_ref
    }
}

/// Feature vectors of the annotated winner and loser, plus their lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Features {
    pub phi_w: Vec<f64>,
    pub phi_l: Vec<f64>,
    pub len_w: u32,
    pub len_l: u32,
}

impl Features {
    pub fn new(phi_w: Vec<f64>, phi_l: Vec<f64>, len_w: u32, len_l: u32) -> Result<Self, ModelError> {
        if phi_w.len() != phi_l.len() {
            return Err(ModelError::DimensionMismatch { expected: phi_w.len(), actual: phi_l.len() });
        }
        if phi_w.iter().chain(&phi_l).any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("features"));
        }
        if len_w == 0 || len_l == 0 {
            return Err(ModelError::ZeroLength);
        }
        Ok(Self { phi_w, phi_l, len_w, len_l })
    }

    pub fn dim(&self) -> usize {
        self.phi_w.len()
    }

    pub fn swapped(&self) -> Self {
        Self {
            phi_w: self.phi_l.clone(),
            phi_l: self.phi_w.clone(),
            len_w: self.len_l,
            len_l: self.len_w,
        }
    }

    /// `phi_w - phi_l`.
    pub fn difference(&self) -> Vec<f64> {
        self.phi_w.iter().zip(&self.phi_l).map(|(a, b)| a - b).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from `learning_rate` to 0 over all steps of the run.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 gives plain gradient descent.
    pub momentum: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 50,
            batch_size: 64,
            seed: 0,
            momentum: 0.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ModelError::InvalidConfig("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

pub fn score_pair(params: &PolicyParams, f: &Features) -> Result<ScorePair, ModelError> {
    if f.dim() != params.dim() {
        return Err(ModelError::DimensionMismatch { expected: params.dim(), actual: f.dim() });
    }
    Ok(ScorePair {
        logp_w: dot(&params.theta, &f.phi_w),
        logp_l: dot(&params.theta, &f.phi_l),
        ref_logp_w: dot(&params.theta_ref, &f.phi_w),
        ref_logp_l: dot(&params.theta_ref, &f.phi_l),
        len_w: f.len_w,
        len_l: f.len_l,
    })
}

/// Chain rule through `theta . phi`: `dL/dlw * phi_w + dL/dll * phi_l`.
///
/// `_spec` is unused by the linear model; it stays in the signature so a
/// model whose features depend on the loss kind can slot in.
pub fn accumulate_gradient(
    _params: &PolicyParams,
    f: &Features,
    _spec: &LossSpec,
    dl_dscores: (f64, f64),
) -> Vec<f64> {
    let mut grad = vec![0.0; f.dim()];
    add_scaled_gradient(&mut grad, f, dl_dscores, 1.0);
    grad
}

/// In-place variant used by batch reductions: `grad += scale * (...)`.
pub fn add_scaled_gradient(grad: &mut [f64], f: &Features, (dw, dl): (f64, f64), scale: f64) {
    for ((g, pw), pl) in grad.iter_mut().zip(&f.phi_w).zip(&f.phi_l) {
        *g += scale * (dw * pw + dl * pl);
    }
}

/// `theta <- theta - learning_rate * grad`.
pub fn sgd_step(params: &mut PolicyParams, grad: &[f64], config: &OptimizerConfig) {
    debug_assert_eq!(grad.len(), params.theta.len());
    for (t, g) in params.theta.iter_mut().zip(grad) {
        *t -= config.learning_rate * g;
    }
}

/// Gradient descent with optional heavy-ball momentum and learning-rate
/// schedule. With momentum 0 and a constant schedule a step is exactly
/// [`sgd_step`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    velocity: Vec<f64>,
    step: usize,
    total_steps: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, dim: usize, total_steps: usize) -> Self {
        Self { config, velocity: vec![0.0; dim], step: 0, total_steps: total_steps.max(1) }
    }

    pub fn current_learning_rate(&self) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.learning_rate,
            LrSchedule::Cosine => {
                let progress = self.step as f64 / self.total_steps as f64;
                0.5 * self.config.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64]) {
        let config = OptimizerConfig { learning_rate: self.current_learning_rate(), ..self.config.clone() };
        self.step += 1;
        if config.momentum == 0.0 {
            sgd_step(params, grad, &config);
            return;
        }
        let mu = config.momentum;
        for (v, g) in self.velocity.iter_mut().zip(grad) {
            *v = mu * *v + g;
        }
        sgd_step(params, &self.velocity, &config);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_forward, loss_gradient, LossKind};

    #[test]
    fn zero_theta_scores_zero() {
        let p = PolicyParams::zeros(2);
        let f = Features::new(vec![2.0, 5.0], vec![-1.0, 9.0], 3, 4).unwrap();
        let s = score_pair(&p, &f).unwrap();
        assert_eq!((s.logp_w, s.logp_l), (0.0, 0.0));
        assert_eq!((s.len_w, s.len_l), (3, 4));
    }

    #[test]
    fn dot_product_scores() {
        let p = PolicyParams::new(vec![1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let f = Features::new(vec![2.0, 5.0], vec![-1.0, 9.0], 1, 1).unwrap();
        let s = score_pair(&p, &f).unwrap();
        assert_eq!((s.logp_w, s.logp_l), (2.0, -1.0));
    }

    #[test]
    fn policy_equal_to_reference_gives_half() {
        let p = PolicyParams::new(vec![0.4, -1.2], vec![0.4, -1.2]).unwrap();
        let f = Features::new(vec![2.0, 5.0], vec![-1.0, 9.0], 1, 1).unwrap();
        let s = score_pair(&p, &f).unwrap();
        let spec = LossSpec::dpo(1.0).unwrap();
        assert_eq!(crate::losses::pref_probability(&spec, &s).unwrap(), 0.5);
    }

    #[test]
    fn dimension_mismatch() {
        let p = PolicyParams::zeros(3);
        let f = Features::new(vec![1.0, 2.0], vec![0.0, 0.0], 1, 1).unwrap();
        assert!(matches!(score_pair(&p, &f), Err(ModelError::DimensionMismatch { .. })));
        assert!(PolicyParams::new(vec![0.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn accumulate_examples() {
        let p = PolicyParams::zeros(2);
        let spec = LossSpec::dpo(1.0).unwrap();
        let f = Features::new(vec![1.0, 0.0], vec![0.0, 1.0], 1, 1).unwrap();
        assert_eq!(accumulate_gradient(&p, &f, &spec, (0.0, 0.0)), vec![0.0, 0.0]);
        assert_eq!(accumulate_gradient(&p, &f, &spec, (-0.5, 0.5)), vec![-0.5, 0.5]);
    }

    #[test]
    fn accumulate_matches_finite_difference() {
        let spec = LossSpec::new(LossKind::SimPo, 0.8, 0.2).unwrap();
        let p = PolicyParams::new(vec![0.3, -0.7, 1.1], vec![0.1, 0.2, -0.3]).unwrap();
        let f = Features::new(vec![0.5, 1.5, -2.0], vec![-1.0, 0.25, 0.75], 3, 5).unwrap();
        let s = score_pair(&p, &f).unwrap();
        let grad = accumulate_gradient(&p, &f, &spec, loss_gradient(&spec, &s));
        let h = 1e-5;
        for j in 0..3 {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi.theta[j] += h;
            lo.theta[j] -= h;
            let fd = (loss_forward(&spec, &score_pair(&hi, &f).unwrap()).unwrap()
                - loss_forward(&spec, &score_pair(&lo, &f).unwrap()).unwrap())
                / (2.0 * h);
            assert!((fd - grad[j]).abs() <= 1e-5 * fd.abs().max(1e-8), "j={j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn sgd_arithmetic() {
        let cfg = OptimizerConfig { learning_rate: 0.1, ..Default::default() };
        let mut p = PolicyParams::new(vec![1.0, 1.0], vec![0.0, 0.0]).unwrap();
        sgd_step(&mut p, &[0.0, 0.0], &cfg);
        assert_eq!(p.theta, vec![1.0, 1.0]);
        sgd_step(&mut p, &[10.0, -10.0], &cfg);
        assert!((p.theta[0] - 0.0).abs() < 1e-15 && (p.theta[1] - 2.0).abs() < 1e-15);
        assert_eq!(p.theta_ref(), &[0.0, 0.0]);
    }

    #[test]
    fn gradient_descent_on_convex_dpo_objective_decreases_monotonically() {
        // Non-separable toy data: both orientations of the same direction are
        // present, so the logistic objective has a finite minimizer.
        let spec = LossSpec::dpo(1.0).unwrap();
        let data = vec![
            Features::new(vec![1.0, 0.5], vec![0.0, 0.0], 1, 1).unwrap(),
            Features::new(vec![0.0, 0.0], vec![1.0, 0.5], 1, 1).unwrap(),
            Features::new(vec![0.3, -1.0], vec![0.0, 0.2], 1, 1).unwrap(),
            Features::new(vec![2.0, 1.0], vec![0.5, 0.0], 1, 1).unwrap(),
            Features::new(vec![0.0, 1.0], vec![0.0, -0.5], 1, 1).unwrap(),
            Features::new(vec![0.0, -0.5], vec![0.0, 1.0], 1, 1).unwrap(),
        ];
        let objective = |p: &PolicyParams| -> (f64, Vec<f64>) {
            let mut grad = vec![0.0; 2];
            let mut total = 0.0;
            for f in &data {
                let s = score_pair(p, f).unwrap();
                total += loss_forward(&spec, &s).unwrap();
                add_scaled_gradient(&mut grad, f, loss_gradient(&spec, &s), 1.0);
            }
            (total, grad)
        };
        let cfg = OptimizerConfig { learning_rate: 0.1, ..Default::default() };
        let mut p = PolicyParams::zeros(2);
        let (mut prev, mut grad) = objective(&p);
        let mut steps = 0;
        while crate::numeric::norm(&grad) >= 1e-6 {
            sgd_step(&mut p, &grad, &cfg);
            let (next, g) = objective(&p);
            assert!(next < prev, "objective rose at step {steps}: {prev} -> {next}");
            prev = next;
            grad = g;
            steps += 1;
            assert!(steps < 200_000, "did not converge");
        }
    }

    #[test]
    fn momentum_zero_matches_plain_sgd() {
        let cfg = OptimizerConfig { learning_rate: 0.2, ..Default::default() };
        let mut opt = Optimizer::new(cfg.clone(), 2, 2);
        let mut a = PolicyParams::zeros(2);
        let mut b = PolicyParams::zeros(2);
        for g in [[1.0, -2.0], [0.5, 0.25]] {
            opt.step(&mut a, &g);
            sgd_step(&mut b, &g, &cfg);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn cosine_schedule_decays_to_zero() {
        let cfg = OptimizerConfig { learning_rate: 0.4, schedule: LrSchedule::Cosine, ..Default::default() };
        let mut opt = Optimizer::new(cfg, 1, 4);
        let mut p = PolicyParams::zeros(1);
        let mut rates = Vec::new();
        for _ in 0..4 {
            rates.push(opt.current_learning_rate());
            opt.step(&mut p, &[1.0]);
        }
        assert!((rates[0] - 0.4).abs() < 1e-15);
        assert!((rates[2] - 0.2).abs() < 1e-12);
        assert!(rates.windows(2).all(|w| w[1] < w[0]));
        assert!((p.theta[0] + rates.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn scaling_theta_scales_margins() {
        let f = Features::new(vec![0.3, 2.0], vec![-1.0, 0.5], 1, 1).unwrap();
        let p = PolicyParams::new(vec![0.7, -0.2], vec![0.0, 0.0]).unwrap();
        let p3 = PolicyParams::new(vec![2.1, -0.6], vec![0.0, 0.0]).unwrap();
        let m = score_pair(&p, &f).unwrap().ref_margin();
        let m3 = score_pair(&p3, &f).unwrap().ref_margin();
        assert!((m3 - 3.0 * m).abs() < 1e-12);
    }
}
