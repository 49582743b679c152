//! Pairwise preference losses and the Gibbs loss-to-probability mapping.
//!
//! Four losses are supported, all written in terms of policy log-scores
//! `log pi(y|x)` and, where applicable, frozen reference log-scores:
//!
//! ```text
//! DPO   : -log sigmoid(beta * h)                 h = (lw - rw) - (ll - rl)
//! IPO   : (h - 1 / (2 beta))^2
//! SimPO : -log sigmoid(beta lw / |yw| - beta ll / |yl| - gamma)
//! CPO   : -log sigmoid(beta (lw - ll)) - log pi_pair(yw)
//! ```
//!
//! For CPO the policy is normalized over the two candidates of the pair, so
//! `log pi_pair(yw) = lw - logsumexp(lw, ll) = -softplus(ll - lw)`.
//!
//! Any loss is turned into a preference probability with
//! `p(w > l) = sigmoid(L(l > w) - L(w > l))`, where `L(l > w)` is the same
//! loss with every winner/loser field swapped.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::numeric::{log_sigmoid, sigmoid, softplus};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("numeric overflow in {term}")]
    NumericOverflow { term: &'static str },
    #[error("invalid score pair: {0}")]
    InvalidScores(String),
    #[error("invalid loss spec: {0}")]
    InvalidSpec(String),
    #[error("operation requires loss kind {expected}, got {actual}")]
    KindMismatch { expected: LossKind, actual: LossKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dpo,
    Ipo,
    SimPo,
    Cpo,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Dpo, LossKind::Ipo, LossKind::SimPo, LossKind::Cpo];

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dpo => "dpo",
            LossKind::Ipo => "ipo",
            LossKind::SimPo => "simpo",
            LossKind::Cpo => "cpo",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dpo" => Ok(LossKind::Dpo),
            "ipo" => Ok(LossKind::Ipo),
            "simpo" => Ok(LossKind::SimPo),
            "cpo" => Ok(LossKind::Cpo),
            other => Err(LossError::InvalidSpec(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Which loss to use, with its hyperparameters. `gamma` is only read by SimPO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    kind: LossKind,
    beta: f64,
    gamma: f64,
}

impl LossSpec {
    pub fn new(kind: LossKind, beta: f64, gamma: f64) -> Result<Self, LossError> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(LossError::InvalidSpec(format!("beta must be positive, got {beta}")));
        }
        if !gamma.is_finite() {
            return Err(LossError::InvalidSpec(format!("gamma must be finite, got {gamma}")));
        }
        Ok(Self { kind, beta, gamma })
    }

    pub fn dpo(beta: f64) -> Result<Self, LossError> {
        Self::new(LossKind::Dpo, beta, 0.0)
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Policy and reference log-scores of an annotated (winner, loser) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorePair {
    pub logp_w: f64,
    pub logp_l: f64,
    pub ref_logp_w: f64,
    pub ref_logp_l: f64,
    pub len_w: u32,
    pub len_l: u32,
}

impl ScorePair {
    pub fn new(
        logp_w: f64,
        logp_l: f64,
        ref_logp_w: f64,
        ref_logp_l: f64,
        len_w: u32,
        len_l: u32,
    ) -> Result<Self, LossError> {
        let s = Self { logp_w, logp_l, ref_logp_w, ref_logp_l, len_w, len_l };
        s.validate()?;
        Ok(s)
    }

    /// Scores with zero reference and unit lengths.
    pub fn reference_free(logp_w: f64, logp_l: f64) -> Self {
        Self { logp_w, logp_l, ref_logp_w: 0.0, ref_logp_l: 0.0, len_w: 1, len_l: 1 }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let scores = [self.logp_w, self.logp_l, self.ref_logp_w, self.ref_logp_l];
        if scores.iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidScores("scores must be finite".into()));
        }
        if self.len_w == 0 || self.len_l == 0 {
            return Err(LossError::InvalidScores("lengths must be at least 1".into()));
        }
        Ok(())
    }

    /// The same pair with winner and loser roles exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            logp_w: self.logp_l,
            logp_l: self.logp_w,
            ref_logp_w: self.ref_logp_l,
            ref_logp_l: self.ref_logp_w,
            len_w: self.len_l,
            len_l: self.len_w,
        }
    }

    /// Reference-adjusted margin `(lw - rw) - (ll - rl)`.
    pub fn ref_margin(&self) -> f64 {
        (self.logp_w - self.ref_logp_w) - (self.logp_l - self.ref_logp_l)
    }
}

fn finite(value: f64, term: &'static str) -> Result<f64, LossError> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(LossError::NumericOverflow { term })
    }
}

/// Loss for the annotated orientation `w > l`.
pub fn loss_forward(spec: &LossSpec, s: &ScorePair) -> Result<f64, LossError> {
    s.validate()?;
    let beta = spec.beta;
    match spec.kind {
        LossKind::Dpo => {
            let h = finite(s.ref_margin(), "dpo margin")?;
            finite(softplus(-beta * h), "dpo log-sigmoid term")
        }
        LossKind::Ipo => {
            let h = finite(s.ref_margin(), "ipo margin")?;
            let r = h - 1.0 / (2.0 * beta);
            finite(r * r, "ipo squared residual")
        }
        LossKind::SimPo => {
            let u = beta * s.logp_w / f64::from(s.len_w)
                - beta * s.logp_l / f64::from(s.len_l)
                - spec.gamma;
            let u = finite(u, "simpo length-normalized margin")?;
            finite(softplus(-u), "simpo log-sigmoid term")
        }
        LossKind::Cpo => {
            let m = finite(s.logp_w - s.logp_l, "cpo margin")?;
            let pref = finite(softplus(-beta * m), "cpo log-sigmoid term")?;
            let nll = finite(softplus(-m), "cpo nll term")?;
            finite(pref + nll, "cpo total")
        }
    }
}

/// Loss for the reversed orientation `l > w`.
pub fn loss_reverse(spec: &LossSpec, s: &ScorePair) -> Result<f64, LossError> {
    loss_forward(spec, &s.swapped())
}

/// `L(l > w) - L(w > l)`, the logit of the preference probability.
pub fn pref_logit(spec: &LossSpec, s: &ScorePair) -> Result<f64, LossError> {
    let fwd = loss_forward(spec, s)?;
    let rev = loss_reverse(spec, s)?;
    finite(rev - fwd, "preference logit")
}

/// `p(w >* l | theta) = sigmoid(L(l > w) - L(w > l))`.
pub fn pref_probability(spec: &LossSpec, s: &ScorePair) -> Result<f64, LossError> {
    Ok(sigmoid(pref_logit(spec, s)?))
}

/// `log p(w >* l)` and `log p(l >* w)`, computed from the logit without
/// forming the probability first.
pub fn log_pref_probabilities(spec: &LossSpec, s: &ScorePair) -> Result<(f64, f64), LossError> {
    let logit = pref_logit(spec, s)?;
    Ok((log_sigmoid(logit), log_sigmoid(-logit)))
}

/// `|p(w >* l) - sigmoid(beta h)|` for DPO: the Gibbs mapping of the DPO
/// loss is the Bradley-Terry model on the implicit reward.
pub fn bt_consistency(spec: &LossSpec, s: &ScorePair) -> Result<f64, LossError> {
    if spec.kind != LossKind::Dpo {
        return Err(LossError::KindMismatch { expected: LossKind::Dpo, actual: spec.kind });
    }
    let p = pref_probability(spec, s)?;
    Ok((p - sigmoid(spec.beta * s.ref_margin())).abs())
}

/// Partial derivatives of [`loss_forward`] with respect to `(logp_w, logp_l)`.
pub fn loss_gradient(spec: &LossSpec, s: &ScorePair) -> (f64, f64) {
    let beta = spec.beta;
    match spec.kind {
        LossKind::Dpo => {
            let d = -beta * sigmoid(-beta * s.ref_margin());
            (d, -d)
        }
        LossKind::Ipo => {
            let d = 2.0 * (s.ref_margin() - 1.0 / (2.0 * beta));
            (d, -d)
        }
        LossKind::SimPo => {
            let u = beta * s.logp_w / f64::from(s.len_w)
                - beta * s.logp_l / f64::from(s.len_l)
                - spec.gamma;
            let du = -sigmoid(-u);
            (du * beta / f64::from(s.len_w), -du * beta / f64::from(s.len_l))
        }
        LossKind::Cpo => {
            let m = s.logp_w - s.logp_l;
            let d = -beta * sigmoid(-beta * m) - sigmoid(-m);
            (d, -d)
        }
    }
}

/// Partial derivatives of [`loss_reverse`] with respect to the original
/// `(logp_w, logp_l)`.
pub fn loss_reverse_gradient(spec: &LossSpec, s: &ScorePair) -> (f64, f64) {
    let (d_l, d_w) = loss_gradient(spec, &s.swapped());
    (d_w, d_l)
}

/// Gradient of [`pref_logit`] with respect to `(logp_w, logp_l)`.
pub fn pref_logit_gradient(spec: &LossSpec, s: &ScorePair) -> (f64, f64) {
    let (fw, fl) = loss_gradient(spec, s);
    let (rw, rl) = loss_reverse_gradient(spec, s);
    (rw - fw, rl - fl)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: LossKind, beta: f64) -> LossSpec {
        LossSpec::new(kind, beta, 0.3).unwrap()
    }

    // -log sigmoid(x) evaluated the naive way, independent of softplus.
    fn neg_log_sigmoid_naive(x: f64) -> f64 {
        -(1.0 / (1.0 + (-x).exp())).ln()
    }

    #[test]
    fn dpo_zero_scores_is_log2() {
        let v = loss_forward(&spec(LossKind::Dpo, 1.0), &ScorePair::reference_free(0.0, 0.0)).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ipo_margin_hitting_target_is_zero() {
        let s = ScorePair::new(1.5, 0.0, 0.5, 0.0, 1, 1).unwrap();
        let v = loss_forward(&spec(LossKind::Ipo, 0.5), &s).unwrap();
        assert!(v.abs() < 1e-15);
    }

    #[test]
    fn dpo_small_beta_large_margin() {
        let s = ScorePair::reference_free(100.0, 0.0);
        let v = loss_forward(&spec(LossKind::Dpo, 0.01), &s).unwrap();
        assert!((v - neg_log_sigmoid_naive(1.0)).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn reverse_examples() {
        let dpo = spec(LossKind::Dpo, 1.0);
        let s = ScorePair::reference_free(2.0, 0.0);
        let r = loss_reverse(&dpo, &s).unwrap();
        assert!((r - neg_log_sigmoid_naive(-2.0)).abs() < 1e-12);
        assert!((r - 2.126928).abs() < 1e-6);

        let ipo = spec(LossKind::Ipo, 0.5);
        let s = ScorePair::reference_free(1.0, 0.0);
        assert!((loss_reverse(&ipo, &s).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_pair_has_equal_losses_and_half_probability() {
        let s = ScorePair::new(-3.2, -3.2, -1.0, -1.0, 7, 7).unwrap();
        for kind in LossKind::ALL {
            let sp = spec(kind, 0.7);
            assert_eq!(loss_forward(&sp, &s).unwrap(), loss_reverse(&sp, &s).unwrap());
            assert_eq!(pref_probability(&sp, &s).unwrap(), 0.5);
        }
    }

    #[test]
    fn dpo_probability_three_quarters() {
        let s = ScorePair::reference_free(3f64.ln(), 0.0);
        let p = pref_probability(&spec(LossKind::Dpo, 1.0), &s).unwrap();
        assert!((p - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ipo_probability_closed_form() {
        let s = ScorePair::reference_free(0.25, 0.0);
        let p = pref_probability(&spec(LossKind::Ipo, 0.5), &s).unwrap();
        assert!((p - 0.731059).abs() < 1e-6);
    }

    #[test]
    fn bt_consistency_examples() {
        let dpo = spec(LossKind::Dpo, 0.01);
        assert!(bt_consistency(&dpo, &ScorePair::reference_free(100.0, 0.0)).unwrap() <= 1e-9);
        let dpo = spec(LossKind::Dpo, 1.0);
        assert_eq!(bt_consistency(&dpo, &ScorePair::reference_free(0.0, 0.0)).unwrap(), 0.0);
        assert!(bt_consistency(&dpo, &ScorePair::reference_free(0.0, 5.0)).unwrap() <= 1e-9);
        assert!(matches!(
            bt_consistency(&spec(LossKind::Ipo, 1.0), &ScorePair::reference_free(0.0, 0.0)),
            Err(LossError::KindMismatch { .. })
        ));
    }

    #[test]
    fn gradient_examples() {
        let g = loss_gradient(&spec(LossKind::Dpo, 1.0), &ScorePair::reference_free(0.0, 0.0));
        assert!((g.0 + 0.5).abs() < 1e-15 && (g.1 - 0.5).abs() < 1e-15);
        let g = loss_gradient(&spec(LossKind::Ipo, 2.0), &ScorePair::reference_free(0.25, 0.0));
        assert_eq!(g, (0.0, 0.0));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(LossSpec::new(LossKind::Dpo, 0.0, 0.0).is_err());
        assert!(LossSpec::new(LossKind::Dpo, 1.0, f64::NAN).is_err());
        assert!(ScorePair::new(f64::INFINITY, 0.0, 0.0, 0.0, 1, 1).is_err());
        assert!(ScorePair::new(0.0, 0.0, 0.0, 0.0, 0, 1).is_err());
    }

    #[test]
    fn overflow_names_the_term() {
        let s = ScorePair::reference_free(f64::MAX, -f64::MAX);
        match loss_forward(&spec(LossKind::Dpo, 1.0), &s) {
            Err(LossError::NumericOverflow { term }) => assert!(term.contains("margin")),
            other => panic!("expected overflow, got {other:?}"),
        }
        let s = ScorePair::reference_free(1e200, -1e200);
        assert!(matches!(
            loss_forward(&spec(LossKind::Ipo, 1.0), &s),
            Err(LossError::NumericOverflow { term: "ipo squared residual" })
        ));
    }

    #[test]
    fn cpo_uses_loser_in_preference_term() {
        // Equal winner/loser scores must give a 0.5 probability; with the
        // as-printed winner-only form the preference term would be constant.
        let sp = spec(LossKind::Cpo, 1.0);
        let a = loss_forward(&sp, &ScorePair::reference_free(1.0, 0.0)).unwrap();
        let b = loss_forward(&sp, &ScorePair::reference_free(1.0, -3.0)).unwrap();
        assert!(b < a);
    }

    #[test]
    fn kind_round_trips_through_str() {
        for kind in LossKind::ALL {
            assert_eq!(kind.as_str().parse::<LossKind>().unwrap(), kind);
        }
        assert!("kto".parse::<LossKind>().is_err());
    }
}
