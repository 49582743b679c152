//! Brute-force references for the reliability subproblem.
//!
//! Nothing here calls into [`crate::theory`] or [`crate::em`]; agreement
//! between the two paths is only meaningful if they share no arithmetic.

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("log-likelihood is not unimodal on the grid (first rise after a fall at point {0})")]
    NotUnimodal(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub n_points: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { lo: 1e-4, hi: 1.0 - 1e-4, n_points: 10_000 }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), OracleError> {
        if !(self.lo > 0.0 && self.hi < 1.0 && self.lo < self.hi) {
            return Err(OracleError::InvalidGrid(format!(
                "need 0 < lo < hi < 1, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.n_points < 3 {
            return Err(OracleError::InvalidGrid("need at least 3 points".into()));
        }
        Ok(())
    }

    pub fn point(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * i as f64 / (self.n_points - 1) as f64
    }
}

/// Marginal log-likelihood of the annotated orientations:
/// `sum_i log(p_i eta + (1 - p_i)(1 - eta))`, by plain accumulation.
pub fn marginal_loglik(p_star: &[f64], eta: f64) -> f64 {
    let mut total = 0.0;
    for &p in p_star {
        let agree = p * eta;
        let disagree = (1.0 - p) * (1.0 - eta);
        total += (agree + disagree).ln();
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MleOutcome {
    Estimate(f64),
    /// Every `p_i = 1/2`: the likelihood is flat and no estimate exists.
    Degenerate,
}

impl MleOutcome {
    pub fn estimate(self) -> Option<f64> {
        match self {
            MleOutcome::Estimate(e) => Some(e),
            MleOutcome::Degenerate => None,
        }
    }
}

const GOLDEN_TOL: f64 = 1e-8;

/// Grid argmax of [`marginal_loglik`], refined by golden-section search over
/// the two cells around the winning grid point.
pub fn grid_mle_eta(p_star: &[f64], grid: &GridSpec) -> Result<MleOutcome, OracleError> {
    grid.validate()?;
    if p_star.iter().all(|&p| p == 0.5) {
        return Ok(MleOutcome::Degenerate);
    }
    let values: Vec<f64> = (0..grid.n_points).map(|i| marginal_loglik(p_star, grid.point(i))).collect();

    // unimodal: non-decreasing run followed by a non-increasing run, with
    // rounding-level wiggles treated as ties
    let mut falling = false;
    for i in 1..values.len() {
        let slack = 1e-12 * values[i].abs().max(1.0);
        if values[i] < values[i - 1] - slack {
            falling = true;
        } else if falling && values[i] > values[i - 1] + slack {
            return Err(OracleError::NotUnimodal(i));
        }
    }

    let best = values
        .iter()
        .enumerate()
        .fold(0, |best, (i, v)| if *v > values[best] { i } else { best });
    let mut a = grid.point(best.saturating_sub(1));
    let mut b = grid.point((best + 1).min(grid.n_points - 1));

    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = marginal_loglik(p_star, c);
    let mut fd = marginal_loglik(p_star, d);
    while b - a > GOLDEN_TOL {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = marginal_loglik(p_star, c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = marginal_loglik(p_star, d);
        }
    }
    Ok(MleOutcome::Estimate(0.5 * (a + b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglik_examples() {
        assert!((marginal_loglik(&[0.9], 0.9) + 0.198451).abs() < 1e-6);
        let p = [0.1, 0.7, 0.99, 0.5];
        assert!((marginal_loglik(&p, 0.5) - 4.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_is_flagged() {
        assert_eq!(grid_mle_eta(&[0.5; 7], &GridSpec::default()).unwrap(), MleOutcome::Degenerate);
    }

    #[test]
    fn interior_maximum_satisfies_score_equation() {
        // l'(eta) = sum (2p - 1) / d(eta) vanishes at the MLE
        let p = [0.9, 0.8, 0.3, 0.7, 0.15, 0.95, 0.6];
        let eta = grid_mle_eta(&p, &GridSpec::default()).unwrap().estimate().unwrap();
        let score: f64 = p.iter().map(|&q| (2.0 * q - 1.0) / (q * eta + (1.0 - q) * (1.0 - eta))).sum();
        assert!(score.abs() < 1e-5, "score {score} at {eta}");
    }

    #[test]
    fn bad_grids_rejected() {
        assert!(grid_mle_eta(&[0.7], &GridSpec { lo: 0.0, hi: 0.5, n_points: 10 }).is_err());
        assert!(grid_mle_eta(&[0.7], &GridSpec { lo: 0.1, hi: 0.5, n_points: 2 }).is_err());
    }
}
