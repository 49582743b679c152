//! Synthetic preference data with known ground truth.
//!
//! Each pair is drawn as follows: pick an annotator by frequency, draw two
//! standard-normal feature vectors `a`, `b`, compute or sample the
//! probability `p = p(a >* b)`, draw the true direction from `p`, draw the
//! label-correctness bit `z ~ Bernoulli(eta_k)` and flip the true direction
//! when `z = 0`. The annotated winner is stored first, so the stored order is
//! the noisy observation, not the ground truth.
//!
//! Ground truth is carried in [`GroundTruth`] (serialized under `debug`).
//! Training code only ever reads ids and features.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::numeric::{dot, sigmoid};
use crate::score_model::Features;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid generator spec: {field}: {message}")]
    InvalidSpec { field: &'static str, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn invalid(field: &'static str, message: impl Into<String>) -> DataError {
    DataError::InvalidSpec { field, message: message.into() }
}

/// Generative ground truth attached to a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// `p(winner >* loser)` for the orientation the generator stored; see
    /// [`GroundTruth::oriented_p_star`] for the current orientation.
    pub p_star: f64,
    /// Whether the stored orientation agrees with the true direction.
    pub z: bool,
    /// Whether noise injection has flipped this pair an odd number of times.
    pub flipped: bool,
}

impl GroundTruth {
    /// `p(stored winner >* stored loser)` for the orientation as stored now.
    pub fn oriented_p_star(&self) -> f64 {
        if self.flipped {
            1.0 - self.p_star
        } else {
            self.p_star
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub id: u64,
    pub annotator_id: usize,
    pub features: Features,
    pub truth: Option<GroundTruth>,
}

impl PreferencePair {
    /// Exchange the stored winner and loser, keeping ground truth consistent.
    pub fn flip(&mut self) {
        self.features = self.features.swapped();
        if let Some(t) = self.truth.as_mut() {
            t.z = !t.z;
            t.flipped = !t.flipped;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum PStarLaw {
    FromThetaStar,
    BetaDistribution { a: f64, b: f64 },
}

impl Default for PStarLaw {
    fn default() -> Self {
        PStarLaw::BetaDistribution { a: 2.0, b: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_pairs: usize,
    pub k_annotators: usize,
    pub eta_true: Vec<f64>,
    pub annotator_frequencies: Vec<f64>,
    pub feature_dim: usize,
    pub theta_star: Option<Vec<f64>>,
    pub p_star_law: PStarLaw,
    /// Scale in `p* = sigmoid(beta * theta_star . (phi_a - phi_b))`.
    pub beta: f64,
    /// Inclusive range for response lengths.
    pub len_min: u32,
    pub len_max: u32,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_pairs: 1000,
            k_annotators: 1,
            eta_true: vec![0.8],
            annotator_frequencies: vec![1.0],
            feature_dim: 8,
            theta_star: None,
            p_star_law: PStarLaw::default(),
            beta: 1.0,
            len_min: 1,
            len_max: 1,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.n_pairs == 0 {
            return Err(invalid("n_pairs", "must be positive"));
        }
        if self.k_annotators == 0 {
            return Err(invalid("k_annotators", "must be positive"));
        }
        if self.eta_true.len() != self.k_annotators {
            return Err(invalid(
                "eta_true",
                format!("expected {} entries, got {}", self.k_annotators, self.eta_true.len()),
            ));
        }
        if self.eta_true.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(invalid("eta_true", "entries must lie in (0, 1]"));
        }
        if self.annotator_frequencies.len() != self.k_annotators {
            return Err(invalid(
                "annotator_frequencies",
                format!(
                    "expected {} entries, got {}",
                    self.k_annotators,
                    self.annotator_frequencies.len()
                ),
            ));
        }
        if self.annotator_frequencies.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(invalid("annotator_frequencies", "entries must be non-negative"));
        }
        let total: f64 = self.annotator_frequencies.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("annotator_frequencies", format!("must sum to 1, got {total}")));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim", "must be positive"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(invalid("beta", "must be positive"));
        }
        if self.len_min == 0 || self.len_max < self.len_min {
            return Err(invalid("len_min", "need 1 <= len_min <= len_max"));
        }
        match (&self.p_star_law, &self.theta_star) {
            (PStarLaw::FromThetaStar, None) => {
                return Err(invalid("theta_star", "required when p_star_law = from_theta_star"))
            }
            (_, Some(t)) if t.len() != self.feature_dim => {
                return Err(invalid(
                    "theta_star",
                    format!("expected {} entries, got {}", self.feature_dim, t.len()),
                ))
            }
            (PStarLaw::BetaDistribution { a, b }, _) if !(*a > 0.0 && *b > 0.0) => {
                return Err(invalid("p_star_law", "beta parameters must be positive"))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Independent RNG stream for item `index` under `seed`, so output does not
/// depend on generation order.
pub fn item_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_index(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // u landed in the rounding gap above the last cumulative sum
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

fn generate_one(spec: &GeneratorSpec, index: usize, beta_law: Option<&Beta<f64>>) -> PreferencePair {
    let mut rng = item_rng(spec.seed, index as u64);
    let annotator_id = sample_index(&mut rng, &spec.annotator_frequencies);
    let d = spec.feature_dim;
    let phi_a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let phi_b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let len_a = rng.random_range(spec.len_min..=spec.len_max);
    let len_b = rng.random_range(spec.len_min..=spec.len_max);

    let p_a = match (spec.p_star_law, beta_law) {
        (PStarLaw::BetaDistribution { .. }, Some(law)) => law.sample(&mut rng),
        _ => {
            let theta = spec.theta_star.as_deref().expect("validated");
            sigmoid(spec.beta * (dot(theta, &phi_a) - dot(theta, &phi_b)))
        }
    };
    let a_truly_wins = rng.random::<f64>() < p_a;
    let z = rng.random::<f64>() < spec.eta_true[annotator_id];
    let a_stored_first = a_truly_wins == z;

    let (features, p_star) = if a_stored_first {
        (Features { phi_w: phi_a, phi_l: phi_b, len_w: len_a, len_l: len_b }, p_a)
    } else {
        (Features { phi_w: phi_b, phi_l: phi_a, len_w: len_b, len_l: len_a }, 1.0 - p_a)
    };
    PreferencePair {
        id: index as u64,
        annotator_id,
        features,
        truth: Some(GroundTruth { p_star, z, flipped: false }),
    }
}

/// Draw a dataset. Deterministic in `spec` (including its seed).
pub fn generate(spec: &GeneratorSpec) -> Result<Vec<PreferencePair>, DataError> {
    spec.validate()?;
    let beta_law = match spec.p_star_law {
        PStarLaw::BetaDistribution { a, b } => {
            Some(Beta::new(a, b).map_err(|e| invalid("p_star_law", e.to_string()))?)
        }
        PStarLaw::FromThetaStar => None,
    };
    Ok((0..spec.n_pairs).map(|i| generate_one(spec, i, beta_law.as_ref())).collect())
}

/// Flip each pair's stored orientation independently with probability
/// `flip_fraction`. The draw for a pair depends only on `(seed, id)`.
pub fn inject_noise(
    dataset: &[PreferencePair],
    flip_fraction: f64,
    seed: u64,
) -> Result<Vec<PreferencePair>, DataError> {
    if !(0.0..=1.0).contains(&flip_fraction) {
        return Err(invalid("flip_fraction", format!("must lie in [0, 1], got {flip_fraction}")));
    }
    Ok(dataset
        .iter()
        .map(|pair| {
            let mut out = pair.clone();
            if item_rng(seed, pair.id).random::<f64>() < flip_fraction {
                out.flip();
            }
            out
        })
        .collect())
}

/// Agreement probability of a copy after independent flips with rate `f`.
pub fn effective_reliability(eta: f64, flip_fraction: f64) -> f64 {
    eta * (1.0 - flip_fraction) + (1.0 - eta) * flip_fraction
}

/// Overall flip probability of flipping with `f1` and then with `f2`.
pub fn composed_flip_rate(f1: f64, f2: f64) -> f64 {
    f1 * (1.0 - f2) + f2 * (1.0 - f1)
}

/// Group pairs by annotator, preserving dataset order within each group.
pub fn split_by_annotator(dataset: &[PreferencePair]) -> BTreeMap<usize, Vec<&PreferencePair>> {
    let mut groups: BTreeMap<usize, Vec<&PreferencePair>> = BTreeMap::new();
    for pair in dataset {
        groups.entry(pair.annotator_id).or_default().push(pair);
    }
    groups
}

/// Relabel every pair with annotator `to`.
pub fn merge_annotators(dataset: &[PreferencePair], to: usize) -> Vec<PreferencePair> {
    dataset.iter().cloned().map(|mut p| {
        p.annotator_id = to;
        p
    }).collect()
}

#[derive(Serialize)]
struct DebugOut {
    p_star: f64,
    z: u8,
    flipped: bool,
}

#[derive(Serialize)]
struct PairOut<'a> {
    id: u64,
    annotator_id: usize,
    phi_w: &'a [f64],
    phi_l: &'a [f64],
    len_w: u32,
    len_l: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    debug: Option<DebugOut>,
}

#[derive(Deserialize)]
struct DebugIn {
    p_star: f64,
    z: u8,
    #[serde(default)]
    flipped: bool,
}

#[derive(Deserialize)]
struct PairIn {
    id: u64,
    annotator_id: usize,
    phi_w: Vec<f64>,
    phi_l: Vec<f64>,
    len_w: u32,
    len_l: u32,
    debug: Option<DebugIn>,
}

/// Write one JSON object per line, keys in the documented order.
pub fn write_jsonl<W: Write>(dataset: &[PreferencePair], mut out: W) -> Result<(), DataError> {
    for pair in dataset {
        let row = PairOut {
            id: pair.id,
            annotator_id: pair.annotator_id,
            phi_w: &pair.features.phi_w,
            phi_l: &pair.features.phi_l,
            len_w: pair.features.len_w,
            len_l: pair.features.len_l,
            debug: pair.truth.map(|t| DebugOut { p_star: t.p_star, z: t.z as u8, flipped: t.flipped }),
        };
        serde_json::to_writer(&mut out, &row).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn to_jsonl_string(dataset: &[PreferencePair]) -> String {
    let mut buf = Vec::new();
    write_jsonl(dataset, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Read a JSON-lines dataset. Unknown keys and blank lines are ignored.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<PreferencePair>, DataError> {
    let mut pairs = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| DataError::Parse { line: i + 1, message };
        let row: PairIn = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let features = Features::new(row.phi_w, row.phi_l, row.len_w, row.len_l)
            .map_err(|e| parse_err(e.to_string()))?;
        let truth = match row.debug {
            Some(d) if d.z > 1 => return Err(parse_err("debug.z must be 0 or 1".into())),
            Some(d) => Some(GroundTruth { p_star: d.p_star, z: d.z == 1, flipped: d.flipped }),
            None => None,
        };
        pairs.push(PreferencePair { id: row.id, annotator_id: row.annotator_id, features, truth });
    }
    Ok(pairs)
}
