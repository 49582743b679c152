//! Run configuration: flat `section.key = value` lines.
//!
//! ```text
//! # comment
//! run.seed = 3
//! data.eta_true = 0.9, 0.7
//! em.alpha = 0.1
//! ```
//!
//! Lists are comma separated and may be empty. Unknown keys are rejected so
//! that a typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use lcpo_core::{EmConfig, GeneratorSpec, LossKind, LossSpec, LrSchedule, OptimizerConfig, PStarLaw, UpdateMode};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { field: field.to_string(), message: message.into() }
}

/// Default ablation grids.
pub const DEFAULT_ABLATE_ETA_INIT: [f64; 4] = [0.99, 0.9, 0.75, 0.55];
pub const DEFAULT_ABLATE_ALPHA: [f64; 5] = [0.001, 0.01, 0.1, 0.5, 1.0];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    /// `None` when the file has no `data.*` keys.
    pub data: Option<GeneratorSpec>,
    pub loss: LossSpec,
    pub em: EmConfig,
    pub opt: OptimizerConfig,
    pub ablate_eta_init: Vec<f64>,
    pub ablate_alpha: Vec<f64>,
    /// Distance below which a reliability counts as converged in ablations.
    pub ablate_threshold: f64,
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, seed_override)
    }

    pub fn parse(text: &str, seed_override: Option<u64>) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(&format!("line {}", n + 1), "expected `section.key = value`"))?;
            let key = key.trim().to_string();
            if !key.contains('.') {
                return Err(err(&key, "keys need a section prefix, e.g. em.alpha"));
            }
            if entries.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(err(&key, "set more than once"));
            }
        }
        if let Some(seed) = seed_override {
            entries.insert("run.seed".into(), seed.to_string());
        }
        Reader { entries: &entries, used: Default::default() }.build(entries.clone())
    }

    /// SHA-256 of the effective configuration, one sorted `key = value` per line.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            h.update(format!("{k} = {v}\n"));
        }
        format!("{:x}", h.finalize())
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn require_data(&self) -> Result<&GeneratorSpec, ConfigError> {
        self.data.as_ref().ok_or_else(|| err("eta_true", "data.eta_true is required to generate data"))
    }
}

struct Reader<'a> {
    entries: &'a BTreeMap<String, String>,
    used: std::cell::RefCell<Vec<String>>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.used.borrow_mut().push(key.to_string());
        self.entries.get(key).map(String::as_str)
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| err(field_name(key), format!("cannot parse {v:?}: {e}"))),
        }
    }

    fn list(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.raw(key) else { return Ok(None) };
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|e| err(field_name(key), format!("cannot parse {s:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn build(self, entries: BTreeMap<String, String>) -> Result<RunConfig, ConfigError> {
        let seed: u64 = self.get("run.seed", 0)?;
        let name: String = self.get("run.name", "lcpo".to_string())?;

        let has_data = self.entries.keys().any(|k| k.starts_with("data."));
        let data = if has_data { Some(self.data(seed)?) } else { None };

        let kind: LossKind = self.get("loss.kind", LossKind::Dpo)?;
        let loss = LossSpec::new(kind, self.get("loss.beta", 1.0)?, self.get("loss.gamma", 0.0)?)
            .map_err(|e| err("beta", e.to_string()))?;

        let mode = match self.get("em.update_mode", "ema_per_batch".to_string())?.as_str() {
            "ema_per_batch" => UpdateMode::EmaPerBatch,
            "closed_form_per_epoch" => UpdateMode::ClosedFormPerEpoch,
            other => return Err(err("update_mode", format!("unknown mode {other:?}"))),
        };
        let em = EmConfig {
            eta_init: self.get("em.eta_init", 0.9)?,
            alpha: self.get("em.alpha", 0.1)?,
            update_mode: mode,
            unit_weights: self.get("em.unit_weights", false)?,
        };
        em.validate().map_err(|e| err(em_field(&e.to_string()), e.to_string()))?;

        let defaults = OptimizerConfig::default();
        let schedule = match self.get("optim.schedule", "constant".to_string())?.as_str() {
            "constant" => LrSchedule::Constant,
            "cosine" => LrSchedule::Cosine,
            other => return Err(err("schedule", format!("unknown schedule {other:?}"))),
        };
        let opt = OptimizerConfig {
            learning_rate: self.get("optim.learning_rate", defaults.learning_rate)?,
            epochs: self.get("optim.epochs", defaults.epochs)?,
            batch_size: self.get("optim.batch_size", defaults.batch_size)?,
            seed,
            momentum: self.get("optim.momentum", defaults.momentum)?,
            schedule,
        };
        opt.validate().map_err(|e| err(optim_field(&e.to_string()), e.to_string()))?;

        let ablate_eta_init = self.list("ablate.eta_init")?.unwrap_or_else(|| DEFAULT_ABLATE_ETA_INIT.to_vec());
        let ablate_alpha = self.list("ablate.alpha")?.unwrap_or_else(|| DEFAULT_ABLATE_ALPHA.to_vec());
        let ablate_threshold = self.get("ablate.threshold", 0.05)?;

        let used = self.used.borrow();
        if let Some(unknown) = self.entries.keys().find(|k| !used.contains(k)) {
            return Err(err(unknown, "unknown key"));
        }
        Ok(RunConfig { name, seed, data, loss, em, opt, ablate_eta_init, ablate_alpha, ablate_threshold, entries })
    }

    fn data(&self, seed: u64) -> Result<GeneratorSpec, ConfigError> {
        let d = GeneratorSpec::default();
        let eta_true = self.list("data.eta_true")?.ok_or_else(|| err("eta_true", "missing data.eta_true"))?;
        let k: usize = self.get("data.k_annotators", eta_true.len())?;
        let frequencies = self.list("data.annotator_frequencies")?.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        let theta_star = self.list("data.theta_star")?;
        let law = match self.get("data.p_star_law", "beta".to_string())?.as_str() {
            "from_theta_star" => PStarLaw::FromThetaStar,
            "beta" => PStarLaw::BetaDistribution { a: self.get("data.beta_a", 2.0)?, b: self.get("data.beta_b", 2.0)? },
            other => return Err(err("p_star_law", format!("expected from_theta_star or beta, got {other:?}"))),
        };
        let spec = GeneratorSpec {
            n_pairs: self.get("data.n_pairs", d.n_pairs)?,
            k_annotators: k,
            eta_true,
            annotator_frequencies: frequencies,
            feature_dim: self.get("data.feature_dim", theta_star.as_ref().map_or(d.feature_dim, Vec::len))?,
            theta_star,
            p_star_law: law,
            beta: self.get("data.beta", d.beta)?,
            len_min: self.get("data.len_min", d.len_min)?,
            len_max: self.get("data.len_max", d.len_max)?,
            seed,
        };
        spec.validate().map_err(|e| match e {
            lcpo_core::synth::DataError::InvalidSpec { field, message } => err(field, message),
            other => err("data", other.to_string()),
        })?;
        Ok(spec)
    }
}

fn field_name(key: &str) -> &str {
    key.rsplit('.').next().unwrap_or(key)
}

fn em_field(message: &str) -> &'static str {
    if message.contains("alpha") {
        "alpha"
    } else {
        "eta_init"
    }
}

fn optim_field(message: &str) -> &'static str {
    ["learning_rate", "epochs", "batch_size", "momentum"]
        .into_iter()
        .find(|f| message.contains(f))
        .unwrap_or("optim")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let c = RunConfig::parse("data.n_pairs = 10\ndata.eta_true = 1.0\n", None).unwrap();
        let d = c.data.unwrap();
        assert_eq!((d.n_pairs, d.k_annotators, d.annotator_frequencies.clone()), (10, 1, vec![1.0]));
        assert_eq!(c.em, EmConfig::default());
        assert_eq!(c.ablate_eta_init.len() + c.ablate_alpha.len(), 9);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::parse("data.n_pairs = 10\n", None).unwrap_err();
        assert_eq!(e.field, "eta_true");
        let e = RunConfig::parse("em.alpha = 0\n", None).unwrap_err();
        assert_eq!(e.field, "alpha");
        let e = RunConfig::parse("em.alpah = 0.1\n", None).unwrap_err();
        assert_eq!(e.field, "em.alpah");
        let e = RunConfig::parse("data.eta_true = 0.9, 0.8\ndata.annotator_frequencies = 0.5, 0.6\n", None).unwrap_err();
        assert_eq!(e.field, "annotator_frequencies");
        let e = RunConfig::parse("optim.epochs = many\n", None).unwrap_err();
        assert_eq!(e.field, "epochs");
    }

    #[test]
    fn seed_override_changes_hash() {
        let text = "# a run\nrun.seed = 1\nloss.kind = ipo\n";
        let a = RunConfig::parse(text, None).unwrap();
        let b = RunConfig::parse(text, Some(2)).unwrap();
        assert_eq!(a.seed, 1);
        assert_eq!(b.seed, 2);
        assert_eq!(b.opt.seed, 2);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::parse("loss.kind = ipo\nrun.seed=1", None).unwrap().hash());
    }

    #[test]
    fn empty_list_disables_a_sweep() {
        let c = RunConfig::parse("ablate.eta_init =\nablate.alpha = 0.1\n", None).unwrap();
        assert!(c.ablate_eta_init.is_empty());
        assert_eq!(c.ablate_alpha, vec![0.1]);
    }
}
