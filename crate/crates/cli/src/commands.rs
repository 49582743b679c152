use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use lcpo_core::em::{metrics_csv, EmError};
use lcpo_core::experiments::epochs_to_threshold;
use lcpo_core::losses::LossError;
use lcpo_core::synth::{generate, read_jsonl, split_by_annotator, to_jsonl_string};
use lcpo_core::{run_lcpo, EmConfig, GeneratorSpec, PolicyParams, PreferencePair};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<EmError> for CliError {
    fn from(e: EmError) -> Self {
        match e {
            EmError::NonFiniteLoss { .. } | EmError::Loss(LossError::NumericOverflow { .. }) => {
                CliError::Numeric(e.to_string())
            }
            other => CliError::Config(other.to_string()),
        }
    }
}

pub fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{}: {e}", path.display()))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Manifest<'a> {
    run_name: &'a str,
    config_hash: String,
    seed: u64,
    config: &'a BTreeMap<String, String>,
    spec: &'a GeneratorSpec,
    dataset: &'a str,
    content_hash: String,
    n_pairs: usize,
    annotator_counts: Vec<usize>,
}

pub fn cmd_generate(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let spec = config.require_data()?;
    let data = generate(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let jsonl = to_jsonl_string(&data);
    let mut counts = vec![0; spec.k_annotators];
    for (k, pairs) in split_by_annotator(&data) {
        counts[k] = pairs.len();
    }
    let manifest = Manifest {
        run_name: &config.name,
        config_hash: config.hash(),
        seed: config.seed,
        config: config.entries(),
        spec,
        dataset: "dataset.jsonl",
        content_hash: sha256_hex(jsonl.as_bytes()),
        n_pairs: data.len(),
        annotator_counts: counts,
    };
    write_file(&out.join("dataset.jsonl"), &jsonl)?;
    write_file(&out.join("manifest.json"), &to_json(&manifest))?;
    println!("wrote {} pairs to {}", data.len(), out.join("dataset.jsonl").display());
    Ok(())
}

/// The dataset from `--dataset`, or freshly generated from the config.
pub fn load_dataset(config: &RunConfig, dataset: Option<&Path>) -> Result<Vec<PreferencePair>, CliError> {
    let data = match dataset {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
            read_jsonl(BufReader::new(file)).map_err(|e| io_error(path, e))?
        }
        None => generate(config.require_data()?).map_err(|e| CliError::Config(e.to_string()))?,
    };
    if data.is_empty() {
        return Err(CliError::Config("dataset: no pairs".into()));
    }
    let dim = data[0].features.dim();
    if let Some(spec) = &config.data {
        if spec.feature_dim != dim {
            return Err(CliError::Config(format!(
                "feature_dim: config says {}, dataset has {dim}",
                spec.feature_dim
            )));
        }
    }
    Ok(data)
}

#[derive(Serialize)]
struct FinalState<'a> {
    config_hash: String,
    loss: &'a lcpo_core::LossSpec,
    theta: &'a [f64],
    theta_ref: &'a [f64],
    eta: &'a [f64],
    counts: &'a [usize],
}

fn csv_with_hash(hash: &str, body: &str) -> String {
    format!("# config_hash={hash}\n{body}")
}

pub fn cmd_train(config: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let data = load_dataset(config, dataset)?;
    let dim = data[0].features.dim();
    let result = run_lcpo(&data, PolicyParams::zeros(dim), &config.loss, &config.em, &config.opt)?;
    let hash = config.hash();
    write_file(&out.join("metrics.csv"), &csv_with_hash(&hash, &metrics_csv(&result.metrics)))?;
    let state = FinalState {
        config_hash: hash,
        loss: &config.loss,
        theta: &result.params.theta,
        theta_ref: result.params.theta_ref(),
        eta: result.table.etas(),
        counts: result.table.counts(),
    };
    write_file(&out.join("final_state.json"), &to_json(&state))?;
    println!("trained {} epochs; eta = {:?}", config.opt.epochs, result.table.etas());
    Ok(())
}

/// Reference reliabilities for ablation errors: the configured ones, else
/// the agreement rates recorded in the dataset's ground truth.
fn reference_etas(config: &RunConfig, data: &[PreferencePair]) -> Result<Vec<f64>, CliError> {
    if let Some(spec) = &config.data {
        return Ok(spec.eta_true.clone());
    }
    split_by_annotator(data)
        .into_iter()
        .map(|(_, pairs)| {
            let truths: Option<Vec<bool>> = pairs.iter().map(|p| p.truth.map(|t| t.z)).collect();
            truths
                .map(|z| z.iter().filter(|z| **z).count() as f64 / z.len() as f64)
                .ok_or_else(|| CliError::Config("eta_true: needed for ablation errors (no data section, no ground truth)".into()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub sweep: &'static str,
    pub eta_init: f64,
    pub alpha: f64,
    pub final_eta_error: Option<f64>,
    pub final_loss: Option<f64>,
    pub epochs_to_threshold: Option<usize>,
    pub status: String,
}

fn run_cell(
    config: &RunConfig,
    data: &[PreferencePair],
    targets: &[f64],
    sweep: &'static str,
    em: EmConfig,
) -> AblationRow {
    let mut row = AblationRow {
        sweep,
        eta_init: em.eta_init,
        alpha: em.alpha,
        final_eta_error: None,
        final_loss: None,
        epochs_to_threshold: None,
        status: "ok".into(),
    };
    let dim = data[0].features.dim();
    match run_lcpo(data, PolicyParams::zeros(dim), &config.loss, &em, &config.opt) {
        Ok(result) => {
            let etas = result.table.etas();
            row.final_eta_error = Some(etas.iter().zip(targets).map(|(e, t)| (e - t).abs()).fold(0.0, f64::max));
            row.final_loss = result.metrics.last().map(|m| m.mean_loss);
            // every annotator within the threshold
            row.epochs_to_threshold = (0..targets.len())
                .map(|k| epochs_to_threshold(&result.metrics, k, targets[k], config.ablate_threshold))
                .try_fold(0, |acc, e| e.map(|e| acc.max(e)));
        }
        Err(e) => row.status = format!("error: {e}"),
    }
    row
}

pub fn ablation_rows(config: &RunConfig, data: &[PreferencePair]) -> Result<Vec<AblationRow>, CliError> {
    if config.ablate_eta_init.is_empty() && config.ablate_alpha.is_empty() {
        return Err(CliError::Config("ablate: both eta_init and alpha grids are empty".into()));
    }
    let targets = reference_etas(config, data)?;
    let mut rows = Vec::new();
    for &eta_init in &config.ablate_eta_init {
        rows.push(run_cell(config, data, &targets, "eta_init", EmConfig { eta_init, ..config.em.clone() }));
    }
    for &alpha in &config.ablate_alpha {
        rows.push(run_cell(config, data, &targets, "alpha", EmConfig { alpha, ..config.em.clone() }));
    }
    Ok(rows)
}

fn fmt_opt<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("sweep,eta_init,alpha,final_eta_error,final_loss,epochs_to_threshold,status\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.sweep,
            r.eta_init,
            r.alpha,
            fmt_opt(&r.final_eta_error),
            fmt_opt(&r.final_loss),
            fmt_opt(&r.epochs_to_threshold),
            r.status.replace(',', ";")
        ));
    }
    out
}

pub fn cmd_ablate(config: &RunConfig, dataset: Option<&Path>, out: &Path) -> Result<(), CliError> {
    // invalid grid values surface as failed cells, but an invalid base run is a config error
    config.em.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let data = load_dataset(config, dataset)?;
    let rows = ablation_rows(config, &data)?;
    write_file(&out.join("ablation.csv"), &csv_with_hash(&config.hash(), &ablation_csv(&rows)))?;
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    println!("{} cells, {failed} failed; table in {}", rows.len(), out.join("ablation.csv").display());
    let _ = std::io::stdout().flush();
    Ok(())
}

pub fn default_out() -> PathBuf {
    PathBuf::from("out")
}
