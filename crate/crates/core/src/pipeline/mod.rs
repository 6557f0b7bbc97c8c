//! Stage orchestration over the file formats: config, run manifests, and the
//! derive / sweep / evaluate / stats / irt / audit / report / selfcheck stages.

mod selfcheck;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::audit::AuditError;
use crate::irt::regression::RegressionError;
use crate::irt::{GateLimits, IrtError, SamplerConfig};
use crate::metrics::MetricsError;
use crate::schema::{Emotion, SchemaError};
use crate::stats::{FlipMode, StatsError};
use crate::steering::{SteeringError, DEFAULT_ALPHAS};

pub use selfcheck::{run_selfcheck, synthetic_dumps, SelfcheckCheck, SelfcheckOutcome};
pub use stages::*;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Steering(#[from] SteeringError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Irt(#[from] IrtError),
    #[error(transparent)]
    Regression(#[from] RegressionError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error("config: {0}")]
    Config(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("invalid input {path}: {message}")]
    Input { path: String, message: String },
    #[error("{0}")]
    Usage(String),
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("selfcheck failed: {0}")]
    Selfcheck(String),
}

impl PipelineError {
    /// 2 for bad input or usage, 1 for failures of the tool itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Write { .. } | PipelineError::Selfcheck(_) => 1,
            _ => 2,
        }
    }

    /// Stable diagnostic code printed alongside the message.
    pub fn diagnostic(&self) -> String {
        let code = match self {
            PipelineError::Schema(e) => return format!("schema:{}", e.code()),
            PipelineError::Steering(e) => match e {
                SteeringError::EmptyClass { .. } => "EmptyClass",
                SteeringError::ZeroContrast(_) => "ZeroContrast",
                SteeringError::DimensionMismatch { .. } => "DimensionMismatch",
                SteeringError::TooFewLayers(_) => "TooFewLayers",
                SteeringError::ZeroDimension => "ZeroDimension",
                SteeringError::InvalidConfig(_) => "InvalidSteeringConfig",
                SteeringError::File { .. } => "SteeringFile",
            },
            PipelineError::Metrics(_) => "Metrics",
            PipelineError::Stats(_) => "Stats",
            PipelineError::Irt(_) => "Irt",
            PipelineError::Regression(_) => "Regression",
            PipelineError::Audit(_) => "Audit",
            PipelineError::Config(_) => "Config",
            PipelineError::MissingInput(_) => "MissingInput",
            PipelineError::Input { .. } => "BadInput",
            PipelineError::Usage(_) => "Usage",
            PipelineError::Write { .. } => "Write",
            PipelineError::Selfcheck(_) => "Selfcheck",
        };
        code.to_string()
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Sizes the global worker pool; call once before any stage runs.
pub fn configure_threads(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(PipelineError::Usage("--jobs must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| PipelineError::Usage(e.to_string()))
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// Flat TOML experiment config. Every key is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model_name: String,
    pub alphas: Vec<f64>,
    /// Control layers; defaults to the middle third of `num_layers`.
    pub layers: Option<Vec<usize>>,
    pub num_layers: Option<usize>,
    pub emotions: Vec<Emotion>,
    pub repeats: u32,
    pub cot: Vec<bool>,
    /// Hidden size of the synthetic dumps used by selfcheck.
    pub synthetic_dim: usize,
    pub items_per_game: usize,
    pub flip_mode: FlipMode,
    pub cv_folds: usize,
    pub audit_lambda: f64,
    pub audit_target_precision: f64,
    pub audit_pooled: bool,
    pub irt_chains: usize,
    pub irt_iterations: usize,
    pub irt_burn_in: usize,
    /// Number of seeded refits for the stability gate.
    pub irt_refits: usize,
    pub max_ppc_error: f64,
    pub min_discrimination: f64,
    pub max_abs_da: f64,
    pub max_abs_db: f64,
}

impl Default for Config {
    fn default() -> Self {
        let gates = GateLimits::default();
        let sampler = SamplerConfig::default();
        Config {
            seed: 0,
            model_name: "mock".into(),
            alphas: DEFAULT_ALPHAS.to_vec(),
            layers: None,
            num_layers: None,
            emotions: Emotion::ALL.to_vec(),
            repeats: 3,
            cot: vec![false, true],
            synthetic_dim: 16,
            items_per_game: 12,
            flip_mode: FlipMode::Focal,
            cv_folds: 5,
            audit_lambda: crate::audit::DEFAULT_LAMBDA,
            audit_target_precision: crate::audit::DEFAULT_TARGET_PRECISION,
            audit_pooled: false,
            irt_chains: sampler.chains,
            irt_iterations: sampler.iterations,
            irt_burn_in: sampler.burn_in,
            irt_refits: 3,
            max_ppc_error: gates.max_ppc_error,
            min_discrimination: gates.min_discrimination,
            max_abs_da: gates.max_abs_da,
            max_abs_db: gates.max_abs_db,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| PipelineError::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !a.is_finite() || *a <= 0.0) {
            return bad("alphas must be a non-empty list of positive numbers");
        }
        if self.emotions.is_empty() {
            return bad("emotions must not be empty");
        }
        if self.repeats == 0 {
            return bad("repeats must be >= 1");
        }
        if self.cot.is_empty() {
            return bad("cot must list at least one of true/false");
        }
        if self.synthetic_dim == 0 || self.items_per_game == 0 {
            return bad("synthetic_dim and items_per_game must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.audit_target_precision) || self.audit_lambda < 0.0 {
            return bad("audit_target_precision must be in [0, 1] and audit_lambda >= 0");
        }
        if self.irt_refits == 0 {
            return bad("irt_refits must be >= 1");
        }
        Ok(())
    }

    /// Defaults with a lighter sampler budget for the self-check runs.
    pub fn selfcheck() -> Self {
        Config {
            irt_chains: 2,
            irt_iterations: 600,
            irt_burn_in: 300,
            irt_refits: 2,
            ..Config::default()
        }
    }

    pub fn gate_limits(&self) -> GateLimits {
        GateLimits {
            max_ppc_error: self.max_ppc_error,
            min_discrimination: self.min_discrimination,
            max_abs_da: self.max_abs_da,
            max_abs_db: self.max_abs_db,
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            chains: self.irt_chains,
            iterations: self.irt_iterations,
            burn_in: self.irt_burn_in,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

// ---------------------------------------------------------------------------
// Manifests and output files
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub stage: String,
    pub seed: u64,
    pub config: Option<FileHash>,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Paths are recorded relative to `base` (with `..` as needed) so reruns into
/// another directory produce the same manifest.
fn display_path(path: &Path, base: &Path) -> String {
    let (Ok(p), Ok(b)) = (std::path::absolute(path), std::path::absolute(base)) else {
        return path.to_string_lossy().into_owned();
    };
    let pc: Vec<_> = p.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = pc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return p.to_string_lossy().into_owned();
    }
    let mut parts: Vec<String> = vec!["..".to_string(); bc.len() - common];
    parts.extend(
        pc[common..]
            .iter()
            .map(|c| c.as_os_str().to_string_lossy().into_owned()),
    );
    parts.join("/")
}

/// Collects what a stage read and wrote; `finish` writes the manifest.
pub struct StageOutput {
    out_dir: PathBuf,
    stage: String,
    seed: u64,
    config: Option<FileHash>,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

impl StageOutput {
    pub fn new(out_dir: &Path, stage: &str, seed: u64) -> Result<Self> {
        fs::create_dir_all(out_dir).map_err(|source| PipelineError::Write {
            path: out_dir.to_path_buf(),
            source,
        })?;
        Ok(StageOutput {
            out_dir: out_dir.to_path_buf(),
            stage: stage.to_string(),
            seed,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    pub fn out_dir(&self) -> &Path {
        &self.out_dir
    }

    pub fn config_file(&mut self, path: Option<&Path>) -> Result<()> {
        if let Some(p) = path {
            let bytes = read_bytes(p)?;
            self.config = Some(FileHash {
                path: display_path(p, &self.out_dir),
                sha256: sha256_hex(&bytes),
            });
        }
        Ok(())
    }

    /// Reads an input file and records its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read_bytes(path)?;
        self.record_input(path, &bytes);
        Ok(bytes)
    }

    pub fn read_text(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?)
            .map_err(|_| PipelineError::MissingInput(format!("{} is not UTF-8", path.display())))
    }

    pub fn record_input(&mut self, path: &Path, bytes: &[u8]) {
        self.inputs.push(FileHash {
            path: display_path(path, &self.out_dir),
            sha256: sha256_hex(bytes),
        });
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.out_dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|source| PipelineError::Write {
                path: parent.to_path_buf(),
                source,
            })?;
        }
        fs::write(&path, bytes).map_err(|source| PipelineError::Write {
            path: path.clone(),
            source,
        })?;
        self.outputs.push(FileHash {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("stage output serializes");
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            stage: self.stage.clone(),
            seed: self.seed,
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let path = self.out_dir.join(format!("manifest.{}.json", self.stage));
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|source| PipelineError::Write { path, source })?;
        Ok(manifest)
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| PipelineError::MissingInput(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = Config::from_toml("").unwrap();
        assert_eq!(cfg, Config::default());
        let cfg =
            Config::from_toml("seed = 7\nalphas = [1.0]\nemotions = [\"joy\"]\nlayers = [4, 5]\n")
                .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.emotions, vec![Emotion::Happiness]);
        assert_eq!(cfg.layers, Some(vec![4, 5]));
        assert!(matches!(
            Config::from_toml("sede = 1"),
            Err(PipelineError::Config(_))
        ));
        assert!(matches!(
            Config::from_toml("alphas = []"),
            Err(PipelineError::Config(_))
        ));
        let round = Config::from_toml(&Config::default().to_toml()).unwrap();
        assert_eq!(round, Config::default());
    }

    #[test]
    fn hashes() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
