//! Experiment configuration file (TOML). Unknown keys are errors.

use std::path::{Path, PathBuf};

use oca_core::datagen::SynthParams;
use oca_core::retrieval::{PadMode, DEF1_DEFAULT_CAP};
use oca_core::{Mode, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "OCA_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "oca-runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub seed: u64,
    pub num_classes: usize,
    /// The old model sees classes `0..old_classes`.
    pub old_classes: usize,
    pub per_class_train: usize,
    pub per_class_eval: usize,
    pub input_dim: usize,
    pub class_separation: f64,
    pub noise_sigma: f64,
}

impl DataSection {
    pub fn synth_params(&self) -> SynthParams {
        SynthParams {
            num_classes: self.num_classes,
            per_class_train: self.per_class_train,
            per_class_eval: self.per_class_eval,
            input_dim: self.input_dim,
            class_separation: self.class_separation,
            noise_sigma: self.noise_sigma,
        }
    }
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_ortho_init_scale() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub d_old: usize,
    pub d_extra: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_bct: f64,
    /// Method trained and reported when no `--mode` is given.
    pub mode: Mode,
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_ortho_init_scale")]
    pub ortho_init_scale: f64,
    #[serde(default)]
    pub warm_start: bool,
}

impl TrainSection {
    pub fn to_config(&self, seed: u64, mode: Mode) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            d_old: self.d_old,
            d_extra: self.d_extra,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda_bct: self.lambda_bct,
            mode,
            hidden_dims: self.hidden_dims.clone(),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            ortho_init_scale: self.ortho_init_scale,
            warm_start: self.warm_start,
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_k_list() -> Vec<usize> {
    vec![1, 5, 10]
}
fn default_cap() -> u64 {
    DEF1_DEFAULT_CAP
}
fn default_pad() -> PadMode {
    PadMode::Zero
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    #[serde(default = "default_true")]
    pub self_exclusion: bool,
    /// Rule used for the ECC verdict and pairwise compatibility check.
    #[serde(default = "default_pad")]
    pub padding_mode: PadMode,
    #[serde(default = "default_k_list")]
    pub cmc_k: Vec<usize>,
    #[serde(default = "default_cap")]
    pub def1_sample_cap: u64,
    #[serde(default)]
    pub def1_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            self_exclusion: true,
            padding_mode: PadMode::Zero,
            cmc_k: default_k_list(),
            def1_sample_cap: DEF1_DEFAULT_CAP,
            def1_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Training seeds; each gets its own output directory.
    pub seeds: Vec<u64>,
    /// Defaults to `$OCA_OUTPUT_ROOT/<config stem>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks every section so no command starts work on a bad config.
    pub fn validate(&self) -> CliResult<()> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("`{field}`: {msg}")));
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seeds", "duplicate seed".into());
        }
        self.data
            .synth_params()
            .validate()
            .or_else(|e| bad("data", e.to_string()))?;
        if self.data.old_classes == 0 || self.data.old_classes > self.data.num_classes {
            return bad(
                "data.old_classes",
                format!("must lie in 1..={}", self.data.num_classes),
            );
        }
        for mode in [self.train.mode, Mode::Independent] {
            self.train
                .to_config(0, mode)
                .validate()
                .or_else(|e| bad("train", e.to_string()))?;
        }
        if self.eval.cmc_k.is_empty() || self.eval.cmc_k.contains(&0) {
            return bad("eval.cmc_k", "needs positive ranks".into());
        }
        if self.eval.def1_sample_cap == 0 {
            return bad("eval.def1_sample_cap", "must be >= 1".into());
        }
        Ok(())
    }

    /// Stable digest of the parsed config, embedded in every report. The
    /// output location is left out so relocated runs hash alike.
    pub fn hash(&self) -> String {
        let content = Self {
            output_dir: None,
            ..self.clone()
        };
        let canonical = serde_json::to_vec(&content).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Reads, parses and validates a config file.
pub fn load(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Output directory for `cfg` loaded from `config_path`.
pub fn output_dir(cfg: &ExperimentConfig, config_path: &Path) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
    match &cfg.output_dir {
        Some(dir) if dir.is_absolute() => dir.clone(),
        Some(dir) => root.join(dir),
        None => {
            let stem = config_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".into());
            root.join(stem)
        }
    }
}
