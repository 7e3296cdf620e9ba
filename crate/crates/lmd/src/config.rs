//! Experiment configuration: a versioned TOML schema covering every stage of
//! the pipeline, with strict unknown-key rejection and a single root seed
//! feeding a named derivation scheme.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("unsupported config version {found} (expected {CONFIG_VERSION})")]
    Version { found: u32 },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_speakers: u32,
    pub utts_per_speaker: u32,
    pub duration_s: f64,
    pub n_attack_pairs: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AsvSection {
    pub steps: usize,
    pub batch_pairs: usize,
    pub lr: f64,
    pub margin: f64,
    /// Victim channel widths.
    pub c1: usize,
    pub c2: usize,
    /// Substitute model channel widths (transfer-attack source).
    pub substitute_c1: usize,
    pub substitute_c2: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    pub bim_n: Vec<usize>,
    pub pgd_n: Vec<usize>,
    pub cw_kappa: Vec<f64>,
    pub cw_steps: usize,
    pub cw_binary_search: usize,
    /// Craft gradients on the substitute model instead of the victim.
    pub black_box: bool,
    /// Also build adaptive sets that differentiate through the trained mask.
    pub adaptive: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub lmd_steps: usize,
    pub lmd_batch: usize,
    pub lmd_lr: f64,
    pub lmd_hidden: usize,
    pub lambda_s: f64,
    pub lambda_b: f64,
    pub margin: f64,
    pub crop_frames: usize,
    pub mcs_search_iters: usize,
    pub mcs_search_batch: usize,
    /// Independent seeded repetitions of the hyperparameter search.
    pub mcs_search_runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Tolerated false-acceptance rates for the DSR tables.
    pub far_grid: Vec<f64>,
    /// SNR budgets (dB) for the budget-restricted EER curve.
    pub snr_budgets: Vec<f64>,
}

/// Root experiment configuration; round-trips losslessly through TOML.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusSection,
    pub asv: AsvSection,
    pub attack: AttackSection,
    pub detector: DetectorSection,
    pub metrics: MetricsSection,
}

impl ExperimentConfig {
    /// Desk-scale preset: a laptop-sized run of the full protocol.
    pub fn desk_preset() -> Self {
        ExperimentConfig {
            version: CONFIG_VERSION,
            seed: 7,
            out_dir: PathBuf::from("runs/desk"),
            corpus: CorpusSection {
                n_speakers: 8,
                utts_per_speaker: 30,
                duration_s: 1.0,
                n_attack_pairs: 50,
            },
            asv: AsvSection {
                steps: 600,
                batch_pairs: 6,
                lr: 0.01,
                margin: 0.2,
                c1: 8,
                c2: 8,
                substitute_c1: 12,
                substitute_c2: 12,
            },
            attack: AttackSection {
                bim_n: vec![5, 10, 20, 50],
                pgd_n: vec![5, 10, 20, 50],
                cw_kappa: vec![0.0, 0.2, 0.4],
                cw_steps: 100,
                cw_binary_search: 9,
                black_box: false,
                adaptive: false,
            },
            detector: DetectorSection {
                lmd_steps: 3000,
                lmd_batch: 8,
                lmd_lr: 0.002,
                lmd_hidden: 8,
                lambda_s: 1.0,
                lambda_b: 15.0,
                margin: 0.05,
                crop_frames: 100,
                mcs_search_iters: 12,
                mcs_search_batch: 8,
                mcs_search_runs: 3,
            },
            metrics: MetricsSection {
                far_grid: vec![0.01, 0.05, 0.10],
                snr_budgets: vec![-10.0, 0.0, 10.0, 20.0, 30.0, 40.0],
            },
        }
    }

    /// A heavily shrunk preset for tests: same structure, minutes → seconds.
    pub fn tiny_preset() -> Self {
        let mut cfg = Self::desk_preset();
        cfg.corpus = CorpusSection {
            n_speakers: 4,
            utts_per_speaker: 6,
            duration_s: 0.5,
            n_attack_pairs: 3,
        };
        cfg.asv.steps = 20;
        cfg.asv.c1 = 8;
        cfg.asv.c2 = 8;
        cfg.asv.substitute_c1 = 6;
        cfg.asv.substitute_c2 = 6;
        cfg.attack.bim_n = vec![1, 2];
        cfg.attack.pgd_n = vec![1];
        cfg.attack.cw_kappa = vec![0.0];
        cfg.attack.cw_steps = 5;
        cfg.attack.cw_binary_search = 2;
        cfg.detector.lmd_steps = 4;
        cfg.detector.lmd_batch = 2;
        cfg.detector.lmd_hidden = 3;
        cfg.detector.crop_frames = 20;
        cfg.detector.mcs_search_iters = 3;
        cfg.detector.mcs_search_batch = 2;
        cfg.detector.mcs_search_runs = 2;
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        if cfg.version != CONFIG_VERSION {
            return Err(ConfigError::Version { found: cfg.version });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.corpus.n_speakers < 4 {
            return bad(format!("n_speakers {} < 4", self.corpus.n_speakers));
        }
        if self.corpus.utts_per_speaker < 3 {
            return bad(format!("utts_per_speaker {} < 3", self.corpus.utts_per_speaker));
        }
        if self.attack.bim_n.is_empty() && self.attack.pgd_n.is_empty() && self.attack.cw_kappa.is_empty() {
            return bad("all attack grids are empty".into());
        }
        for &f in &self.metrics.far_grid {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("far_grid entry {f} outside [0, 1]"));
            }
        }
        if self.detector.mcs_search_runs == 0 {
            return bad("mcs_search_runs must be >= 1".into());
        }
        Ok(())
    }

    /// Named seed derivation: every stochastic step draws from the root seed
    /// plus a stage name and index, so any stage is reproducible in
    /// isolation.
    pub fn stage_seed(&self, stage: &str, index: u64) -> u64 {
        derive_named_seed(self.seed, stage, index)
    }
}

pub fn derive_named_seed(root: u64, stage: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
