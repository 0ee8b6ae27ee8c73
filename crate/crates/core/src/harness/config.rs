//! Experiment configuration. Every field has a default, so an empty TOML file
//! is a valid config describing the standard run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::{AdapterTrainConfig, WEAK_ALPHA};
use crate::backbone::{
    BackboneArch, FlowTrainConfig, STUDENT_GUIDANCE, STUDENT_STEPS, TEACHER_GUIDANCE,
    TEACHER_STEPS,
};
use crate::distill::{CouplingConfig, DistillConfig};
use crate::encoder::EncoderTrainConfig;
use crate::error::{Error, Result};
use crate::faces::{PromptTransform, TransformKind};
use crate::probes::DEFAULT_STEPS;

pub const THREADS_ENV: &str = "FLOWPROBE_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_identities: usize,
    pub transforms: Vec<TransformKind>,
    /// Strength of the Background and Stylized transforms.
    pub strength: f64,
    pub train_samples: usize,
    pub heldout_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_identities: 28,
            transforms: TransformKind::ALL.to_vec(),
            strength: 0.8,
            train_samples: 8,
            heldout_samples: 2,
        }
    }
}

impl DatasetConfig {
    pub fn prompt_transforms(&self) -> Result<Vec<PromptTransform>> {
        self.transforms
            .iter()
            .map(|&k| prompt_for(k, self.strength))
            .collect()
    }
}

/// The transform a prompt kind applies, at the configured strength.
pub fn prompt_for(kind: TransformKind, strength: f64) -> Result<PromptTransform> {
    match kind {
        TransformKind::Plain => Ok(PromptTransform::plain()),
        k => PromptTransform::new(k, strength),
    }
}

/// A backbone evaluation setting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub steps: usize,
    pub guidance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplacementConfig {
    pub teacher: ArmConfig,
    pub student: ArmConfig,
    /// Teacher run at the student's step budget, on a smaller Plain-only subset.
    pub diagnostic: ArmConfig,
    pub diagnostic_identities: usize,
    pub distill_check_seeds: usize,
}

impl Default for ReplacementConfig {
    fn default() -> Self {
        Self {
            teacher: ArmConfig {
                steps: TEACHER_STEPS,
                guidance: TEACHER_GUIDANCE,
            },
            student: ArmConfig {
                steps: STUDENT_STEPS,
                guidance: STUDENT_GUIDANCE,
            },
            diagnostic: ArmConfig {
                steps: STUDENT_STEPS,
                guidance: TEACHER_GUIDANCE,
            },
            diagnostic_identities: 10,
            distill_check_seeds: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub identities: usize,
    pub prompt: TransformKind,
    pub steps_list: Vec<usize>,
    /// Full adapter first, weak adapter second; further entries are extra arms.
    pub alphas: Vec<f64>,
    pub guidance: f64,
    pub theta: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            prompt: TransformKind::Stylized,
            steps_list: DEFAULT_STEPS.to_vec(),
            alphas: vec![1.0, WEAK_ALPHA, 0.0],
            guidance: TEACHER_GUIDANCE,
            theta: crate::probes::DEFAULT_THETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub prompts: Vec<TransformKind>,
    pub alphas: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            prompts: TransformKind::ALL.to_vec(),
            alphas: vec![0.25, 0.5, 1.0, 1.5, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads for per-identity sampling; `None` defers to the
    /// environment and then to 1.
    pub threads: Option<usize>,
    pub dataset: DatasetConfig,
    pub encoder: EncoderTrainConfig,
    pub arch: BackboneArch,
    pub teacher: FlowTrainConfig,
    pub adapter: AdapterTrainConfig,
    pub couplings: CouplingConfig,
    pub reflow: FlowTrainConfig,
    pub distill: DistillConfig,
    pub replacement: ReplacementConfig,
    pub sweep: SweepConfig,
    pub ablations: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            out_dir: PathBuf::from("flowprobe-out"),
            threads: None,
            dataset: DatasetConfig::default(),
            encoder: EncoderTrainConfig::default(),
            arch: BackboneArch::default(),
            teacher: FlowTrainConfig::default(),
            adapter: AdapterTrainConfig::default(),
            couplings: CouplingConfig::default(),
            reflow: FlowTrainConfig {
                epochs: 12,
                lr: 2e-4,
                ..FlowTrainConfig::default()
            },
            distill: DistillConfig::default(),
            replacement: ReplacementConfig::default(),
            sweep: SweepConfig::default(),
            ablations: AblationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolved worker count: config, then `FLOWPROBE_THREADS`, then 1.
    pub fn worker_threads(&self) -> usize {
        self.threads
            .or_else(|| std::env::var(THREADS_ENV).ok()?.parse().ok())
            .unwrap_or(1)
            .max(1)
    }

    /// Scales the identity counts, keeping at least two identities.
    pub fn scale_identities(&mut self, factor: f64) -> Result<()> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(Error::Config(format!("id scale must be positive, got {factor}")));
        }
        let scale = |n: usize| ((n as f64 * factor).round() as usize).max(2);
        self.dataset.n_identities = scale(self.dataset.n_identities);
        self.sweep.identities = scale(self.sweep.identities);
        self.replacement.diagnostic_identities = scale(self.replacement.diagnostic_identities);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dataset.n_identities < 2 {
            return bad("dataset.n_identities must be at least 2".into());
        }
        if self.dataset.transforms.is_empty() {
            return bad("dataset.transforms is empty".into());
        }
        if !(0.0..=1.0).contains(&self.dataset.strength) {
            return bad(format!("dataset.strength {} outside [0, 1]", self.dataset.strength));
        }
        if self.sweep.identities > self.dataset.n_identities
            || self.replacement.diagnostic_identities > self.dataset.n_identities
        {
            return bad("evaluation subsets exceed dataset.n_identities".into());
        }
        if !(self.sweep.theta > 0.0 && self.sweep.theta <= 1.0) {
            return bad(format!("sweep.theta {} outside (0, 1]", self.sweep.theta));
        }
        if self.sweep.alphas.len() < 2 {
            return bad("sweep.alphas needs the full and the weak scale".into());
        }
        if self.sweep.steps_list.is_empty()
            || self.sweep.steps_list.contains(&0)
            || self.sweep.steps_list.windows(2).any(|w| w[1] <= w[0])
        {
            return bad("sweep.steps_list must be positive and strictly increasing".into());
        }
        for arm in [
            &self.replacement.teacher,
            &self.replacement.student,
            &self.replacement.diagnostic,
        ] {
            if arm.steps == 0 || arm.guidance < 0.0 {
                return bad(format!("invalid arm {arm:?}"));
            }
        }
        Ok(())
    }
}

/// Stage fingerprint: the crate version, the stage name, the upstream
/// fingerprints and the stage's own settings.
pub fn stage_hash<T: Serialize>(stage: &str, upstream: &[&str], settings: &T) -> String {
    #[derive(Serialize)]
    struct Fingerprint<'a, T> {
        version: &'a str,
        stage: &'a str,
        upstream: &'a [&'a str],
        settings: &'a T,
    }
    let text = toml::to_string(&Fingerprint {
        version: env!("CARGO_PKG_VERSION"),
        stage,
        upstream,
        settings,
    })
    .expect("stage settings serialize");
    hex::encode(Sha256::digest(text.as_bytes()))
}
