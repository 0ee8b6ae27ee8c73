//! Artifact pipeline: dataset, encoder, teacher, adapter, reflow, student.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use super::config::{stage_hash, ExperimentConfig};
use crate::adapter::{train_adapter, AdapterStack};
use crate::backbone::{train_teacher, FlowBackbone};
use crate::distill::{distill_endpoint, make_couplings, reflow, CouplingConfig, CouplingTable};
use crate::encoder::{train_encoder, EncoderModel};
use crate::error::{Error, Result};
use crate::faces::{export_dataset, make_dataset, DatasetItem};

pub const STAGES: [&str; 6] = ["dataset", "encoder", "teacher", "adapter", "reflow", "student"];
const HASH_KEY: &str = "config_hash";
const TRAIN_SPLIT: u64 = 0;
const HELDOUT_SPLIT: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Built,
    Skipped,
}

#[derive(Debug, Clone)]
pub struct StageReport {
    pub stage: &'static str,
    pub status: StageStatus,
    pub seconds: f64,
    pub detail: String,
}

/// On-disk locations of every artifact under an output directory.
#[derive(Debug, Clone)]
pub struct ArtifactPaths {
    pub dataset: PathBuf,
    pub encoder: PathBuf,
    pub teacher: PathBuf,
    pub adapter: PathBuf,
    pub reflow: PathBuf,
    pub student: PathBuf,
}

impl ArtifactPaths {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            dataset: out_dir.join("dataset"),
            encoder: out_dir.join("encoder.fpv"),
            teacher: out_dir.join("teacher.fpv"),
            adapter: out_dir.join("adapter.fpv"),
            reflow: out_dir.join("reflow.fpv"),
            student: out_dir.join("student.fpv"),
        }
    }

    pub fn all(&self) -> [&Path; 6] {
        [
            &self.dataset,
            &self.encoder,
            &self.teacher,
            &self.adapter,
            &self.reflow,
            &self.student,
        ]
    }
}

/// Fingerprints of every stage under a config.
#[derive(Debug, Clone, PartialEq)]
pub struct StageHashes {
    pub dataset: String,
    pub encoder: String,
    pub teacher: String,
    pub adapter: String,
    pub reflow: String,
    pub student: String,
}

impl StageHashes {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        #[derive(Serialize)]
        struct DatasetKey<'a> {
            master_seed: u64,
            dataset: &'a super::config::DatasetConfig,
        }
        #[derive(Serialize)]
        struct ReflowKey<'a> {
            couplings: CouplingConfig,
            reflow: &'a crate::backbone::FlowTrainConfig,
        }
        let dataset = stage_hash(
            "dataset",
            &[],
            &DatasetKey {
                master_seed: cfg.master_seed,
                dataset: &cfg.dataset,
            },
        );
        let encoder = stage_hash("encoder", &[&dataset], &cfg.encoder);
        let teacher = stage_hash("teacher", &[&dataset], &(&cfg.arch, &cfg.teacher));
        let adapter = stage_hash("adapter", &[&dataset, &encoder, &teacher], &cfg.adapter);
        let reflow = stage_hash(
            "reflow",
            &[&teacher],
            &ReflowKey {
                couplings: coupling_config(cfg),
                reflow: &cfg.reflow,
            },
        );
        let student = stage_hash("student", &[&reflow], &cfg.distill);
        Self {
            dataset,
            encoder,
            teacher,
            adapter,
            reflow,
            student,
        }
    }
}

/// Seed of a training stage: the master seed mixed with the stage's own seed.
fn stage_seed(cfg: &ExperimentConfig, stage: &str, own: u64) -> u64 {
    crate::rng::derive_seed(cfg.master_seed, stage, &[own])
}

fn coupling_config(cfg: &ExperimentConfig) -> CouplingConfig {
    CouplingConfig {
        seed: stage_seed(cfg, "couplings", cfg.couplings.seed),
        ..cfg.couplings.clone()
    }
}

/// Training and held-out images, regenerated deterministically from the config.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Vec<DatasetItem>, Vec<DatasetItem>)> {
    let d = &cfg.dataset;
    let transforms = d.prompt_transforms()?;
    let train = make_dataset(d.n_identities, d.train_samples, &transforms, cfg.master_seed, TRAIN_SPLIT)?;
    let heldout = make_dataset(d.n_identities, d.heldout_samples, &transforms, cfg.master_seed, HELDOUT_SPLIT)?;
    Ok((train, heldout))
}

/// Frozen models loaded from a built output directory.
pub struct Artifacts {
    pub paths: ArtifactPaths,
    pub encoder: EncoderModel,
    pub teacher: FlowBackbone,
    pub adapter: AdapterStack,
    pub reflow: FlowBackbone,
    pub student: FlowBackbone,
}

impl Artifacts {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let paths = ArtifactPaths::new(&cfg.out_dir);
        let hashes = StageHashes::new(cfg);
        for p in paths.all() {
            if !p.exists() {
                return Err(Error::MissingArtifact(p.to_path_buf()));
            }
        }
        let check = |stage: &str, path: &Path, meta: &BTreeMap<String, String>, want: &str| {
            if meta.get(HASH_KEY).map(String::as_str) != Some(want) {
                return Err(Error::Config(format!(
                    "{} ({stage}) was built with a different config; rerun build",
                    path.display()
                )));
            }
            Ok(())
        };
        let (encoder, m) = EncoderModel::load(&paths.encoder)?;
        check("encoder", &paths.encoder, &m, &hashes.encoder)?;
        let (teacher, m) = FlowBackbone::load(&paths.teacher)?;
        check("teacher", &paths.teacher, &m, &hashes.teacher)?;
        let (adapter, m) = AdapterStack::load(&paths.adapter)?;
        check("adapter", &paths.adapter, &m, &hashes.adapter)?;
        let (reflow, m) = FlowBackbone::load(&paths.reflow)?;
        check("reflow", &paths.reflow, &m, &hashes.reflow)?;
        let (student, m) = FlowBackbone::load(&paths.student)?;
        check("student", &paths.student, &m, &hashes.student)?;
        Ok(Self {
            paths,
            encoder,
            teacher,
            adapter,
            reflow,
            student,
        })
    }
}

/// Loads a checkpoint if it exists with the expected stage hash.
/// A file that exists but fails its integrity check is an error, not a rebuild.
fn reuse<T>(
    path: &Path,
    want: &str,
    load: impl FnOnce(&Path) -> Result<(T, BTreeMap<String, String>)>,
) -> Result<Option<T>> {
    if !path.exists() {
        return Ok(None);
    }
    let (model, meta) = load(path)?;
    Ok((meta.get(HASH_KEY).map(String::as_str) == Some(want)).then_some(model))
}

fn hash_meta(hash: &str) -> BTreeMap<String, String> {
    BTreeMap::from([(HASH_KEY.to_string(), hash.to_string())])
}

fn log(quiet: bool, msg: &str) {
    if !quiet {
        eprintln!("[build] {msg}");
    }
}

/// Runs every stage in order, skipping stages whose artifact already matches
/// the config. Failures are reported with the stage name.
pub fn cmd_build_all(cfg: &ExperimentConfig, quiet: bool) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let paths = ArtifactPaths::new(&cfg.out_dir);
    let hashes = StageHashes::new(cfg);
    let mut reports = Vec::new();
    let mut record = |stage: &'static str, status, started: Instant, detail: String| {
        let seconds = started.elapsed().as_secs_f64();
        let verb = if status == StageStatus::Built { "built" } else { "up to date" };
        log(quiet, &format!("{stage}: {verb} in {seconds:.1}s {detail}"));
        reports.push(StageReport {
            stage,
            status,
            seconds,
            detail,
        });
    };

    let started = Instant::now();
    let (train, heldout) = datasets(cfg).map_err(Error::in_stage("dataset"))?;
    let marker = paths.dataset.join("stage.hash");
    let dataset_current = std::fs::read_to_string(&marker).ok().as_deref() == Some(hashes.dataset.as_str());
    if dataset_current {
        record("dataset", StageStatus::Skipped, started, String::new());
    } else {
        (|| -> Result<()> {
            if paths.dataset.exists() {
                std::fs::remove_dir_all(&paths.dataset)?;
            }
            export_dataset(&train, &paths.dataset.join("train"))?;
            export_dataset(&heldout, &paths.dataset.join("heldout"))?;
            std::fs::write(&marker, &hashes.dataset)?;
            Ok(())
        })()
        .map_err(Error::in_stage("dataset"))?;
        record(
            "dataset",
            StageStatus::Built,
            started,
            format!("({} train, {} held-out images)", train.len(), heldout.len()),
        );
    }

    let started = Instant::now();
    let encoder = match reuse(&paths.encoder, &hashes.encoder, EncoderModel::load)
        .map_err(Error::in_stage("encoder"))?
    {
        Some(m) => {
            record("encoder", StageStatus::Skipped, started, String::new());
            m
        }
        None => {
            let enc_cfg = crate::encoder::EncoderTrainConfig {
                seed: stage_seed(cfg, "encoder", cfg.encoder.seed),
                ..cfg.encoder.clone()
            };
            let m = train_encoder(&train, &heldout, cfg.dataset.n_identities, &enc_cfg)
                .map_err(Error::in_stage("encoder"))?;
            m.save(&paths.encoder, &hash_meta(&hashes.encoder))
                .map_err(Error::in_stage("encoder"))?;
            record(
                "encoder",
                StageStatus::Built,
                started,
                format!("(held-out accuracy {:.3})", m.heldout_accuracy()),
            );
            m
        }
    };

    let started = Instant::now();
    let teacher = match reuse(&paths.teacher, &hashes.teacher, FlowBackbone::load)
        .map_err(Error::in_stage("teacher"))?
    {
        Some(m) => {
            record("teacher", StageStatus::Skipped, started, String::new());
            m
        }
        None => {
            let t_cfg = crate::backbone::FlowTrainConfig {
                seed: stage_seed(cfg, "teacher", cfg.teacher.seed),
                ..cfg.teacher.clone()
            };
            let (m, rep) = train_teacher(&train, &cfg.arch, &t_cfg).map_err(Error::in_stage("teacher"))?;
            m.save(&paths.teacher, &hash_meta(&hashes.teacher))
                .map_err(Error::in_stage("teacher"))?;
            record(
                "teacher",
                StageStatus::Built,
                started,
                format!("(loss {:.4} -> {:.4})", rep.initial_loss, rep.final_loss),
            );
            m
        }
    };

    let started = Instant::now();
    if reuse(&paths.adapter, &hashes.adapter, AdapterStack::load)
        .map_err(Error::in_stage("adapter"))?
        .is_some()
    {
        record("adapter", StageStatus::Skipped, started, String::new());
    } else {
        let a_cfg = crate::adapter::AdapterTrainConfig {
            seed: stage_seed(cfg, "adapter", cfg.adapter.seed),
            ..cfg.adapter.clone()
        };
        let a = train_adapter(&teacher, &encoder, &train, &a_cfg).map_err(Error::in_stage("adapter"))?;
        a.save(&paths.adapter, &hash_meta(&hashes.adapter))
            .map_err(Error::in_stage("adapter"))?;
        record("adapter", StageStatus::Built, started, String::new());
    }

    let mut couplings: Option<CouplingTable> = None;
    let mut get_couplings = |quiet: bool| -> Result<CouplingTable> {
        if let Some(c) = &couplings {
            return Ok(c.clone());
        }
        let started = Instant::now();
        let c = make_couplings(&teacher, &coupling_config(cfg))?;
        log(
            quiet,
            &format!("couplings: {} pairs in {:.1}s", c.len(), started.elapsed().as_secs_f64()),
        );
        couplings = Some(c.clone());
        Ok(c)
    };

    let started = Instant::now();
    let reflowed = match reuse(&paths.reflow, &hashes.reflow, FlowBackbone::load)
        .map_err(Error::in_stage("reflow"))?
    {
        Some(m) => {
            record("reflow", StageStatus::Skipped, started, String::new());
            m
        }
        None => {
            let cpl = get_couplings(quiet).map_err(Error::in_stage("reflow"))?;
            let r_cfg = crate::backbone::FlowTrainConfig {
                seed: stage_seed(cfg, "reflow", cfg.reflow.seed),
                ..cfg.reflow.clone()
            };
            let (m, rep) = reflow(&teacher, &cpl, &r_cfg).map_err(Error::in_stage("reflow"))?;
            m.save(&paths.reflow, &hash_meta(&hashes.reflow))
                .map_err(Error::in_stage("reflow"))?;
            record(
                "reflow",
                StageStatus::Built,
                started,
                format!("(loss {:.4} -> {:.4})", rep.initial_loss, rep.final_loss),
            );
            m
        }
    };

    let started = Instant::now();
    if reuse(&paths.student, &hashes.student, FlowBackbone::load)
        .map_err(Error::in_stage("student"))?
        .is_some()
    {
        record("student", StageStatus::Skipped, started, String::new());
    } else {
        let cpl = get_couplings(quiet).map_err(Error::in_stage("student"))?;
        let d_cfg = crate::distill::DistillConfig {
            seed: stage_seed(cfg, "student", cfg.distill.seed),
            ..cfg.distill.clone()
        };
        let (m, rep) =
            distill_endpoint(&reflowed, &teacher, &cpl, &d_cfg).map_err(Error::in_stage("student"))?;
        m.save(&paths.student, &hash_meta(&hashes.student))
            .map_err(Error::in_stage("student"))?;
        record(
            "student",
            StageStatus::Built,
            started,
            format!("(endpoint loss {:.4} -> {:.4})", rep.initial_loss, rep.final_loss),
        );
    }
    Ok(reports)
}
