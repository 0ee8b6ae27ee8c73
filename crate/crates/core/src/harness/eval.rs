//! Shared evaluation plumbing: seeds, per-sample rows and CSV helpers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::build::Artifacts;
use crate::adapter::{transfer, BoundAdapter};
use crate::backbone::FlowBackbone;
use crate::encoder::IdentityEmbedding;
use crate::error::Result;
use crate::faces::{reference_render, FaceImage, TransformKind};
use crate::probes::{CellResult, ProbeModels};
use crate::rng;

/// Initial-noise seed of an evaluation sample. Depends only on the identity
/// and prompt, so every command, step count and adapter scale that touches
/// the same (identity, prompt) starts from the same noise.
pub fn eval_seed(master_seed: u64, identity_id: u32, prompt: TransformKind) -> u64 {
    rng::derive_seed(
        master_seed,
        "eval",
        &[u64::from(identity_id), prompt.prompt_index() as u64],
    )
}

/// One evaluated sample, with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRow {
    pub arm: String,
    pub identity_id: u32,
    pub prompt: String,
    pub steps: usize,
    pub guidance: f64,
    pub alpha: f64,
    pub seed: u64,
    pub idsim: f64,
    pub det_conf: f64,
    pub sharpness: f64,
    pub contrast: f64,
    pub lpips_like: f64,
    pub stream_ratio: f64,
    pub latency_s: f64,
    pub encoder_sha: String,
    pub backbone_sha: String,
}

impl CellRow {
    pub fn new(arm: &str, c: &CellResult, encoder_sha: &str, backbone_sha: &str) -> Self {
        Self {
            arm: arm.to_string(),
            identity_id: c.identity_id,
            prompt: c.prompt.clone(),
            steps: c.steps,
            guidance: c.guidance,
            alpha: c.alpha,
            seed: c.seed,
            idsim: c.idsim,
            det_conf: c.det_conf,
            sharpness: c.sharpness,
            contrast: c.contrast,
            lpips_like: c.lpips_like,
            stream_ratio: c.stream_ratio,
            latency_s: c.latency_s,
            encoder_sha: encoder_sha.to_string(),
            backbone_sha: backbone_sha.to_string(),
        }
    }
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Loaded artifacts plus the per-identity references every command needs.
pub struct EvalContext {
    pub art: Artifacts,
    pub references: Vec<FaceImage>,
    pub embeddings: Vec<IdentityEmbedding>,
    pub encoder_sha: String,
    pub adapter_sha: String,
    pub teacher_sha: String,
    pub student_sha: String,
}

impl EvalContext {
    pub fn new(art: Artifacts) -> Result<Self> {
        let n = art.encoder.n_identities();
        let references: Vec<FaceImage> = (0..n as u32).map(reference_render).collect();
        let embeddings = references
            .iter()
            .map(|r| art.encoder.embed(r))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            encoder_sha: art.encoder.checksum(),
            adapter_sha: art.adapter.checksum(),
            teacher_sha: art.teacher.checksum(),
            student_sha: art.student.checksum(),
            references,
            embeddings,
            art,
        })
    }

    pub fn backbone_sha(&self, backbone: &FlowBackbone) -> String {
        if std::ptr::eq(backbone, &self.art.teacher) {
            self.teacher_sha.clone()
        } else if std::ptr::eq(backbone, &self.art.student) {
            self.student_sha.clone()
        } else {
            backbone.checksum()
        }
    }

    /// The frozen adapter bound to `backbone` through the transfer check.
    pub fn bind<'a>(&'a self, backbone: &'a FlowBackbone, backbone_sha: &'a str) -> Result<BoundAdapter<'a>> {
        transfer(&self.art.adapter, &self.adapter_sha, backbone, backbone_sha)
    }

    pub fn models<'a>(&'a self, backbone: &'a FlowBackbone, bound: BoundAdapter<'a>) -> ProbeModels<'a> {
        ProbeModels {
            backbone,
            adapter: Some(bound),
            encoder: &self.art.encoder,
        }
    }
}
