//! Backbone replacement: the frozen adapter on the many-step teacher versus
//! the same adapter transplanted onto the few-step student.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::build::Artifacts;
use super::config::{prompt_for, ArmConfig, ExperimentConfig};
use super::eval::{eval_seed, write_csv, CellRow, EvalContext};
use crate::backbone::{sample, FlowBackbone, SampleRequest};
use crate::distill::pixel_mse;
use crate::error::{Error, Result};
use crate::faces::{PromptTransform, TransformKind};
use crate::pool::parallel_map;
use crate::probes::{evaluate_cell, median, CellSpec};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub steps: usize,
    pub guidance: f64,
    pub n_samples: usize,
    pub mean_idsim: f64,
    pub mean_lpips_like: f64,
    pub median_latency_s: f64,
    pub encoder_sha: String,
    pub backbone_sha: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub prompt: String,
    pub n_samples: usize,
    pub baseline_idsim: f64,
    pub replacement_idsim: f64,
    pub gain: f64,
    pub encoder_sha: String,
    pub baseline_sha: String,
    pub backbone_sha: String,
}

/// Paired comparison of few-step samplers against the many-step teacher
/// output from the same noise, without the adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillCheck {
    pub sampler: String,
    pub steps: usize,
    pub guidance: f64,
    pub n_seeds: usize,
    pub mean_pixel_mse: f64,
    pub mean_lpips_like: f64,
    pub encoder_sha: String,
    pub backbone_sha: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplacementReport {
    pub baseline: ArmSummary,
    pub replacement: ArmSummary,
    pub diagnostic: ArmSummary,
    pub idsim_delta: f64,
    pub lpips_delta: f64,
    pub speedup: f64,
    pub per_prompt: Vec<PromptRow>,
    pub distill: Vec<DistillCheck>,
}

impl ReplacementReport {
    /// Student mean identity similarity as a fraction of the teacher's.
    pub fn idsim_ratio(&self) -> f64 {
        self.replacement.mean_idsim / self.baseline.mean_idsim
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arm            steps  guidance  n    idsim   lpips_like  latency_s");
        for a in [&self.baseline, &self.replacement, &self.diagnostic] {
            let _ = writeln!(
                s,
                "{:<14} {:>5}  {:>8.1}  {:<3}  {:.4}  {:.4}      {:.5}",
                a.arm, a.steps, a.guidance, a.n_samples, a.mean_idsim, a.mean_lpips_like, a.median_latency_s
            );
        }
        let _ = writeln!(
            s,
            "\nidsim delta {:+.4} (ratio {:.3}), lpips_like delta {:+.4}, speedup {:.2}x",
            self.idsim_delta,
            self.idsim_ratio(),
            self.lpips_delta,
            self.speedup
        );
        let _ = writeln!(s, "\nprompt       baseline  replacement  gain");
        for p in &self.per_prompt {
            let _ = writeln!(
                s,
                "{:<12} {:.4}    {:.4}       {:+.4}",
                p.prompt, p.baseline_idsim, p.replacement_idsim, p.gain
            );
        }
        let _ = writeln!(s, "\nfew-step sampler vs many-step teacher (no adapter)");
        for d in &self.distill {
            let _ = writeln!(
                s,
                "{:<10} T={} g={:.1}: pixel mse {:.5}, lpips_like {:.5}",
                d.sampler, d.steps, d.guidance, d.mean_pixel_mse, d.mean_lpips_like
            );
        }
        s
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

fn summarize(arm: &str, cfg: ArmConfig, rows: &[CellRow], encoder_sha: &str, backbone_sha: &str) -> ArmSummary {
    let mut lat: Vec<f64> = rows.iter().map(|r| r.latency_s).collect();
    ArmSummary {
        arm: arm.to_string(),
        steps: cfg.steps,
        guidance: cfg.guidance,
        n_samples: rows.len(),
        mean_idsim: mean(rows.iter().map(|r| r.idsim)),
        mean_lpips_like: mean(rows.iter().map(|r| r.lpips_like)),
        median_latency_s: median(&mut lat),
        encoder_sha: encoder_sha.to_string(),
        backbone_sha: backbone_sha.to_string(),
    }
}

/// Evaluates one backbone with the frozen adapter at alpha 1 over
/// identities x prompts. Rows are ordered by identity, then prompt.
pub(crate) fn eval_arm(
    ctx: &EvalContext,
    cfg: &ExperimentConfig,
    arm: &str,
    backbone: &FlowBackbone,
    setting: ArmConfig,
    identities: &[u32],
    prompts: &[TransformKind],
) -> Result<Vec<CellRow>> {
    let backbone_sha = ctx.backbone_sha(backbone);
    let bound = ctx.bind(backbone, &backbone_sha)?;
    let models = ctx.models(backbone, bound);
    models.check_frozen()?;
    let transforms: Vec<PromptTransform> = prompts
        .iter()
        .map(|&k| prompt_for(k, cfg.dataset.strength))
        .collect::<Result<_>>()?;
    let per_identity = parallel_map(identities.len(), cfg.worker_threads(), |i| {
        let id = identities[i];
        transforms
            .iter()
            .map(|&prompt| {
                let spec = CellSpec {
                    identity_id: id,
                    reference: &ctx.references[id as usize],
                    reference_embedding: &ctx.embeddings[id as usize],
                    prompt,
                    steps: setting.steps,
                    guidance: setting.guidance,
                    alpha: 1.0,
                    seed: eval_seed(cfg.master_seed, id, prompt.kind),
                };
                let (cell, _) = evaluate_cell(&models, &spec)?;
                Ok(CellRow::new(arm, &cell, &ctx.encoder_sha, &backbone_sha))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_identity.into_iter().flatten().collect())
}

fn distill_checks(ctx: &EvalContext, cfg: &ExperimentConfig) -> Result<Vec<DistillCheck>> {
    let art = &ctx.art;
    let r = &cfg.replacement;
    let n = r.distill_check_seeds;
    let samplers: [(&str, &FlowBackbone, ArmConfig); 3] = [
        ("teacher", &art.teacher, r.diagnostic),
        ("reflow", &art.reflow, r.student),
        ("student", &art.student, r.student),
    ];
    let outputs = parallel_map(n, cfg.worker_threads(), |i| {
        let seed = rng::derive_seed(cfg.master_seed, "distill-check", &[i as u64]);
        let kind = TransformKind::ALL[i % TransformKind::ALL.len()];
        let prompt = prompt_for(kind, cfg.dataset.strength)?;
        let run = |b: &FlowBackbone, arm: ArmConfig| {
            sample(
                b,
                &SampleRequest {
                    steps: arm.steps,
                    guidance: arm.guidance,
                    prompt,
                    adapter: None,
                    seed,
                    capture_streams: false,
                },
            )
            .map(|s| s.image)
        };
        let target = run(&art.teacher, r.teacher)?;
        samplers
            .iter()
            .map(|(_, b, arm)| {
                let img = run(b, *arm)?;
                Ok((
                    pixel_mse(img.data(), target.data()),
                    art.encoder.perceptual_distance(&img, &target)?,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(samplers
        .iter()
        .enumerate()
        .map(|(k, (name, b, arm))| DistillCheck {
            sampler: name.to_string(),
            steps: arm.steps,
            guidance: arm.guidance,
            n_seeds: n,
            mean_pixel_mse: mean(outputs.iter().map(|o| o[k].0)),
            mean_lpips_like: mean(outputs.iter().map(|o| o[k].1)),
            encoder_sha: ctx.encoder_sha.clone(),
            backbone_sha: ctx.backbone_sha(b),
        })
        .collect())
}

/// Runs both arms plus the diagnostic arm and the distillation check, and
/// writes `replacement/{summary,per_identity,per_prompt,distill_check}.csv`.
pub fn cmd_replacement(cfg: &ExperimentConfig) -> Result<ReplacementReport> {
    let ctx = EvalContext::new(Artifacts::load(cfg)?)?;
    let adapter_before = ctx.art.adapter.checksum();
    let r = &cfg.replacement;
    let ids: Vec<u32> = (0..cfg.dataset.n_identities as u32).collect();
    let prompts = &cfg.dataset.transforms;

    let base_rows = eval_arm(&ctx, cfg, "teacher", &ctx.art.teacher, r.teacher, &ids, prompts)?;
    let ours_rows = eval_arm(&ctx, cfg, "student", &ctx.art.student, r.student, &ids, prompts)?;
    let diag_ids: Vec<u32> = (0..r.diagnostic_identities as u32).collect();
    let diag_rows = eval_arm(
        &ctx,
        cfg,
        "teacher_few_step",
        &ctx.art.teacher,
        r.diagnostic,
        &diag_ids,
        &[TransformKind::Plain],
    )?;
    let distill = distill_checks(&ctx, cfg)?;
    if ctx.art.adapter.checksum() != adapter_before {
        return Err(Error::contract("adapter parameters changed during evaluation"));
    }

    let baseline = summarize("teacher", r.teacher, &base_rows, &ctx.encoder_sha, &ctx.teacher_sha);
    let replacement = summarize("student", r.student, &ours_rows, &ctx.encoder_sha, &ctx.student_sha);
    let diagnostic = summarize("teacher_few_step", r.diagnostic, &diag_rows, &ctx.encoder_sha, &ctx.teacher_sha);
    if !(baseline.median_latency_s > 0.0 && replacement.median_latency_s > 0.0) {
        return Err(Error::contract("latency must be positive"));
    }
    let per_prompt = prompts
        .iter()
        .map(|k| {
            let name = k.to_string();
            let b = mean(base_rows.iter().filter(|r| r.prompt == name).map(|r| r.idsim));
            let o = mean(ours_rows.iter().filter(|r| r.prompt == name).map(|r| r.idsim));
            PromptRow {
                n_samples: ours_rows.iter().filter(|r| r.prompt == name).count(),
                prompt: name,
                baseline_idsim: b,
                replacement_idsim: o,
                gain: o - b,
                encoder_sha: ctx.encoder_sha.clone(),
                baseline_sha: ctx.teacher_sha.clone(),
                backbone_sha: ctx.student_sha.clone(),
            }
        })
        .collect();
    let report = ReplacementReport {
        idsim_delta: replacement.mean_idsim - baseline.mean_idsim,
        lpips_delta: replacement.mean_lpips_like - baseline.mean_lpips_like,
        speedup: baseline.median_latency_s / replacement.median_latency_s,
        baseline,
        replacement,
        diagnostic,
        per_prompt,
        distill,
    };

    let dir = cfg.out_dir.join("replacement");
    let rows: Vec<CellRow> = base_rows.into_iter().chain(ours_rows).chain(diag_rows).collect();
    write_csv(&rows, &dir.join("per_identity.csv"))?;
    write_csv(
        &[&report.baseline, &report.replacement, &report.diagnostic],
        &dir.join("summary.csv"),
    )?;
    write_csv(&report.per_prompt, &dir.join("per_prompt.csv"))?;
    write_csv(&report.distill, &dir.join("distill_check.csv"))?;
    write_text(&dir.join("report.txt"), &report.render())?;
    Ok(report)
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}
