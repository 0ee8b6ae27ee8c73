//! Mechanistic step sweep on the stress prompt, with the pattern check and
//! SVG plots overlaying the published reference rows.

use std::fmt::Write as _;

use serde::Serialize;

use super::build::Artifacts;
use super::config::{prompt_for, ExperimentConfig};
use super::eval::{eval_seed, write_csv, CellRow, EvalContext};
use super::replacement::write_text;
use super::svg::{line_chart, Series};
use crate::error::{Error, Result};
use crate::faces::FaceImage;
use crate::encoder::IdentityEmbedding;
use crate::probes::{
    early_window, pattern_check, run_step_sweep, write_sweep_csv, EarlyWindow, PatternReport,
    PatternRow, ReferencePattern, SweepPlan, SweepRecord,
};

#[derive(Debug, Clone)]
pub struct MechSweepOutcome {
    pub records: Vec<SweepRecord>,
    pub cells: Vec<CellRow>,
    pub report: PatternReport,
    /// Early window at the configured threshold on the measured full-adapter curve.
    pub window: EarlyWindow,
}

impl MechSweepOutcome {
    pub fn phenomenon_present(&self) -> bool {
        self.report.all_passed()
    }
}

#[derive(Serialize)]
struct PredicateRow<'a> {
    predicate: &'a str,
    passed: bool,
    detail: &'a str,
    encoder_sha: &'a str,
    backbone_sha: &'a str,
}

/// Invariants that separate an implementation bug from an absent effect.
fn check_invariants(records: &[SweepRecord], cells: &[CellRow], n_subjects: usize) -> Result<()> {
    for r in records {
        if !r.lift_consistent() {
            return Err(Error::contract(format!("T={}: lift differs from idsim_full - idsim_weak", r.steps)));
        }
        if r.n_subjects != n_subjects {
            return Err(Error::contract(format!(
                "T={}: {} subjects, expected {n_subjects}",
                r.steps, r.n_subjects
            )));
        }
        let finite = [r.idsim_full, r.idsim_weak, r.stream_ratio, r.sharpness, r.contrast, r.det_conf, r.lpips_like];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("T={}: non-finite probe value", r.steps)));
        }
    }
    if let Some(bad) = cells.iter().find(|c| c.alpha == 0.0 && c.stream_ratio != 0.0) {
        return Err(Error::contract(format!(
            "identity {} T={}: stream ratio {} with the adapter disabled",
            bad.identity_id, bad.steps, bad.stream_ratio
        )));
    }
    Ok(())
}

fn plots(records: &[SweepRecord], reference: &ReferencePattern) -> [(&'static str, String); 3] {
    let ours = |f: fn(&SweepRecord) -> f64| records.iter().map(|r| (r.steps as f64, f(r))).collect::<Vec<_>>();
    let theirs = |f: fn(&PatternRow) -> Option<f64>| {
        reference
            .rows
            .iter()
            .filter_map(|r| f(r).map(|v| (r.steps as f64, v)))
            .collect::<Vec<_>>()
    };
    let idsim = line_chart(
        "Identity similarity vs steps",
        "steps T",
        "idsim (this run)",
        "idsim (reference)",
        &[
            Series::primary("alpha = 1", ours(|r| r.idsim_full)),
            Series::primary("alpha = 0.25", ours(|r| r.idsim_weak)),
            Series::secondary("reference alpha = 1", theirs(|r| Some(r.idsim_full))),
            Series::secondary("reference alpha = 0.25", theirs(|r| r.idsim_weak)),
        ],
    );
    let sharp = line_chart(
        "Sharpness vs steps",
        "steps T",
        "Laplacian variance (this run)",
        "Laplacian variance (reference)",
        &[
            Series::primary("this run", ours(|r| r.sharpness)),
            Series::secondary("reference", theirs(|r| Some(r.sharpness))),
        ],
    );
    let stream = line_chart(
        "Stream ratio vs steps",
        "steps T",
        "stream ratio (this run)",
        "stream ratio (reference)",
        &[
            Series::primary("this run", ours(|r| r.stream_ratio)),
            Series::secondary("reference", theirs(|r| Some(r.stream_ratio))),
        ],
    );
    [("idsim.svg", idsim), ("sharpness.svg", sharp), ("stream_ratio.svg", stream)]
}

pub fn render_pattern(report: &PatternReport, window: &EarlyWindow, theta: f64) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "peak idsim {:.4} at T={}; early window (theta {theta}) T*={} reaching {:.1}% of peak",
        report.peak_idsim,
        report.peak_steps,
        window.steps,
        100.0 * window.fraction
    );
    for p in &report.predicates {
        let _ = writeln!(s, "{} {}: {}", if p.passed { "PASS" } else { "FAIL" }, p.name, p.detail);
    }
    s
}

/// Sweeps the teacher over the step set with the stress prompt on the
/// stress-test identities, for every configured adapter scale.
pub fn cmd_mech_sweep(cfg: &ExperimentConfig) -> Result<MechSweepOutcome> {
    let ctx = EvalContext::new(Artifacts::load(cfg)?)?;
    let sw = &cfg.sweep;
    let ids: Vec<u32> = (0..sw.identities as u32).collect();
    let references: Vec<FaceImage> = ids.iter().map(|&i| ctx.references[i as usize].clone()).collect();
    let embeddings: Vec<IdentityEmbedding> = ids.iter().map(|&i| ctx.embeddings[i as usize].clone()).collect();
    let seeds: Vec<u64> = ids.iter().map(|&i| eval_seed(cfg.master_seed, i, sw.prompt)).collect();
    let teacher = &ctx.art.teacher;
    let bound = ctx.bind(teacher, &ctx.teacher_sha)?;
    let models = ctx.models(teacher, bound);
    let plan = SweepPlan {
        identities: &ids,
        references: &references,
        reference_embeddings: &embeddings,
        prompt: prompt_for(sw.prompt, cfg.dataset.strength)?,
        steps_list: &sw.steps_list,
        alphas: &sw.alphas,
        guidance: sw.guidance,
        seeds: &seeds,
        threads: cfg.worker_threads(),
    };
    let (records, raw_cells) = run_step_sweep(&models, &plan)?;
    let cells: Vec<CellRow> = raw_cells
        .iter()
        .map(|c| CellRow::new("teacher", c, &ctx.encoder_sha, &ctx.teacher_sha))
        .collect();
    check_invariants(&records, &cells, ids.len())?;

    let reference = ReferencePattern::published();
    let rows: Vec<PatternRow> = records.iter().map(PatternRow::from).collect();
    let report = pattern_check(&rows, &reference)?;
    let curve: Vec<(usize, f64)> = records.iter().map(|r| (r.steps, r.idsim_full)).collect();
    let window = early_window(&curve, sw.theta)?;

    let dir = cfg.out_dir.join("mech_sweep");
    std::fs::create_dir_all(&dir)?;
    write_sweep_csv(&records, &dir.join("sweep.csv"))?;
    write_csv(&cells, &dir.join("cells.csv"))?;
    let pred_rows: Vec<PredicateRow<'_>> = report
        .predicates
        .iter()
        .map(|p| PredicateRow {
            predicate: p.name,
            passed: p.passed,
            detail: &p.detail,
            encoder_sha: &ctx.encoder_sha,
            backbone_sha: &ctx.teacher_sha,
        })
        .collect();
    write_csv(&pred_rows, &dir.join("pattern.csv"))?;
    write_text(&dir.join("pattern.txt"), &render_pattern(&report, &window, sw.theta))?;
    for (name, svg) in plots(&records, &reference) {
        write_text(&dir.join(name), &svg)?;
    }
    Ok(MechSweepOutcome {
        records,
        cells,
        report,
        window,
    })
}
