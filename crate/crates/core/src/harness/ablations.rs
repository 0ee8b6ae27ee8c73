//! Prompt-complexity and adapter-scale grids over the step set.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::build::Artifacts;
use super::config::{prompt_for, ExperimentConfig};
use super::eval::{eval_seed, write_csv, CellRow, EvalContext};
use super::replacement::write_text;
use crate::error::Result;
use crate::faces::TransformKind;
use crate::pool::parallel_map;
use crate::probes::{evaluate_cell, CellSpec};

/// A matrix of mean identity similarity: one row per setting, one column per step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub row_label: &'static str,
    pub rows: Vec<String>,
    pub steps: Vec<usize>,
    pub values: Vec<Vec<f64>>,
}

impl Grid {
    pub fn row(&self, name: &str) -> Option<&[f64]> {
        self.rows.iter().position(|r| r == name).map(|i| self.values[i].as_slice())
    }

    pub fn peak(&self, name: &str) -> Option<f64> {
        self.row(name)
            .map(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
    }

    fn write(&self, path: &std::path::Path, encoder_sha: &str, backbone_sha: &str) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![self.row_label.to_string()];
        header.extend(self.steps.iter().map(|t| format!("T{t}")));
        header.extend(["encoder_sha".to_string(), "backbone_sha".to_string()]);
        w.write_record(&header)?;
        for (name, vals) in self.rows.iter().zip(&self.values) {
            let mut rec = vec![name.clone()];
            rec.extend(vals.iter().map(|v| v.to_string()));
            rec.extend([encoder_sha.to_string(), backbone_sha.to_string()]);
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub prompt_grid: Grid,
    pub alpha_grid: Grid,
    pub cells: Vec<CellRow>,
    /// Stylized peak below Plain peak, as the style-conflict framing expects.
    pub stylized_below_plain: Option<bool>,
}

fn grid(
    row_label: &'static str,
    rows: Vec<String>,
    steps: &[usize],
    cells: &[CellRow],
    key: impl Fn(&CellRow) -> String,
) -> Grid {
    let mut sums: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for c in cells {
        let e = sums.entry((key(c), c.steps)).or_insert((0.0, 0));
        e.0 += c.idsim;
        e.1 += 1;
    }
    let values = rows
        .iter()
        .map(|r| {
            steps
                .iter()
                .map(|&t| {
                    let (s, n) = sums.get(&(r.clone(), t)).copied().unwrap_or((f64::NAN, 1));
                    s / n as f64
                })
                .collect()
        })
        .collect();
    Grid {
        row_label,
        rows,
        steps: steps.to_vec(),
        values,
    }
}

fn alpha_label(alpha: f64) -> String {
    format!("{alpha}")
}

/// Runs both grids on the teacher with the stress-test identities. Cells use
/// the same seeds as the step sweep, so overlapping cells agree exactly.
pub fn cmd_ablations(cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let ctx = EvalContext::new(Artifacts::load(cfg)?)?;
    let teacher = &ctx.art.teacher;
    let bound = ctx.bind(teacher, &ctx.teacher_sha)?;
    let models = ctx.models(teacher, bound);
    models.check_frozen()?;
    let sw = &cfg.sweep;
    let ab = &cfg.ablations;
    let ids: Vec<u32> = (0..sw.identities as u32).collect();

    // (grid, prompt, alpha) settings evaluated per identity.
    let mut settings: Vec<(&str, TransformKind, f64)> = ab
        .prompts
        .iter()
        .map(|&p| ("prompt", p, 1.0))
        .collect();
    settings.extend(ab.alphas.iter().map(|&a| ("alpha", sw.prompt, a)));

    let per_identity = parallel_map(ids.len(), cfg.worker_threads(), |i| {
        let id = ids[i];
        let mut rows = Vec::new();
        for &(arm, kind, alpha) in &settings {
            let prompt = prompt_for(kind, cfg.dataset.strength)?;
            for &steps in &sw.steps_list {
                let spec = CellSpec {
                    identity_id: id,
                    reference: &ctx.references[id as usize],
                    reference_embedding: &ctx.embeddings[id as usize],
                    prompt,
                    steps,
                    guidance: sw.guidance,
                    alpha,
                    seed: eval_seed(cfg.master_seed, id, kind),
                };
                let (cell, _) = evaluate_cell(&models, &spec)?;
                rows.push(CellRow::new(arm, &cell, &ctx.encoder_sha, &ctx.teacher_sha));
            }
        }
        Ok(rows)
    })?;
    let cells: Vec<CellRow> = per_identity.into_iter().flatten().collect();

    let prompt_cells: Vec<CellRow> = cells.iter().filter(|c| c.arm == "prompt").cloned().collect();
    let alpha_cells: Vec<CellRow> = cells.iter().filter(|c| c.arm == "alpha").cloned().collect();
    let prompt_grid = grid(
        "prompt",
        ab.prompts.iter().map(|p| p.to_string()).collect(),
        &sw.steps_list,
        &prompt_cells,
        |c| c.prompt.clone(),
    );
    let alpha_grid = grid(
        "alpha",
        ab.alphas.iter().map(|&a| alpha_label(a)).collect(),
        &sw.steps_list,
        &alpha_cells,
        |c| alpha_label(c.alpha),
    );
    let stylized_below_plain = match (prompt_grid.peak("stylized"), prompt_grid.peak("plain")) {
        (Some(s), Some(p)) => Some(s < p),
        _ => None,
    };

    let dir = cfg.out_dir.join("ablations");
    std::fs::create_dir_all(&dir)?;
    prompt_grid.write(&dir.join("prompt_idsim.csv"), &ctx.encoder_sha, &ctx.teacher_sha)?;
    alpha_grid.write(&dir.join("alpha_idsim.csv"), &ctx.encoder_sha, &ctx.teacher_sha)?;
    write_csv(&cells, &dir.join("cells.csv"))?;
    let mut summary = String::new();
    for g in [&prompt_grid, &alpha_grid] {
        for r in &g.rows {
            let _ = writeln!(summary, "{} {r}: peak idsim {:.4}", g.row_label, g.peak(r).unwrap_or(f64::NAN));
        }
    }
    if let Some(b) = stylized_below_plain {
        let _ = writeln!(
            summary,
            "{} stylized peak below plain peak",
            if b { "PASS" } else { "FAIL" }
        );
    }
    write_text(&dir.join("summary.txt"), &summary)?;
    Ok(AblationOutcome {
        prompt_grid,
        alpha_grid,
        cells,
        stylized_below_plain,
    })
}
