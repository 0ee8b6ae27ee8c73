//! Collects the outputs of the other commands into one markdown report.

use std::fmt::Write as _;
use std::path::Path;

use super::config::ExperimentConfig;
use super::replacement::write_text;
use crate::error::{Error, Result};
use crate::probes::read_sweep_csv;

fn section(out: &mut String, title: &str, path: &Path) -> Result<bool> {
    let _ = writeln!(out, "## {title}\n");
    if !path.exists() {
        let _ = writeln!(out, "_not run: {} is missing_\n", path.display());
        return Ok(false);
    }
    let text = std::fs::read_to_string(path)?;
    let _ = writeln!(out, "```\n{}```\n", text);
    Ok(true)
}

/// Writes `report.md` under the output directory and returns its text.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let dir = &cfg.out_dir;
    let mut out = String::new();
    let _ = writeln!(out, "# flowprobe report\n\nmaster_seed = {}\n", cfg.master_seed);
    let mut found = 0;
    found += section(&mut out, "Backbone replacement", &dir.join("replacement/report.txt"))? as usize;
    found += section(&mut out, "Step sweep pattern", &dir.join("mech_sweep/pattern.txt"))? as usize;

    let sweep = dir.join("mech_sweep/sweep.csv");
    if sweep.exists() {
        let records = read_sweep_csv(&sweep)?;
        let _ = writeln!(
            out,
            "| steps | idsim a=1 | idsim a=0.25 | lift | stream ratio | det conf | sharpness | contrast |\n|---|---|---|---|---|---|---|---|"
        );
        for r in &records {
            let _ = writeln!(
                out,
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.1} | {:.1} |",
                r.steps, r.idsim_full, r.idsim_weak, r.lift, r.stream_ratio, r.det_conf, r.sharpness, r.contrast
            );
        }
        out.push('\n');
    }
    found += section(&mut out, "Ablations", &dir.join("ablations/summary.txt"))? as usize;
    if found == 0 {
        return Err(Error::MissingArtifact(dir.join("replacement/report.txt")));
    }
    write_text(&dir.join("report.md"), &out)?;
    Ok(out)
}
