//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion fails that is not listed in `KNOWN_FAILURES`.
//!
//! Criteria 5-8 build the default experiment twice from scratch, which takes
//! several minutes on one core.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use common::{masked_csvs, MlpCase};
use flowprobe_core::adapter::{train_adapter, AdapterTrainConfig};
use flowprobe_core::backbone::{euler_integrate, interpolate, velocity_target, Sample};
use flowprobe_core::faces::{PromptTransform, PIXELS, SIDE};
use flowprobe_core::harness::{
    cmd_ablations, cmd_build_all, cmd_mech_sweep, cmd_replacement, cmd_report, datasets,
    Artifacts, EvalContext, ExperimentConfig, MechSweepOutcome, ReplacementReport,
};
use flowprobe_core::probes::{
    adapter_lift, contrast, early_window, pattern_check, sharpness, stream_ratio, STREAM_EPS,
};
use flowprobe_core::{
    sample, AdapterCond, AdapterStack, BackboneArch, FaceImage, FlowBackbone, IdentityEmbedding,
    ReferencePattern, SampleRequest, StreamCapture, StreamEntry, Tensor, TransformKind,
};

/// Criteria that cannot pass as stated, with the reason recorded in the
/// decisions ledger. They still run and still print FAIL.
const KNOWN_FAILURES: &[(u8, &str)] = &[(
    3,
    "the published lift column is not the difference of the published idsim columns at six step counts",
)];

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

struct Outcome {
    id: u8,
    passed: bool,
    detail: String,
}

fn criterion(id: u8, title: &str, f: impl FnOnce() -> Check) -> Outcome {
    let start = Instant::now();
    let (passed, detail) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => (false, format!("error: {e}")),
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            (false, format!("panicked: {msg}"))
        }
    };
    println!(
        "{} {id}. {title} [{:.1}s]: {detail}",
        if passed { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    Outcome { id, passed, detail }
}

fn gradients() -> Check {
    let start = Instant::now();
    let cases = 128u64;
    let mut worst: f64 = 0.0;
    for seed in 0..cases {
        worst = worst.max(MlpCase::random(1000 + seed).max_relative_error());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 1e-4 && secs < 30.0,
        format!("{cases} random MLPs, max relative error {worst:.2e} (< 1e-4), {secs:.2}s (< 30s)"),
    ))
}

fn sampler_analytics() -> Check {
    let start = Instant::now();
    let x0 = Tensor::row((0..PIXELS).map(|i| (i % 17) as f64 / 16.0).collect());
    let eps = Tensor::row((0..PIXELS).map(|i| ((i * 31) % 23) as f64 / 11.0 - 1.0).collect());
    let ends = interpolate(&x0, &eps, 0.0)? == x0 && interpolate(&x0, &eps, 1.0)? == eps;
    let v = velocity_target(&x0, &eps)?;
    let mut worst: f64 = 0.0;
    for steps in [1, 4, 28] {
        let traj = euler_integrate(eps.clone(), steps, |_, _, _| Ok(v.clone()))?;
        let err = traj
            .last()
            .unwrap()
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        ends && worst < 1e-12 && secs < 1.0,
        format!("endpoints exact: {ends}; Euler T in {{1,4,28}} recovers x0 within {worst:.1e}; {secs:.3}s"),
    ))
}

fn reference_arithmetic() -> Check {
    let start = Instant::now();
    let reference = ReferencePattern::published();
    let mut mismatched = Vec::new();
    let mut checked = 0;
    for r in &reference.rows {
        if let (Some(weak), Some(lift)) = (r.idsim_weak, r.lift) {
            checked += 1;
            let ours = adapter_lift(r.idsim_full, weak);
            if (ours - lift).abs() > 0.001 + 1e-12 {
                mismatched.push(format!("T={} {ours:.3} vs {lift:.3}", r.steps));
            }
        }
    }
    let window = early_window(&reference.idsim_curve(), 0.95)?;
    let report = pattern_check(&reference.rows, &reference)?;
    let secs = start.elapsed().as_secs_f64();
    let lift_ok = mismatched.is_empty();
    let window_ok = window.steps == 8;
    let pattern_ok = report.all_passed();
    Ok((
        lift_ok && window_ok && pattern_ok && secs < 1.0,
        format!(
            "lift {}/{checked} rows within 0.001{}; early window T*={} ({}); pattern check {}; {secs:.3}s",
            checked - mismatched.len(),
            if lift_ok { String::new() } else { format!(" [off: {}]", mismatched.join(", ")) },
            window.steps,
            if window_ok { "ok" } else { "expected 8" },
            if pattern_ok { "4/4 predicates" } else { "failed" },
        ),
    ))
}

fn scaled(t: &Tensor, k: f64) -> Tensor {
    t.map(|v| k * v)
}

fn adapter_contracts() -> Check {
    let backbone = FlowBackbone::init(&BackboneArch::default(), 7)?;
    let adapter = AdapterStack::init(backbone.block_count(), 3);
    let e_id = IdentityEmbedding::from_raw(&[0.4, -0.2, 0.9, 0.1, -0.5, 0.3, 0.0, 0.7])?;
    let h = Tensor::row((0..PIXELS).map(|i| (i as f64 * 0.37).sin()).collect());
    let zeros = Tensor::zeros(&[1, PIXELS]);

    let mut noop = true;
    let mut linear = true;
    for block in 0..adapter.head_count() {
        for t in [0.05, 0.5, 1.0] {
            let out = adapter.inject(block, &h, &e_id, t, 0.0)?;
            noop &= out.data().iter().zip(h.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            let r = adapter.head_output(block, &e_id, t)?;
            for alpha in [0.25, 0.5, 1.0, 1.5, 2.0, -0.75] {
                linear &= adapter.inject(block, &zeros, &e_id, t, alpha)? == scaled(&r, alpha);
                let delta = adapter.inject(block, &h, &e_id, t, alpha)?.sub(&h)?;
                let dev = delta
                    .data()
                    .iter()
                    .zip(r.data())
                    .map(|(d, rv)| (d - alpha * rv).abs())
                    .fold(0.0, f64::max);
                linear &= dev < 1e-12;
            }
        }
    }

    let run = |cond: Option<AdapterCond<'_>>| -> flowprobe_core::Result<Sample> {
        sample(
            &backbone,
            &SampleRequest {
                steps: 6,
                guidance: 3.5,
                prompt: PromptTransform::new(TransformKind::Stylized, 0.8)?,
                adapter: cond,
                seed: 11,
                capture_streams: true,
            },
        )
    };
    let off = run(Some(AdapterCond::single(&adapter, &e_id, 0.0)))?;
    let none = run(None)?;
    let on = run(Some(AdapterCond::single(&adapter, &e_id, 1.0)))?;
    let same_image = off.image == none.image;
    let ratios = stream_ratio(off.streams.as_ref().ok_or("no stream capture")?, STREAM_EPS)?;
    let zero_ratio = ratios.mean == 0.0 && ratios.per_entry.iter().all(|&r| r == 0.0);
    let on_ratio = stream_ratio(on.streams.as_ref().ok_or("no stream capture")?, STREAM_EPS)?.mean;
    Ok((
        noop && linear && same_image && zero_ratio && on_ratio > 0.0,
        format!(
            "alpha=0 bitwise no-op: {noop}; residual linear in alpha: {linear}; \
             alpha=0 sample equals adapter-free sample: {same_image}; stream ratio at alpha=0 is 0: {zero_ratio} \
             (alpha=1 gives {on_ratio:.4})"
        ),
    ))
}

fn file_sha(path: &std::path::Path) -> std::io::Result<Vec<u8>> {
    std::fs::read(path)
}

struct Run {
    cfg: ExperimentConfig,
    replacement: ReplacementReport,
    sweep: MechSweepOutcome,
    adapter_bytes_unchanged: bool,
}

fn full_run(dir: &std::path::Path) -> Result<Run, Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        out_dir: dir.to_path_buf(),
        ..ExperimentConfig::default()
    };
    cmd_build_all(&cfg, true)?;
    let adapter_path = dir.join("adapter.fpv");
    let before = file_sha(&adapter_path)?;
    let replacement = cmd_replacement(&cfg)?;
    let sweep = cmd_mech_sweep(&cfg)?;
    cmd_ablations(&cfg)?;
    cmd_report(&cfg)?;
    let adapter_bytes_unchanged = before == file_sha(&adapter_path)?;
    Ok(Run {
        cfg,
        replacement,
        sweep,
        adapter_bytes_unchanged,
    })
}

fn transfer_contract(run: &Run) -> Check {
    let ctx = EvalContext::new(Artifacts::load(&run.cfg)?)?;
    let adapter_sha = ctx.art.adapter.checksum();
    let student = &ctx.art.student;
    let bound = ctx.bind(student, &ctx.student_sha)?;
    for id in 0..4u32 {
        for kind in TransformKind::ALL {
            sample(
                student,
                &SampleRequest {
                    steps: 4,
                    guidance: 0.0,
                    prompt: PromptTransform::new(kind, run.cfg.dataset.strength)?,
                    adapter: Some(bound.cond(&ctx.embeddings[id as usize], 1.0)),
                    seed: 100 + u64::from(id),
                    capture_streams: true,
                },
            )?;
        }
    }
    let adapter_kept = ctx.art.adapter.checksum() == adapter_sha && adapter_sha == ctx.adapter_sha;

    let (teacher_sha, encoder_sha) = (ctx.art.teacher.checksum(), ctx.art.encoder.checksum());
    let (train, _) = datasets(&run.cfg)?;
    let subset: Vec<_> = train.into_iter().step_by(7).collect();
    let quick = AdapterTrainConfig {
        epochs: 1,
        ..run.cfg.adapter.clone()
    };
    let retrained = train_adapter(&ctx.art.teacher, &ctx.art.encoder, &subset, &quick)?;
    let frozen_kept = ctx.art.teacher.checksum() == teacher_sha
        && ctx.art.encoder.checksum() == encoder_sha
        && retrained.trained_against() == teacher_sha;
    Ok((
        adapter_kept && frozen_kept && run.adapter_bytes_unchanged,
        format!(
            "adapter checksum unchanged across transfer and student sampling: {adapter_kept}; \
             adapter file unchanged across all commands: {}; teacher/encoder checksums unchanged \
             across adapter training: {frozen_kept}",
            run.adapter_bytes_unchanged
        ),
    ))
}

fn replacement_phenomenon(run: &Run) -> Check {
    let r = &run.replacement;
    let ratio = r.idsim_ratio();
    Ok((
        ratio >= 0.9 && r.speedup >= 3.0,
        format!(
            "student T=4 g=0 idsim {:.4} vs teacher T=28 g=3.5 idsim {:.4} (ratio {ratio:.3}, >= 0.9); speedup {:.1}x (>= 3)",
            r.replacement.mean_idsim, r.baseline.mean_idsim, r.speedup
        ),
    ))
}

fn sweep_phenomenon(run: &Run) -> Check {
    let report = &run.sweep.report;
    let lines: Vec<String> = report
        .predicates
        .iter()
        .map(|p| format!("{} {}", if p.passed { "pass" } else { "fail" }, p.name))
        .collect();
    Ok((
        run.sweep.phenomenon_present(),
        format!(
            "peak idsim {:.4} at T={}; {}",
            report.peak_idsim,
            report.peak_steps,
            lines.join(", ")
        ),
    ))
}

fn determinism(a: &Run, b_dir: &std::path::Path) -> Check {
    full_run(b_dir)?;
    let (x, y) = (masked_csvs(&a.cfg.out_dir), masked_csvs(b_dir));
    let differing: Vec<&String> = x
        .keys()
        .chain(y.keys())
        .filter(|k| x.get(*k) != y.get(*k))
        .collect();
    Ok((
        differing.is_empty() && x.len() >= 10,
        format!(
            "{} CSV files compared byte-for-byte (wall-clock columns blanked); differing: {differing:?}",
            x.len()
        ),
    ))
}

fn probe_oracles() -> Check {
    let plain = PromptTransform::plain();
    let constant = FaceImage::from_pixels(vec![0.3; PIXELS], None, plain)?;
    let mut impulse = vec![0.0; PIXELS];
    impulse[16 * SIDE + 16] = 1.0;
    let impulse = FaceImage::from_pixels(impulse, None, plain)?;
    // Laplacian response: -4*255 at the impulse, 255 at its four neighbours,
    // 0 elsewhere in the 30x30 interior; the mean response is 0.
    let expected = (1020.0f64.powi(2) + 4.0 * 255.0f64.powi(2)) / 900.0;
    let halves: Vec<f64> = (0..PIXELS).map(|i| if i < PIXELS / 2 { 0.0 } else { 1.0 }).collect();
    let halves = FaceImage::from_pixels(halves, None, plain)?;

    let entry = |step, block, s0: f64, s1: f64| StreamEntry {
        step,
        t: 1.0 - step as f64 / 2.0,
        block,
        s0_norm: s0,
        s1_norm: s1,
    };
    let capture = StreamCapture {
        entries: vec![
            entry(0, 0, 2.0, 1.0),
            entry(0, 1, 4.0, 1.0),
            entry(1, 0, 1.0, 3.0),
            entry(1, 1, 5.0, 0.0),
        ],
    };
    let e = STREAM_EPS;
    let by_hand = ((1.0 / (2.0 + e) + 3.0 / (1.0 + e)) / 2.0 + (1.0 / (4.0 + e) + 0.0) / 2.0) / 2.0;
    let got = stream_ratio(&capture, e)?.mean;

    let s_const = sharpness(&constant);
    let s_imp = sharpness(&impulse);
    let c_half = contrast(&halves);
    Ok((
        s_const == 0.0 && (s_imp - expected).abs() < 1e-9 && c_half == 127.5 && (got - by_hand).abs() < 1e-12,
        format!(
            "sharpness(constant) = {s_const}; sharpness(impulse) = {s_imp} vs {expected}; \
             contrast(halves) = {c_half}; stream ratio {got:.15} vs {by_hand:.15}"
        ),
    ))
}

fn main() {
    let mut outcomes = vec![
        criterion(1, "gradient correctness", gradients),
        criterion(2, "interpolation and Euler analytics", sampler_analytics),
        criterion(3, "probe arithmetic on the published step sweep", reference_arithmetic),
        criterion(4, "adapter injection contracts", adapter_contracts),
    ];

    let dir_a = tempfile::tempdir().expect("temp dir");
    let dir_b = tempfile::tempdir().expect("temp dir");
    let start = Instant::now();
    match full_run(dir_a.path()) {
        Ok(run) => {
            println!("(default experiment built and evaluated in {:.0}s)", start.elapsed().as_secs_f64());
            outcomes.push(criterion(5, "training-free transfer contract", || transfer_contract(&run)));
            outcomes.push(criterion(6, "backbone replacement keeps identity at lower cost", || {
                replacement_phenomenon(&run)
            }));
            outcomes.push(criterion(7, "early identity window on the teacher step sweep", || {
                sweep_phenomenon(&run)
            }));
            outcomes.push(criterion(8, "determinism of a repeated full run", || {
                determinism(&run, dir_b.path())
            }));
        }
        Err(e) => {
            for (id, title) in [
                (5, "training-free transfer contract"),
                (6, "backbone replacement keeps identity at lower cost"),
                (7, "early identity window on the teacher step sweep"),
                (8, "determinism of a repeated full run"),
            ] {
                outcomes.push(criterion(id, title, || Err(format!("default run failed: {e}").into())));
            }
        }
    }
    outcomes.push(criterion(9, "probe unit oracles", probe_oracles));

    let mut unexpected = Vec::new();
    for o in &outcomes {
        let known = KNOWN_FAILURES.iter().find(|(id, _)| *id == o.id);
        match (o.passed, known) {
            (false, Some((_, why))) => println!("note: criterion {} fails as documented: {why}", o.id),
            (false, None) => unexpected.push(o),
            (true, Some(_)) => println!("note: criterion {} is listed as a known failure but passed", o.id),
            (true, None) => {}
        }
    }
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("acceptance: {passed}/{} criteria pass", outcomes.len());
    if !unexpected.is_empty() {
        for o in unexpected {
            println!("unexpected failure in criterion {}: {}", o.id, o.detail);
        }
        std::process::exit(1);
    }
}
