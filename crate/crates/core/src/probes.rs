//! Mechanistic probes over denoising trajectories.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterCond, BoundAdapter};
use crate::backbone::{sample, FlowBackbone, SampleRequest, StreamCapture};
use crate::encoder::{EncoderModel, IdentityEmbedding};
use crate::error::{Error, Result};
use crate::faces::{FaceImage, PromptTransform, SIDE};
use crate::pool::parallel_map;

pub const STREAM_EPS: f64 = 1e-8;
pub const DEFAULT_STEPS: [usize; 10] = [1, 2, 4, 6, 8, 12, 16, 20, 24, 28];
pub const DEFAULT_THETA: f64 = 0.95;

/// Identity similarity gained by the full adapter over the weak one.
pub fn adapter_lift(idsim_full: f64, idsim_weak: f64) -> f64 {
    idsim_full - idsim_weak
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRatios {
    /// `||s1|| / (||s0|| + eps)` for every captured (step, block).
    pub per_entry: Vec<f64>,
    /// Mean over blocks of the per-block mean over steps.
    pub mean: f64,
}

pub fn stream_ratio(capture: &StreamCapture, eps: f64) -> Result<StreamRatios> {
    if capture.is_empty() {
        return Err(Error::contract("stream ratio of an empty capture"));
    }
    let per_entry: Vec<f64> = capture
        .entries
        .iter()
        .map(|e| e.s1_norm / (e.s0_norm + eps))
        .collect();
    let blocks = capture.entries.iter().map(|e| e.block).max().unwrap_or(0) + 1;
    let mut sums = vec![0.0; blocks];
    let mut counts = vec![0usize; blocks];
    for (e, r) in capture.entries.iter().zip(&per_entry) {
        sums[e.block] += r;
        counts[e.block] += 1;
    }
    let block_means: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    let mean = block_means.iter().sum::<f64>() / block_means.len() as f64;
    Ok(StreamRatios { per_entry, mean })
}

fn to_255(image: &FaceImage) -> Vec<f64> {
    image.data().iter().map(|p| p * 255.0).collect()
}

fn variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

/// Variance of the 4-neighbour Laplacian over the 30x30 interior, pixels in `[0, 255]`.
pub fn sharpness(image: &FaceImage) -> f64 {
    let p = to_255(image);
    let mut response = Vec::with_capacity((SIDE - 2) * (SIDE - 2));
    for r in 1..SIDE - 1 {
        for c in 1..SIDE - 1 {
            let at = |rr: usize, cc: usize| p[rr * SIDE + cc];
            response.push(at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1) - 4.0 * at(r, c));
        }
    }
    variance(&response)
}

/// Standard deviation of pixel values in `[0, 255]`.
pub fn contrast(image: &FaceImage) -> f64 {
    variance(&to_255(image)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EarlyWindow {
    pub steps: usize,
    /// `idsim(T*) / max idsim`.
    pub fraction: f64,
}

/// Smallest step count whose similarity reaches `theta` times the curve's maximum.
/// For a non-positive maximum the threshold sits `1 - theta` of its magnitude
/// below it, so the maximum itself always qualifies.
pub fn early_window(curve: &[(usize, f64)], theta: f64) -> Result<EarlyWindow> {
    if curve.is_empty() {
        return Err(Error::contract("early window of an empty curve"));
    }
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::contract(format!("theta {theta} outside (0, 1]")));
    }
    if curve.iter().any(|c| !c.1.is_finite()) {
        return Err(Error::contract("non-finite value in the similarity curve"));
    }
    if curve.windows(2).any(|w| w[1].0 <= w[0].0) {
        return Err(Error::contract("step counts must be strictly increasing"));
    }
    let peak = curve.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let threshold = peak - (1.0 - theta) * peak.abs();
    let &(steps, value) = curve
        .iter()
        .find(|c| c.1 >= threshold)
        .expect("the maximum always qualifies");
    Ok(EarlyWindow {
        steps,
        fraction: value / peak,
    })
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// One row of the step sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub steps: usize,
    pub idsim_full: f64,
    pub idsim_weak: f64,
    pub lift: f64,
    pub stream_ratio: f64,
    pub det_conf: f64,
    pub sharpness: f64,
    pub contrast: f64,
    pub lpips_like: f64,
    pub latency_s: f64,
    pub n_subjects: usize,
    pub encoder_sha: String,
    pub backbone_sha: String,
}

impl SweepRecord {
    pub fn lift_consistent(&self) -> bool {
        (self.lift - adapter_lift(self.idsim_full, self.idsim_weak)).abs() <= 1e-12
    }
}

pub fn write_sweep_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Probe values for one sampled image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub identity_id: u32,
    pub steps: usize,
    pub guidance: f64,
    pub alpha: f64,
    pub prompt: String,
    pub seed: u64,
    pub idsim: f64,
    pub det_conf: f64,
    pub sharpness: f64,
    pub contrast: f64,
    pub lpips_like: f64,
    pub stream_ratio: f64,
    pub latency_s: f64,
    pub noise_sha: String,
}

/// Frozen models shared by every probe evaluation.
#[derive(Clone, Copy)]
pub struct ProbeModels<'a> {
    pub backbone: &'a FlowBackbone,
    pub adapter: Option<BoundAdapter<'a>>,
    pub encoder: &'a EncoderModel,
}

impl ProbeModels<'_> {
    pub fn check_frozen(&self) -> Result<()> {
        if !self.backbone.is_frozen() || !self.encoder.is_frozen() {
            return Err(Error::contract("probe models must be frozen"));
        }
        if let Some(a) = &self.adapter {
            if !a.adapter.is_frozen() {
                return Err(Error::contract("adapter must be frozen"));
            }
        }
        Ok(())
    }
}

/// What to sample for one probe cell.
#[derive(Debug, Clone, Copy)]
pub struct CellSpec<'a> {
    pub identity_id: u32,
    pub reference: &'a FaceImage,
    pub reference_embedding: &'a IdentityEmbedding,
    pub prompt: PromptTransform,
    pub steps: usize,
    pub guidance: f64,
    pub alpha: f64,
    pub seed: u64,
}

/// Samples one image and measures every probe on it.
pub fn evaluate_cell(models: &ProbeModels<'_>, spec: &CellSpec<'_>) -> Result<(CellResult, FaceImage)> {
    let cond = models
        .adapter
        .as_ref()
        .map(|b| AdapterCond::single(b.adapter, spec.reference_embedding, spec.alpha));
    let req = SampleRequest {
        steps: spec.steps,
        guidance: spec.guidance,
        prompt: spec.prompt,
        adapter: cond,
        seed: spec.seed,
        capture_streams: true,
    };
    let started = Instant::now();
    let out = sample(models.backbone, &req)?;
    let latency_s = started.elapsed().as_secs_f64();
    let image = out.image;
    let capture = out.streams.expect("capture requested");
    let ratio = stream_ratio(&capture, STREAM_EPS)?.mean;
    let enc = models.encoder;
    let result = CellResult {
        identity_id: spec.identity_id,
        steps: spec.steps,
        guidance: spec.guidance,
        alpha: spec.alpha,
        prompt: spec.prompt.kind.to_string(),
        seed: spec.seed,
        idsim: enc.embed(&image)?.cosine(spec.reference_embedding),
        det_conf: enc.detector_confidence(&image)?,
        sharpness: sharpness(&image),
        contrast: contrast(&image),
        lpips_like: enc.perceptual_distance(&image, spec.reference)?,
        stream_ratio: ratio,
        latency_s,
        noise_sha: out.noise_sha,
    };
    Ok((result, image))
}

#[derive(Debug, Clone)]
pub struct SweepPlan<'a> {
    pub identities: &'a [u32],
    pub references: &'a [FaceImage],
    pub reference_embeddings: &'a [IdentityEmbedding],
    pub prompt: PromptTransform,
    pub steps_list: &'a [usize],
    /// First entry is the full adapter, second the weak one; extra entries are
    /// evaluated and returned as cells only.
    pub alphas: &'a [f64],
    pub guidance: f64,
    /// Noise seed per identity, shared by every (T, alpha) cell of that identity.
    pub seeds: &'a [u64],
    pub threads: usize,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n.max(1) as f64
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Step sweep with paired noise: every (T, alpha) cell of an identity starts
/// from the same initial noise. Returns one record per step count plus all cells.
pub fn run_step_sweep(
    models: &ProbeModels<'_>,
    plan: &SweepPlan<'_>,
) -> Result<(Vec<SweepRecord>, Vec<CellResult>)> {
    models.check_frozen()?;
    if plan.alphas.len() < 2 {
        return Err(Error::contract("sweep needs full and weak adapter scales"));
    }
    if plan.identities.len() != plan.references.len()
        || plan.identities.len() != plan.reference_embeddings.len()
        || plan.identities.len() != plan.seeds.len()
    {
        return Err(Error::shape("one reference per identity required"));
    }
    if plan.identities.is_empty() || plan.steps_list.is_empty() {
        return Err(Error::contract("empty sweep"));
    }
    let encoder_sha = models.encoder.checksum();
    let backbone_sha = models.backbone.checksum();

    let per_identity = parallel_map(plan.identities.len(), plan.threads, |i| {
        let seed = plan.seeds[i];
        let mut cells = Vec::new();
        for &steps in plan.steps_list {
            for &alpha in plan.alphas {
                let spec = CellSpec {
                    identity_id: plan.identities[i],
                    reference: &plan.references[i],
                    reference_embedding: &plan.reference_embeddings[i],
                    prompt: plan.prompt,
                    steps,
                    guidance: plan.guidance,
                    alpha,
                    seed,
                };
                cells.push(evaluate_cell(models, &spec)?.0);
            }
        }
        Ok(cells)
    })?;
    let cells: Vec<CellResult> = per_identity.into_iter().flatten().collect();

    for id in plan.identities {
        let mine: Vec<&CellResult> = cells.iter().filter(|c| c.identity_id == *id).collect();
        if mine.windows(2).any(|w| w[0].noise_sha != w[1].noise_sha) {
            return Err(Error::contract(format!(
                "identity {id}: initial noise differs across sweep cells"
            )));
        }
    }

    let (full, weak) = (plan.alphas[0], plan.alphas[1]);
    let mut records = Vec::with_capacity(plan.steps_list.len());
    for &steps in plan.steps_list {
        let at = |alpha: f64| cells.iter().filter(move |c| c.steps == steps && c.alpha == alpha);
        let idsim_full = mean(at(full).map(|c| c.idsim));
        let idsim_weak = mean(at(weak).map(|c| c.idsim));
        let mut lat: Vec<f64> = at(full).map(|c| c.latency_s).collect();
        records.push(SweepRecord {
            steps,
            idsim_full,
            idsim_weak,
            lift: adapter_lift(idsim_full, idsim_weak),
            stream_ratio: mean(at(full).map(|c| c.stream_ratio)),
            det_conf: mean(at(full).map(|c| c.det_conf)),
            sharpness: mean(at(full).map(|c| c.sharpness)),
            contrast: mean(at(full).map(|c| c.contrast)),
            lpips_like: mean(at(full).map(|c| c.lpips_like)),
            latency_s: median(&mut lat),
            n_subjects: at(full).count(),
            encoder_sha: encoder_sha.clone(),
            backbone_sha: backbone_sha.clone(),
        });
    }
    Ok((records, cells))
}

/// Minimal row view used by the pattern predicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRow {
    pub steps: usize,
    pub idsim_full: f64,
    pub idsim_weak: Option<f64>,
    pub lift: Option<f64>,
    pub stream_ratio: f64,
    pub face_det: f64,
    pub sharpness: f64,
}

impl From<&SweepRecord> for PatternRow {
    fn from(r: &SweepRecord) -> Self {
        Self {
            steps: r.steps,
            idsim_full: r.idsim_full,
            idsim_weak: Some(r.idsim_weak),
            lift: Some(r.lift),
            stream_ratio: r.stream_ratio,
            face_det: r.det_conf,
            sharpness: r.sharpness,
        }
    }
}

/// Published step-sweep rows plus the early window they declare.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePattern {
    pub rows: Vec<PatternRow>,
    pub window: (usize, usize),
}

const REFERENCE_CSV: &str = include_str!("../data/step_sweep_reference.csv");

impl ReferencePattern {
    pub fn published() -> Self {
        Self::parse(REFERENCE_CSV).expect("bundled reference parses")
    }

    pub fn csv_text() -> &'static str {
        REFERENCE_CSV
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<PatternRow>, _>>()?;
        Ok(Self { rows, window: (4, 8) })
    }

    pub fn idsim_curve(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.steps, r.idsim_full)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredicateResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternReport {
    pub predicates: Vec<PredicateResult>,
    pub peak_steps: usize,
    pub peak_idsim: f64,
    pub early_window: EarlyWindow,
    pub sharpness_spearman: f64,
    pub stream_spearman: f64,
}

impl PatternReport {
    pub fn all_passed(&self) -> bool {
        self.predicates.iter().all(|p| p.passed)
    }
}

/// Evaluates the four qualitative step-sweep predicates:
/// (a) early identity peak that the endpoint keeps at >= 80%,
/// (b) sharpness rises with T, (c) stream ratio falls with T,
/// (d) the weak adapter stays far below the full adapter's peak.
pub fn pattern_check(rows: &[PatternRow], reference: &ReferencePattern) -> Result<PatternReport> {
    if rows.len() < 5 {
        return Err(Error::contract(format!(
            "pattern check needs at least 5 rows, got {}",
            rows.len()
        )));
    }
    if rows.windows(2).any(|w| w[1].steps <= w[0].steps) {
        return Err(Error::contract("rows must be sorted by strictly increasing steps"));
    }
    let max_steps = rows.last().expect("non-empty").steps;
    let final_idsim = rows.last().expect("non-empty").idsim_full;
    let (peak_steps, peak_idsim) = rows.iter().fold((0, f64::NEG_INFINITY), |best, r| {
        if r.idsim_full > best.1 {
            (r.steps, r.idsim_full)
        } else {
            best
        }
    });
    let curve: Vec<(usize, f64)> = rows.iter().map(|r| (r.steps, r.idsim_full)).collect();
    let window = early_window(&curve, DEFAULT_THETA)?;

    let steps: Vec<f64> = rows.iter().map(|r| r.steps as f64).collect();
    let sharp: Vec<f64> = rows.iter().map(|r| r.sharpness).collect();
    let stream: Vec<f64> = rows.iter().map(|r| r.stream_ratio).collect();
    let rho_sharp = spearman(&sharp, &steps);
    let rho_stream = spearman(&stream, &steps);

    // Ratios to the peak only carry meaning when the peak is positive.
    let positive = peak_idsim > 0.0;
    let retained = positive && final_idsim >= 0.8 * peak_idsim;
    let early = (peak_steps as f64) < 0.5 * max_steps as f64
        || (reference.window.0..=reference.window.1).contains(&peak_steps);
    let weak_max = rows
        .iter()
        .filter_map(|r| r.idsim_weak)
        .fold(f64::NEG_INFINITY, f64::max);
    let weak_ok = positive && weak_max.is_finite() && weak_max < 0.3 * peak_idsim;

    let predicates = vec![
        PredicateResult {
            name: "a_early_identity_window",
            passed: retained && early,
            detail: format!(
                "peak {peak_idsim:.4} at T={peak_steps}; T={max_steps} keeps {:.1}% of peak; early={early}",
                100.0 * final_idsim / peak_idsim
            ),
        },
        PredicateResult {
            name: "b_sharpness_rises",
            passed: rho_sharp > 0.8,
            detail: format!("spearman(sharpness, T) = {rho_sharp:.4} (> 0.8 required)"),
        },
        PredicateResult {
            name: "c_stream_ratio_falls",
            passed: rho_stream < -0.5,
            detail: format!("spearman(stream ratio, T) = {rho_stream:.4} (< -0.5 required)"),
        },
        PredicateResult {
            name: "d_weak_adapter_low",
            passed: weak_ok,
            detail: format!(
                "max weak idsim {weak_max:.4} vs bound {:.4}",
                0.3 * peak_idsim
            ),
        },
    ];
    Ok(PatternReport {
        predicates,
        peak_steps,
        peak_idsim,
        early_window: window,
        sharpness_spearman: rho_sharp,
        stream_spearman: rho_stream,
    })
}
