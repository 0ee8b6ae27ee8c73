//! Rectified-flow backbone: straight-line interpolation between data and
//! noise, the velocity network, and the guided Euler sampler.
//!
//! Convention: `x_t = (1 - t) x0 + t eps`, so `t = 1` is pure noise and the
//! regression target is `v* = x0 - eps`. Sampling integrates from `t = 1`
//! down to `t = 0` with `x <- x + v / T`.
//!
//! The network keeps a 1024-wide residual stream `h` (initialised to `x_t`).
//! Each of the four blocks adds a primary update `s0 = MLP([h; c])`, where
//! `c` is the time embedding plus a prompt embedding; an adapter may then add
//! its own residual `s1`. A linear head maps the final stream to a velocity.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::AdapterCond;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::faces::{DatasetItem, FaceImage, PromptTransform, PIXELS};
use crate::nn::{init_linear, linear, one_hot, stack_rows};
use crate::params::{AdamConfig, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

pub const BLOCKS: usize = 4;
pub const TIME_DIM: usize = 16;
/// Three prompt rows plus the learned null prompt used for guidance.
pub const PROMPT_SLOTS: usize = 4;
pub const NULL_PROMPT: usize = 3;

pub const TEACHER_STEPS: usize = 28;
pub const TEACHER_GUIDANCE: f64 = 3.5;
pub const STUDENT_STEPS: usize = 4;
pub const STUDENT_GUIDANCE: f64 = 0.0;
const MIN_DATA_VAR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneArch {
    pub blocks: usize,
    pub hidden: usize,
    pub pre_scale: f64,
    pub post_scale: f64,
}

impl Default for BackboneArch {
    fn default() -> Self {
        Self {
            blocks: BLOCKS,
            hidden: 256,
            pre_scale: 1.0,
            post_scale: 0.5,
        }
    }
}

/// `(1 - t) x0 + t eps`.
pub fn interpolate(x0: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("t = {t} outside [0, 1]")));
    }
    x0.zip_map(eps, |a, b| (1.0 - t) * a + t * b)
}

/// `x0 - eps`.
pub fn velocity_target(x0: &Tensor, eps: &Tensor) -> Result<Tensor> {
    x0.sub(eps)
}

/// 16-dim sinusoidal embedding of `t in [0, 1]`.
pub fn time_embedding(t: f64) -> [f64; TIME_DIM] {
    let half = TIME_DIM / 2;
    let mut out = [0.0; TIME_DIM];
    for i in 0..half {
        let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

pub(crate) fn time_rows(ts: &[f64]) -> Tensor {
    let rows: Vec<[f64; TIME_DIM]> = ts.iter().map(|&t| time_embedding(t)).collect();
    stack_rows(rows.iter().map(|r| r.as_slice())).expect("equal widths")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StreamEntry {
    pub step: usize,
    pub t: f64,
    pub block: usize,
    pub s0_norm: f64,
    pub s1_norm: f64,
}

/// Per (step, block) norms of the primary update and the conditioning residual.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamCapture {
    pub entries: Vec<StreamEntry>,
}

impl StreamCapture {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `step,t,block,s0_norm,s1_norm` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "t", "block", "s0_norm", "s1_norm"])?;
        for e in &self.entries {
            w.write_record([
                e.step.to_string(),
                e.t.to_string(),
                e.block.to_string(),
                e.s0_norm.to_string(),
                e.s1_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Row-wise `(s0, s1)` norms for each block of one forward pass.
pub type BlockNorms = Vec<[(f64, f64); BLOCKS]>;

#[derive(Debug, Clone)]
pub struct FlowBackbone {
    params: ParamSet,
    arch: BackboneArch,
    distilled: bool,
    provenance: BTreeMap<String, String>,
}

fn row_norms(t: &Tensor) -> Vec<f64> {
    let (rows, _) = t.dims2().expect("rank-2");
    (0..rows)
        .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

impl FlowBackbone {
    pub fn init(arch: &BackboneArch, seed: u64) -> Result<Self> {
        if arch.blocks != BLOCKS {
            return Err(Error::contract(format!(
                "backbone must have {BLOCKS} blocks, got {}",
                arch.blocks
            )));
        }
        let mut r = rng::stream(seed, "backbone-init", &[]);
        let mut params = ParamSet::new();
        let table = rng::gaussian_vec(&mut r, PROMPT_SLOTS * TIME_DIM);
        params.insert(
            "prompt_table",
            Tensor::new(vec![PROMPT_SLOTS, TIME_DIM], table)?,
        );
        for l in 0..arch.blocks {
            init_linear(&mut params, &format!("block{l}.fc1"), PIXELS + TIME_DIM, arch.hidden, 1.0, &mut r);
            init_linear(&mut params, &format!("block{l}.fc2"), arch.hidden, PIXELS, 0.5, &mut r);
        }
        init_linear(&mut params, "head", PIXELS, PIXELS, 0.0, &mut r);
        params.insert("data_mean", Tensor::zeros(&[1, PIXELS]));
        params.insert("data_var", Tensor::ones(&[1, PIXELS]));
        Ok(Self {
            params,
            arch: arch.clone(),
            distilled: false,
            provenance: BTreeMap::new(),
        })
    }

    pub fn arch(&self) -> &BackboneArch {
        &self.arch
    }

    pub fn block_count(&self) -> usize {
        self.arch.blocks
    }

    pub fn is_distilled(&self) -> bool {
        self.distilled
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn freeze(&mut self) {
        self.params.freeze();
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn provenance(&self) -> &BTreeMap<String, String> {
        &self.provenance
    }

    /// Trainable copy (fresh optimizer state) carrying the same weights.
    pub fn thawed_copy(&self) -> Self {
        Self {
            params: self.params.thawed_copy(),
            arch: self.arch.clone(),
            distilled: self.distilled,
            provenance: self.provenance.clone(),
        }
    }

    pub(crate) fn mark_distilled(&mut self, provenance: BTreeMap<String, String>) {
        self.distilled = true;
        self.provenance = provenance;
    }

    pub(crate) fn set_provenance(&mut self, provenance: BTreeMap<String, String>) {
        self.provenance = provenance;
    }

    /// Builds the velocity prediction for a batch on the tape.
    ///
    /// `norms`, when given, receives per-row `(s0, s1)` block norms.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        ts: &[f64],
        prompts: &[usize],
        cond: Option<&AdapterCond<'_>>,
        norms: Option<&mut BlockNorms>,
    ) -> Result<Var> {
        let (rows, width) = g.value(x).dims2()?;
        if width != PIXELS || ts.len() != rows || prompts.len() != rows {
            return Err(Error::shape(format!(
                "forward: x {:?}, {} times, {} prompts",
                g.value(x).shape(),
                ts.len(),
                prompts.len()
            )));
        }
        if let Some(&p) = prompts.iter().find(|&&p| p >= PROMPT_SLOTS) {
            return Err(Error::contract(format!("prompt index {p} out of range")));
        }
        if let Some(c) = cond {
            if c.adapter.head_count() != self.block_count() {
                return Err(Error::Compatibility(format!(
                    "adapter has {} heads, backbone has {} blocks",
                    c.adapter.head_count(),
                    self.block_count()
                )));
            }
            if c.embeddings.dims2()?.0 != rows {
                return Err(Error::shape("one identity embedding per row required"));
            }
        }
        let temb = g.constant(time_rows(ts));
        let onehot = g.constant(one_hot(prompts, PROMPT_SLOTS));
        let table = g.param(&self.params, "prompt_table")?;
        let pemb = g.matmul(onehot, table)?;
        let c = g.add(temb, pemb)?;
        let e = match cond {
            Some(cd) if cd.alpha != 0.0 => Some(g.constant(cd.embeddings.clone())),
            _ => None,
        };

        let mut norms = norms;
        if let Some(n) = norms.as_deref_mut() {
            n.clear();
            n.resize(rows, [(0.0, 0.0); BLOCKS]);
        }
        let mut h = x;
        for l in 0..self.arch.blocks {
            let hin = if self.arch.pre_scale == 1.0 {
                h
            } else {
                g.scale(h, self.arch.pre_scale)
            };
            let cat = g.concat(&[hin, c])?;
            let z = linear(g, &self.params, &format!("block{l}.fc1"), cat)?;
            let z = g.silu(z);
            let s0 = linear(g, &self.params, &format!("block{l}.fc2"), z)?;
            let s0 = g.scale(s0, self.arch.post_scale);
            h = g.add(h, s0)?;
            let mut s1_norms = vec![0.0; rows];
            if let (Some(cd), Some(e)) = (cond, e) {
                let r = cd.adapter.residual(g, l, e, temb)?;
                let r = g.scale(r, cd.alpha);
                s1_norms = row_norms(g.value(r));
                h = g.add(h, r)?;
            }
            if let Some(n) = norms.as_deref_mut() {
                for (row, (s0n, s1n)) in row_norms(g.value(s0)).into_iter().zip(s1_norms).enumerate() {
                    n[row][l] = (s0n, s1n);
                }
            }
        }
        // The head reads only what the blocks and adapter added; the raw
        // input reaches the output through the skip path alone.
        let update = g.sub(h, x)?;
        let out = linear(g, &self.params, "head", update)?;
        let (gain, offset) = self.gaussian_terms(ts)?;
        let gain = g.constant(gain);
        let offset = g.constant(offset);
        let skip = g.mul(x, gain)?;
        let base = g.add(skip, offset)?;
        g.add(out, base)
    }

    /// Per-pixel statistics of the training images, used by the Gaussian
    /// baseline velocity. They are stored with the weights but never receive
    /// gradients.
    pub(crate) fn set_data_stats(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        self.params.insert("data_mean", Tensor::new(vec![1, PIXELS], mean)?);
        self.params.insert("data_var", Tensor::new(vec![1, PIXELS], var)?);
        Ok(())
    }

    /// `(k, m)` such that `k * x + m` is the optimal velocity when every pixel
    /// is an independent Gaussian with the stored mean and variance.
    fn gaussian_terms(&self, ts: &[f64]) -> Result<(Tensor, Tensor)> {
        let mean = self.params.get_shared("data_mean")?;
        let var = self.params.get_shared("data_var")?;
        let mut k = Vec::with_capacity(ts.len() * PIXELS);
        let mut m = Vec::with_capacity(ts.len() * PIXELS);
        for &t in ts {
            for (&mu, &v) in mean.data().iter().zip(var.data()) {
                let gain = skip_gain(t, v.max(MIN_DATA_VAR));
                k.push(gain);
                m.push(mu * (1.0 - gain * (1.0 - t)));
            }
        }
        Ok((
            Tensor::new(vec![ts.len(), PIXELS], k)?,
            Tensor::new(vec![ts.len(), PIXELS], m)?,
        ))
    }

    /// Guided velocity for a batch without recording gradients.
    ///
    /// With `guidance == 0` only the conditional branch runs; otherwise the
    /// null prompt provides the unconditional branch and
    /// `v = v_u + g (v_c - v_u)`. Stream norms come from the conditional pass.
    pub fn guided_velocity(
        &self,
        x: &Tensor,
        ts: &[f64],
        prompts: &[usize],
        guidance: f64,
        cond: Option<&AdapterCond<'_>>,
        norms: Option<&mut BlockNorms>,
    ) -> Result<Tensor> {
        if guidance < 0.0 || !guidance.is_finite() {
            return Err(Error::contract(format!("guidance {guidance} must be >= 0")));
        }
        let v_cond = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let v = self.forward(&mut g, xv, ts, prompts, cond, norms)?;
            g.value(v).clone()
        };
        if guidance == 0.0 {
            return Ok(v_cond);
        }
        let null = vec![NULL_PROMPT; prompts.len()];
        let v_uncond = {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let v = self.forward(&mut g, xv, ts, &null, cond, None)?;
            g.value(v).clone()
        };
        v_uncond.zip_map(&v_cond, |u, c| u + guidance * (c - u))
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::from([
            ("kind".to_string(), "backbone".to_string()),
            ("blocks".to_string(), self.arch.blocks.to_string()),
            ("hidden".to_string(), self.arch.hidden.to_string()),
            ("pre_scale".to_string(), self.arch.pre_scale.to_string()),
            ("post_scale".to_string(), self.arch.post_scale.to_string()),
            ("distilled".to_string(), self.distilled.to_string()),
        ]);
        m.extend(self.provenance.clone());
        m
    }

    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = self.metadata();
        meta.extend(extra.clone());
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let (params, meta) = ParamSet::load(path)?;
        let bad = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if meta.get("kind").map(String::as_str) != Some("backbone") {
            return Err(bad("not a backbone checkpoint"));
        }
        let num = |k: &str| -> Result<f64> {
            meta.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(&format!("missing {k}")))
        };
        let arch = BackboneArch {
            blocks: num("blocks")? as usize,
            hidden: num("hidden")? as usize,
            pre_scale: num("pre_scale")?,
            post_scale: num("post_scale")?,
        };
        let distilled = meta.get("distilled").map(String::as_str) == Some("true");
        let provenance = meta
            .iter()
            .filter(|(k, _)| matches!(k.as_str(), "teacher_sha" | "target_steps" | "parent_sha" | "reflow_parent_sha"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok((
            Self {
                params,
                arch,
                distilled,
                provenance,
            },
            meta,
        ))
    }
}

/// Slope in `x_t` of the optimal velocity for a Gaussian pixel of variance
/// `data_var`. The network output is added to this baseline, so it only has
/// to model what the per-pixel Gaussian misses.
pub fn skip_gain(t: f64, data_var: f64) -> f64 {
    let s = 1.0 - t;
    (s * data_var - t) / (s * s * data_var + t * t)
}

/// Euler integration from `t = 1` to `t = 0` in `steps` uniform steps.
///
/// `field(x, step, t)` returns the velocity; the returned trajectory holds
/// `steps + 1` states, starting with `x_init`.
pub fn euler_integrate(
    x_init: Tensor,
    steps: usize,
    mut field: impl FnMut(&Tensor, usize, f64) -> Result<Tensor>,
) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::contract("sampling needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(x_init);
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let x = traj.last().expect("non-empty");
        let v = field(x, k, t)?;
        let next = x.zip_map(&v, |a, b| a + dt * b)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Initial noise for a sampling seed.
pub fn initial_noise(seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "sample-noise", &[]);
    Tensor::row(rng::gaussian_vec(&mut r, PIXELS))
}

pub fn tensor_sha(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone)]
pub struct SampleRequest<'a> {
    pub steps: usize,
    pub guidance: f64,
    pub prompt: PromptTransform,
    pub adapter: Option<AdapterCond<'a>>,
    pub seed: u64,
    pub capture_streams: bool,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub image: FaceImage,
    pub trajectory: Vec<Tensor>,
    pub streams: Option<StreamCapture>,
    pub noise_sha: String,
}

/// Draws one image. Pixels are clamped to `[0, 1]` only after the last step.
pub fn sample(backbone: &FlowBackbone, req: &SampleRequest<'_>) -> Result<Sample> {
    if req.steps == 0 {
        return Err(Error::contract("sampling needs at least one step"));
    }
    if let Some(c) = &req.adapter {
        if c.adapter.head_count() != backbone.block_count() {
            return Err(Error::Compatibility(format!(
                "adapter has {} heads, backbone has {} blocks",
                c.adapter.head_count(),
                backbone.block_count()
            )));
        }
    }
    let eps = initial_noise(req.seed);
    let noise_sha = tensor_sha(&eps);
    let prompts = [req.prompt.kind.prompt_index()];
    let mut capture = req.capture_streams.then(StreamCapture::default);
    let trajectory = euler_integrate(eps, req.steps, |x, step, t| {
        let mut norms = BlockNorms::new();
        let v = backbone.guided_velocity(
            x,
            &[t],
            &prompts,
            req.guidance,
            req.adapter.as_ref(),
            capture.is_some().then_some(&mut norms),
        )?;
        if let Some(cap) = capture.as_mut() {
            for (block, &(s0, s1)) in norms[0].iter().enumerate() {
                cap.entries.push(StreamEntry {
                    step,
                    t,
                    block,
                    s0_norm: s0,
                    s1_norm: s1,
                });
            }
        }
        Ok(v)
    })?;
    let last = trajectory.last().expect("steps >= 1").data().to_vec();
    let image = FaceImage::from_pixels(last, None, req.prompt)?;
    Ok(Sample {
        image,
        trajectory,
        streams: capture,
        noise_sha,
    })
}

/// Batched, adapter-free sampling used to build training couplings.
pub fn sample_batch(
    backbone: &FlowBackbone,
    eps: &Tensor,
    prompts: &[usize],
    steps: usize,
    guidance: f64,
) -> Result<Tensor> {
    let traj = euler_integrate(eps.clone(), steps, |x, _, t| {
        let ts = vec![t; prompts.len()];
        backbone.guided_velocity(x, &ts, prompts, guidance, None, None)
    })?;
    Ok(traj.last().expect("non-empty").map(|p| p.clamp(0.0, 1.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub prompt_dropout: f64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 5e-4,
            batch: 64,
            seed: 0,
            prompt_dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: u64,
}

/// One flow-matching example: data endpoint, optional coupled noise, prompt.
pub(crate) struct FlowExample<'a> {
    pub x0: &'a [f64],
    pub eps: Option<&'a [f64]>,
    pub prompt: usize,
}

pub(crate) struct FlowBatch {
    pub xt: Tensor,
    pub target: Tensor,
    pub ts: Vec<f64>,
    pub prompts: Vec<usize>,
}

pub(crate) fn flow_batch(
    examples: &[&FlowExample<'_>],
    prompt_dropout: f64,
    rng: &mut impl Rng,
) -> Result<FlowBatch> {
    let n = examples.len();
    let mut xt = Vec::with_capacity(n * PIXELS);
    let mut target = Vec::with_capacity(n * PIXELS);
    let mut ts = Vec::with_capacity(n);
    let mut prompts = Vec::with_capacity(n);
    for ex in examples {
        let t: f64 = rng.gen_range(0.0..=1.0);
        let fresh;
        let eps = match ex.eps {
            Some(e) => e,
            None => {
                fresh = rng::gaussian_vec(rng, PIXELS);
                &fresh
            }
        };
        for (&a, &b) in ex.x0.iter().zip(eps) {
            xt.push((1.0 - t) * a + t * b);
            target.push(a - b);
        }
        ts.push(t);
        let drop = prompt_dropout > 0.0 && rng.gen_bool(prompt_dropout);
        prompts.push(if drop { NULL_PROMPT } else { ex.prompt });
    }
    Ok(FlowBatch {
        xt: Tensor::new(vec![n, PIXELS], xt)?,
        target: Tensor::new(vec![n, PIXELS], target)?,
        ts,
        prompts,
    })
}

fn flow_loss(
    model: &FlowBackbone,
    batch: &FlowBatch,
    cond: Option<&AdapterCond<'_>>,
) -> Result<(Graph, Var)> {
    let mut g = Graph::new();
    let x = g.constant(batch.xt.clone());
    let v = model.forward(&mut g, x, &batch.ts, &batch.prompts, cond, None)?;
    let target = g.constant(batch.target.clone());
    let loss = g.mse(v, target)?;
    Ok((g, loss))
}

/// Mean flow-matching loss on a fixed probe batch.
pub(crate) fn probe_loss(model: &FlowBackbone, examples: &[FlowExample<'_>], seed: u64) -> Result<f64> {
    let mut r = rng::stream(seed, "probe-batch", &[]);
    let refs: Vec<&FlowExample<'_>> = examples.iter().take(256).collect();
    let batch = flow_batch(&refs, 0.0, &mut r)?;
    let (g, loss) = flow_loss(model, &batch, None)?;
    Ok(g.value(loss).data()[0])
}

/// Minibatch flow matching over `examples` with Adam.
pub(crate) fn fit_flow(
    model: &mut FlowBackbone,
    examples: &[FlowExample<'_>],
    cfg: &FlowTrainConfig,
    label: &str,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::contract("flow matching needs at least one example"));
    }
    let initial_loss = probe_loss(model, examples, cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut r = rng::stream(cfg.seed, label, &[]);
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let refs: Vec<&FlowExample<'_>> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = flow_batch(&refs, cfg.prompt_dropout, &mut r)?;
            let (g, loss) = flow_loss(model, &batch, None)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Training(format!("{label}: loss diverged at step {steps}")));
            }
            g.backward(loss, &mut [model.params_mut()])?;
            model.params_mut().adam_step(&adam)?;
            steps += 1;
        }
    }
    let final_loss = probe_loss(model, examples, cfg.seed)?;
    if !final_loss.is_finite() {
        return Err(Error::Training(format!("{label}: final loss is not finite")));
    }
    Ok(TrainReport {
        initial_loss,
        final_loss,
        steps,
    })
}

/// Per-pixel mean and variance over a set of images.
pub(crate) fn pixel_moments<'a>(images: impl Iterator<Item = &'a [f64]>) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; PIXELS];
    let mut sq = vec![0.0; PIXELS];
    let mut n = 0usize;
    for img in images {
        for ((s, q), &p) in sum.iter_mut().zip(sq.iter_mut()).zip(img) {
            *s += p;
            *q += p * p;
        }
        n += 1;
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let var = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0))
        .collect();
    (mean, var)
}

/// Trains the prompt-conditioned (identity-agnostic) teacher and freezes it.
pub fn train_teacher(
    dataset: &[DatasetItem],
    arch: &BackboneArch,
    cfg: &FlowTrainConfig,
) -> Result<(FlowBackbone, TrainReport)> {
    let examples: Vec<FlowExample<'_>> = dataset
        .iter()
        .map(|it| FlowExample {
            x0: it.image.data(),
            eps: None,
            prompt: it.image.transform.kind.prompt_index(),
        })
        .collect();
    let mut model = FlowBackbone::init(arch, cfg.seed)?;
    let (mean, var) = pixel_moments(dataset.iter().map(|it| it.image.data()));
    model.set_data_stats(mean, var)?;
    let report = fit_flow(&mut model, &examples, cfg, "teacher")?;
    model.freeze();
    Ok((model, report))
}
