//! Few-step student: reflow on teacher couplings, then endpoint matching of
//! an unrolled few-step sampler against the teacher's many-step output.
//! The adapter never takes part.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{
    fit_flow, initial_noise, sample_batch, FlowBackbone, FlowExample, FlowTrainConfig,
    TrainReport, TEACHER_GUIDANCE, TEACHER_STEPS,
};
use crate::error::{Error, Result};
use crate::faces::TransformKind;
use crate::nn::stack_rows;
use crate::params::AdamConfig;
use crate::rng;

/// Noise/output pairs from the guided teacher sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTable {
    pub seeds: Vec<u64>,
    pub prompts: Vec<usize>,
    pub noise: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl CouplingTable {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CouplingConfig {
    pub n_pairs: usize,
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            n_pairs: 768,
            seed: 0,
            steps: TEACHER_STEPS,
            guidance: TEACHER_GUIDANCE,
        }
    }
}

/// Seed of coupling pair `i`; kept disjoint from evaluation seeds.
pub fn coupling_seed(master: u64, i: usize) -> u64 {
    rng::derive_seed(master, "coupling", &[i as u64])
}

/// Samples the frozen teacher at `(steps, guidance)` from deterministic noise,
/// cycling through the three prompts.
pub fn make_couplings(teacher: &FlowBackbone, cfg: &CouplingConfig) -> Result<CouplingTable> {
    if !teacher.is_frozen() {
        return Err(Error::contract("teacher must be frozen"));
    }
    if cfg.n_pairs == 0 {
        return Err(Error::contract("reflow needs at least one coupling pair"));
    }
    let seeds: Vec<u64> = (0..cfg.n_pairs).map(|i| coupling_seed(cfg.seed, i)).collect();
    let prompts: Vec<usize> = (0..cfg.n_pairs)
        .map(|i| TransformKind::ALL[i % 3].prompt_index())
        .collect();
    let noise: Vec<Vec<f64>> = seeds.iter().map(|&s| initial_noise(s).into_data()).collect();
    let mut outputs = Vec::with_capacity(cfg.n_pairs);
    for (chunk_noise, chunk_prompts) in noise.chunks(64).zip(prompts.chunks(64)) {
        let eps = stack_rows(chunk_noise.iter().map(Vec::as_slice))?;
        let out = sample_batch(teacher, &eps, chunk_prompts, cfg.steps, cfg.guidance)?;
        let (rows, _) = out.dims2()?;
        for r in 0..rows {
            outputs.push(out.row_slice(r).to_vec());
        }
    }
    Ok(CouplingTable {
        seeds,
        prompts,
        noise,
        outputs,
    })
}

/// Straight-line flow matching on the teacher's couplings, warm-started from
/// the teacher weights. Returns the frozen reflowed backbone.
pub fn reflow(
    teacher: &FlowBackbone,
    couplings: &CouplingTable,
    cfg: &FlowTrainConfig,
) -> Result<(FlowBackbone, TrainReport)> {
    if !teacher.is_frozen() {
        return Err(Error::contract("teacher must be frozen"));
    }
    if couplings.is_empty() {
        return Err(Error::contract("reflow needs at least one coupling pair"));
    }
    let examples: Vec<FlowExample<'_>> = (0..couplings.len())
        .map(|i| FlowExample {
            x0: &couplings.outputs[i],
            eps: Some(&couplings.noise[i]),
            prompt: couplings.prompts[i],
        })
        .collect();
    let teacher_sha = teacher.checksum();
    let mut model = teacher.thawed_copy();
    let report = fit_flow(&mut model, &examples, cfg, "reflow")?;
    if teacher.checksum() != teacher_sha {
        return Err(Error::contract("teacher changed during reflow"));
    }
    model.set_provenance(BTreeMap::from([(
        "parent_sha".to_string(),
        teacher_sha,
    )]));
    model.freeze();
    Ok((model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub target_steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            target_steps: 4,
            epochs: 8,
            lr: 2e-4,
            batch: 32,
            seed: 0,
        }
    }
}

/// Endpoint distillation: the student's unrolled `target_steps` Euler sampler
/// at guidance 0 is regressed onto the guided many-step teacher outputs.
pub fn distill_endpoint(
    reflowed: &FlowBackbone,
    teacher: &FlowBackbone,
    couplings: &CouplingTable,
    cfg: &DistillConfig,
) -> Result<(FlowBackbone, TrainReport)> {
    if cfg.target_steps < 1 {
        return Err(Error::contract("target_steps must be at least 1"));
    }
    if !reflowed.is_frozen() || !teacher.is_frozen() {
        return Err(Error::contract("reflowed and teacher backbones must be frozen"));
    }
    if reflowed.arch() != teacher.arch() {
        return Err(Error::Compatibility("student and teacher architectures differ".into()));
    }
    if couplings.is_empty() {
        return Err(Error::contract("distillation needs coupling pairs"));
    }
    let teacher_sha = teacher.checksum();
    let mut student = reflowed.thawed_copy();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..couplings.len()).collect();
    let mut r = rng::stream(cfg.seed, "distill", &[]);
    let probe: Vec<usize> = (0..couplings.len().min(128)).collect();
    let initial_loss = {
        let (g, loss) = endpoint_graph(&student, couplings, &probe, cfg.target_steps)?;
        g.value(loss).data()[0]
    };
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let (g, loss) = endpoint_graph(&student, couplings, chunk, cfg.target_steps)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Training(format!("distillation diverged at step {steps}")));
            }
            g.backward(loss, &mut [student.params_mut()])?;
            student.params_mut().adam_step(&adam)?;
            steps += 1;
        }
    }
    let final_loss = {
        let (g, loss) = endpoint_graph(&student, couplings, &probe, cfg.target_steps)?;
        g.value(loss).data()[0]
    };
    if teacher.checksum() != teacher_sha {
        return Err(Error::contract("teacher changed during distillation"));
    }
    let mut provenance = BTreeMap::from([
        ("teacher_sha".to_string(), teacher_sha),
        ("target_steps".to_string(), cfg.target_steps.to_string()),
        ("parent_sha".to_string(), reflowed.checksum()),
    ]);
    if let Some(root) = reflowed.provenance().get("parent_sha") {
        provenance.insert("reflow_parent_sha".to_string(), root.clone());
    }
    student.mark_distilled(provenance);
    student.freeze();
    Ok((
        student,
        TrainReport {
            initial_loss,
            final_loss,
            steps,
        },
    ))
}

/// Unrolled guidance-free Euler sampler from coupled noise, scored by pixel
/// MSE against the coupled teacher outputs.
fn endpoint_graph(
    student: &FlowBackbone,
    couplings: &CouplingTable,
    idx: &[usize],
    steps: usize,
) -> Result<(Graph, crate::autodiff::Var)> {
    let eps = stack_rows(idx.iter().map(|&i| couplings.noise[i].as_slice()))?;
    let target = stack_rows(idx.iter().map(|&i| couplings.outputs[i].as_slice()))?;
    let prompts: Vec<usize> = idx.iter().map(|&i| couplings.prompts[i]).collect();
    let dt = 1.0 / steps as f64;
    let mut g = Graph::new();
    let mut x = g.constant(eps);
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let ts = vec![t; idx.len()];
        let v = student.forward(&mut g, x, &ts, &prompts, None, None)?;
        let step = g.scale(v, dt);
        x = g.add(x, step)?;
    }
    let tv = g.constant(target);
    let loss = g.mse(x, tv)?;
    Ok((g, loss))
}

/// Mean pixel MSE between two equally sized images.
pub fn pixel_mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneArch;
    use crate::faces::PIXELS;

    fn tiny_teacher() -> FlowBackbone {
        let mut t = FlowBackbone::init(&BackboneArch { hidden: 8, ..Default::default() }, 3).unwrap();
        t.freeze();
        t
    }

    #[test]
    fn couplings_are_deterministic_and_nonempty() {
        let t = tiny_teacher();
        let cfg = CouplingConfig { n_pairs: 5, steps: 2, ..Default::default() };
        let a = make_couplings(&t, &cfg).unwrap();
        let b = make_couplings(&t, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(a.outputs[0].len(), PIXELS);
        let empty = CouplingConfig { n_pairs: 0, ..cfg };
        assert!(matches!(make_couplings(&t, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_epoch_distillation_is_a_copy() {
        let t = tiny_teacher();
        let cpl = make_couplings(&t, &CouplingConfig { n_pairs: 4, steps: 2, ..Default::default() }).unwrap();
        let (reflowed, _) = reflow(&t, &cpl, &FlowTrainConfig { epochs: 1, batch: 4, ..Default::default() }).unwrap();
        let (student, _) = distill_endpoint(&reflowed, &t, &cpl, &DistillConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(student.checksum(), reflowed.checksum());
        assert!(student.is_distilled());
        assert_eq!(student.provenance()["target_steps"], "4");
        assert_eq!(student.provenance()["teacher_sha"], t.checksum());
        assert_eq!(student.provenance()["parent_sha"], reflowed.checksum());
        assert_eq!(reflowed.provenance()["parent_sha"], t.checksum());

        let bad = DistillConfig { target_steps: 0, ..Default::default() };
        assert!(distill_endpoint(&reflowed, &t, &cpl, &bad).is_err());
    }
}
