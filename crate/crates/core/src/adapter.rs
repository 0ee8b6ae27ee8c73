//! Residual identity adapter.
//!
//! One head per backbone block maps `[e_id; time embedding]` (8 + 16) through
//! a 64-wide SiLU layer to a 1024-wide residual. At block `l` the backbone
//! stream becomes `h + alpha * head_l(e_id, t)`. The adapter is trained once
//! against a frozen teacher and then reused, unchanged, on other backbones.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{flow_batch, time_rows, FlowBackbone, FlowExample, BLOCKS, TIME_DIM};
use crate::encoder::{EncoderModel, IdentityEmbedding, EMBED_DIM};
use crate::error::{Error, Result};
use crate::faces::{reference_render, DatasetItem, PIXELS};
use crate::nn::{init_linear, linear, stack_rows};
use crate::params::{AdamConfig, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

const HEAD_HIDDEN: usize = 64;
pub const WEAK_ALPHA: f64 = 0.25;

/// Adapter inputs for one batch: the stack, one embedding row per sample, and alpha.
#[derive(Debug, Clone)]
pub struct AdapterCond<'a> {
    pub adapter: &'a AdapterStack,
    pub embeddings: Tensor,
    pub alpha: f64,
}

impl<'a> AdapterCond<'a> {
    pub fn single(adapter: &'a AdapterStack, e_id: &IdentityEmbedding, alpha: f64) -> Self {
        Self {
            adapter,
            embeddings: Tensor::row(e_id.as_slice().to_vec()),
            alpha,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdapterStack {
    params: ParamSet,
    heads: usize,
    trained_against: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub prompt_dropout: f64,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch: 64,
            seed: 0,
            prompt_dropout: 0.1,
        }
    }
}

impl AdapterStack {
    pub fn init(heads: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "adapter-init", &[]);
        let mut params = ParamSet::new();
        for l in 0..heads {
            init_linear(&mut params, &format!("adapter{l}.fc1"), EMBED_DIM + TIME_DIM, HEAD_HIDDEN, 1.0, &mut r);
            init_linear(&mut params, &format!("adapter{l}.fc2"), HEAD_HIDDEN, PIXELS, 0.1, &mut r);
        }
        Self {
            params,
            heads,
            trained_against: String::new(),
        }
    }

    pub fn head_count(&self) -> usize {
        self.heads
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

    pub fn trained_against(&self) -> &str {
        &self.trained_against
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Head `l` evaluated on the tape: `[B x 8]`, `[B x 16]` -> `[B x 1024]`.
    pub fn residual(&self, g: &mut Graph, block: usize, e_id: Var, temb: Var) -> Result<Var> {
        if block >= self.heads {
            return Err(Error::contract(format!(
                "block {block} out of range for {} adapter heads",
                self.heads
            )));
        }
        let x = g.concat(&[e_id, temb])?;
        let z = linear(g, &self.params, &format!("adapter{block}.fc1"), x)?;
        let z = g.silu(z);
        linear(g, &self.params, &format!("adapter{block}.fc2"), z)
    }

    /// Standalone head output for one embedding at time `t`.
    pub fn head_output(&self, block: usize, e_id: &IdentityEmbedding, t: f64) -> Result<Tensor> {
        let mut g = Graph::new();
        let e = g.constant(Tensor::row(e_id.as_slice().to_vec()));
        let temb = g.constant(time_rows(&[t]));
        let r = self.residual(&mut g, block, e, temb)?;
        Ok(g.value(r).clone())
    }

    /// `h + alpha * head_l(e_id, t)`; `alpha == 0` returns `h` untouched.
    pub fn inject(
        &self,
        block: usize,
        h: &Tensor,
        e_id: &IdentityEmbedding,
        t: f64,
        alpha: f64,
    ) -> Result<Tensor> {
        if block >= self.heads {
            return Err(Error::contract(format!(
                "block {block} out of range for {} adapter heads",
                self.heads
            )));
        }
        if alpha == 0.0 {
            return Ok(h.clone());
        }
        let r = self.head_output(block, e_id, t)?.reshape(h.shape())?;
        h.zip_map(&r, |a, b| a + alpha * b)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "adapter".to_string()),
            ("heads".to_string(), self.heads.to_string()),
            ("trained_against".to_string(), self.trained_against.clone()),
        ])
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
        if meta.get("kind").map(String::as_str) != Some("adapter") {
            return Err(bad("not an adapter checkpoint"));
        }
        let heads = meta
            .get("heads")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing heads"))?;
        let trained_against = meta
            .get("trained_against")
            .cloned()
            .ok_or_else(|| bad("missing trained_against"))?;
        Ok((
            Self {
                params,
                heads,
                trained_against,
            },
            meta,
        ))
    }
}

/// An adapter bound to a backbone it was not necessarily trained against.
#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter<'a> {
    pub adapter: &'a AdapterStack,
    pub backbone_sha: &'a str,
    pub adapter_sha: &'a str,
}

impl BoundAdapter<'_> {
    /// True when the target backbone differs from the training backbone.
    pub fn is_cross_backbone(&self) -> bool {
        self.adapter.trained_against() != self.backbone_sha
    }

    pub fn cond(&self, e_id: &IdentityEmbedding, alpha: f64) -> AdapterCond<'_> {
        AdapterCond::single(self.adapter, e_id, alpha)
    }
}

/// Training-free transfer: checks structural compatibility and binds the
/// adapter to `backbone` without touching any parameter.
pub fn transfer<'a>(
    adapter: &'a AdapterStack,
    adapter_sha: &'a str,
    backbone: &'a FlowBackbone,
    backbone_sha: &'a str,
) -> Result<BoundAdapter<'a>> {
    if !adapter.is_frozen() {
        return Err(Error::contract("adapter must be frozen before transfer"));
    }
    if !backbone.is_frozen() {
        return Err(Error::contract("target backbone must be frozen"));
    }
    if adapter.head_count() != backbone.block_count() {
        return Err(Error::Compatibility(format!(
            "adapter has {} heads, backbone has {} blocks",
            adapter.head_count(),
            backbone.block_count()
        )));
    }
    Ok(BoundAdapter {
        adapter,
        backbone_sha,
        adapter_sha,
    })
}

/// Reference embeddings, one per identity, from the canonical reference render.
pub fn reference_embeddings(encoder: &EncoderModel, n_identities: usize) -> Result<Vec<IdentityEmbedding>> {
    (0..n_identities as u32)
        .map(|id| encoder.embed(&reference_render(id)))
        .collect()
}

/// Trains adapter heads by flow matching through the frozen teacher.
pub fn train_adapter(
    teacher: &FlowBackbone,
    encoder: &EncoderModel,
    dataset: &[DatasetItem],
    cfg: &AdapterTrainConfig,
) -> Result<AdapterStack> {
    if !teacher.is_frozen() || !encoder.is_frozen() {
        return Err(Error::contract("teacher and encoder must be frozen"));
    }
    if dataset.is_empty() {
        return Err(Error::contract("empty adapter training set"));
    }
    let teacher_sha = teacher.checksum();
    let encoder_sha = encoder.checksum();
    let n_ids = dataset.iter().map(|it| it.identity_id).max().unwrap_or(0) as usize + 1;
    let refs = reference_embeddings(encoder, n_ids)?;

    let mut adapter = AdapterStack::init(BLOCKS.min(teacher.block_count()), cfg.seed);
    if adapter.head_count() != teacher.block_count() {
        return Err(Error::Compatibility("teacher block count".into()));
    }
    let examples: Vec<FlowExample<'_>> = dataset
        .iter()
        .map(|it| FlowExample {
            x0: it.image.data(),
            eps: None,
            prompt: it.image.transform.kind.prompt_index(),
        })
        .collect();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut r = rng::stream(cfg.seed, "adapter-train", &[]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let exs: Vec<&FlowExample<'_>> = chunk.iter().map(|&i| &examples[i]).collect();
            let batch = flow_batch(&exs, cfg.prompt_dropout, &mut r)?;
            let emb = stack_rows(
                chunk
                    .iter()
                    .map(|&i| refs[dataset[i].identity_id as usize].as_slice()),
            )?;
            let cond = AdapterCond {
                adapter: &adapter,
                embeddings: emb,
                alpha: 1.0,
            };
            let mut g = Graph::new();
            let x = g.constant(batch.xt);
            let v = teacher.forward(&mut g, x, &batch.ts, &batch.prompts, Some(&cond), None)?;
            let target = g.constant(batch.target);
            let loss = g.mse(v, target)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Training("adapter loss diverged".into()));
            }
            // Only the adapter set is trainable; teacher leaves are constants.
            g.backward(loss, &mut [&mut adapter.params])?;
            adapter.params.adam_step(&adam)?;
        }
    }
    if teacher.checksum() != teacher_sha || encoder.checksum() != encoder_sha {
        return Err(Error::contract(
            "teacher or encoder parameters changed during adapter training",
        ));
    }
    adapter.trained_against = teacher_sha;
    adapter.freeze();
    Ok(adapter)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb() -> IdentityEmbedding {
        IdentityEmbedding::from_raw(&[0.3, -0.1, 0.5, 0.2, -0.7, 0.05, 0.0, 0.4]).unwrap()
    }

    #[test]
    fn zero_alpha_is_bitwise_noop() {
        let a = AdapterStack::init(4, 1);
        let h = Tensor::row((0..PIXELS).map(|i| if i % 3 == 0 { -0.0 } else { i as f64 }).collect());
        let out = a.inject(2, &h, &emb(), 0.4, 0.0).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out), bits(&h));
    }

    #[test]
    fn residual_is_linear_in_alpha() {
        let a = AdapterStack::init(4, 1);
        let h = Tensor::row(vec![0.25; PIXELS]);
        let head = a.head_output(1, &emb(), 0.6).unwrap();
        let base = a.inject(1, &h, &emb(), 0.6, 1.0).unwrap();
        // alpha = 1: output minus input is the standalone head.
        for ((o, i), r) in base.data().iter().zip(h.data()).zip(head.data()) {
            assert!(((o - i) - r).abs() < 1e-12);
        }
        for alpha in [0.0, 0.25, 0.5, 1.0, 2.0] {
            let out = a.inject(1, &h, &emb(), 0.6, alpha).unwrap();
            for ((o, i), r) in out.data().iter().zip(h.data()).zip(head.data()) {
                assert!(((o - i) - alpha * r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn block_index_is_checked() {
        let a = AdapterStack::init(4, 0);
        let h = Tensor::row(vec![0.0; PIXELS]);
        assert!(matches!(a.inject(4, &h, &emb(), 0.5, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn transfer_requires_matching_blocks_and_frozen_inputs() {
        use crate::backbone::BackboneArch;
        let mut bb = FlowBackbone::init(&BackboneArch { hidden: 4, ..Default::default() }, 0).unwrap();
        let mut a = AdapterStack::init(4, 0);
        assert!(transfer(&a, "x", &bb, "y").is_err());
        a.freeze();
        bb.freeze();
        let sha = bb.checksum();
        let before = a.checksum();
        let bound = transfer(&a, "x", &bb, &sha).unwrap();
        assert!(bound.is_cross_backbone());
        assert_eq!(a.checksum(), before);

        let three = {
            let mut s = AdapterStack::init(3, 0);
            s.freeze();
            s
        };
        assert!(matches!(
            transfer(&three, "x", &bb, &sha),
            Err(Error::Compatibility(_))
        ));
    }
}
