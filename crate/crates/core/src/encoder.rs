//! Frozen identity encoder: the measurement instrument behind identity
//! similarity, detector confidence and the perceptual distance.
//!
//! A 1024-128-64-8 tanh MLP is trained as an identity classifier (8 -> n
//! linear head). The 8-dim pre-classifier output, L2-normalized, is the
//! identity embedding; the 64-dim hidden layer feeds the perceptual distance.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::faces::{DatasetItem, FaceImage, PIXELS};
use crate::nn::{init_linear, linear, stack_rows};
use crate::params::{AdamConfig, ParamSet};
use crate::rng;
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 8;
pub const FEATURE_DIM: usize = 64;
const HIDDEN: usize = 128;
pub const REQUIRED_ACCURACY: f64 = 0.95;

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding(Vec<f64>);

impl IdentityEmbedding {
    /// Normalizes `raw` to unit length.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.len() != EMBED_DIM {
            return Err(Error::shape(format!(
                "embedding needs {EMBED_DIM} values, got {}",
                raw.len()
            )));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::contract("cannot normalize a zero embedding"));
        }
        Ok(Self(raw.iter().map(|v| v / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        let dot: f64 = self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum();
        dot.clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 2e-3,
            batch: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderModel {
    params: ParamSet,
    n_identities: usize,
    heldout_accuracy: f64,
}

struct Forward {
    features: Var,
    embedding: Var,
    logits: Var,
}

fn input_rows(images: &[&FaceImage]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = images
        .iter()
        .map(|im| im.data().iter().map(|p| p - 0.5).collect())
        .collect();
    stack_rows(rows.iter().map(Vec::as_slice))
}

impl EncoderModel {
    fn init(n_identities: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "encoder-init", &[]);
        let mut params = ParamSet::new();
        init_linear(&mut params, "enc1", PIXELS, HIDDEN, 1.0, &mut r);
        init_linear(&mut params, "enc2", HIDDEN, FEATURE_DIM, 1.0, &mut r);
        init_linear(&mut params, "enc3", FEATURE_DIM, EMBED_DIM, 1.0, &mut r);
        init_linear(&mut params, "cls", EMBED_DIM, n_identities, 1.0, &mut r);
        Self {
            params,
            n_identities,
            heldout_accuracy: 0.0,
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Forward> {
        let h1 = linear(g, &self.params, "enc1", x)?;
        let h1 = g.tanh(h1);
        let h2 = linear(g, &self.params, "enc2", h1)?;
        let features = g.tanh(h2);
        let embedding = linear(g, &self.params, "enc3", features)?;
        let logits = linear(g, &self.params, "cls", embedding)?;
        Ok(Forward {
            features,
            embedding,
            logits,
        })
    }

    pub fn n_identities(&self) -> usize {
        self.n_identities
    }

    pub fn is_frozen(&self) -> bool {
        self.params.is_frozen()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn heldout_accuracy(&self) -> f64 {
        self.heldout_accuracy
    }

    fn require_frozen(&self) -> Result<()> {
        if !self.is_frozen() {
            return Err(Error::contract("encoder must be frozen before measuring"));
        }
        Ok(())
    }

    fn run(&self, image: &FaceImage) -> Result<(Tensor, Tensor, Tensor)> {
        let mut g = Graph::new();
        let x = g.constant(input_rows(&[image])?);
        let f = self.forward(&mut g, x)?;
        Ok((
            g.value(f.features).clone(),
            g.value(f.embedding).clone(),
            g.value(f.logits).clone(),
        ))
    }

    pub fn embed(&self, image: &FaceImage) -> Result<IdentityEmbedding> {
        self.require_frozen()?;
        let (_, e, _) = self.run(image)?;
        IdentityEmbedding::from_raw(e.data())
    }

    pub fn id_similarity(&self, generated: &FaceImage, reference: &FaceImage) -> Result<f64> {
        Ok(self.embed(generated)?.cosine(&self.embed(reference)?))
    }

    /// Maximum softmax probability of the identity classifier.
    pub fn detector_confidence(&self, image: &FaceImage) -> Result<f64> {
        self.require_frozen()?;
        let (_, _, logits) = self.run(image)?;
        Ok(max_softmax(logits.data()))
    }

    /// Mean squared distance between 64-dim hidden features.
    pub fn perceptual_distance(&self, a: &FaceImage, b: &FaceImage) -> Result<f64> {
        self.require_frozen()?;
        let (fa, _, _) = self.run(a)?;
        let (fb, _, _) = self.run(b)?;
        Ok(fa
            .data()
            .iter()
            .zip(fb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / FEATURE_DIM as f64)
    }

    pub fn predict(&self, image: &FaceImage) -> Result<usize> {
        let (_, _, logits) = self.run(image)?;
        Ok(argmax(logits.data()))
    }

    pub fn accuracy(&self, items: &[DatasetItem]) -> Result<f64> {
        let mut correct = 0;
        for it in items {
            if self.predict(&it.image)? == it.identity_id as usize {
                correct += 1;
            }
        }
        Ok(correct as f64 / items.len().max(1) as f64)
    }

    pub fn metadata(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("kind".to_string(), "encoder".to_string()),
            ("n_identities".to_string(), self.n_identities.to_string()),
            (
                "heldout_accuracy".to_string(),
                format!("{:.6}", self.heldout_accuracy),
            ),
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
        if meta.get("kind").map(String::as_str) != Some("encoder") {
            return Err(bad("not an encoder checkpoint"));
        }
        let n_identities = meta
            .get("n_identities")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing n_identities"))?;
        let heldout_accuracy = meta
            .get("heldout_accuracy")
            .and_then(|v| v.parse().ok())
            .unwrap_or(0.0);
        Ok((
            Self {
                params,
                n_identities,
                heldout_accuracy,
            },
            meta,
        ))
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn max_softmax(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    1.0 / z
}

/// Trains the identity classifier on clean renders, checks held-out accuracy
/// and returns the frozen model.
pub fn train_encoder(
    train: &[DatasetItem],
    heldout: &[DatasetItem],
    n_identities: usize,
    cfg: &EncoderTrainConfig,
) -> Result<EncoderModel> {
    if n_identities < 2 {
        return Err(Error::contract("encoder needs at least 2 identities"));
    }
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::contract("empty training or held-out set"));
    }
    if let Some(bad) = train
        .iter()
        .chain(heldout)
        .find(|it| it.identity_id as usize >= n_identities)
    {
        return Err(Error::contract(format!(
            "label {} outside {n_identities} identities",
            bad.identity_id
        )));
    }
    let mut model = EncoderModel::init(n_identities, cfg.seed);
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = rng::stream(cfg.seed, "encoder-shuffle", &[]);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let images: Vec<&FaceImage> = chunk.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<usize> = chunk
                .iter()
                .map(|&i| train[i].identity_id as usize)
                .collect();
            let mut g = Graph::new();
            let x = g.constant(input_rows(&images)?);
            let f = model.forward(&mut g, x)?;
            let loss = g.softmax_cross_entropy(f.logits, &labels)?;
            if !g.value(loss).data()[0].is_finite() {
                return Err(Error::Training("encoder loss diverged".into()));
            }
            g.backward(loss, &mut [&mut model.params])?;
            model.params.adam_step(&adam)?;
        }
    }
    let acc = model.accuracy(heldout)?;
    model.heldout_accuracy = acc;
    if acc < REQUIRED_ACCURACY {
        return Err(Error::Training(format!(
            "encoder held-out accuracy {acc:.3} below {REQUIRED_ACCURACY} after {} epochs",
            cfg.epochs
        )));
    }
    model.params.freeze();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_normalizes_and_cosines() {
        let a = IdentityEmbedding::from_raw(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((a.as_slice().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let b = IdentityEmbedding::from_raw(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(a.cosine(&b), 0.0);
        assert!((a.cosine(&a) - 1.0).abs() < 1e-12);
        assert!(IdentityEmbedding::from_raw(&[0.0; 8]).is_err());
        assert!(IdentityEmbedding::from_raw(&[1.0; 3]).is_err());
    }

    #[test]
    fn max_softmax_is_bounded() {
        assert!((max_softmax(&[0.0, 0.0]) - 0.5).abs() < 1e-12);
        let p = max_softmax(&[1000.0, -1000.0, 3.0]);
        assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn unfrozen_encoder_refuses_to_measure() {
        let m = EncoderModel::init(2, 0);
        let img = crate::faces::reference_render(0);
        assert!(matches!(m.embed(&img), Err(Error::Contract(_))));
    }
}
