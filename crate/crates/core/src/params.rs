//! Named parameter sets, the Adam optimizer, and the FPV1 checkpoint format.
//!
//! FPV1 layout (all integers little-endian):
//!
//! ```text
//! "FPV1"
//! u32 metadata entry count, then per entry: u32 key len, key, u32 value len, value
//! u64 parameter count, then per parameter (sorted by name):
//!     u32 name len, name bytes, u32 rank, rank x u64 dims, f64 data
//! ```
//!
//! Metadata always carries `param_sha`, the SHA-256 of the parameter section,
//! which is verified on load.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FPV1";
const SHA_KEY: &str = "param_sha";

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug)]
pub struct ParamSet {
    id: u64,
    params: BTreeMap<String, Arc<Tensor>>,
    grads: BTreeMap<String, Tensor>,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
    step: u64,
    has_grads: bool,
    frozen: bool,
}

impl Clone for ParamSet {
    /// Clones get a fresh identity so gradients never route to the original.
    fn clone(&self) -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
            grads: self.grads.clone(),
            first_moment: self.first_moment.clone(),
            second_moment: self.second_moment.clone(),
            step: self.step,
            has_grads: self.has_grads,
            frozen: self.frozen,
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self {
            id: NEXT_SET_ID.fetch_add(1, Ordering::Relaxed),
            params: BTreeMap::new(),
            grads: BTreeMap::new(),
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
            has_grads: false,
            frozen: false,
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        self.grads
            .insert(name.clone(), Tensor::zeros(value.shape()));
        self.params.insert(name, Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(Arc::as_ref)
    }

    pub(crate) fn get_shared(&self, name: &str) -> Result<Arc<Tensor>> {
        self.params
            .get(name)
            .cloned()
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.first_moment.clear();
        self.second_moment.clear();
    }

    /// Copy of the parameters with fresh optimizer state, not frozen.
    pub fn thawed_copy(&self) -> Self {
        let mut out = Self::new();
        for (name, t) in &self.params {
            out.insert(name.clone(), t.as_ref().clone());
        }
        out
    }

    pub(crate) fn accumulate_grad(&mut self, name: &str, grad: &Tensor) -> Result<()> {
        if self.frozen {
            return Err(Error::contract(format!(
                "gradient written into frozen parameter `{name}`"
            )));
        }
        let slot = self
            .grads
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        slot.add_assign(grad)?;
        self.has_grads = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.values_mut() {
            g.data_mut().fill(0.0);
        }
        self.has_grads = false;
    }

    pub fn has_grads(&self) -> bool {
        self.has_grads
    }

    /// One Adam update with bias correction; gradients are zeroed afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.frozen {
            return Err(Error::contract("optimizer step on a frozen parameter set"));
        }
        if !self.has_grads {
            return Err(Error::contract(
                "optimizer step without gradients (run backward first)",
            ));
        }
        if !(cfg.lr > 0.0
            && (0.0..1.0).contains(&cfg.beta1)
            && cfg.beta1 > 0.0
            && (0.0..1.0).contains(&cfg.beta2)
            && cfg.beta2 > 0.0
            && cfg.eps > 0.0)
        {
            return Err(Error::contract(format!("invalid Adam config {cfg:?}")));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (name, param) in self.params.iter_mut() {
            let grad = &self.grads[name];
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let p = Arc::make_mut(param);
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *pi -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        self.zero_grads();
        Ok(())
    }

    fn encode_params(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.scalar_count() * 8 + 64 * self.len());
        buf.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, t) in &self.params {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    /// Hex SHA-256 over the canonical parameter encoding (names, shapes, values).
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.encode_params()))
    }

    pub fn to_bytes(&self, metadata: &BTreeMap<String, String>) -> Vec<u8> {
        let body = self.encode_params();
        let sha = hex::encode(Sha256::digest(&body));
        let mut meta = metadata.clone();
        meta.insert(SHA_KEY.to_string(), sha);
        let mut out = Vec::with_capacity(body.len() + 256);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        for (k, v) in &meta {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&body);
        out
    }

    pub fn save(&self, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
        let bytes = self.to_bytes(metadata);
        let tmp = path.with_extension("partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    /// Decodes a checkpoint; the returned set is frozen.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let fmt_err = |reason: &str| Error::Format {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4).ok_or_else(|| fmt_err("truncated magic"))? != MAGIC {
            return Err(fmt_err("bad magic (expected FPV1)"));
        }
        let n_meta = r.u32().ok_or_else(|| fmt_err("truncated metadata"))?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string().ok_or_else(|| fmt_err("truncated metadata key"))?;
            let v = r.string().ok_or_else(|| fmt_err("truncated metadata value"))?;
            meta.insert(k, v);
        }
        let body = &bytes[r.pos..];
        let found = hex::encode(Sha256::digest(body));
        let expected = meta
            .remove(SHA_KEY)
            .ok_or_else(|| fmt_err("missing param_sha"))?;
        if found != expected {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                expected,
                found,
            });
        }
        let n = r.u64().ok_or_else(|| fmt_err("truncated parameter count"))?;
        let mut set = ParamSet::new();
        for _ in 0..n {
            let name = r.string().ok_or_else(|| fmt_err("truncated name"))?;
            let rank = r.u32().ok_or_else(|| fmt_err("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64().ok_or_else(|| fmt_err("truncated shape"))? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = r
                .take(count * 8)
                .ok_or_else(|| fmt_err("truncated tensor data"))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| fmt_err(&e.to_string()))?;
            set.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err(fmt_err("trailing bytes"));
        }
        set.freeze();
        Ok((set, meta))
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value));
        p
    }

    #[test]
    fn adam_requires_gradients() {
        let mut p = scalar_set(1.0);
        assert!(matches!(
            p.adam_step(&AdamConfig::default()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut p = scalar_set(0.7);
        p.accumulate_grad("w", &Tensor::scalar(0.0)).unwrap();
        p.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[0.7]);
        assert_eq!(p.step_count(), 1);
    }

    #[test]
    fn adam_single_step_matches_hand_formula() {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.8,
            beta2: 0.9,
            eps: 1e-6,
        };
        let mut p = scalar_set(2.0);
        p.accumulate_grad("w", &Tensor::scalar(0.5)).unwrap();
        p.adam_step(&cfg).unwrap();
        // m = 0.2*0.5 = 0.1, v = 0.1*0.25 = 0.025; m_hat = 0.5, v_hat = 0.25
        let expected = 2.0 - 0.01 * 0.5 / (0.5 + 1e-6);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-12);

        // second step with gradient -1: m = 0.8*0.1 - 0.2 = -0.12, v = 0.9*0.025 + 0.1 = 0.1225
        p.accumulate_grad("w", &Tensor::scalar(-1.0)).unwrap();
        p.adam_step(&cfg).unwrap();
        let m_hat = -0.12 / (1.0 - 0.64);
        let v_hat = 0.1225 / (1.0 - 0.81);
        let expected2 = expected - 0.01 * m_hat / (f64::sqrt(v_hat) + 1e-6);
        assert!((p.get("w").unwrap().data()[0] - expected2).abs() < 1e-12);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut p = scalar_set(0.0);
        let mut last = 0.0;
        for _ in 0..200 {
            p.accumulate_grad("w", &Tensor::scalar(3.0)).unwrap();
            p.adam_step(&AdamConfig::with_lr(0.01)).unwrap();
            let now = p.get("w").unwrap().data()[0];
            assert!(now < last);
            last = now;
        }
        assert_eq!(p.step_count(), 200);
        assert_eq!(p.grad("w").unwrap().data(), &[0.0]);
    }

    #[test]
    fn frozen_set_rejects_updates() {
        let mut p = scalar_set(1.0);
        p.freeze();
        assert!(p.accumulate_grad("w", &Tensor::scalar(1.0)).is_err());
        assert!(p.adam_step(&AdamConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]));
        p.insert(
            "a.w",
            Tensor::new(vec![2, 2], vec![0.1, -0.2, 0.3, std::f64::consts::PI]).unwrap(),
        );
        let mut meta = BTreeMap::new();
        meta.insert("distilled".into(), "true".into());
        let bytes = p.to_bytes(&meta);
        let (q, meta2) = ParamSet::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(meta2, meta);
        assert!(q.is_frozen());
        for name in p.names() {
            let (a, b) = (p.get(name).unwrap(), q.get(name).unwrap());
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(q.to_bytes(&meta), bytes);
        assert_eq!(p.checksum(), q.checksum());
    }

    #[test]
    fn corrupted_checkpoint_is_detected() {
        let p = scalar_set(1.5);
        let mut bytes = p.to_bytes(&BTreeMap::new());
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        assert!(matches!(
            ParamSet::from_bytes(&bytes, Path::new("x.fpv")),
            Err(Error::Integrity { .. })
        ));
        assert!(matches!(
            ParamSet::from_bytes(b"NOPE", Path::new("x.fpv")),
            Err(Error::Format { .. })
        ));
    }
}
