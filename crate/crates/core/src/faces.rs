//! Procedural synthetic identities and prompt-style transforms.
//!
//! An identity is five soft Gaussian blobs on a 32x32 grayscale canvas. The
//! three prompt transforms stand in for a plain portrait, a scene change that
//! only touches the background, and a style change that distorts the face.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const PIXELS: usize = SIDE * SIDE;
pub const BLOBS: usize = 5;
/// The central face box spans `FACE_LO..FACE_HI` on both axes (20x20).
pub const FACE_LO: usize = 6;
pub const FACE_HI: usize = 26;
pub const TEXTURE_NOISE: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentitySpec {
    pub identity_id: u32,
    pub blobs: [Blob; BLOBS],
    pub asymmetry_seed: u64,
}

impl IdentitySpec {
    /// Deterministic identity parameters for `identity_id`.
    pub fn new(identity_id: u32) -> Self {
        let mut r = rng::stream(0, "identity", &[u64::from(identity_id)]);
        let blobs = std::array::from_fn(|_| Blob {
            center_x: r.gen_range(0.15..=0.85),
            center_y: r.gen_range(0.15..=0.85),
            radius: r.gen_range(0.05..=0.2),
            intensity: r.gen_range(0.3..=1.0),
        });
        Self {
            identity_id,
            blobs,
            asymmetry_seed: r.gen(),
        }
    }

    /// Per-blob horizontal/vertical aspect factors derived from the asymmetry seed.
    fn aspects(&self) -> [f64; BLOBS] {
        let mut r = rng::stream(self.asymmetry_seed, "aspect", &[]);
        std::array::from_fn(|_| r.gen_range(0.8..=1.25))
    }

    /// Largest absolute difference over all blob parameters.
    pub fn max_param_difference(&self, other: &IdentitySpec) -> f64 {
        self.blobs
            .iter()
            .zip(&other.blobs)
            .flat_map(|(a, b)| {
                [
                    (a.center_x - b.center_x).abs(),
                    (a.center_y - b.center_y).abs(),
                    (a.radius - b.radius).abs(),
                    (a.intensity - b.intensity).abs(),
                ]
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Plain,
    Background,
    Stylized,
}

impl TransformKind {
    pub const ALL: [TransformKind; 3] = [
        TransformKind::Plain,
        TransformKind::Background,
        TransformKind::Stylized,
    ];

    /// Row of the backbone's prompt-embedding table.
    pub fn prompt_index(self) -> usize {
        match self {
            TransformKind::Plain => 0,
            TransformKind::Background => 1,
            TransformKind::Stylized => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::Plain => "plain",
            TransformKind::Background => "background",
            TransformKind::Stylized => "stylized",
        }
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TransformKind::Plain),
            "background" => Ok(TransformKind::Background),
            "stylized" => Ok(TransformKind::Stylized),
            other => Err(Error::Config(format!("unknown transform `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptTransform {
    pub kind: TransformKind,
    pub strength: f64,
}

impl PromptTransform {
    pub fn new(kind: TransformKind, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::contract(format!(
                "transform strength {strength} outside [0, 1]"
            )));
        }
        Ok(Self { kind, strength })
    }

    pub fn plain() -> Self {
        Self {
            kind: TransformKind::Plain,
            strength: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceImage {
    pub pixels: Tensor,
    pub source_identity: Option<u32>,
    pub transform: PromptTransform,
}

impl FaceImage {
    /// Wraps raw pixels, clamping them into `[0, 1]`.
    pub fn from_pixels(
        mut pixels: Vec<f64>,
        source_identity: Option<u32>,
        transform: PromptTransform,
    ) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::shape(format!(
                "face image needs {PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        for p in pixels.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
        Ok(Self {
            pixels: Tensor::new(vec![SIDE, SIDE], pixels)?,
            source_identity,
            transform,
        })
    }

    pub fn data(&self) -> &[f64] {
        self.pixels.data()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.pixels.data()[row * SIDE + col]
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{SIDE} {SIDE}\n255\n").into_bytes();
        out.extend(self.data().iter().map(|&p| (p * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())?;
        Ok(())
    }
}

fn box_blur(src: &[f64], radius: usize) -> Vec<f64> {
    let mut out = vec![0.0; PIXELS];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (r0, r1) = (r.saturating_sub(radius), (r + radius).min(SIDE - 1));
            let (c0, c1) = (c.saturating_sub(radius), (c + radius).min(SIDE - 1));
            let mut acc = 0.0;
            for rr in r0..=r1 {
                for cc in c0..=c1 {
                    acc += src[rr * SIDE + cc];
                }
            }
            out[r * SIDE + c] = acc / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
    out
}

pub fn in_face_box(row: usize, col: usize) -> bool {
    (FACE_LO..FACE_HI).contains(&row) && (FACE_LO..FACE_HI).contains(&col)
}

/// Applies a prompt transform to a clean `[0, 1]` canvas.
pub fn apply_transform(clean: &[f64], transform: PromptTransform) -> Vec<f64> {
    let s = transform.strength;
    match transform.kind {
        TransformKind::Plain => clean.to_vec(),
        TransformKind::Background => {
            let mut out = clean.to_vec();
            for r in 0..SIDE {
                for c in 0..SIDE {
                    if !in_face_box(r, c) {
                        let ramp = (r + c) as f64 / (2 * (SIDE - 1)) as f64;
                        out[r * SIDE + c] += 0.6 * s * ramp;
                    }
                }
            }
            out
        }
        TransformKind::Stylized => {
            if s == 0.0 {
                return clean.to_vec();
            }
            let toned: Vec<f64> = clean.iter().map(|&p| p.powf(1.0 + s)).collect();
            let blurred = box_blur(&toned, 2);
            toned
                .iter()
                .zip(&blurred)
                .map(|(&p, &b)| p + 1.5 * s * (p - b))
                .collect()
        }
    }
}

fn clean_canvas(spec: &IdentitySpec) -> Vec<f64> {
    let aspects = spec.aspects();
    let mut canvas = vec![0.0; PIXELS];
    for r in 0..SIDE {
        let y = (r as f64 + 0.5) / SIDE as f64;
        for c in 0..SIDE {
            let x = (c as f64 + 0.5) / SIDE as f64;
            let mut v = 0.0;
            for (blob, &aspect) in spec.blobs.iter().zip(&aspects) {
                let dx = (x - blob.center_x) / (blob.radius * aspect);
                let dy = (y - blob.center_y) * aspect / blob.radius;
                v += blob.intensity * (-0.5 * (dx * dx + dy * dy)).exp();
            }
            canvas[r * SIDE + c] = v.clamp(0.0, 1.0);
        }
    }
    canvas
}

/// Renders one sample of an identity under a prompt transform.
///
/// Texture noise is keyed by `(identity_id, noise_seed)` only, so every
/// transform of the same sample shares its noise.
pub fn render_identity(
    spec: &IdentitySpec,
    transform: PromptTransform,
    noise_seed: u64,
) -> FaceImage {
    let styled = apply_transform(&clean_canvas(spec), transform);
    let mut r = rng::stream(
        noise_seed,
        "texture",
        &[u64::from(spec.identity_id)],
    );
    let noise = rng::gaussian_vec(&mut r, PIXELS);
    let pixels = styled
        .iter()
        .zip(&noise)
        .map(|(p, n)| p + TEXTURE_NOISE * n)
        .collect();
    FaceImage::from_pixels(pixels, Some(spec.identity_id), transform).expect("32x32 canvas")
}

/// The canonical single reference image of an identity: Plain, seed 0.
pub fn reference_render(identity_id: u32) -> FaceImage {
    render_identity(&IdentitySpec::new(identity_id), PromptTransform::plain(), 0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub image: FaceImage,
    pub identity_id: u32,
    pub noise_seed: u64,
}

/// Noise seed of sample `index` under a master seed; `split` separates
/// train/held-out/evaluation draws.
pub fn sample_seed(master_seed: u64, split: u64, index: u64) -> u64 {
    master_seed * 1_000_000 + split * 10_000 + index
}

/// Balanced dataset: every identity gets `samples_per_identity` renders
/// under every transform in `transforms`.
pub fn make_dataset(
    n_identities: usize,
    samples_per_identity: usize,
    transforms: &[PromptTransform],
    master_seed: u64,
    split: u64,
) -> Result<Vec<DatasetItem>> {
    if n_identities < 2 {
        return Err(Error::contract(format!(
            "need at least 2 identities, got {n_identities}"
        )));
    }
    if transforms.is_empty() || samples_per_identity == 0 {
        return Err(Error::contract("empty transform mix or zero samples"));
    }
    let mut items = Vec::with_capacity(n_identities * samples_per_identity * transforms.len());
    for id in 0..n_identities as u32 {
        let spec = IdentitySpec::new(id);
        for &t in transforms {
            for s in 0..samples_per_identity {
                let seed = sample_seed(master_seed, split, s as u64);
                items.push(DatasetItem {
                    image: render_identity(&spec, t, seed),
                    identity_id: id,
                    noise_seed: seed,
                });
            }
        }
    }
    Ok(items)
}

/// Writes `id{III}_t{kind}_s{seed}.pgm` files plus `manifest.csv`.
pub fn export_dataset(items: &[DatasetItem], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_path(dir.join("manifest.csv"))?;
    manifest.write_record(["file", "identity_id", "transform", "strength", "seed"])?;
    for item in items {
        let t = item.image.transform;
        let file = format!(
            "id{:03}_t{}_s{}.pgm",
            item.identity_id,
            t.kind.as_str(),
            item.noise_seed
        );
        item.image.write_pgm(&dir.join(&file))?;
        manifest.write_record([
            file,
            item.identity_id.to_string(),
            t.kind.to_string(),
            t.strength.to_string(),
            item.noise_seed.to_string(),
        ])?;
    }
    manifest.flush()?;
    Ok(())
}

pub fn pixel_std(pixels: &[f64]) -> f64 {
    let n = pixels.len() as f64;
    let mean = pixels.iter().sum::<f64>() / n;
    (pixels.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / n).sqrt()
}
