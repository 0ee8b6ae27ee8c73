//! Desk-scale rectified-flow lab.
//!
//! A from-scratch reverse-mode tensor core drives a tiny flow-matching
//! backbone on procedurally generated 32x32 "faces". An identity adapter is
//! trained against a many-step teacher, transplanted onto a distilled
//! few-step student, and the denoising trajectory is probed step by step.

pub mod adapter;
pub mod autodiff;
pub mod backbone;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod faces;
pub mod harness;
mod nn;
pub mod params;
mod pool;
pub mod probes;
pub mod rng;
pub mod tensor;

pub use adapter::{transfer, AdapterCond, AdapterStack, BoundAdapter, WEAK_ALPHA};
pub use autodiff::{Graph, Var};
pub use backbone::{
    sample, BackboneArch, FlowBackbone, SampleRequest, StreamCapture, StreamEntry,
};
pub use encoder::{EncoderModel, IdentityEmbedding};
pub use error::{Error, Result};
pub use faces::{FaceImage, PromptTransform, TransformKind};
pub use params::{AdamConfig, ParamSet};
pub use pool::parallel_map;
pub use probes::{PatternReport, ReferencePattern, SweepRecord};
pub use tensor::Tensor;
