//! Underwater instance segmentation at desk scale: synthetic scene
//! generation, ViT encoders, masked-graph distillation, proposal-driven
//! prompting, a SAM-style mask decoder and COCO-protocol evaluation.

pub mod augment;
pub mod coco;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eupg;
pub mod gradcheck;
pub mod graph;
pub mod interp;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod mgukd;
pub mod model;
pub mod nn;
pub mod optim;
pub mod synth;

pub use error::{Error, Result};

pub use augment::{augment, AugmentConfig};
pub use encoder::{EncoderConfig, FeatureMap, VitEncoder};
pub use mask::{BBox, Mask};
pub use metrics::{evaluate, EvalResult};
pub use mgukd::{DistillConfig, DistillMode, Distiller};
pub use model::{Detection, ModelConfig, Uwsam};
pub use nn::ParamStore;
pub use synth::{AnnotatedImage, SceneConfig};
