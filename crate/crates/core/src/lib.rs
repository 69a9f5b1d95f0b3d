//! Zero-shot image captioning with trigger-augmented prompting.
//!
//! A frozen vision encoder and feature compressor turn an image into query
//! features. A first prompt asks the frozen language model to name the
//! entities it sees; that text is purified against the visual features and
//! fed, together with them, to a second prompt that produces the caption.
//! Both stages reach the language model through a trigger projector: one
//! small learnable layer shared by the two stages followed by a frozen layer.
//!
//! Everything runs on 2-D `f64` matrices with a small reverse-mode autograd.
//! Parameters live in one [`ParamStore`] and are kept on the `f32` grid so
//! checkpoints round-trip exactly.

pub mod autograd;
pub mod backbones;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod projector;
pub mod purification;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use backbones::{pretrain_backbone, Backbone, PatchFeatures, PretrainReport, VisualFeatures};
pub use checkpoint::{read_checkpoint, CheckpointKind, Manifest};
pub use config::{
    ModelConfig, PretrainConfig, ProjectorPair, ProjectorVariant, Purification, RunConfig,
    TrainConfig, VariantConfig, FORMAT_VERSION,
};
pub use data::{CaptionCorpus, CaptionRecord, RgbImage, Split};
pub use error::{Error, Result};
pub use eval::{evaluate_corpus, evaluate_encoded, Evaluation, MetricReport};
pub use metrics::{score_corpus, CorpusScores};
pub use model::{model_trainable_count, CaptionOutput, EncodedSample, TpCap};
pub use params::{ParamStore, ParameterRegistry};
pub use projector::{count_trainable_params, ProjectorConfig, Stage, TriggerProjector};
pub use purification::{EntityFeatures, EntityInfo, Purifier};
pub use tensor::Matrix;
pub use tokenizer::Tokenizer;
pub use training::{train, LossRecord, LrSchedule, TrainReport};
