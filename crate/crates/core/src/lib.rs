pub mod autodiff;
pub mod config;
pub mod data;
pub mod difficulty;
pub mod error;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod optim;
pub mod sample;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autodiff::{Activation, BatchNormConfig, ConvParams, Gradients, Graph, Mode, Padding, RunningStats, Var};
pub use config::Preset;
pub use data::{Batch, Dataset, Manifest, Split};
pub use difficulty::{DifficultyIndex, DifficultyScore};
pub use error::{Error, Result};
pub use losses::{ClassWeights, LossConfig, LossKind};
pub use mask::Mask;
pub use metrics::{EvalConfig, Metrics, MetricsReport, Segmenter};
pub use models::{Architecture, Model, ModelKind, ModelSpec};
pub use nn::{ParamSet, Parameter};
pub use optim::{Adam, AdamConfig};
pub use sample::{DepthMap, MaskSet, Sample};
pub use synth::{generate_dataset, generate_scene, SceneParams, Span};
pub use tensor::{Float, Tensor};
pub use train::{LossRecord, TrainConfig, TrainReport};
