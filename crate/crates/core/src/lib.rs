//! No-reference video quality assessment: fragment sampling, a windowed video
//! transformer with gated position biases, a patch-weighted quality head, a
//! stacked ensemble over several such branches, and the tooling around them
//! (metrics, synthetic data, segment and bitrate-ladder analysis).

pub mod attention;
pub mod backbone;
pub mod datagen;
pub mod error;
mod filters;
pub mod gbdt;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pgc;
pub mod sampler;
pub mod stacker;
pub mod video;

pub use backbone::{Backbone, BackboneConfig, FeatureMap};
pub use error::{Error, Result};
pub use head::{HeadConfig, QualityHead};
pub use metrics::{EvalReport, main_score, plcc, srcc};
pub use model::{BranchConfig, BranchNet, TrainConfig};
pub use sampler::{Fragment, FragmentPlan, SampleMode, SamplerConfig};
pub use stacker::{DatasetManifest, Ensemble, ManifestEntry, Split, StackConfig};
pub use video::VideoTensor;
