//! Segmentation- and depth-conditioned landscape synthesis.

pub mod adversary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod depth_ops;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod nn;
pub mod perceptual;
pub mod pipeline;
pub mod tensor;
pub mod training;
pub mod types;

pub use adversary::{Discriminator, Encoder};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{LossWeights, Mode, ModelConfig, OptimConfig};
pub use data::{build_dataset, load_dataset, Dataset, Triplet};
pub use depth_ops::{depth_order_valid, segment_mean_depth, shift_segment_depth};
pub use error::{Error, Result};
pub use generator::{sample_z, Conditions, Generated, Generator, NoiseSpec};
pub use metrics::{depth_rmse, diversity_lpips, evaluate_model, fid, frechet_distance, EvalConfig, EvalReport};
pub use perceptual::{Features, RandomConvExtractor};
pub use pipeline::{phase1_sample_depths, phase2_sample_images, two_phase, DepthEdit, TwoPhaseOutput, TwoPhaseRequest};
pub use training::{Batch, LossReport, TrainState};
pub use types::{DepthMap, ImageTensor, LabelSet, SegmentationMap, SpatialLatent};
