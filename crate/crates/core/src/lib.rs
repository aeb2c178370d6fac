//! Radar-camera depth estimation with radar point-cloud upsampling, built on
//! a small reverse-mode autodiff engine over `f64` tensors.
//!
//! The network projects radar onto the image plane, densifies the projection
//! with distance-gated sparse convolutions, extracts point features with a
//! dynamic graph network, aggregates 2D and 3D features by attention,
//! upsamples the radar cloud towards nearby LiDAR points and decodes a dense
//! depth map from gated image/radar fusion.

pub mod aggregation;
pub mod ascb;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod geometry;
pub mod gnn;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod params;
pub mod refinement;
pub mod scene;
pub mod tensor;
pub mod train;
pub mod upsampler;

pub use config::{Ablation, GnnVariant, RunConfig};
pub use decoder::DepthMap;
pub use error::{Error, Result};
pub use geometry::{CameraIntrinsics, PixelCoord, Point3};
pub use graph::{Graph, Var};
pub use metrics::MetricReport;
pub use model::GetUp;
pub use params::ParameterStore;
pub use scene::{RadarPoint, Scene, SceneSpec};
pub use tensor::Tensor;
