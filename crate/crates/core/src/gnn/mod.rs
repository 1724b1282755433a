//! Graph U-net with cluster pooling, trained by backpropagation and Adam.

pub mod adam;
pub mod layers;
pub mod loss;
pub mod train;
pub mod unet;

use nalgebra::RealField;

/// Floating-point type the network runs in (`f32` for training, `f64` for
/// gradient checks).
pub trait Real: RealField + Copy + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;
    const NAME: &'static str;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    const NAME: &'static str = "f64";
}

pub use layers::{Activation, GcLayer};
pub use train::{train, Checkpoint, Normalization, TrainConfig, TrainOutcome, TrainingPair};
pub use unet::{unet_backward, unet_forward, unet_forward_cached, Topology, UNetArch, UNetParams};
