//! Learned SE(3) corrections for classical visual odometry, trained with a
//! self-supervised photometric reconstruction loss.

pub mod autodiff;
pub mod datakit;
pub mod evaluation;
pub mod fsutil;
pub mod geometry;
pub mod imaging;
pub mod model;
pub mod trainer;
pub mod warploss;

pub use geometry::{apply_correction, exp_se3, log_se3, rotation_magnitude, Pose, Twist};
pub use imaging::{DepthMap, FlowField, ImageBuffer, Intrinsics};
