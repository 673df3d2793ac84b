//! Fitting an articulated body model to 2D keypoints with a learned
//! gradient-descent optimizer.
//!
//! The numeric core is generic over [`Real`] (`f32` or `f64`); the aliases at
//! the crate root pin the common concrete types.

pub mod ablation;
pub mod camera;
pub mod diffcore;
pub mod error;
pub mod fitter;
pub mod io;
pub mod kinematics;
pub mod linalg;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod trainer;
pub mod updatenet;

pub use camera::{project, CameraParams};
pub use diffcore::{finite_diff_grad, gradcheck, reproj_grad, reproj_loss, reproj_loss_and_grad};
pub use error::{Error, Result};
pub use kinematics::{forward_kinematics, rest_joints, rodrigues, PoseShape, SkeletonModel};
pub use params::{Keypoints2D, ModelParams, PARAM_DIM};
pub use scalar::Real;

pub type Skeleton = SkeletonModel<f64>;
pub type Skeleton32 = SkeletonModel<f32>;
pub type Params = ModelParams<f64>;
pub type Params32 = ModelParams<f32>;
pub type Keypoints = Keypoints2D<f64>;
pub type Keypoints32 = Keypoints2D<f32>;
pub type Camera = CameraParams<f64>;
pub type Joints = kinematics::JointSet3D<f64>;
pub type Network = updatenet::UpdateNetwork<f64>;
pub type Network32 = updatenet::UpdateNetwork<f32>;
pub type Trace = fitter::FitTrace<f64>;
pub type Trace32 = fitter::FitTrace<f32>;
