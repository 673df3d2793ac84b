//! The optimized parameter vector and the 2D observation it is fitted to.
//!
//! Flattened order: `[theta (3 per articulated joint), beta (10), R (3), t (2), s (1)]`,
//! 85 values for the default 24-joint skeleton.

use crate::camera::{CameraParams, Points2D};
use crate::error::{Error, Result};
use crate::kinematics::{PoseShape, DEFAULT_JOINTS, SHAPE_DIM};
use crate::scalar::Real;

/// Camera block width: rotation (3) + translation (2) + scale (1).
pub const CAMERA_DIM: usize = 6;

/// Parameter dimension of the default skeleton.
pub const PARAM_DIM: usize = param_dim(DEFAULT_JOINTS);

/// Minimum number of visible joints for a frame to be fitted.
pub const MIN_VISIBLE_JOINTS: usize = 6;

pub const fn param_dim(joint_count: usize) -> usize {
    3 * (joint_count - 1) + SHAPE_DIM + CAMERA_DIM
}

/// Offsets of each block inside the flattened vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub joints: usize,
}

impl Layout {
    pub fn new(joints: usize) -> Self {
        Self { joints }
    }
    pub fn dim(&self) -> usize {
        param_dim(self.joints)
    }
    pub fn beta(&self) -> usize {
        3 * (self.joints - 1)
    }
    pub fn rotation(&self) -> usize {
        self.beta() + SHAPE_DIM
    }
    pub fn translation(&self) -> usize {
        self.rotation() + 3
    }
    pub fn scale(&self) -> usize {
        self.translation() + 2
    }
}

/// Full parameter set `{theta, beta, R, t, s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub pose_shape: PoseShape<T>,
    pub camera: CameraParams<T>,
}

impl<T: Real> ModelParams<T> {
    /// The all-zero starting point (including `s = 0`).
    pub fn zeros(joint_count: usize) -> Self {
        Self {
            pose_shape: PoseShape::zeros(joint_count),
            camera: CameraParams { rotation: [T::zero(); 3], translation: [T::zero(); 2], scale: T::zero() },
        }
    }

    pub fn joint_count(&self) -> usize {
        self.pose_shape.theta.len() + 1
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.joint_count())
    }

    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.layout().dim());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<T>) {
        out.clear();
        out.extend(self.pose_shape.theta.iter().flatten().copied());
        out.extend_from_slice(&self.pose_shape.beta);
        out.extend_from_slice(&self.camera.rotation);
        out.extend_from_slice(&self.camera.translation);
        out.push(self.camera.scale);
    }

    pub fn unflatten(joint_count: usize, flat: &[T]) -> Result<Self> {
        let layout = Layout::new(joint_count);
        if flat.len() != layout.dim() {
            return Err(Error::Shape { expected: layout.dim(), got: flat.len() });
        }
        let theta = flat[..layout.beta()].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        let mut beta = [T::zero(); SHAPE_DIM];
        beta.copy_from_slice(&flat[layout.beta()..layout.rotation()]);
        let r = &flat[layout.rotation()..layout.translation()];
        let t = &flat[layout.translation()..layout.scale()];
        Ok(Self {
            pose_shape: PoseShape { theta, beta },
            camera: CameraParams { rotation: [r[0], r[1], r[2]], translation: [t[0], t[1]], scale: flat[layout.scale()] },
        })
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }
}

/// Target 2D joint positions with per-joint visibility.
#[derive(Debug, Clone, PartialEq)]
pub struct Keypoints2D<T> {
    pub points: Points2D<T>,
    pub visible: Vec<bool>,
}

impl<T: Real> Keypoints2D<T> {
    /// All joints visible.
    pub fn new(points: Points2D<T>) -> Self {
        let visible = vec![true; points.len()];
        Self { points, visible }
    }

    /// Invisible joints get their coordinates zeroed.
    pub fn with_visibility(mut points: Points2D<T>, visible: Vec<bool>) -> Result<Self> {
        if points.len() != visible.len() {
            return Err(Error::Shape { expected: points.len(), got: visible.len() });
        }
        for (p, &v) in points.iter_mut().zip(&visible) {
            if !v {
                *p = [T::zero(); 2];
            }
        }
        Ok(Self { points, visible })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Hides joint `j`, zeroing its coordinates.
    pub fn hide(&mut self, j: usize) {
        self.visible[j] = false;
        self.points[j] = [T::zero(); 2];
    }

    /// `(u, v, visible)` per joint, the layout consumed by the update network.
    pub fn flatten(&self) -> Vec<T> {
        self.points
            .iter()
            .zip(&self.visible)
            .flat_map(|(p, &v)| if v { [p[0], p[1], T::one()] } else { [T::zero(); 3] })
            .collect()
    }
}
