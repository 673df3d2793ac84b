//! Weak-perspective camera: `x = s * P(R X) + t`, `P` drops the depth axis.

use crate::error::{Error, Result};
use crate::kinematics::{self, JointSet3D};
use crate::linalg::{self, Vec3};
use crate::scalar::Real;

/// 2D points in normalized image units.
pub type Points2D<T> = Vec<[T; 2]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams<T> {
    /// Global rotation, axis-angle.
    pub rotation: Vec3<T>,
    pub translation: [T; 2],
    pub scale: T,
}

impl<T: Real> CameraParams<T> {
    pub fn new(rotation: Vec3<T>, translation: [T; 2], scale: T) -> Result<Self> {
        let cam = Self { rotation, translation, scale };
        cam.validate()?;
        Ok(cam)
    }

    pub fn identity() -> Self {
        Self { rotation: linalg::zero3(), translation: [T::zero(); 2], scale: T::one() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotation.iter().chain(self.translation.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite camera parameters".into()));
        }
        if !(self.scale > T::zero()) || !self.scale.is_finite() {
            return Err(Error::InvalidCamera(self.scale.to_f64_lossy()));
        }
        Ok(())
    }
}

/// Projects 3D joints through a validated camera.
pub fn project<T: Real>(joints: &JointSet3D<T>, cam: &CameraParams<T>) -> Result<Points2D<T>> {
    cam.validate()?;
    kinematics::rodrigues(cam.rotation)?;
    Ok(project_unchecked(joints, cam))
}

/// Projection without the `s > 0` requirement. The optimizer starts from the
/// all-zero parameter vector, where the scale is exactly zero.
pub(crate) fn project_unchecked<T: Real>(joints: &JointSet3D<T>, cam: &CameraParams<T>) -> Points2D<T> {
    let r = kinematics::rotation(cam.rotation);
    joints
        .iter()
        .map(|x| {
            let y = linalg::matvec(&r, *x);
            [cam.scale * y[0] + cam.translation[0], cam.scale * y[1] + cam.translation[1]]
        })
        .collect()
}
