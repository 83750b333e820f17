//! Coordinate frames, rigid transforms and the minimap similarity map.
//!
//! A [`RigidTransform`] carries the pair of frames it maps between, so chaining
//! `T_a^b` with `T_b^c` is checked at runtime. Points that cross a frame
//! boundary travel as [`FramedPoint`].

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{lit, Scalar};

/// Coordinate frames used throughout the system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FrameId {
    /// Inertial frame of the robot.
    W,
    /// Robot body frame.
    B,
    /// Operator headset frame.
    H,
    /// Virtual robot hologram.
    Bv,
    /// Interactive goal marker.
    Mv,
    /// Common frame between the virtual world and the robot inertial frame.
    Wv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum GeomError {
    #[error("frame mismatch: expected {expected:?}, got {actual:?}")]
    FrameMismatch { expected: FrameId, actual: FrameId },
    #[error("minimap scale must be positive and finite")]
    InvalidScale,
}

fn check_frame(expected: FrameId, actual: FrameId) -> Result<(), GeomError> {
    if expected == actual {
        Ok(())
    } else {
        Err(GeomError::FrameMismatch { expected, actual })
    }
}

/// A 3-vector tagged with the frame it is expressed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FramedPoint<T: Scalar> {
    pub frame: FrameId,
    pub coords: Vector3<T>,
}

impl<T: Scalar> FramedPoint<T> {
    pub fn new(frame: FrameId, coords: Vector3<T>) -> Self {
        Self { frame, coords }
    }
}

/// Rigid transform `T_from^to`: maps coordinates in `from` to coordinates in `to`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform<T: Scalar> {
    rotation: UnitQuaternion<T>,
    translation: Vector3<T>,
    from: FrameId,
    to: FrameId,
}

impl<T: Scalar> RigidTransform<T> {
    /// Builds a transform; the rotation is renormalized.
    pub fn new(from: FrameId, to: FrameId, rotation: Quaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation),
            translation,
            from,
            to,
        }
    }

    pub fn from_parts(
        from: FrameId,
        to: FrameId,
        rotation: UnitQuaternion<T>,
        translation: Vector3<T>,
    ) -> Self {
        Self::new(from, to, rotation.into_inner(), translation)
    }

    pub fn identity(frame: FrameId) -> Self {
        Self::between(frame, frame)
    }

    /// Identity mapping between two (aligned) frames.
    pub fn between(from: FrameId, to: FrameId) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
            from,
            to,
        }
    }

    pub fn from_translation(from: FrameId, to: FrameId, translation: Vector3<T>) -> Self {
        Self {
            translation,
            ..Self::between(from, to)
        }
    }

    /// Rotation of `yaw` radians about +z followed by `translation`.
    pub fn from_yaw(from: FrameId, to: FrameId, yaw: T, translation: Vector3<T>) -> Self {
        Self {
            rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            translation,
            from,
            to,
        }
    }

    pub fn from_frame(&self) -> FrameId {
        self.from
    }

    pub fn to_frame(&self) -> FrameId {
        self.to
    }

    pub fn rotation(&self) -> &UnitQuaternion<T> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<T> {
        &self.translation
    }

    /// `self` followed by `next`: maps `self.from` to `next.to`.
    pub fn compose(&self, next: &RigidTransform<T>) -> Result<RigidTransform<T>, GeomError> {
        check_frame(self.to, next.from)?;
        let rotation = next.rotation * self.rotation;
        Ok(Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation: next.rotation * self.translation + next.translation,
            from: self.from,
            to: next.to,
        })
    }

    pub fn invert(&self) -> RigidTransform<T> {
        let rotation = self.rotation.inverse();
        Self {
            rotation,
            translation: -(rotation * self.translation),
            from: self.to,
            to: self.from,
        }
    }

    pub fn transform_point(&self, p: &FramedPoint<T>) -> Result<FramedPoint<T>, GeomError> {
        check_frame(self.from, p.frame)?;
        Ok(FramedPoint::new(self.to, self.apply(&p.coords)))
    }

    /// Applies the transform to raw coordinates assumed to be in `self.from`.
    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_vector(&self, v: &Vector3<T>) -> Vector3<T> {
        self.rotation * v
    }

    /// Wire layout `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_array(&self) -> [T; 7] {
        let q = self.rotation.quaternion();
        let t = &self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    pub fn from_array(from: FrameId, to: FrameId, a: [T; 7]) -> Self {
        Self::new(
            from,
            to,
            Quaternion::new(a[0], a[1], a[2], a[3]),
            Vector3::new(a[4], a[5], a[6]),
        )
    }

    /// Maximum absolute difference against `other` in rotation matrix and translation.
    /// Frames must match for a meaningful comparison.
    pub fn distance(&self, other: &RigidTransform<T>) -> T {
        let dr = self.rotation.to_rotation_matrix().matrix() - other.rotation.to_rotation_matrix().matrix();
        let dt = self.translation - other.translation;
        dr.amax().max(dt.amax())
    }
}

/// Similarity map from the minimap (`Wv`) to the world (`W`): scale, then rigid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimapTransform<T: Scalar> {
    scale: T,
    rigid: RigidTransform<T>,
}

impl<T: Scalar> MinimapTransform<T> {
    pub fn new(scale: T, rigid: RigidTransform<T>) -> Result<Self, GeomError> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(GeomError::InvalidScale);
        }
        check_frame(FrameId::Wv, rigid.from_frame())?;
        check_frame(FrameId::W, rigid.to_frame())?;
        Ok(Self { scale, rigid })
    }

    /// Pure scaling with aligned frames.
    pub fn with_scale(scale: T) -> Result<Self, GeomError> {
        Self::new(scale, RigidTransform::between(FrameId::Wv, FrameId::W))
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn rigid(&self) -> &RigidTransform<T> {
        &self.rigid
    }

    pub fn minimap_to_world(&self, p_mini: &Vector3<T>) -> Vector3<T> {
        self.rigid.apply(&(p_mini * self.scale))
    }

    pub fn world_to_minimap(&self, p_world: &Vector3<T>) -> Vector3<T> {
        self.rigid.invert().apply(p_world) / self.scale
    }

    pub fn minimap_to_world_framed(&self, p: &FramedPoint<T>) -> Result<FramedPoint<T>, GeomError> {
        check_frame(FrameId::Wv, p.frame)?;
        Ok(FramedPoint::new(FrameId::W, self.minimap_to_world(&p.coords)))
    }
}

/// Drone state: position and velocity in `W`, attitude `q_B^W`, body rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroneState<T: Scalar> {
    pub position: Vector3<T>,
    pub velocity: Vector3<T>,
    pub attitude: UnitQuaternion<T>,
    pub angular_velocity: Vector3<T>,
    pub stamp: T,
}

impl<T: Scalar> DroneState<T> {
    pub fn at_rest(position: Vector3<T>, yaw: T) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
            angular_velocity: Vector3::zeros(),
            stamp: T::zero(),
        }
    }

    pub fn yaw(&self) -> T {
        self.attitude.euler_angles().2
    }

    /// Pose `T_B^W`.
    pub fn pose(&self) -> RigidTransform<T> {
        RigidTransform::from_parts(FrameId::B, FrameId::W, self.attitude, self.position)
    }
}

/// Builds a yaw rotation in degrees; convenience for tests and scenario files.
pub fn yaw_degrees<T: Scalar>(deg: f64) -> UnitQuaternion<T> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), lit::<T>(deg.to_radians()))
}
