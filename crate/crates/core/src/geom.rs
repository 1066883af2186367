//! Rotation representations, rigid poses, and trajectory containers.
//!
//! Rotations cross module boundaries as 6-vectors holding the first two
//! columns of a rotation matrix (x-column then y-column); reconstruction is
//! Gram-Schmidt, so the representation is continuous over SO(3). All lengths
//! are meters, all angles radians, all trajectories time-major rows at a
//! fixed frame rate.

use nalgebra::{Matrix3, Vector3};
use ndarray::Array2;
use thiserror::Error;

/// Channels per object frame: 3 position + 6 rotation.
pub const OBJECT_CHANNELS: usize = 9;
/// Channels per hand frame: wrist pose (9) + 24 keypoints x 3 in the wrist frame.
pub const HAND_CHANNELS: usize = 81;
/// Channels per robot frame: wrist pose (9) + 16 joint angles.
pub const ROBOT_CHANNELS: usize = 25;
/// Human keypoints per frame.
pub const HAND_KEYPOINTS: usize = 24;
/// Finger keypoints may not exceed this distance from the wrist.
pub const MAX_HAND_REACH: f64 = 0.30;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotARotation(f64),
    #[error("degenerate 6d rotation: {0}")]
    DegenerateRotation(&'static str),
    #[error("trajectory must have at least one frame")]
    EmptyTrajectory,
    #[error("trajectory frame has {got} channels, expected {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error("fps must be positive, got {0}")]
    BadFps(f64),
    #[error("hand keypoint {index} is {dist:.3} m from the wrist (max {max})")]
    HandReach { index: usize, dist: f64, max: f64 },
}

/// First two columns of a rotation matrix, column-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot6d(pub [f64; 6]);

impl Rot6d {
    pub fn identity() -> Self {
        Rot6d([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    }

    pub fn x_col(&self) -> Vector3<f64> {
        Vector3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn y_col(&self) -> Vector3<f64> {
        Vector3::new(self.0[3], self.0[4], self.0[5])
    }
}

/// Extracts the first two columns of an orthonormal matrix.
pub fn rot6d_from_matrix(m: &Matrix3<f64>) -> Result<Rot6d, GeomError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::NonFinite("rotation matrix"));
    }
    let residual = (m.transpose() * m - Matrix3::identity()).norm();
    if residual > 1e-6 {
        return Err(GeomError::NotARotation(residual));
    }
    Ok(Rot6d([
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]))
}

/// Gram-Schmidt reconstruction; third column is the cross product, so the
/// result is always right-handed.
pub fn matrix_from_rot6d(a: &Rot6d) -> Result<Matrix3<f64>, GeomError> {
    if a.0.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::NonFinite("6d rotation"));
    }
    let a1 = a.x_col();
    let a2 = a.y_col();
    let n1 = a1.norm();
    if n1 < 1e-8 {
        return Err(GeomError::DegenerateRotation("first column near zero"));
    }
    let b1 = a1 / n1;
    let proj = a2 - b1 * b1.dot(&a2);
    let n2 = proj.norm();
    if n2 < 1e-8 {
        return Err(GeomError::DegenerateRotation(
            "columns parallel or second column near zero",
        ));
    }
    let b2 = proj / n2;
    let b3 = b1.cross(&b2);
    Ok(Matrix3::from_columns(&[b1, b2, b3]))
}

/// Geodesic distance on SO(3): arccos((trace(ra^T rb) - 1) / 2), clamped to [0, pi].
pub fn geodesic_angle(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let cos = ((ra.transpose() * rb).trace() - 1.0) / 2.0;
    cos.clamp(-1.0, 1.0).acos()
}

/// Rigid transform: position plus 6d rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub rotation: Rot6d,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            rotation: Rot6d::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self, GeomError> {
        if position.iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("pose position"));
        }
        Ok(Pose {
            position,
            rotation: rot6d_from_matrix(&rotation)?,
        })
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Pose {
            position,
            rotation: Rot6d::identity(),
        }
    }

    pub fn rotation_matrix(&self) -> Result<Matrix3<f64>, GeomError> {
        matrix_from_rot6d(&self.rotation)
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let r = matrix_from_rot6d(&self.rotation).expect("valid pose rotation");
        self.position + r * p
    }

    /// Maps a point from the parent frame into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let r = matrix_from_rot6d(&self.rotation).expect("valid pose rotation");
        r.transpose() * (p - self.position)
    }

    /// Writes the 9-channel encoding (position, then 6d rotation).
    pub fn to_channels(&self) -> [f64; 9] {
        [
            self.position.x,
            self.position.y,
            self.position.z,
            self.rotation.0[0],
            self.rotation.0[1],
            self.rotation.0[2],
            self.rotation.0[3],
            self.rotation.0[4],
            self.rotation.0[5],
        ]
    }

    pub fn from_channels(c: &[f64]) -> Result<Self, GeomError> {
        if c.len() < 9 {
            return Err(GeomError::ChannelMismatch {
                got: c.len(),
                expected: 9,
            });
        }
        if c[..9].iter().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFinite("pose channels"));
        }
        Ok(Pose {
            position: Vector3::new(c[0], c[1], c[2]),
            rotation: Rot6d([c[3], c[4], c[5], c[6], c[7], c[8]]),
        })
    }
}

/// Rigid composition a then b (b expressed in a's frame).
pub fn pose_compose(a: &Pose, b: &Pose) -> Result<Pose, GeomError> {
    let ra = matrix_from_rot6d(&a.rotation)?;
    let rb = matrix_from_rot6d(&b.rotation)?;
    Ok(Pose {
        position: a.position + ra * b.position,
        rotation: rot6d_from_matrix(&(ra * rb))?,
    })
}

pub fn pose_inverse(a: &Pose) -> Result<Pose, GeomError> {
    let ra = matrix_from_rot6d(&a.rotation)?;
    let rt = ra.transpose();
    Ok(Pose {
        position: -(rt * a.position),
        rotation: rot6d_from_matrix(&rt)?,
    })
}

fn validate_frames(
    frames: &Array2<f64>,
    channels: usize,
    what: &'static str,
) -> Result<(), GeomError> {
    if frames.nrows() == 0 {
        return Err(GeomError::EmptyTrajectory);
    }
    if frames.ncols() != channels {
        return Err(GeomError::ChannelMismatch {
            got: frames.ncols(),
            expected: channels,
        });
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(GeomError::NonFinite(what));
    }
    Ok(())
}

/// Object pose per frame, T x 9 time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectTrajectory {
    pub frames: Array2<f64>,
    pub fps: f64,
}

impl ObjectTrajectory {
    pub fn new(frames: Array2<f64>, fps: f64) -> Result<Self, GeomError> {
        validate_frames(&frames, OBJECT_CHANNELS, "object trajectory")?;
        if !(fps > 0.0) {
            return Err(GeomError::BadFps(fps));
        }
        Ok(ObjectTrajectory { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn pose(&self, t: usize) -> Pose {
        Pose::from_channels(self.frames.row(t).as_slice().expect("contiguous row"))
            .expect("validated on construction")
    }
}

/// Wrist pose plus 24 keypoint positions (wrist frame), T x 81 time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HandTrajectory {
    pub frames: Array2<f64>,
    pub fps: f64,
}

impl HandTrajectory {
    pub fn new(frames: Array2<f64>, fps: f64) -> Result<Self, GeomError> {
        validate_frames(&frames, HAND_CHANNELS, "hand trajectory")?;
        if !(fps > 0.0) {
            return Err(GeomError::BadFps(fps));
        }
        for t in 0..frames.nrows() {
            for k in 0..HAND_KEYPOINTS {
                let o = 9 + 3 * k;
                let d = (frames[(t, o)].powi(2)
                    + frames[(t, o + 1)].powi(2)
                    + frames[(t, o + 2)].powi(2))
                .sqrt();
                if d >= MAX_HAND_REACH {
                    return Err(GeomError::HandReach {
                        index: k,
                        dist: d,
                        max: MAX_HAND_REACH,
                    });
                }
            }
        }
        Ok(HandTrajectory { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn wrist_pose(&self, t: usize) -> Pose {
        Pose::from_channels(self.frames.row(t).as_slice().expect("contiguous row"))
            .expect("validated on construction")
    }

    /// Keypoint position in the wrist frame.
    pub fn keypoint_local(&self, t: usize, k: usize) -> Vector3<f64> {
        let o = 9 + 3 * k;
        Vector3::new(
            self.frames[(t, o)],
            self.frames[(t, o + 1)],
            self.frames[(t, o + 2)],
        )
    }

    /// Keypoint position in the world frame.
    pub fn keypoint_world(&self, t: usize, k: usize) -> Vector3<f64> {
        self.wrist_pose(t).transform_point(&self.keypoint_local(t, k))
    }
}

/// Desired wrist pose plus 16 joint angles, T x 25 time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotTrajectory {
    pub frames: Array2<f64>,
    pub fps: f64,
}

impl RobotTrajectory {
    pub fn new(frames: Array2<f64>, fps: f64) -> Result<Self, GeomError> {
        validate_frames(&frames, ROBOT_CHANNELS, "robot trajectory")?;
        if !(fps > 0.0) {
            return Err(GeomError::BadFps(fps));
        }
        Ok(RobotTrajectory { frames, fps })
    }

    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    pub fn wrist_pose(&self, t: usize) -> Pose {
        Pose::from_channels(self.frames.row(t).as_slice().expect("contiguous row"))
            .expect("validated on construction")
    }

    pub fn joint_angles(&self, t: usize) -> Vec<f64> {
        (9..ROBOT_CHANNELS).map(|c| self.frames[(t, c)]).collect()
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use rand::Rng;

    /// Uniform axis, uniform angle; good enough coverage for round trips.
    pub(crate) fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-6 {
            Vector3::x()
        } else {
            axis.normalize()
        };
        let angle: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
            .into_inner()
    }
}
