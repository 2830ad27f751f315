//! Second-stage sliding-window stereo EKF (MSCKF).
//!
//! Error-state layout, in this order:
//!
//! ```text
//!  [0..3)    δθ_I   attitude error (body frame, C_true = (I − ⌊δθ×⌋) C_est)
//!  [3..6)    b̃_g    gyro bias error
//!  [6..9)    ṽ      velocity error (global)
//!  [9..12)   b̃_a    accelerometer bias error
//!  [12..15)  p̃      position error (global)
//!  then per camera pose i: [15+6i .. 15+6i+3) δθ_C, [15+6i+3 .. 15+6i+6) p̃_C
//! ```

use std::collections::BTreeMap;

use nalgebra::{DVector, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::FilterError;
use crate::math::{quat_multiply, small_angle_quat, Mat, Mat3, UnitQuat, Vec3};

pub mod augment;
pub mod measurement;
pub mod propagate;
pub mod triangulate;
pub mod update;
pub mod window;

pub use augment::{augment_state, augmentation_jacobian};
pub use measurement::{measurement_jacobians, nullspace_project, stereo_predict, FeatureJacobian, NullspaceProjection};
pub use propagate::{error_state_matrices, imu_propagate, propagate_interval, AttitudeSeed, ImuInterval};
pub use triangulate::{triangulate_feature, Triangulation, TriangulationConfig, TriangulationFailure};
pub use update::{chi_square_threshold, msckf_update, passes_gate, UpdateReport};
pub use window::{classify_keyframe, marginalize_poses, remove_pose, removal_index, KeyframePolicy, MarginalizationMode};

pub const IMU_DIM: usize = 15;
pub const POSE_DIM: usize = 6;

/// Offsets of the IMU error-state blocks.
pub mod idx {
    pub const THETA: usize = 0;
    pub const BG: usize = 3;
    pub const V: usize = 6;
    pub const BA: usize = 9;
    pub const P: usize = 12;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuState {
    pub q: UnitQuat,
    pub b_g: Vec3,
    pub v: Vec3,
    pub b_a: Vec3,
    pub p: Vec3,
}

impl Default for ImuState {
    fn default() -> Self {
        Self {
            q: UnitQuat::identity(),
            b_g: Vec3::zeros(),
            v: Vec3::zeros(),
            b_a: Vec3::zeros(),
            p: Vec3::zeros(),
        }
    }
}

impl ImuState {
    pub fn is_finite(&self) -> bool {
        self.q.to_array().iter().all(|v| v.is_finite())
            && [self.b_g, self.v, self.b_a, self.p]
                .iter()
                .all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Per-frame tracking statistics used for keyframe selection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    /// Mean image displacement (px) of features shared with the previous keyframe.
    pub mean_parallax: f64,
    /// Number of features tracked from the previous frame.
    pub tracked_count: u32,
}

/// Left-camera pose cloned into the sliding window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub state_id: u64,
    pub t: f64,
    /// `ᶜ_G q̄`
    pub q: UnitQuat,
    /// `ᴳp_C`
    pub p: Vec3,
    pub keyframe: bool,
    pub stats: FrameStats,
}

/// Nominal state plus error-state covariance of the second stage.
#[derive(Clone, Debug, PartialEq)]
pub struct EkfState {
    pub t: f64,
    pub imu: ImuState,
    pub window: Vec<CameraPose>,
    pub cov: Mat,
    pub next_state_id: u64,
}

impl EkfState {
    pub fn new(t: f64, imu: ImuState, imu_cov: Mat) -> Self {
        assert_eq!(imu_cov.shape(), (IMU_DIM, IMU_DIM));
        Self {
            t,
            imu,
            window: Vec::new(),
            cov: imu_cov,
            next_state_id: 0,
        }
    }

    /// Diagonal IMU covariance from per-block sigmas.
    pub fn diagonal_cov(sigma: &InitialSigmas) -> Mat {
        let mut p = Mat::zeros(IMU_DIM, IMU_DIM);
        let blocks = [
            (idx::THETA, sigma.theta),
            (idx::BG, sigma.b_g),
            (idx::V, sigma.v),
            (idx::BA, sigma.b_a),
            (idx::P, sigma.p),
        ];
        for (o, s) in blocks {
            for i in 0..3 {
                p[(o + i, o + i)] = s * s;
            }
        }
        p
    }

    pub fn dim(&self) -> usize {
        IMU_DIM + POSE_DIM * self.window.len()
    }

    pub fn pose_offset(i: usize) -> usize {
        IMU_DIM + POSE_DIM * i
    }

    pub fn pose_index(&self, state_id: u64) -> Option<usize> {
        self.window
            .binary_search_by_key(&state_id, |p| p.state_id)
            .ok()
    }

    /// 3×3 covariance block starting at `offset`.
    pub fn block3(&self, offset: usize) -> Mat3 {
        self.cov.fixed_view::<3, 3>(offset, offset).into_owned()
    }

    /// Applies an error-state correction: multiplicative on attitudes, additive elsewhere.
    pub fn inject(&mut self, dx: &DVector<f64>) {
        assert_eq!(dx.len(), self.dim());
        let imu = &mut self.imu;
        let dtheta = dx.fixed_rows::<3>(idx::THETA).into_owned();
        imu.q = quat_multiply(&small_angle_quat(&dtheta), &imu.q);
        imu.b_g += dx.fixed_rows::<3>(idx::BG);
        imu.v += dx.fixed_rows::<3>(idx::V);
        imu.b_a += dx.fixed_rows::<3>(idx::BA);
        imu.p += dx.fixed_rows::<3>(idx::P);
        for (i, pose) in self.window.iter_mut().enumerate() {
            let o = Self::pose_offset(i);
            let dtheta = dx.fixed_rows::<3>(o).into_owned();
            pose.q = quat_multiply(&small_angle_quat(&dtheta), &pose.q);
            pose.p += dx.fixed_rows::<3>(o + 3);
        }
    }
}

/// Initial one-sigma uncertainties of the IMU state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitialSigmas {
    pub theta: f64,
    pub b_g: f64,
    pub v: f64,
    pub b_a: f64,
    pub p: f64,
}

impl Default for InitialSigmas {
    fn default() -> Self {
        Self {
            theta: 0.01,
            b_g: 0.005,
            v: 0.05,
            b_a: 0.05,
            p: 0.01,
        }
    }
}

/// Fixed stereo rig calibration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoExtrinsics {
    /// `ᶜ_I q̄`: `C(q_ci)` maps IMU-frame vectors into the left camera frame.
    pub q_ci: UnitQuat,
    /// `ᴵp_C`: left camera origin in the IMU frame (m).
    pub p_ic: Vec3,
    /// `C(q_rl)` maps left-camera vectors into the right camera frame.
    pub q_rl: UnitQuat,
    /// Right camera origin in the left camera frame (m).
    pub p_lr: Vec3,
}

impl Default for StereoExtrinsics {
    /// Forward-looking rig: camera z along body x, camera x along body −y, camera y along
    /// body −z; 11 cm baseline.
    fn default() -> Self {
        let c = Mat3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        Self {
            q_ci: UnitQuat::from_rotmat(&c),
            p_ic: Vec3::new(0.05, -0.02, 0.01),
            q_rl: UnitQuat::identity(),
            p_lr: Vec3::new(0.11, 0.0, 0.0),
        }
    }
}

impl StereoExtrinsics {
    pub fn validate(&self) -> Result<(), FilterError> {
        for q in [self.q_ci, self.q_rl] {
            if (q.norm() - 1.0).abs() > 1e-9 {
                return Err(FilterError::Config("extrinsic quaternion not unit".into()));
            }
        }
        if !(self.p_lr.norm() > 0.0) {
            return Err(FilterError::Config("stereo baseline must be non-zero".into()));
        }
        Ok(())
    }

    /// Left camera pose `(C(ᶜ_G q), ᴳp_C)` for an IMU pose.
    pub fn left_camera(&self, imu_q: &UnitQuat, imu_p: &Vec3) -> (UnitQuat, Vec3) {
        let q = quat_multiply(&self.q_ci, imu_q);
        let p = imu_p + imu_q.rotmat().transpose() * self.p_ic;
        (q, p)
    }

    /// Right camera rotation matrix and position for a left camera pose.
    pub fn right_camera(&self, left_q: &UnitQuat, left_p: &Vec3) -> (Mat3, Vec3) {
        let c_l = left_q.rotmat();
        (self.q_rl.rotmat() * c_l, left_p + c_l.transpose() * self.p_lr)
    }
}

/// Normalized image coordinates of one feature in the left and right cameras.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoObservation {
    pub u1: f64,
    pub v1: f64,
    pub u2: f64,
    pub v2: f64,
}

impl StereoObservation {
    pub fn as_vector(&self) -> Vector4<f64> {
        Vector4::new(self.u1, self.v1, self.u2, self.v2)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        Self {
            u1: v[0],
            v1: v[1],
            u2: v[2],
            v2: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.as_vector().iter().all(|v| v.is_finite())
    }
}

/// Stereo observations of one feature keyed by camera state id.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub feature_id: u64,
    pub obs: BTreeMap<u64, StereoObservation>,
}

impl FeatureTrack {
    pub fn new(feature_id: u64) -> Self {
        Self {
            feature_id,
            obs: BTreeMap::new(),
        }
    }
}

/// Continuous-time IMU noise densities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImuNoiseParams {
    /// Gyro white noise (rad/s/√Hz).
    pub sigma_g: f64,
    /// Gyro bias random walk (rad/s²/√Hz).
    pub sigma_wg: f64,
    /// Accelerometer white noise (m/s²/√Hz).
    pub sigma_a: f64,
    /// Accelerometer bias random walk (m/s³/√Hz).
    pub sigma_wa: f64,
    /// Gravity in the global frame.
    pub g_vec: Vec3,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            sigma_g: 1.7e-4,
            sigma_wg: 2e-5,
            sigma_a: 2e-3,
            sigma_wa: 3e-3,
            g_vec: Vec3::new(0.0, 0.0, -9.81),
        }
    }
}

impl ImuNoiseParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        let all = [self.sigma_g, self.sigma_wg, self.sigma_a, self.sigma_wa];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) && self.g_vec.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(FilterError::Config("IMU noise densities must be positive".into()))
        }
    }
}
