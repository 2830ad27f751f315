//! Cloning the current camera pose into the sliding window.

use nalgebra::SMatrix;

use super::{idx, CameraPose, EkfState, FrameStats, StereoExtrinsics};
use crate::error::FilterError;
use crate::math::{skew, symmetrize, Mat};

/// Jacobian of the new camera-pose error `[δθ_C, p̃_C]` with respect to the full error
/// state (6 × dim).
pub fn augmentation_jacobian(state: &EkfState, ext: &StereoExtrinsics) -> Mat {
    let mut j = Mat::zeros(6, state.dim());
    let c_ci = ext.q_ci.rotmat();
    let ct = state.imu.q.rotmat().transpose();
    j.fixed_view_mut::<3, 3>(0, idx::THETA).copy_from(&c_ci);
    j.fixed_view_mut::<3, 3>(3, idx::THETA).copy_from(&(-ct * skew(&ext.p_ic)));
    j.fixed_view_mut::<3, 3>(3, idx::P).copy_from(&SMatrix::<f64, 3, 3>::identity());
    j
}

/// Appends the left camera pose at the current IMU pose. `capacity` bounds the window.
pub fn augment_state(
    state: &mut EkfState,
    ext: &StereoExtrinsics,
    capacity: usize,
    keyframe: bool,
    stats: FrameStats,
) -> Result<u64, FilterError> {
    if state.window.len() >= capacity {
        return Err(FilterError::WindowFull(capacity));
    }
    let (q, p) = ext.left_camera(&state.imu.q, &state.imu.p);
    let j = augmentation_jacobian(state, ext);
    let n = state.dim();
    let pj = &state.cov * j.transpose();
    let mut cov = Mat::zeros(n + 6, n + 6);
    cov.view_mut((0, 0), (n, n)).copy_from(&state.cov);
    cov.view_mut((0, n), (n, 6)).copy_from(&pj);
    cov.view_mut((n, 0), (6, n)).copy_from(&pj.transpose());
    cov.view_mut((n, n), (6, 6)).copy_from(&(&j * &pj));
    symmetrize(&mut cov);
    state.cov = cov;
    let id = state.next_state_id;
    state.next_state_id += 1;
    state.window.push(CameraPose {
        state_id: id,
        t: state.t,
        q,
        p,
        keyframe,
        stats,
    });
    Ok(id)
}
