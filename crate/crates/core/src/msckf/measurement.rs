//! Stereo measurement model, its Jacobians, and the feature nullspace projection.

use nalgebra::{DVector, SMatrix, Vector4};

use super::{CameraPose, EkfState, FeatureTrack, StereoExtrinsics, StereoObservation};
use crate::error::FilterError;
use crate::math::{full_qr, skew, Mat, Mat3, Vec3};

type Mat2x3 = SMatrix<f64, 2, 3>;

/// Stacked linearization of one feature track.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureJacobian {
    pub h_x: Mat,
    pub h_f: Mat,
    pub r: DVector<f64>,
    /// Observing camera states, in row-block order.
    pub state_ids: Vec<u64>,
}

/// Residual and Jacobian after removing the dependence on the feature position.
#[derive(Clone, Debug, PartialEq)]
pub struct NullspaceProjection {
    pub h_o: Mat,
    pub r_o: DVector<f64>,
    /// `‖Aᵀ H_f‖_∞` of the basis actually used.
    pub residual_norm: f64,
}

fn project(p: &Vec3) -> Result<(f64, f64), FilterError> {
    if !(p.z > 0.0) {
        return Err(FilterError::Cheirality(p.z));
    }
    Ok((p.x / p.z, p.y / p.z))
}

fn projection_jacobian(p: &Vec3) -> Mat2x3 {
    let iz = 1.0 / p.z;
    Mat2x3::new(iz, 0.0, -p.x * iz * iz, 0.0, iz, -p.y * iz * iz)
}

/// Feature position in the left and right camera frames.
fn camera_points(pose: &CameraPose, ext: &StereoExtrinsics, p_f: &Vec3) -> (Vec3, Vec3) {
    let p_l = pose.q.rotmat() * (p_f - pose.p);
    let p_r = ext.q_rl.rotmat() * (p_l - ext.p_lr);
    (p_l, p_r)
}

/// Predicted normalized coordinates in both cameras.
pub fn stereo_predict(
    pose: &CameraPose,
    ext: &StereoExtrinsics,
    p_f: &Vec3,
) -> Result<StereoObservation, FilterError> {
    let (p_l, p_r) = camera_points(pose, ext, p_f);
    let (u1, v1) = project(&p_l)?;
    let (u2, v2) = project(&p_r)?;
    Ok(StereoObservation { u1, v1, u2, v2 })
}

/// Linearizes every observation of `track` whose camera state is still in the window.
///
/// Row block `k` covers observation `k` (left u, v then right u, v); the residual is
/// measured minus predicted.
pub fn measurement_jacobians(
    state: &EkfState,
    track: &FeatureTrack,
    p_f: &Vec3,
    ext: &StereoExtrinsics,
) -> Result<FeatureJacobian, FilterError> {
    let ids: Vec<(usize, u64)> = track
        .obs
        .keys()
        .filter_map(|id| state.pose_index(*id).map(|i| (i, *id)))
        .collect();
    let m = ids.len();
    let mut h_x = Mat::zeros(4 * m, state.dim());
    let mut h_f = Mat::zeros(4 * m, 3);
    let mut r = DVector::zeros(4 * m);
    let c_rl = ext.q_rl.rotmat();
    for (k, (i, id)) in ids.iter().enumerate() {
        let pose = &state.window[*i];
        let c_l: Mat3 = pose.q.rotmat();
        let (p_l, p_r) = camera_points(pose, ext, p_f);
        let z_hat = stereo_predict(pose, ext, p_f)?;
        let jl = projection_jacobian(&p_l);
        let jr = projection_jacobian(&p_r) * c_rl;
        let d_theta = skew(&p_l);
        let d_pos = -c_l;
        let o = EkfState::pose_offset(*i);
        let row = 4 * k;
        h_x.fixed_view_mut::<2, 3>(row, o).copy_from(&(jl * d_theta));
        h_x.fixed_view_mut::<2, 3>(row, o + 3).copy_from(&(jl * d_pos));
        h_x.fixed_view_mut::<2, 3>(row + 2, o).copy_from(&(jr * d_theta));
        h_x.fixed_view_mut::<2, 3>(row + 2, o + 3).copy_from(&(jr * d_pos));
        h_f.fixed_view_mut::<2, 3>(row, 0).copy_from(&(jl * c_l));
        h_f.fixed_view_mut::<2, 3>(row + 2, 0).copy_from(&(jr * c_l));
        let z: Vector4<f64> = track.obs[id].as_vector();
        r.fixed_rows_mut::<4>(row).copy_from(&(z - z_hat.as_vector()));
    }
    Ok(FeatureJacobian {
        h_x,
        h_f,
        r,
        state_ids: ids.into_iter().map(|(_, id)| id).collect(),
    })
}

/// Projects onto the left nullspace of `h_f`, taken as the trailing columns of the full
/// QR factor of `h_f`.
pub fn nullspace_project(h_x: &Mat, h_f: &Mat, r: &DVector<f64>) -> Result<NullspaceProjection, FilterError> {
    let rows = h_f.nrows();
    if rows <= 3 || h_f.ncols() != 3 {
        return Err(FilterError::RankDeficient);
    }
    let (q, rr) = full_qr(h_f);
    let diag: Vec<f64> = (0..3).map(|i| rr[(i, i)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    if !(dmax > 0.0) || diag.iter().any(|d| *d < 1e-9 * dmax) {
        return Err(FilterError::RankDeficient);
    }
    let a = q.columns(3, rows - 3);
    let residual_norm = (a.transpose() * h_f).amax();
    Ok(NullspaceProjection {
        h_o: a.transpose() * h_x,
        r_o: a.transpose() * r,
        residual_norm,
    })
}
