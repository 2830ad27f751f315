//! Feature position from multi-view stereo observations.

use nalgebra::{Matrix3, SMatrix, Vector2};
use serde::{Deserialize, Serialize};

use super::{CameraPose, FeatureTrack, StereoExtrinsics, StereoObservation};
use crate::math::{Mat3, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriangulationConfig {
    pub min_depth: f64,
    pub max_depth: f64,
    /// Observation noise in normalized image coordinates.
    pub sigma_px: f64,
    /// Mean reprojection residual gate, in multiples of `sigma_px`.
    pub residual_gate: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
}

impl Default for TriangulationConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 100.0,
            sigma_px: 1.5 / 460.0,
            residual_gate: 3.0,
            max_iterations: 10,
            step_tolerance: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Triangulation {
    /// `ᴳp_f`
    pub p_f: Vec3,
    /// Depth along the anchor camera's optical axis.
    pub depth: f64,
    pub iterations: usize,
    pub mean_residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TriangulationFailure {
    TooFewObservations,
    Degenerate,
    NotConverged,
    DepthOutOfRange,
    Cheirality,
    LargeResidual,
}

/// One camera expressed relative to the anchor: `h = R·(α, β, 1) + ρ·t`.
struct View {
    r: Mat3,
    t: Vec3,
    z: Vector2<f64>,
}

fn views(
    track: &FeatureTrack,
    poses: &[CameraPose],
    ext: &StereoExtrinsics,
) -> Option<(Mat3, Vec3, Vec<View>)> {
    let observed: Vec<(&CameraPose, &StereoObservation)> = poses
        .iter()
        .filter_map(|p| track.obs.get(&p.state_id).map(|o| (p, o)))
        .collect();
    if observed.len() < 2 {
        return None;
    }
    let (anchor, _) = observed[0];
    let c_a = anchor.q.rotmat();
    let p_a = anchor.p;
    let mut out = Vec::with_capacity(2 * observed.len());
    for (pose, obs) in observed {
        let c_l = pose.q.rotmat();
        let (c_r, p_r) = ext.right_camera(&pose.q, &pose.p);
        for (c, p, z) in [
            (c_l, pose.p, Vector2::new(obs.u1, obs.v1)),
            (c_r, p_r, Vector2::new(obs.u2, obs.v2)),
        ] {
            out.push(View {
                r: c * c_a.transpose(),
                t: c * (p_a - p),
                z,
            });
        }
    }
    Some((c_a, p_a, out))
}

/// Depth along the anchor ray from the single view with the longest baseline.
fn initial_depth(bearing: &Vec3, views: &[View]) -> f64 {
    let best = views
        .iter()
        .skip(1)
        .max_by(|a, b| a.t.norm().total_cmp(&b.t.norm()));
    let Some(v) = best else { return 5.0 };
    let z = Vec3::new(v.z.x, v.z.y, 1.0);
    let a = z.cross(&(v.r * bearing));
    let c = z.cross(&v.t);
    let d = -a.dot(&c) / a.dot(&a);
    if d.is_finite() && d > 0.0 {
        d
    } else {
        5.0
    }
}

fn reprojection(views: &[View], x: &Vec3) -> (Vec<Vector2<f64>>, Vec<SMatrix<f64, 2, 3>>, bool) {
    let mut res = Vec::with_capacity(views.len());
    let mut jac = Vec::with_capacity(views.len());
    let mut in_front = true;
    let ab1 = Vec3::new(x.x, x.y, 1.0);
    for v in views {
        let h = v.r * ab1 + v.t * x.z;
        in_front &= h.z > 0.0;
        let iz = 1.0 / h.z;
        res.push(v.z - Vector2::new(h.x * iz, h.y * iz));
        let jp = SMatrix::<f64, 2, 3>::new(iz, 0.0, -h.x * iz * iz, 0.0, iz, -h.y * iz * iz);
        let jh = Matrix3::from_columns(&[v.r.column(0).into_owned(), v.r.column(1).into_owned(), v.t]);
        jac.push(jp * jh);
    }
    (res, jac, in_front)
}

/// Gauss-Newton over inverse depth `(α, β, ρ)` anchored at the first observing left camera
/// in `poses`. Observations of states missing from `poses` are ignored.
pub fn triangulate_feature(
    track: &FeatureTrack,
    poses: &[CameraPose],
    ext: &StereoExtrinsics,
    cfg: &TriangulationConfig,
) -> Result<Triangulation, TriangulationFailure> {
    let (c_a, p_a, views) = views(track, poses, ext).ok_or(TriangulationFailure::TooFewObservations)?;
    let bearing = Vec3::new(views[0].z.x, views[0].z.y, 1.0);
    let mut x = Vec3::new(bearing.x, bearing.y, 1.0 / initial_depth(&bearing, &views));
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        iterations += 1;
        let (res, jac, _) = reprojection(&views, &x);
        let mut a = Mat3::zeros();
        let mut b = Vec3::zeros();
        for (e, j) in res.iter().zip(&jac) {
            a += j.transpose() * j;
            b += j.transpose() * e;
        }
        let step = a.cholesky().ok_or(TriangulationFailure::Degenerate)?.solve(&b);
        if !step.iter().all(|v| v.is_finite()) {
            return Err(TriangulationFailure::Degenerate);
        }
        x += step;
        if step.norm() < cfg.step_tolerance {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(TriangulationFailure::NotConverged);
    }
    if !(x.z > 0.0) {
        return Err(TriangulationFailure::Cheirality);
    }
    let depth = 1.0 / x.z;
    if depth < cfg.min_depth || depth > cfg.max_depth {
        return Err(TriangulationFailure::DepthOutOfRange);
    }
    let (res, _, in_front) = reprojection(&views, &x);
    if !in_front {
        return Err(TriangulationFailure::Cheirality);
    }
    let mean_residual = res.iter().map(|e| e.norm()).sum::<f64>() / res.len() as f64;
    if mean_residual > cfg.residual_gate * cfg.sigma_px {
        return Err(TriangulationFailure::LargeResidual);
    }
    let p_f = p_a + c_a.transpose() * (Vec3::new(x.x, x.y, 1.0) * depth);
    Ok(Triangulation {
        p_f,
        depth,
        iterations,
        mean_residual,
    })
}
