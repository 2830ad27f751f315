//! Trajectory alignment, ATE RMSE, attitude RMSE and NEES.

use std::io::Write;
use std::path::Path;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::IoError;
use crate::io::TrajectoryPoint;
use crate::math::{quat_multiply, Mat3, UnitQuat, Vec3};
use crate::msckf::update::quantile;

/// Association window for nearest-neighbour timestamp matching (s).
pub const MATCH_WINDOW: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("only {0} matched pose pairs (need at least 2)")]
    TooFewMatches(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignKind {
    #[default]
    #[serde(rename = "4dof")]
    FourDof,
    Se3,
}

/// Transform taking estimate positions into the ground-truth frame:
/// `p_gt ≈ rotation · p_est + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub kind: AlignKind,
    /// Rotation about the gravity axis (rad); for SE(3) the yaw of the full rotation.
    pub yaw: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub matches: usize,
}

impl AlignmentResult {
    pub fn identity() -> Self {
        Self {
            kind: AlignKind::FourDof,
            yaw: 0.0,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            matches: 0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Attitude of an estimate expressed in the ground-truth frame.
    pub fn apply_attitude(&self, q: &UnitQuat) -> UnitQuat {
        // C_aligned = C_est · Rᵀ
        quat_multiply(q, &UnitQuat::from_rotmat(&self.rotation.transpose()))
    }
}

/// Pairs `(i_est, i_gt)` of nearest timestamps within [`MATCH_WINDOW`]. Both inputs must
/// be sorted by time.
pub fn match_pairs(est: &[TrajectoryPoint], gt: &[TrajectoryPoint]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut j = 0;
    for (i, e) in est.iter().enumerate() {
        while j + 1 < gt.len() && (gt[j + 1].t - e.t).abs() <= (gt[j].t - e.t).abs() {
            j += 1;
        }
        if let Some(g) = gt.get(j) {
            if (g.t - e.t).abs() <= MATCH_WINDOW {
                out.push((i, j));
            }
        }
    }
    out
}

fn matched(est: &[TrajectoryPoint], gt: &[TrajectoryPoint]) -> Result<Vec<(Vec3, Vec3)>, EvalError> {
    let pairs = match_pairs(est, gt);
    if pairs.len() < 2 {
        return Err(EvalError::TooFewMatches(pairs.len()));
    }
    Ok(pairs.into_iter().map(|(i, j)| (est[i].p, gt[j].p)).collect())
}

fn centroids(pairs: &[(Vec3, Vec3)]) -> (Vec3, Vec3) {
    let n = pairs.len() as f64;
    let (a, b) = pairs.iter().fold((Vec3::zeros(), Vec3::zeros()), |(a, b), (e, g)| (a + e, b + g));
    (a / n, b / n)
}

/// Least-squares yaw and translation.
pub fn align_4dof(est: &[TrajectoryPoint], gt: &[TrajectoryPoint]) -> Result<AlignmentResult, EvalError> {
    let pairs = matched(est, gt)?;
    let (ce, cg) = centroids(&pairs);
    let (mut s, mut c) = (0.0, 0.0);
    for (e, g) in &pairs {
        let (e, g) = (e - ce, g - cg);
        s += e.x * g.y - e.y * g.x;
        c += e.x * g.x + e.y * g.y;
    }
    let yaw = if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) };
    let rotation = *Rotation3::from_axis_angle(&Vec3::z_axis(), yaw).matrix();
    Ok(AlignmentResult {
        kind: AlignKind::FourDof,
        yaw,
        rotation,
        translation: cg - rotation * ce,
        matches: pairs.len(),
    })
}

/// Least-squares rotation and translation (no scale).
pub fn align_se3(est: &[TrajectoryPoint], gt: &[TrajectoryPoint]) -> Result<AlignmentResult, EvalError> {
    let pairs = matched(est, gt)?;
    let (ce, cg) = centroids(&pairs);
    let mut h = Mat3::zeros();
    for (e, g) in &pairs {
        h += (g - cg) * (e - ce).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("requested"), svd.v_t.expect("requested"));
    let d = (u * vt).determinant().signum();
    let rotation = u * Mat3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * vt;
    Ok(AlignmentResult {
        kind: AlignKind::Se3,
        yaw: rotation[(1, 0)].atan2(rotation[(0, 0)]),
        rotation,
        translation: cg - rotation * ce,
        matches: pairs.len(),
    })
}

pub fn align(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], kind: AlignKind) -> Result<AlignmentResult, EvalError> {
    match kind {
        AlignKind::FourDof => align_4dof(est, gt),
        AlignKind::Se3 => align_se3(est, gt),
    }
}

/// Per matched pair: `(t, aligned position error)`.
pub fn position_errors(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], al: &AlignmentResult) -> Vec<(f64, Vec3)> {
    match_pairs(est, gt)
        .into_iter()
        .map(|(i, j)| (est[i].t, al.apply(&est[i].p) - gt[j].p))
        .collect()
}

pub fn ate_rmse(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], al: &AlignmentResult) -> f64 {
    let e = position_errors(est, gt, al);
    if e.is_empty() {
        return 0.0;
    }
    (e.iter().map(|(_, v)| v.norm_squared()).sum::<f64>() / e.len() as f64).sqrt()
}

/// RMS rotation angle (rad) between aligned estimated and true attitudes.
pub fn attitude_rmse(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], al: &AlignmentResult) -> f64 {
    let pairs = match_pairs(est, gt);
    if pairs.is_empty() {
        return 0.0;
    }
    let sq: f64 = pairs
        .iter()
        .map(|(i, j)| al.apply_attitude(&est[*i].q).angle_to(&gt[*j].q).powi(2))
        .sum();
    (sq / pairs.len() as f64).sqrt()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NeesSeries {
    pub steps: Vec<(f64, f64)>,
    pub mean: f64,
    /// Steps dropped for a singular (zero-variance) covariance.
    pub skipped: usize,
}

/// Position NEES per matched step, using the diagonal position covariance of the estimate.
/// The error is rotated into the estimate frame before weighting.
pub fn nees(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], al: &AlignmentResult) -> NeesSeries {
    let mut out = NeesSeries::default();
    for (i, j) in match_pairs(est, gt) {
        let e = &est[i];
        let err = al.rotation.transpose() * (gt[j].p - al.translation) - e.p;
        let var = e.sigma_p.component_mul(&e.sigma_p);
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            out.skipped += 1;
            continue;
        }
        let n = (0..3).map(|k| err[k] * err[k] / var[k]).sum::<f64>();
        out.steps.push((e.t, n));
    }
    if !out.steps.is_empty() {
        out.mean = out.steps.iter().map(|(_, n)| n).sum::<f64>() / out.steps.len() as f64;
    }
    out
}

/// Two-sided 95% acceptance band for the mean of `runs` independent χ²(dof) NEES values.
pub fn nees_band(dof: usize, runs: usize) -> (f64, f64) {
    let n = dof * runs;
    (quantile(0.025, n) / runs as f64, quantile(0.975, n) / runs as f64)
}

/// Metrics emitted by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ate_rmse: f64,
    pub attitude_rmse_deg: f64,
    pub matches: usize,
    pub alignment: AlignmentResult,
    pub nees_mean: Option<f64>,
    pub nees_steps: usize,
    pub nees_skipped: usize,
}

pub fn evaluate(est: &[TrajectoryPoint], gt: &[TrajectoryPoint], kind: AlignKind) -> Result<(EvalReport, NeesSeries), EvalError> {
    let al = align(est, gt, kind)?;
    let n = nees(est, gt, &al);
    Ok((
        EvalReport {
            ate_rmse: ate_rmse(est, gt, &al),
            attitude_rmse_deg: attitude_rmse(est, gt, &al).to_degrees(),
            matches: al.matches,
            alignment: al,
            nees_mean: (!n.steps.is_empty()).then_some(n.mean),
            nees_steps: n.steps.len(),
            nees_skipped: n.skipped,
        },
        n,
    ))
}

/// Per-step CSV: `t,ex,ey,ez,err,nees` (`nees` empty where skipped).
pub fn write_step_csv(
    path: impl AsRef<Path>,
    est: &[TrajectoryPoint],
    gt: &[TrajectoryPoint],
    al: &AlignmentResult,
) -> Result<(), IoError> {
    let path = path.as_ref();
    let n = nees(est, gt, al);
    let by_t: std::collections::BTreeMap<i64, f64> =
        n.steps.iter().map(|(t, v)| (crate::io::seconds_to_ns(*t), *v)).collect();
    let mut body = String::from("t,ex,ey,ez,err,nees\n");
    for (t, e) in position_errors(est, gt, al) {
        let nv = by_t
            .get(&crate::io::seconds_to_ns(t))
            .map(|v| v.to_string())
            .unwrap_or_default();
        body.push_str(&format!("{t},{},{},{},{},{nv}\n", e.x, e.y, e.z, e.norm()));
    }
    let mut f = std::fs::File::create(path).map_err(|e| IoError::io(path, e))?;
    f.write_all(body.as_bytes()).map_err(|e| IoError::io(path, e))
}
