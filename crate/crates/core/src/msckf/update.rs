//! Batched EKF update from nullspace-projected feature residuals.

use std::sync::OnceLock;

use nalgebra::DVector;
use statrs::distribution::{ChiSquared, Continuous, ContinuousCDF};

use super::{EkfState, NullspaceProjection};
use crate::math::{symmetrize, Mat};

const TABLE_SIZE: usize = 256;

/// Quantile of χ²(dof); the library's bisection result is polished by Newton steps.
pub(crate) fn quantile(p: f64, dof: usize) -> f64 {
    let d = ChiSquared::new(dof as f64).expect("positive dof");
    let mut x = d.inverse_cdf(p);
    for _ in 0..4 {
        let pdf = d.pdf(x);
        if !(pdf > 0.0) {
            break;
        }
        x -= (d.cdf(x) - p) / pdf;
    }
    x
}

/// 95% quantile of χ²(dof).
pub fn chi_square_threshold(dof: usize) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..TABLE_SIZE)
            .map(|d| if d == 0 { 0.0 } else { quantile(0.95, d) })
            .collect()
    });
    table.get(dof).copied().unwrap_or_else(|| quantile(0.95, dof))
}

/// Mahalanobis distance of `r_o` under `H P Hᵀ + σ² I`, and whether it is below the 95%
/// threshold.
pub fn passes_gate(cov: &Mat, block: &NullspaceProjection, sigma: f64) -> (bool, f64) {
    let h = &block.h_o;
    let s = h * cov * h.transpose() + Mat::identity(h.nrows(), h.nrows()) * (sigma * sigma);
    let Some(chol) = s.cholesky() else {
        return (false, f64::INFINITY);
    };
    let d = block.r_o.dot(&chol.solve(&block.r_o));
    (d < chi_square_threshold(h.nrows()), d)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateReport {
    pub accepted: usize,
    pub rejected: usize,
    /// Residual rows entering the gain computation after compression.
    pub rows: usize,
}

/// Kalman correction for `r = H x̃ + n`, `n ~ N(0, σ² I)`. Returns `(δx, P⁺)`.
pub(crate) fn kalman_correction(cov: &Mat, h: &Mat, r: &DVector<f64>, sigma: f64, joseph: bool) -> Option<(DVector<f64>, Mat)> {
    let n = cov.nrows();
    let ph = cov * h.transpose();
    let s = h * &ph + Mat::identity(h.nrows(), h.nrows()) * (sigma * sigma);
    let chol = s.cholesky()?;
    let k = chol.solve(&ph.transpose()).transpose();
    let dx = &k * r;
    let mut post = if joseph {
        let ikh = Mat::identity(n, n) - &k * h;
        &ikh * cov * ikh.transpose() + (&k * k.transpose()) * (sigma * sigma)
    } else {
        cov - &k * h * cov
    };
    symmetrize(&mut post);
    Some((dx, post))
}

/// Gates each block (when `gating`), stacks the survivors, compresses by thin QR when
/// there are more rows than states, and applies the update. Leaves the state untouched
/// if nothing survives.
pub fn msckf_update(state: &mut EkfState, blocks: &[NullspaceProjection], sigma: f64, gating: bool) -> UpdateReport {
    let mut report = UpdateReport::default();
    let accepted: Vec<&NullspaceProjection> = blocks
        .iter()
        .filter(|b| {
            let ok = b.h_o.nrows() > 0 && (!gating || passes_gate(&state.cov, b, sigma).0);
            if ok {
                report.accepted += 1;
            } else {
                report.rejected += 1;
            }
            ok
        })
        .collect();
    if accepted.is_empty() {
        return report;
    }
    let n = state.dim();
    let rows: usize = accepted.iter().map(|b| b.h_o.nrows()).sum();
    let mut h = Mat::zeros(rows, n);
    let mut r = DVector::zeros(rows);
    let mut o = 0;
    for b in accepted {
        let k = b.h_o.nrows();
        h.rows_mut(o, k).copy_from(&b.h_o);
        r.rows_mut(o, k).copy_from(&b.r_o);
        o += k;
    }
    let (h, r) = if rows > n {
        let qr = h.qr();
        let mut qtr = r;
        qr.q_tr_mul(&mut qtr);
        (qr.r(), qtr.rows(0, n).into_owned())
    } else {
        (h, r)
    };
    report.rows = h.nrows();
    if let Some((dx, post)) = kalman_correction(&state.cov, &h, &r, sigma, true) {
        state.inject(&dx);
        state.cov = post;
    } else {
        report.rejected += report.accepted;
        report.accepted = 0;
        report.rows = 0;
    }
    report
}
