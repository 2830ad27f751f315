//! IMU propagation of the nominal state and the error-state covariance.

use nalgebra::{Matrix4, SMatrix};

use super::{idx, EkfState, ImuNoiseParams, ImuState, IMU_DIM};
use crate::error::FilterError;
use crate::math::{quat_rate_matrix, skew, Mat, Mat3, UnitQuat, Vec3};

pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Mat15x12 = SMatrix<f64, 15, 12>;

/// Raw IMU measurements at both ends of a propagation interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuInterval {
    pub w_start: Vec3,
    pub w_end: Vec3,
    pub a_start: Vec3,
    pub a_end: Vec3,
}

impl ImuInterval {
    pub fn constant(w: Vec3, a: Vec3) -> Self {
        Self {
            w_start: w,
            w_end: w,
            a_start: a,
            a_end: a,
        }
    }

    fn is_finite(&self) -> bool {
        [self.w_start, self.w_end, self.a_start, self.a_end]
            .iter()
            .all(|v| v.iter().all(|c| c.is_finite()))
    }
}

/// Orientation and gyro bias supplied by the first stage; they replace the nominal values
/// at the end of the interval instead of the second stage's own attitude integration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttitudeSeed {
    pub q: UnitQuat,
    pub b_g: Vec3,
}

/// Continuous-time error dynamics `F` (15×15) and noise input `G` (15×12) for the noise
/// vector `[n_g, n_wg, n_a, n_wa]`.
pub fn error_state_matrices(imu: &ImuState, w_hat: &Vec3, a_hat: &Vec3) -> (Mat15, Mat15x12) {
    let ct = imu.q.rotmat().transpose();
    let i3 = Mat3::identity();
    let mut f = Mat15::zeros();
    f.fixed_view_mut::<3, 3>(idx::THETA, idx::THETA).copy_from(&(-skew(w_hat)));
    f.fixed_view_mut::<3, 3>(idx::THETA, idx::BG).copy_from(&(-i3));
    f.fixed_view_mut::<3, 3>(idx::V, idx::THETA).copy_from(&(-ct * skew(a_hat)));
    f.fixed_view_mut::<3, 3>(idx::V, idx::BA).copy_from(&(-ct));
    f.fixed_view_mut::<3, 3>(idx::P, idx::V).copy_from(&i3);

    let mut g = Mat15x12::zeros();
    g.fixed_view_mut::<3, 3>(idx::THETA, 0).copy_from(&(-i3));
    g.fixed_view_mut::<3, 3>(idx::BG, 3).copy_from(&i3);
    g.fixed_view_mut::<3, 3>(idx::V, 6).copy_from(&(-ct));
    g.fixed_view_mut::<3, 3>(idx::BA, 9).copy_from(&i3);
    (f, g)
}

/// `expm(F h)` to third order.
pub fn discrete_transition(f: &Mat15, h: f64) -> Mat15 {
    let fh = f * h;
    let fh2 = fh * fh;
    Mat15::identity() + fh + fh2 * 0.5 + fh2 * fh / 6.0
}

/// Trapezoidal discretization of `∫ Φ G Q_c Gᵀ Φᵀ`.
pub fn discrete_noise(phi: &Mat15, g: &Mat15x12, noise: &ImuNoiseParams, h: f64) -> Mat15 {
    let mut qc = SMatrix::<f64, 12, 12>::zeros();
    let d = [noise.sigma_g, noise.sigma_wg, noise.sigma_a, noise.sigma_wa];
    for (b, s) in d.iter().enumerate() {
        for i in 0..3 {
            qc[(3 * b + i, 3 * b + i)] = s * s;
        }
    }
    let gqg = g * qc * g.transpose();
    let q = (phi * gqg * phi.transpose() + gqg) * (0.5 * h);
    0.5 * (q + q.transpose())
}

/// Exact attitude step for a constant body rate over `h`.
fn rotate(q: &UnitQuat, w: &Vec3, h: f64) -> UnitQuat {
    let n = w.norm();
    let half = 0.5 * n * h;
    let phi = if n > 1e-12 {
        Matrix4::identity() * half.cos() + quat_rate_matrix(w) * (half.sin() / n)
    } else {
        Matrix4::identity() + quat_rate_matrix(w) * (0.5 * h)
    };
    UnitQuat::from_vec4(&(phi * q.as_vec4()))
}

fn integrate_nominal(
    imu: &ImuState,
    iv: &ImuInterval,
    h: f64,
    g_vec: &Vec3,
    seed: Option<&AttitudeSeed>,
) -> ImuState {
    let w_hat = 0.5 * (iv.w_start + iv.w_end) - imu.b_g;
    let (q_end, b_g) = match seed {
        Some(s) => (s.q, s.b_g),
        None => (rotate(&imu.q, &w_hat, h), imu.b_g),
    };
    let a_s = imu.q.rotmat().transpose() * (iv.a_start - imu.b_a) + g_vec;
    let a_e = q_end.rotmat().transpose() * (iv.a_end - imu.b_a) + g_vec;
    ImuState {
        q: q_end,
        b_g,
        v: imu.v + (a_s + a_e) * (0.5 * h),
        b_a: imu.b_a,
        p: imu.p + imu.v * h + (a_s / 3.0 + a_e / 6.0) * (h * h),
    }
}

/// Propagates the nominal state and the covariance over `h` seconds.
///
/// The nominal attitude uses the mean body rate held constant over the interval; velocity
/// and position use the trapezoid on the world-frame acceleration at both ends. With a seed,
/// attitude and gyro bias at the end of the interval come from the seed. On error the state
/// is left untouched.
pub fn propagate_interval(
    state: &mut EkfState,
    iv: &ImuInterval,
    h: f64,
    noise: &ImuNoiseParams,
    seed: Option<&AttitudeSeed>,
) -> Result<(), FilterError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(FilterError::NonPositiveStep(h));
    }
    if !iv.is_finite() {
        return Err(FilterError::NonFinite("IMU sample"));
    }
    let b_g = seed.map(|s| s.b_g).unwrap_or(state.imu.b_g);
    let w_hat = 0.5 * (iv.w_start + iv.w_end) - b_g;
    let a_hat = 0.5 * (iv.a_start + iv.a_end) - state.imu.b_a;
    let (f, g) = error_state_matrices(&state.imu, &w_hat, &a_hat);
    let phi = discrete_transition(&f, h);
    let q = discrete_noise(&phi, &g, noise, h);

    let n = state.dim();
    let p_ii = state.cov.fixed_view::<15, 15>(0, 0).into_owned();
    let p_ii = phi * p_ii * phi.transpose() + q;
    state.cov.fixed_view_mut::<15, 15>(0, 0).copy_from(&p_ii);
    if n > IMU_DIM {
        let p_ic = state.cov.view((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).into_owned();
        let p_ic = Mat::from_iterator(15, 15, phi.iter().cloned()) * p_ic;
        state.cov.view_mut((0, IMU_DIM), (IMU_DIM, n - IMU_DIM)).copy_from(&p_ic);
        state.cov.view_mut((IMU_DIM, 0), (n - IMU_DIM, IMU_DIM)).copy_from(&p_ic.transpose());
    }
    crate::math::symmetrize(&mut state.cov);

    state.imu = integrate_nominal(&state.imu, iv, h, &noise.g_vec, seed);
    state.t += h;
    Ok(())
}

/// Single-sample propagation with `w_m`, `a_m` held constant over `h`.
pub fn imu_propagate(
    state: &EkfState,
    w_m: &Vec3,
    a_m: &Vec3,
    h: f64,
    noise: &ImuNoiseParams,
) -> Result<EkfState, FilterError> {
    let mut out = state.clone();
    propagate_interval(&mut out, &ImuInterval::constant(*w_m, *a_m), h, noise, None)?;
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::math::{attitude_error, quat_multiply, small_angle_quat};
    use crate::msckf::testutil::*;
    use crate::msckf::{CameraPose, FrameStats};
    use nalgebra::{DVector, Vector4};
    use rand::Rng;

    /// Independent oracle: RK4 on the continuous true-state dynamics with constant
    /// measurements and constant noise inputs `[n_g, n_wg, n_a, n_wa]`.
    pub fn true_flow(x: &ImuState, w_m: &Vec3, a_m: &Vec3, g: &Vec3, n: &[Vec3; 4], t: f64) -> ImuState {
        #[derive(Clone, Copy)]
        struct S {
            q: Vector4<f64>,
            bg: Vec3,
            v: Vec3,
            ba: Vec3,
            p: Vec3,
        }
        let deriv = |s: &S| -> S {
            let w = w_m - s.bg - n[0];
            let a = a_m - s.ba - n[2];
            let qq = UnitQuat::from_vec4(&s.q);
            S {
                q: 0.5 * quat_rate_matrix(&w) * s.q,
                bg: n[1],
                v: qq.rotmat().transpose() * a + g,
                ba: n[3],
                p: s.v,
            }
        };
        let add = |a: &S, b: &S, k: f64| S {
            q: a.q + b.q * k,
            bg: a.bg + b.bg * k,
            v: a.v + b.v * k,
            ba: a.ba + b.ba * k,
            p: a.p + b.p * k,
        };
        let mut s = S {
            q: x.q.as_vec4(),
            bg: x.b_g,
            v: x.v,
            ba: x.b_a,
            p: x.p,
        };
        let steps = 40;
        let dt = t / steps as f64;
        for _ in 0..steps {
            let k1 = deriv(&s);
            let k2 = deriv(&add(&s, &k1, dt / 2.0));
            let k3 = deriv(&add(&s, &k2, dt / 2.0));
            let k4 = deriv(&add(&s, &k3, dt));
            s.q += (k1.q + k2.q * 2.0 + k3.q * 2.0 + k4.q) * (dt / 6.0);
            s.bg += (k1.bg + k2.bg * 2.0 + k3.bg * 2.0 + k4.bg) * (dt / 6.0);
            s.v += (k1.v + k2.v * 2.0 + k3.v * 2.0 + k4.v) * (dt / 6.0);
            s.ba += (k1.ba + k2.ba * 2.0 + k3.ba * 2.0 + k4.ba) * (dt / 6.0);
            s.p += (k1.p + k2.p * 2.0 + k3.p * 2.0 + k4.p) * (dt / 6.0);
        }
        ImuState {
            q: UnitQuat::from_vec4(&s.q),
            b_g: s.bg,
            v: s.v,
            b_a: s.ba,
            p: s.p,
        }
    }

    fn perturb(x: &ImuState, dx: &DVector<f64>) -> ImuState {
        let d = |o: usize| Vec3::new(dx[o], dx[o + 1], dx[o + 2]);
        ImuState {
            q: quat_multiply(&small_angle_quat(&d(idx::THETA)), &x.q),
            b_g: x.b_g + d(idx::BG),
            v: x.v + d(idx::V),
            b_a: x.b_a + d(idx::BA),
            p: x.p + d(idx::P),
        }
    }

    fn error(a: &ImuState, b: &ImuState) -> DVector<f64> {
        let mut e = DVector::zeros(15);
        e.fixed_rows_mut::<3>(idx::THETA).copy_from(&attitude_error(&a.q, &b.q));
        e.fixed_rows_mut::<3>(idx::BG).copy_from(&(a.b_g - b.b_g));
        e.fixed_rows_mut::<3>(idx::V).copy_from(&(a.v - b.v));
        e.fixed_rows_mut::<3>(idx::BA).copy_from(&(a.b_a - b.b_a));
        e.fixed_rows_mut::<3>(idx::P).copy_from(&(a.p - b.p));
        e
    }

    /// Numerical F and G: central differences in the error state (or noise input) and
    /// central differences in time.
    pub fn numerical_f_g(x: &ImuState, w_m: &Vec3, a_m: &Vec3, g: &Vec3) -> (Mat, Mat) {
        let h = 1e-4;
        let eps = 1e-5;
        let zero = [Vec3::zeros(); 4];
        let flow_err = |dx: &DVector<f64>, n: &[Vec3; 4], t: f64| {
            let nominal = true_flow(x, w_m, a_m, g, &zero, t);
            error(&true_flow(&perturb(x, dx), w_m, a_m, g, n, t), &nominal)
        };
        let mut f = Mat::zeros(15, 15);
        for j in 0..15 {
            let mut dp = DVector::zeros(15);
            dp[j] = eps;
            let dm = -dp.clone();
            let phi_f = (flow_err(&dp, &zero, h) - flow_err(&dm, &zero, h)) / (2.0 * eps);
            let phi_b = (flow_err(&dp, &zero, -h) - flow_err(&dm, &zero, -h)) / (2.0 * eps);
            f.set_column(j, &((phi_f - phi_b) / (2.0 * h)));
        }
        let mut gm = Mat::zeros(15, 12);
        let zero_dx = DVector::zeros(15);
        for j in 0..12 {
            let mut np = zero;
            let mut nm = zero;
            np[j / 3][j % 3] = eps;
            nm[j / 3][j % 3] = -eps;
            let rate = |n: &[Vec3; 4]| (flow_err(&zero_dx, n, h) - flow_err(&zero_dx, n, -h)) / (2.0 * h);
            gm.set_column(j, &((rate(&np) - rate(&nm)) / (2.0 * eps)));
        }
        (f, gm)
    }

    fn to_dyn<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> Mat {
        Mat::from_iterator(R, C, m.iter().cloned())
    }

    #[test]
    fn f_structure_at_rest() {
        let (f, g) = error_state_matrices(&ImuState::default(), &Vec3::zeros(), &Vec3::zeros());
        let mut expect = Mat15::zeros();
        for i in 0..3 {
            expect[(i, 3 + i)] = -1.0;
            expect[(6 + i, 9 + i)] = -1.0;
            expect[(12 + i, 6 + i)] = 1.0;
        }
        assert_eq!(f, expect);
        assert_eq!(g.fixed_view::<3, 3>(idx::BG, 3).into_owned(), Mat3::identity());
        assert_eq!(g.fixed_view::<3, 3>(idx::BA, 9).into_owned(), Mat3::identity());
    }

    #[test]
    fn f_and_g_match_numerical_linearization() {
        let mut rng = rng(11);
        let g_vec = Vec3::new(0.0, 0.0, -9.81);
        for _ in 0..20 {
            let x = ImuState {
                q: random_quat(&mut rng),
                b_g: random_vec(&mut rng, 0.05),
                v: random_vec(&mut rng, 3.0),
                b_a: random_vec(&mut rng, 0.2),
                p: random_vec(&mut rng, 10.0),
            };
            let w_m = random_vec(&mut rng, 2.0);
            let a_m = random_vec(&mut rng, 12.0);
            let (f, g) = error_state_matrices(&x, &(w_m - x.b_g), &(a_m - x.b_a));
            let (fnum, gnum) = numerical_f_g(&x, &w_m, &a_m, &g_vec);
            let ef = (to_dyn(&f) - &fnum).norm() / fnum.norm();
            let eg = (to_dyn(&g) - &gnum).norm() / gnum.norm();
            assert!(ef < 1e-4, "F rel err {ef}");
            assert!(eg < 1e-4, "G rel err {eg}");
        }
    }

    #[test]
    fn stationary_equilibrium() {
        let noise = ImuNoiseParams::default();
        let q = UnitQuat::from_euler_zyx(0.1, -0.2, 0.7);
        let imu = ImuState {
            q,
            p: Vec3::new(1.0, 2.0, 3.0),
            ..Default::default()
        };
        let s = EkfState::new(0.0, imu, Mat::identity(15, 15) * 1e-4);
        let a_m = q.rotmat() * (-noise.g_vec);
        let out = imu_propagate(&s, &Vec3::zeros(), &a_m, 0.8, &noise).unwrap();
        assert!((out.imu.p - imu.p).norm() < 1e-12);
        assert!(out.imu.v.norm() < 1e-12);
        assert!(out.imu.q.angle_to(&q) < 1e-12);
        assert!((out.t - 0.8).abs() < 1e-15);
    }

    #[test]
    fn free_fall() {
        let noise = ImuNoiseParams::default();
        let s = EkfState::new(0.0, ImuState::default(), Mat::identity(15, 15) * 1e-4);
        let out = imu_propagate(&s, &Vec3::zeros(), &Vec3::zeros(), 1.0, &noise).unwrap();
        assert!((out.imu.v - noise.g_vec).norm() < 1e-12);
        assert!((out.imu.p - noise.g_vec * 0.5).norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_step_and_leaves_state() {
        let noise = ImuNoiseParams::default();
        let mut s = EkfState::new(0.0, ImuState::default(), Mat::identity(15, 15));
        let before = s.clone();
        let iv = ImuInterval::constant(Vec3::zeros(), Vec3::zeros());
        assert!(propagate_interval(&mut s, &iv, -0.1, &noise, None).is_err());
        let bad = ImuInterval::constant(Vec3::new(f64::NAN, 0.0, 0.0), Vec3::zeros());
        assert!(propagate_interval(&mut s, &bad, 0.1, &noise, None).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn cross_covariance_follows_transition() {
        let mut rng = rng(12);
        let noise = ImuNoiseParams::default();
        let mut s = random_state(&mut rng, 3);
        let before = s.clone();
        let w = random_vec(&mut rng, 1.0);
        let a = random_vec(&mut rng, 10.0);
        let h = 0.005;
        propagate_interval(&mut s, &ImuInterval::constant(w, a), h, &noise, None).unwrap();
        let (f, _) = error_state_matrices(&before.imu, &(w - before.imu.b_g), &(a - before.imu.b_a));
        let phi = to_dyn(&discrete_transition(&f, h));
        let expect = &phi * before.cov.view((0, 15), (15, 18));
        assert!((s.cov.view((0, 15), (15, 18)) - expect).amax() < 1e-14);
        // camera block untouched
        assert_eq!(s.cov.view((15, 15), (18, 18)), before.cov.view((15, 15), (18, 18)));
        assert!(crate::math::covariance_is_healthy(&s.cov));
        let _ = CameraPose {
            state_id: 0,
            t: 0.0,
            q: UnitQuat::identity(),
            p: Vec3::zeros(),
            keyframe: false,
            stats: FrameStats::default(),
        };
    }

    #[test]
    fn seed_overrides_attitude_and_bias() {
        let noise = ImuNoiseParams::default();
        let mut s = EkfState::new(0.0, ImuState::default(), Mat::identity(15, 15) * 1e-4);
        let seed = AttitudeSeed {
            q: UnitQuat::from_euler_zyx(0.0, 0.0, 0.01),
            b_g: Vec3::new(1e-3, 0.0, 0.0),
        };
        let iv = ImuInterval::constant(Vec3::zeros(), Vec3::new(0.0, 0.0, 9.81));
        propagate_interval(&mut s, &iv, 0.005, &noise, Some(&seed)).unwrap();
        assert_eq!(s.imu.q, seed.q);
        assert_eq!(s.imu.b_g, seed.b_g);
    }

    #[test]
    fn discretized_noise_is_psd() {
        let mut rng = rng(13);
        for _ in 0..50 {
            let imu = ImuState {
                q: random_quat(&mut rng),
                ..Default::default()
            };
            let (f, g) = error_state_matrices(&imu, &random_vec(&mut rng, 2.0), &random_vec(&mut rng, 10.0));
            let h = rng.gen_range(0.001..0.02);
            let phi = discrete_transition(&f, h);
            let q = discrete_noise(&phi, &g, &ImuNoiseParams::default(), h);
            assert!(crate::math::min_eigen_ratio(&to_dyn(&q)) > -1e-12);
        }
    }
}
