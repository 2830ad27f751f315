//! First-stage EKF: gyroscope propagation corrected by accelerometer gravity measurements.
//!
//! The state is the full 7-vector `[q0, q1, q2, q3, b_gx, b_gy, b_gz]` (not an error state),
//! with a 7×7 covariance in the same ordering.
//!
//! The accelerometer measurement consumed here is the gravity vector expressed in the body
//! frame, `R_n^b · [0, 0, −g]ᵀ`. A level, static IMU therefore reads `(0, 0, −g)`. Raw
//! specific force (`(0, 0, +g)` when level) must be negated before calling [`gyro_update`].

use nalgebra::{Matrix3, Matrix4, SMatrix, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::FilterError;
use crate::math::{quat_rate_matrix, quat_to_rotmat, Mat3, UnitQuat, Vec3};

pub type Mat7 = SMatrix<f64, 7, 7>;
pub type Mat3x7 = SMatrix<f64, 3, 7>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GyroState {
    pub q: UnitQuat,
    pub b_g: Vec3,
}

impl Default for GyroState {
    fn default() -> Self {
        Self {
            q: UnitQuat::identity(),
            b_g: Vec3::zeros(),
        }
    }
}

impl GyroState {
    fn as_vector(&self) -> SMatrix<f64, 7, 1> {
        let mut x = SMatrix::<f64, 7, 1>::zeros();
        x.fixed_rows_mut::<4>(0).copy_from(&self.q.as_vec4());
        x.fixed_rows_mut::<3>(4).copy_from(&self.b_g);
        x
    }
}

/// 7×7 covariance ordered `[q0..q3, b_g]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GyroCovariance(pub Mat7);

impl GyroCovariance {
    /// Diagonal covariance with the given per-component quaternion and bias sigmas.
    pub fn diagonal(sigma_q: f64, sigma_b: f64) -> Self {
        let mut p = Mat7::zeros();
        for i in 0..4 {
            p[(i, i)] = sigma_q * sigma_q;
        }
        for i in 4..7 {
            p[(i, i)] = sigma_b * sigma_b;
        }
        Self(p)
    }

    /// Covariance of `[q, b_g]` induced by an attitude error `δθ` (with
    /// `q = small_angle_quat(δθ) ⊗ q̂`) and a bias error, given their joint 6×6 covariance
    /// ordered `[δθ, b_g]`.
    pub fn from_error_state(q: &UnitQuat, p: &SMatrix<f64, 6, 6>) -> Self {
        let mut j = SMatrix::<f64, 7, 6>::zeros();
        let (wb, vb) = (q.q0, q.vector());
        for i in 0..3 {
            let e = Vec3::ith(i, 1.0);
            let v = wb * e + vb.cross(&e);
            j[(0, i)] = -0.5 * vb.dot(&e);
            j.fixed_view_mut::<3, 1>(1, i).copy_from(&(0.5 * v));
        }
        j.fixed_view_mut::<3, 3>(4, 3).copy_from(&Matrix3::identity());
        Self(j * p * j.transpose()).symmetrized()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    fn symmetrized(mut self) -> Self {
        self.0 = 0.5 * (self.0 + self.0.transpose());
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GyroNoiseParams {
    /// Per-step additive quaternion noise std.
    pub sigma_q: f64,
    /// Per-step bias random-walk std (rad/s).
    pub sigma_b: f64,
    /// Accelerometer measurement noise std (m/s²).
    pub sigma_a: f64,
    /// Gravity magnitude (m/s²).
    pub g: f64,
    /// Accept an accelerometer sample only if `| |a| − g | / g` is within this band.
    pub accel_gate: f64,
}

impl Default for GyroNoiseParams {
    fn default() -> Self {
        Self {
            sigma_q: 1e-5,
            sigma_b: 1e-6,
            sigma_a: 0.05,
            g: 9.81,
            accel_gate: 0.1,
        }
    }
}

impl GyroNoiseParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        let all = [self.sigma_q, self.sigma_b, self.sigma_a, self.g, self.accel_gate];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(FilterError::Config(
                "gyro noise parameters must be positive".into(),
            ))
        }
    }

    fn process_noise(&self) -> Mat7 {
        GyroCovariance::diagonal(self.sigma_q, self.sigma_b).0
    }
}

/// Jacobian of the discrete process map `q⁺ = (I + h/2 Ω(ω_m − b_g)) q`, `b_g⁺ = b_g`
/// with respect to `[q, b_g]`.
pub fn gyro_process_jacobian(state: &GyroState, w_hat: &Vec3, h: f64) -> Mat7 {
    let UnitQuat { q0, q1, q2, q3 } = state.q;
    let mut hp = Mat7::identity();
    let hp1 = Matrix4::identity() + 0.5 * h * quat_rate_matrix(w_hat);
    hp.fixed_view_mut::<4, 4>(0, 0).copy_from(&hp1);
    let hp2 = SMatrix::<f64, 4, 3>::new(
        q1, q2, q3, //
        -q0, q3, -q2, //
        -q3, -q0, q1, //
        q2, -q1, -q0,
    ) * (0.5 * h);
    hp.fixed_view_mut::<4, 3>(0, 4).copy_from(&hp2);
    hp
}

pub fn gyro_propagate(
    state: &GyroState,
    cov: &GyroCovariance,
    w_m: &Vec3,
    h: f64,
    noise: &GyroNoiseParams,
) -> Result<(GyroState, GyroCovariance), FilterError> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(FilterError::NonPositiveStep(h));
    }
    if !w_m.iter().all(|v| v.is_finite()) {
        return Err(FilterError::NonFinite("gyroscope sample"));
    }
    let w_hat = w_m - state.b_g;
    let phi = Matrix4::identity() + 0.5 * h * quat_rate_matrix(&w_hat);
    let hp = gyro_process_jacobian(state, &w_hat, h);
    let mut p = hp * cov.0 * hp.transpose() + noise.process_noise();
    let q = canonical(&(phi * state.q.as_vec4()), &mut p);
    Ok((GyroState { q, b_g: state.b_g }, GyroCovariance(p).symmetrized()))
}

/// Normalizes `q` to the `q0 >= 0` hemisphere. Flipping the sign of `q` negates its
/// correlation with the bias, so the cross blocks of `p` are negated with it.
fn canonical(q: &Vector4<f64>, p: &mut Mat7) -> UnitQuat {
    if q[0] < 0.0 {
        for i in 0..4 {
            for j in 4..7 {
                p[(i, j)] = -p[(i, j)];
                p[(j, i)] = -p[(j, i)];
            }
        }
    }
    UnitQuat::from_vec4(q)
}

/// Gravity in the body frame, `R_n^b · [0, 0, −g]ᵀ`.
pub fn predict_accel(state: &GyroState, g: f64) -> Vec3 {
    quat_to_rotmat(&state.q) * Vec3::new(0.0, 0.0, -g)
}

/// `∂ predict_accel / ∂ [q, b_g]`.
pub fn accel_measurement_jacobian(state: &GyroState, g: f64) -> Mat3x7 {
    let UnitQuat { q0, q1, q2, q3 } = state.q;
    let t = 2.0 * g;
    let mut hg = Mat3x7::zeros();
    let block = SMatrix::<f64, 3, 4>::new(
        t * q2, -t * q3, t * q0, -t * q1, //
        -t * q1, -t * q0, -t * q3, -t * q2, //
        -t * q0, t * q1, t * q2, -t * q3,
    );
    hg.fixed_view_mut::<3, 4>(0, 0).copy_from(&block);
    hg
}

/// EKF correction with a gravity-convention accelerometer sample. Returns the posterior
/// and whether the sample passed the magnitude gate.
pub fn gyro_update(
    state: &GyroState,
    cov: &GyroCovariance,
    a_m: &Vec3,
    noise: &GyroNoiseParams,
) -> (GyroState, GyroCovariance, bool) {
    if !a_m.iter().all(|v| v.is_finite()) {
        return (*state, *cov, false);
    }
    if ((a_m.norm() - noise.g) / noise.g).abs() > noise.accel_gate {
        return (*state, *cov, false);
    }
    let r = a_m - predict_accel(state, noise.g);
    let hg = accel_measurement_jacobian(state, noise.g);
    let meas = Matrix3::identity() * noise.sigma_a * noise.sigma_a;
    let s = hg * cov.0 * hg.transpose() + meas;
    let Some(s_inv) = s.try_inverse() else {
        return (*state, *cov, false);
    };
    let k = cov.0 * hg.transpose() * s_inv;
    let x = state.as_vector() + k * r;
    let ikh = Mat7::identity() - k * hg;
    let mut p = ikh * cov.0 * ikh.transpose() + k * meas * k.transpose();
    let q = canonical(&Vector4::new(x[0], x[1], x[2], x[3]), &mut p);
    let b_g = Vec3::new(x[4], x[5], x[6]);
    (GyroState { q, b_g }, GyroCovariance(p).symmetrized(), true)
}

/// Maps the quaternion covariance block to a covariance of the local attitude error
/// `δθ` (body frame), linearized at `state.q`.
pub fn attitude_covariance(state: &GyroState, cov: &GyroCovariance) -> Mat3 {
    let xi = attitude_error_map(&state.q);
    let pqq = cov.0.fixed_view::<4, 4>(0, 0).into_owned();
    xi * pqq * xi.transpose()
}

/// Variance (rad²) of the rotation about the global gravity axis.
pub fn yaw_variance(state: &GyroState, cov: &GyroCovariance) -> f64 {
    let c = quat_to_rotmat(&state.q);
    // δθ is a body-frame rotation; the global-frame rotation is Cᵀ δθ
    let ez = c * Vec3::z();
    (ez.transpose() * attitude_covariance(state, cov) * ez)[(0, 0)]
}

/// Linear map `δq ↦ δθ` at `q`: `δθ = 2 vec(q_true ⊗ q⁻¹)`.
fn attitude_error_map(q: &UnitQuat) -> SMatrix<f64, 3, 4> {
    // Hamilton left multiplication by q⁻¹ = (q0, −q1, −q2, −q3)
    let UnitQuat { q0, q1, q2, q3 } = *q;
    SMatrix::<f64, 3, 4>::new(
        -q1, q0, q3, -q2, //
        -q2, -q3, q0, q1, //
        -q3, q2, -q1, q0,
    ) * 2.0
}

/// Stateful wrapper used by the pipeline.
#[derive(Clone, Debug)]
pub struct GyroEkf {
    pub state: GyroState,
    pub cov: GyroCovariance,
    pub noise: GyroNoiseParams,
    pub gated: u64,
}

impl GyroEkf {
    pub fn new(state: GyroState, cov: GyroCovariance, noise: GyroNoiseParams) -> Self {
        Self {
            state,
            cov,
            noise,
            gated: 0,
        }
    }

    pub fn propagate(&mut self, w_m: &Vec3, h: f64) -> Result<(), FilterError> {
        let (s, p) = gyro_propagate(&self.state, &self.cov, w_m, h, &self.noise)?;
        self.state = s;
        self.cov = p;
        Ok(())
    }

    /// Gravity-convention accelerometer update; returns whether it was accepted.
    pub fn update(&mut self, a_gravity: &Vec3) -> bool {
        let (s, p, ok) = gyro_update(&self.state, &self.cov, a_gravity, &self.noise);
        self.state = s;
        self.cov = p;
        if !ok {
            self.gated += 1;
        }
        ok
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_state(rng: &mut ChaCha8Rng) -> GyroState {
        let v: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        GyroState {
            q: UnitQuat::new_normalize(v[0] + 1.5, v[1], v[2], v[3]),
            b_g: Vec3::from_fn(|_, _| rng.gen_range(-0.05..0.05)),
        }
    }

    fn unnormalized_step(x: &SMatrix<f64, 7, 1>, w_m: &Vec3, h: f64) -> SMatrix<f64, 7, 1> {
        let q = Vector4::new(x[0], x[1], x[2], x[3]);
        let b = Vec3::new(x[4], x[5], x[6]);
        let w_hat = w_m - b;
        let qn = (Matrix4::identity() + 0.5 * h * quat_rate_matrix(&w_hat)) * q;
        let mut out = *x;
        out.fixed_rows_mut::<4>(0).copy_from(&qn);
        out
    }

    fn gravity_of(x: &SMatrix<f64, 7, 1>, g: f64) -> Vec3 {
        // evaluated from the raw components (no renormalization) so the derivative is of the
        // printed quadratic expansion
        let (q0, q1, q2, q3) = (x[0], x[1], x[2], x[3]);
        -g * Vec3::new(
            2.0 * q1 * q3 - 2.0 * q0 * q2,
            2.0 * q0 * q1 + 2.0 * q2 * q3,
            q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3,
        )
    }

    fn rel_err<const R: usize, const C: usize>(a: &SMatrix<f64, R, C>, b: &SMatrix<f64, R, C>) -> f64 {
        (a - b).norm() / b.norm().max(1e-12)
    }

    #[test]
    fn zero_rate_leaves_state_unchanged() {
        let s = GyroState {
            q: UnitQuat::new_normalize(0.9, 0.1, -0.2, 0.3),
            b_g: Vec3::new(0.01, -0.02, 0.03),
        };
        let p = GyroCovariance::diagonal(0.01, 0.01);
        let (s2, _) = gyro_propagate(&s, &p, &s.b_g, 0.37, &GyroNoiseParams::default()).unwrap();
        assert_relative_eq!(s2.q.as_vec4(), s.q.as_vec4(), epsilon = 1e-15);
        assert_eq!(s2.b_g, s.b_g);
    }

    #[test]
    fn quarter_turn_rate_over_one_second() {
        let s = GyroState::default();
        let p = GyroCovariance::diagonal(0.0, 0.0);
        let w = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let (s2, _) = gyro_propagate(&s, &p, &w, 1.0, &GyroNoiseParams::default()).unwrap();
        // unnormalized (1, 0, 0, π/4)
        let n = (1.0 + std::f64::consts::FRAC_PI_4.powi(2)).sqrt();
        assert_relative_eq!(s2.q.q0, 1.0 / n, epsilon = 1e-12);
        assert_relative_eq!(s2.q.q3, std::f64::consts::FRAC_PI_4 / n, epsilon = 1e-12);
        assert_relative_eq!(s2.q.q0, 0.7864, epsilon = 1e-4);
        assert_relative_eq!(s2.q.q3, 0.6176, epsilon = 1e-4);
    }

    #[test]
    fn first_order_step_converges_to_exponential() {
        // oracle: exact rotation by ω·t about z, approached by subdividing the step
        let w = Vec3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = GyroCovariance::diagonal(0.0, 0.0);
        let noise = GyroNoiseParams::default();
        let exact = UnitQuat::from_axis_angle(&Vec3::z(), std::f64::consts::FRAC_PI_2 * 0.1);
        let mut last_err = f64::INFINITY;
        for n in [10, 100, 1000] {
            let mut s = GyroState::default();
            for _ in 0..n {
                s = gyro_propagate(&s, &p, &w, 0.1 / n as f64, &noise).unwrap().0;
            }
            let err = s.q.angle_to(&exact);
            assert!(err < last_err);
            last_err = err;
        }
        assert!(last_err < 1e-5);
    }

    #[test]
    fn trace_grows_under_pure_noise() {
        let s = GyroState::default();
        let p = GyroCovariance::diagonal(1e-3, 1e-3);
        let (_, p2) = gyro_propagate(&s, &p, &Vec3::zeros(), 0.005, &GyroNoiseParams::default()).unwrap();
        assert!(p2.trace() > p.trace());
    }

    #[test]
    fn propagate_rejects_bad_inputs() {
        let s = GyroState::default();
        let p = GyroCovariance::diagonal(1e-3, 1e-3);
        let n = GyroNoiseParams::default();
        assert_eq!(
            gyro_propagate(&s, &p, &Vec3::zeros(), 0.0, &n).unwrap_err(),
            FilterError::NonPositiveStep(0.0)
        );
        assert!(gyro_propagate(&s, &p, &Vec3::new(f64::NAN, 0.0, 0.0), 0.01, &n).is_err());
    }

    #[test]
    fn process_jacobian_at_zero_rate() {
        let s = GyroState {
            q: UnitQuat::new_normalize(0.7, 0.2, -0.4, 0.1),
            b_g: Vec3::zeros(),
        };
        let h = 0.01;
        let hp = gyro_process_jacobian(&s, &Vec3::zeros(), h);
        assert_eq!(hp.fixed_view::<4, 4>(0, 0).into_owned(), Matrix4::identity());
        let UnitQuat { q0, q1, .. } = s.q;
        let t = 0.5 * h;
        // rows 1, 2 and 4 as printed; row 3 middle entry is -q0 (see fd test below)
        assert_relative_eq!(hp[(0, 4)], t * q1);
        assert_relative_eq!(hp[(1, 4)], -t * q0);
        assert_relative_eq!(hp[(2, 6)], t * q1);
        assert_relative_eq!(hp[(3, 5)], -t * q1);
        assert_relative_eq!(hp[(3, 6)], -t * q0);
        assert_eq!(hp.fixed_view::<3, 3>(4, 4).into_owned(), Matrix3::identity());
        assert_eq!(hp.fixed_view::<3, 4>(4, 0).into_owned(), SMatrix::<f64, 3, 4>::zeros());
    }

    #[test]
    fn process_jacobian_matches_central_differences() {
        // The printed appendix has -0.5 q2 t in row 3, column 2 of H_p2; differentiating
        // the propagation map gives -0.5 q0 t there. The numerical Jacobian decides.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let w_m = Vec3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
            let h = rng.gen_range(0.001..0.05);
            let x = s.as_vector();
            let eps = 1e-6;
            let mut num = Mat7::zeros();
            for j in 0..7 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += eps;
                xm[j] -= eps;
                let d = (unnormalized_step(&xp, &w_m, h) - unnormalized_step(&xm, &w_m, h)) / (2.0 * eps);
                num.set_column(j, &d);
            }
            let hp = gyro_process_jacobian(&s, &(w_m - s.b_g), h);
            assert!(rel_err(&hp, &num) < 1e-5);
        }
    }

    #[test]
    fn predict_accel_examples() {
        let g = 9.81;
        let level = GyroState::default();
        assert_eq!(predict_accel(&level, g), Vec3::new(0.0, 0.0, -g));
        let flipped = GyroState {
            q: UnitQuat::new_normalize(0.0, 1.0, 0.0, 0.0),
            b_g: Vec3::zeros(),
        };
        assert_relative_eq!(predict_accel(&flipped, g), Vec3::new(0.0, 0.0, g), epsilon = 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let s = random_state(&mut rng);
            assert!((predict_accel(&s, g).norm() - g).abs() < 1e-10);
        }
    }

    #[test]
    fn measurement_jacobian_at_identity() {
        let hg = accel_measurement_jacobian(&GyroState::default(), 9.81);
        let expect = Mat3x7::from_row_slice(&[
            0.0, 0.0, 19.62, 0.0, 0.0, 0.0, 0.0, //
            0.0, -19.62, 0.0, 0.0, 0.0, 0.0, 0.0, //
            -19.62, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ]);
        assert_relative_eq!(hg, expect, epsilon = 1e-12);
    }

    #[test]
    fn measurement_jacobian_matches_central_differences() {
        // The printed appendix gives +2g q3 in the last quaternion column of row 3;
        // differentiating -g (q0² - q1² - q2² + q3²) yields -2g q3. The numerical Jacobian
        // decides.
        let g = 9.81;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let x = s.as_vector();
            let eps = 1e-6;
            let mut num = Mat3x7::zeros();
            for j in 0..7 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += eps;
                xm[j] -= eps;
                num.set_column(j, &((gravity_of(&xp, g) - gravity_of(&xm, g)) / (2.0 * eps)));
            }
            let hg = accel_measurement_jacobian(&s, g);
            assert!(rel_err(&hg, &num) < 1e-5);
            assert_eq!(hg.fixed_view::<3, 3>(0, 4).into_owned(), Matrix3::zeros());
        }
    }

    #[test]
    fn update_with_exact_measurement_keeps_mean() {
        let s = GyroState {
            q: UnitQuat::new_normalize(0.95, 0.1, 0.2, -0.1),
            b_g: Vec3::new(0.01, 0.0, -0.01),
        };
        let p = GyroCovariance::diagonal(0.01, 0.01);
        let n = GyroNoiseParams::default();
        let z = predict_accel(&s, n.g);
        let (s2, p2, ok) = gyro_update(&s, &p, &z, &n);
        assert!(ok);
        assert_relative_eq!(s2.q.as_vec4(), s.q.as_vec4(), epsilon = 1e-12);
        assert_relative_eq!(s2.b_g, s.b_g, epsilon = 1e-12);
        assert!(p2.trace() < p.trace());
    }

    #[test]
    fn update_gate_rejects_large_magnitude() {
        let s = GyroState::default();
        let p = GyroCovariance::diagonal(0.01, 0.01);
        let n = GyroNoiseParams::default();
        let (s2, p2, ok) = gyro_update(&s, &p, &Vec3::new(0.0, 0.0, -2.0 * n.g), &n);
        assert!(!ok);
        assert_eq!(s2, s);
        assert_eq!(p2, p);
        let (_, _, ok) = gyro_update(&s, &p, &Vec3::new(f64::INFINITY, 0.0, 0.0), &n);
        assert!(!ok);
    }

    #[test]
    fn noise_free_fixed_point() {
        let n = GyroNoiseParams::default();
        let truth = GyroState {
            q: UnitQuat::from_euler_zyx(0.2, -0.1, 1.0),
            b_g: Vec3::zeros(),
        };
        let mut ekf = GyroEkf::new(truth, GyroCovariance::diagonal(1e-3, 1e-3), n);
        for _ in 0..1000 {
            ekf.propagate(&Vec3::zeros(), 0.005).unwrap();
            assert!(ekf.update(&predict_accel(&truth, n.g)));
        }
        assert!((ekf.state.q.as_vec4() - truth.q.as_vec4()).norm() < 1e-12);
        assert!(ekf.state.b_g.norm() < 1e-12);
    }

    #[test]
    fn yaw_variance_unchanged_by_gravity_update() {
        let n = GyroNoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let s = random_state(&mut rng);
            let p = GyroCovariance::diagonal(0.02, 0.01);
            let z = predict_accel(&s, n.g) + Vec3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            let before = yaw_variance(&s, &p);
            let (_, p2, ok) = gyro_update(&s, &p, &z, &n);
            assert!(ok);
            // same linearization point on both sides
            let after = yaw_variance(&s, &p2);
            assert!(after >= before * (1.0 - 1e-9), "{before} -> {after}");
        }
    }

    #[test]
    fn covariance_stays_healthy_over_long_random_run() {
        let n = GyroNoiseParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ekf = GyroEkf::new(GyroState::default(), GyroCovariance::diagonal(0.05, 0.01), n);
        let noise = Normal::new(0.0, 0.3).unwrap();
        for i in 0..100_000 {
            let w = Vec3::from_fn(|_, _| noise.sample(&mut rng));
            ekf.propagate(&w, 0.005).unwrap();
            let z = predict_accel(&ekf.state, n.g) + Vec3::from_fn(|_, _| 0.05 * noise.sample(&mut rng));
            ekf.update(&z);
            if i % 997 == 0 {
                let p = crate::math::Mat::from_iterator(7, 7, ekf.cov.0.iter().cloned());
                assert!(crate::math::covariance_is_healthy(&p), "step {i}");
            }
            assert!((ekf.state.q.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_static_monte_carlo_converges() {
        // truth tilted 5° about x; accelerometer noise 0.05 m/s²; filter starts level
        let n = GyroNoiseParams::default();
        let truth = UnitQuat::from_euler_zyx(5f64.to_radians(), 0.0, 0.0);
        let gravity = predict_accel(&GyroState { q: truth, b_g: Vec3::zeros() }, n.g);
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let noise = Normal::new(0.0, n.sigma_a).unwrap();
            let mut ekf = GyroEkf::new(GyroState::default(), GyroCovariance::diagonal(0.05, 0.01), n);
            for _ in 0..500 {
                ekf.propagate(&Vec3::zeros(), 0.005).unwrap();
                let z = gravity + Vec3::from_fn(|_, _| noise.sample(&mut rng));
                ekf.update(&z);
            }
            let (r, p, _) = ekf.state.q.euler_zyx();
            let (rt, pt, _) = truth.euler_zyx();
            assert!((r - rt).abs().to_degrees() < 0.5, "roll err {}", (r - rt).to_degrees());
            assert!((p - pt).abs().to_degrees() < 0.5);
        }
    }

    #[test]
    fn attitude_covariance_matches_sampling() {
        let s = GyroState {
            q: UnitQuat::from_euler_zyx(0.3, 0.2, -1.0),
            b_g: Vec3::zeros(),
        };
        let sig = 1e-3;
        let p = GyroCovariance::diagonal(sig, 0.0);
        let analytic = attitude_covariance(&s, &p);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let nrm = Normal::new(0.0, sig).unwrap();
        let mut acc = Mat3::zeros();
        let count = 20_000;
        for _ in 0..count {
            let dq = Vector4::from_fn(|_, _| nrm.sample(&mut rng));
            let qt = UnitQuat::from_vec4(&(s.q.as_vec4() + dq));
            let d = crate::math::attitude_error(&qt, &s.q);
            acc += d * d.transpose();
        }
        acc /= count as f64;
        // the radial component of δq is projected away by normalization
        assert!((acc - analytic).norm() / analytic.norm() < 0.05);
    }

    #[test]
    fn error_state_covariance_round_trips() {
        let q = UnitQuat::from_euler_zyx(-0.4, 0.1, 2.0);
        let a = SMatrix::<f64, 6, 6>::from_fn(|i, j| ((i * 7 + j * 3) % 5) as f64 * 1e-3);
        let p6 = a * a.transpose() + SMatrix::<f64, 6, 6>::identity() * 1e-6;
        let p = GyroCovariance::from_error_state(&q, &p6);
        let s = GyroState { q, b_g: Vec3::zeros() };
        let back = attitude_covariance(&s, &p);
        assert!((back - p6.fixed_view::<3, 3>(0, 0)).amax() < 1e-12);
        assert!((p.0.fixed_view::<3, 3>(4, 4) - p6.fixed_view::<3, 3>(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn sign_flip_keeps_attitude_bias_correlation() {
        // q0 just above zero; one step of yaw rate carries it below
        let s = GyroState {
            q: UnitQuat::new_normalize(0.002, 0.0, 0.0, 1.0),
            b_g: Vec3::zeros(),
        };
        let mut p = GyroCovariance::diagonal(1e-3, 1e-2);
        p.0[(3, 6)] = 5e-6;
        p.0[(6, 3)] = 5e-6;
        let w = Vec3::new(0.0, 0.0, 1.0);
        let h = 0.01;
        let (s2, p2) = gyro_propagate(&s, &p, &w, h, &GyroNoiseParams::default()).unwrap();
        let hp = gyro_process_jacobian(&s, &w, h);
        let raw_p = hp * p.0 * hp.transpose();
        let raw_q = (Matrix4::identity() + 0.5 * h * quat_rate_matrix(&w)) * s.q.as_vec4();
        assert!(raw_q[0] < 0.0);
        let unflipped = UnitQuat {
            q0: raw_q[0] / raw_q.norm(),
            q1: raw_q[1] / raw_q.norm(),
            q2: raw_q[2] / raw_q.norm(),
            q3: raw_q[3] / raw_q.norm(),
        };
        let cross = |q: &UnitQuat, p: &Mat7| attitude_error_map(q) * p.fixed_view::<4, 3>(0, 4);
        assert!(s2.q.q0 >= 0.0);
        assert!((cross(&s2.q, &p2.0) - cross(&unflipped, &raw_p)).amax() < 1e-12);
    }
}
