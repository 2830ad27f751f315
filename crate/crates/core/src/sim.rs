//! Synthetic trajectories, landmark maps and noisy IMU / stereo-track measurements.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FilterError, IoError};
use crate::io::{self, Calibration, DatasetManifest, GroundTruthSample};
use crate::math::{UnitQuat, Vec3};
use crate::msckf::{
    classify_keyframe, CameraPose, FrameStats, ImuNoiseParams, KeyframePolicy, StereoExtrinsics, StereoObservation,
};
use crate::pipeline::{ImuSample, StereoFrame};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Static,
    Circle,
    #[default]
    FigureEight,
    Sinusoid3d,
}

/// Sinusoidal attitude oscillation added on top of the path-following heading.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Wobble {
    pub roll_amp: f64,
    pub roll_hz: f64,
    pub pitch_amp: f64,
    pub pitch_hz: f64,
    pub yaw_amp: f64,
    pub yaw_hz: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryConfig {
    pub kind: TrajectoryKind,
    /// Circle radius, or the x half-width of the figure-eight (m).
    pub radius: f64,
    /// Time for one lap once moving (s).
    pub period: f64,
    /// Mean height (m).
    pub height: f64,
    /// Height oscillation of `sinusoid_3d` (m).
    pub vertical_amplitude: f64,
    /// Stationary time before motion starts (s).
    pub hover: f64,
    /// Duration of the smooth speed-up after hovering (s).
    pub ramp: f64,
    pub wobble: Wobble,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        Self {
            kind: TrajectoryKind::FigureEight,
            radius: 5.0,
            period: 22.0,
            height: 1.5,
            vertical_amplitude: 0.5,
            hover: 0.0,
            ramp: 2.0,
            wobble: Wobble::default(),
        }
    }
}

/// Exact kinematics at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryPoint {
    pub p: Vec3,
    pub v: Vec3,
    /// Global acceleration.
    pub a: Vec3,
    pub q: UnitQuat,
    /// Body-frame angular rate.
    pub w: Vec3,
}

impl TrajectoryConfig {
    /// Motion phase `τ(t)` and its first two time derivatives.
    fn warp(&self, t: f64) -> (f64, f64, f64) {
        if self.hover <= 0.0 {
            return (t, 1.0, 0.0);
        }
        if t <= self.hover {
            return (0.0, 0.0, 0.0);
        }
        let r = self.ramp.max(1e-9);
        let x = (t - self.hover) / r;
        if x >= 1.0 {
            return (0.5 * r + (t - self.hover - r), 1.0, 0.0);
        }
        let x2 = x * x;
        (r * (x2 * x - 0.5 * x2 * x2), 3.0 * x2 - 2.0 * x2 * x, (6.0 * x - 6.0 * x2) / r)
    }

    /// Path position and its first two derivatives with respect to the phase.
    fn path(&self, tau: f64) -> (Vec3, Vec3, Vec3) {
        let w = 2.0 * PI / self.period;
        let (a, h) = (self.radius, self.height);
        let (s1, c1) = (w * tau).sin_cos();
        let (s2, c2) = (2.0 * w * tau).sin_cos();
        match self.kind {
            TrajectoryKind::Static => (Vec3::new(0.0, 0.0, h), Vec3::zeros(), Vec3::zeros()),
            TrajectoryKind::Circle => (
                Vec3::new(a * c1, a * s1, h),
                Vec3::new(-a * w * s1, a * w * c1, 0.0),
                Vec3::new(-a * w * w * c1, -a * w * w * s1, 0.0),
            ),
            TrajectoryKind::FigureEight => (
                Vec3::new(a * s1, 0.5 * a * s2, h),
                Vec3::new(a * w * c1, a * w * c2, 0.0),
                Vec3::new(-a * w * w * s1, -2.0 * a * w * w * s2, 0.0),
            ),
            TrajectoryKind::Sinusoid3d => {
                let z = self.vertical_amplitude;
                (
                    Vec3::new(a * c1, a * s1, h + z * s2),
                    Vec3::new(-a * w * s1, a * w * c1, 2.0 * z * w * c2),
                    Vec3::new(-a * w * w * c1, -a * w * w * s1, -4.0 * z * w * w * s2),
                )
            }
        }
    }

    pub fn at(&self, t: f64) -> TrajectoryPoint {
        let (tau, dtau, ddtau) = self.warp(t);
        let (p, dp, ddp) = self.path(tau);
        let v = dp * dtau;
        let a = ddp * dtau * dtau + dp * ddtau;
        let (heading, heading_rate) = if self.kind == TrajectoryKind::Static {
            (0.0, 0.0)
        } else {
            let n2 = dp.x * dp.x + dp.y * dp.y;
            (dp.y.atan2(dp.x), (dp.x * ddp.y - dp.y * ddp.x) / n2 * dtau)
        };
        let wb = &self.wobble;
        let osc = |amp: f64, hz: f64, phase: f64| {
            let k = 2.0 * PI * hz;
            let (s, c) = (k * t + phase).sin_cos();
            (amp * s, amp * k * c)
        };
        let (roll, droll) = osc(wb.roll_amp, wb.roll_hz, 0.0);
        let (pitch, dpitch) = osc(wb.pitch_amp, wb.pitch_hz, 0.5);
        let (yaw_w, dyaw_w) = osc(wb.yaw_amp, wb.yaw_hz, 1.0);
        let (yaw, dyaw) = (heading + yaw_w, heading_rate + dyaw_w);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let w = Vec3::new(
            droll - dyaw * sp,
            dpitch * cr + dyaw * sr * cp,
            -dpitch * sr + dyaw * cr * cp,
        );
        TrajectoryPoint {
            p,
            v,
            a,
            q: UnitQuat::from_euler_zyx(roll, pitch, yaw),
            w,
        }
    }
}

/// Landmarks scattered in a vertical cylindrical shell around the origin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkConfig {
    pub count: usize,
    pub inner_radius: f64,
    pub outer_radius: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            count: 1500,
            inner_radius: 9.0,
            outer_radius: 12.0,
            z_min: -1.0,
            z_max: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    pub imu_hz: f64,
    pub cam_hz: f64,
    pub trajectory: TrajectoryConfig,
    /// Noise densities; zero values are allowed here and disable that noise source.
    pub noise: ImuNoiseParams,
    pub initial_gyro_bias: Vec3,
    pub initial_accel_bias: Vec3,
    /// Observation noise in normalized image coordinates.
    pub pixel_sigma: f64,
    /// Nominal focal length (px), used for parallax statistics.
    pub focal: f64,
    /// Full field of view of each camera, horizontal and vertical (deg).
    pub fov_deg: f64,
    pub max_tracked: usize,
    pub min_depth: f64,
    pub max_depth: f64,
    pub landmarks: LandmarkConfig,
    pub extrinsics: StereoExtrinsics,
    pub keyframe: KeyframePolicy,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 60.0,
            imu_hz: 200.0,
            cam_hz: 20.0,
            trajectory: TrajectoryConfig::default(),
            noise: ImuNoiseParams::default(),
            initial_gyro_bias: Vec3::zeros(),
            initial_accel_bias: Vec3::zeros(),
            pixel_sigma: 1.5 / 460.0,
            focal: 460.0,
            fov_deg: 90.0,
            max_tracked: 150,
            min_depth: 0.3,
            max_depth: 40.0,
            landmarks: LandmarkConfig::default(),
            extrinsics: StereoExtrinsics::default(),
            keyframe: KeyframePolicy::default(),
        }
    }
}

impl SimConfig {
    /// Same scenario with every noise source switched off.
    pub fn noise_free(mut self) -> Self {
        self.noise.sigma_g = 0.0;
        self.noise.sigma_wg = 0.0;
        self.noise.sigma_a = 0.0;
        self.noise.sigma_wa = 0.0;
        self.pixel_sigma = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        let bad = |field: &str, why: &str| Err(FilterError::Config(format!("{field}: {why}")));
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return bad("duration", "must be positive");
        }
        if !(self.cam_hz > 0.0 && self.cam_hz.is_finite()) {
            return bad("cam_hz", "must be positive");
        }
        if !(self.imu_hz >= self.cam_hz && self.imu_hz.is_finite()) {
            return bad("cam_hz", "must not exceed imu_hz");
        }
        let n = &self.noise;
        if ![n.sigma_g, n.sigma_wg, n.sigma_a, n.sigma_wa, self.pixel_sigma]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
        {
            return bad("noise", "densities must be non-negative");
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad("fov_deg", "must be in (0, 180)");
        }
        if self.max_tracked == 0 {
            return bad("max_tracked", "must be positive");
        }
        if !(self.min_depth > 0.0 && self.max_depth > self.min_depth) {
            return bad("max_depth", "must exceed min_depth > 0");
        }
        let l = &self.landmarks;
        if !(l.inner_radius >= 0.0 && l.outer_radius > l.inner_radius && l.z_max > l.z_min) {
            return bad("landmarks", "shell bounds are inconsistent");
        }
        let t = &self.trajectory;
        if t.kind != TrajectoryKind::Static && !(t.period > 0.0 && t.radius > 0.0) {
            return bad("trajectory", "period and radius must be positive");
        }
        if !(t.hover >= 0.0 && t.ramp > 0.0) {
            return bad("trajectory", "hover must be non-negative and ramp positive");
        }
        self.extrinsics.validate()
    }

    pub fn imu_count(&self) -> usize {
        (self.duration * self.imu_hz).round() as usize
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.cam_hz).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: u64,
    pub p: Vec3,
}

pub fn generate_landmarks(cfg: &LandmarkConfig, rng: &mut impl Rng) -> Vec<Landmark> {
    (0..cfg.count)
        .map(|i| {
            let theta = rng.gen_range(0.0..2.0 * PI);
            let r2 = rng.gen_range(cfg.inner_radius.powi(2)..cfg.outer_radius.powi(2));
            let r = r2.sqrt();
            let z = rng.gen_range(cfg.z_min..cfg.z_max);
            Landmark {
                id: i as u64,
                p: Vec3::new(r * theta.cos(), r * theta.sin(), z),
            }
        })
        .collect()
}

/// Noise-free stereo projection with field-of-view and depth culling.
pub fn project_landmark(pose: &CameraPose, ext: &StereoExtrinsics, p: &Vec3, cfg: &SimConfig) -> Option<StereoObservation> {
    let half = (0.5 * cfg.fov_deg).to_radians().tan();
    let p_l = pose.q.rotmat() * (p - pose.p);
    let p_r = ext.q_rl.rotmat() * (p_l - ext.p_lr);
    for c in [p_l, p_r] {
        if !(c.z >= cfg.min_depth && c.z <= cfg.max_depth) {
            return None;
        }
        if (c.x / c.z).abs() > half || (c.y / c.z).abs() > half {
            return None;
        }
    }
    Some(StereoObservation {
        u1: p_l.x / p_l.z,
        v1: p_l.y / p_l.z,
        u2: p_r.x / p_r.z,
        v2: p_r.y / p_r.z,
    })
}

/// Random-walk biases plus white-noise generators for one IMU.
pub struct ImuNoiseState {
    pub b_g: Vec3,
    pub b_a: Vec3,
    rate: f64,
    noise: ImuNoiseParams,
}

impl ImuNoiseState {
    pub fn new(noise: ImuNoiseParams, b_g: Vec3, b_a: Vec3, rate: f64) -> Self {
        Self { b_g, b_a, rate, noise }
    }

    fn gauss(rng: &mut impl Rng, sigma: f64) -> Vec3 {
        if sigma == 0.0 {
            return Vec3::zeros();
        }
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng))
    }

    /// Measurement at `t` with the current biases, then one bias random-walk step.
    pub fn sample(&mut self, traj: &TrajectoryConfig, t: f64, rng: &mut impl Rng) -> ImuSample {
        let k = traj.at(t);
        let c = k.q.rotmat();
        let sq = self.rate.sqrt();
        let w_m = k.w + self.b_g + Self::gauss(rng, self.noise.sigma_g * sq);
        let a_m = c * (k.a - self.noise.g_vec) + self.b_a + Self::gauss(rng, self.noise.sigma_a * sq);
        self.b_g += Self::gauss(rng, self.noise.sigma_wg / sq);
        self.b_a += Self::gauss(rng, self.noise.sigma_wa / sq);
        ImuSample { t, w_m, a_m }
    }
}

/// Oracle feature tracker: a landmark keeps its feature id while continuously tracked.
#[derive(Clone, Debug, Default)]
pub struct Tracker {
    active: BTreeMap<u64, u64>,
    next_id: u64,
    keyframe_ref: BTreeMap<u64, (f64, f64)>,
}

impl Tracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample_stereo(
        &mut self,
        cfg: &SimConfig,
        landmarks: &[Landmark],
        t: f64,
        rng: &mut impl Rng,
    ) -> StereoFrame {
        let k = cfg.trajectory.at(t);
        let ext = &cfg.extrinsics;
        let (q, p) = ext.left_camera(&k.q, &k.p);
        let pose = CameraPose {
            state_id: 0,
            t,
            q,
            p,
            keyframe: false,
            stats: FrameStats::default(),
        };
        let visible: Vec<(u64, StereoObservation)> = landmarks
            .iter()
            .filter_map(|l| project_landmark(&pose, ext, &l.p, cfg).map(|o| (l.id, o)))
            .collect();
        let mut kept: Vec<(u64, u64, StereoObservation)> = Vec::new();
        for (lm, obs) in &visible {
            if kept.len() < cfg.max_tracked {
                if let Some(fid) = self.active.get(lm) {
                    kept.push((*lm, *fid, *obs));
                }
            }
        }
        let tracked = kept.len() as u32;
        for (lm, obs) in &visible {
            if kept.len() >= cfg.max_tracked {
                break;
            }
            if !self.active.contains_key(lm) {
                kept.push((*lm, self.next_id, *obs));
                self.next_id += 1;
            }
        }
        let noise = (cfg.pixel_sigma > 0.0).then(|| Normal::new(0.0, cfg.pixel_sigma).expect("finite sigma"));
        let mut features: Vec<(u64, StereoObservation)> = kept
            .iter()
            .map(|(_, fid, o)| {
                let mut o = *o;
                if let Some(n) = &noise {
                    o.u1 += n.sample(rng);
                    o.v1 += n.sample(rng);
                    o.u2 += n.sample(rng);
                    o.v2 += n.sample(rng);
                }
                (*fid, o)
            })
            .collect();
        features.sort_by_key(|(fid, _)| *fid);
        let shared: Vec<f64> = features
            .iter()
            .filter_map(|(fid, o)| {
                self.keyframe_ref
                    .get(fid)
                    .map(|(u, v)| ((o.u1 - u).powi(2) + (o.v1 - v).powi(2)).sqrt() * cfg.focal)
            })
            .collect();
        let stats = FrameStats {
            mean_parallax: if shared.is_empty() { 0.0 } else { shared.iter().sum::<f64>() / shared.len() as f64 },
            tracked_count: tracked,
        };
        if classify_keyframe(&stats, &cfg.keyframe) {
            self.keyframe_ref = features.iter().map(|(fid, o)| (*fid, (o.u1, o.v1))).collect();
        }
        self.active = kept.iter().map(|(lm, fid, _)| (*lm, *fid)).collect();
        StereoFrame { t, features, stats }
    }
}

/// Generated measurements and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<StereoFrame>,
    /// At every IMU timestamp.
    pub groundtruth: Vec<GroundTruthSample>,
    pub landmarks: Vec<Landmark>,
}

pub fn generate_scenario(cfg: &SimConfig) -> Result<Scenario, FilterError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let landmarks = generate_landmarks(&cfg.landmarks, &mut rng);
    let mut noise = ImuNoiseState::new(cfg.noise, cfg.initial_gyro_bias, cfg.initial_accel_bias, cfg.imu_hz);
    let mut imu = Vec::with_capacity(cfg.imu_count());
    let mut groundtruth = Vec::with_capacity(cfg.imu_count());
    for k in 0..cfg.imu_count() {
        let t = k as f64 / cfg.imu_hz;
        let truth = cfg.trajectory.at(t);
        groundtruth.push(GroundTruthSample {
            t,
            p: truth.p,
            q: truth.q,
            v: Some(truth.v),
            b_g: Some(noise.b_g),
            b_a: Some(noise.b_a),
        });
        imu.push(noise.sample(&cfg.trajectory, t, &mut rng));
    }
    let mut tracker = Tracker::new();
    let frames = (0..cfg.frame_count())
        .map(|k| tracker.sample_stereo(cfg, &landmarks, k as f64 / cfg.cam_hz, &mut rng))
        .collect();
    Ok(Scenario {
        imu,
        frames,
        groundtruth,
        landmarks,
    })
}

/// Writes `imu.csv`, `tracks.jsonl`, `groundtruth.csv`, `calibration.toml` and
/// `manifest.toml` into `dir`; returns the manifest path.
pub fn write_scenario(dir: &Path, cfg: &SimConfig, sc: &Scenario) -> Result<PathBuf, IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::io(dir, e))?;
    io::write_imu_csv(dir.join("imu.csv"), &sc.imu)?;
    io::write_tracks(dir.join("tracks.jsonl"), &sc.frames)?;
    io::write_groundtruth_csv(dir.join("groundtruth.csv"), &sc.groundtruth)?;
    let calibration = Calibration {
        extrinsics: cfg.extrinsics,
        imu_noise: cfg.noise,
        sigma_px: cfg.pixel_sigma,
        focal: cfg.focal,
    };
    io::write_calibration(dir.join("calibration.toml"), &calibration)?;
    let manifest = DatasetManifest {
        imu: "imu.csv".into(),
        tracks: "tracks.jsonl".into(),
        groundtruth: Some("groundtruth.csv".into()),
        calibration: "calibration.toml".into(),
        imu_hz: cfg.imu_hz,
        cam_hz: cfg.cam_hz,
        sim: Some(cfg.clone()),
    };
    let path = dir.join("manifest.toml");
    io::write_manifest(&path, &manifest)?;
    Ok(path)
}
