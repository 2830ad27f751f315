//! Scheduling of the two filters over IMU samples and stereo frames.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::FilterError;
use crate::gyro_ekf::{GyroCovariance, GyroEkf, GyroNoiseParams, GyroState};
use crate::math::{covariance_is_healthy, UnitQuat, Vec3};
use crate::msckf::{
    augment_state, classify_keyframe, idx, measurement_jacobians, msckf_update, nullspace_project,
    propagate_interval, remove_pose, removal_index, triangulate_feature, AttitudeSeed, EkfState,
    FeatureTrack, FrameStats, ImuInterval, ImuNoiseParams, ImuState, InitialSigmas, KeyframePolicy,
    StereoExtrinsics, StereoObservation, TriangulationConfig, TriangulationFailure,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImuSample {
    pub t: f64,
    pub w_m: Vec3,
    pub a_m: Vec3,
}

impl ImuSample {
    /// Linear interpolation between `self` and `next` at time `t`.
    pub fn lerp(&self, next: &ImuSample, t: f64) -> ImuSample {
        let s = if next.t > self.t { (t - self.t) / (next.t - self.t) } else { 0.0 };
        ImuSample {
            t,
            w_m: self.w_m + (next.w_m - self.w_m) * s,
            a_m: self.a_m + (next.a_m - self.a_m) * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StereoFrame {
    pub t: f64,
    pub features: Vec<(u64, StereoObservation)>,
    pub stats: FrameStats,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    #[default]
    OrientationSeed,
    Off,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Level the filter from the mean accelerometer over the first samples.
    #[default]
    Static,
    /// Start from the ground-truth state at the first IMU sample.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DsVioConfig {
    pub imu_noise: ImuNoiseParams,
    pub gyro_noise: GyroNoiseParams,
    pub extrinsics: StereoExtrinsics,
    pub window: usize,
    pub keyframe: KeyframePolicy,
    pub min_track_length: usize,
    pub coupling: Coupling,
    pub gating: bool,
    pub triangulation: TriangulationConfig,
    pub initial: InitialSigmas,
    pub init: InitMode,
    /// Length of the assumed-static prefix used by [`InitMode::Static`] (s).
    pub static_duration: f64,
    /// Largest mean gyro reading (rad/s) accepted as bias during that prefix.
    pub static_max_rate: f64,
    /// Largest accelerometer spread (RMS about the mean, m/s²) accepted during that prefix.
    pub static_max_accel_spread: f64,
}

impl Default for DsVioConfig {
    fn default() -> Self {
        Self {
            imu_noise: ImuNoiseParams::default(),
            // the accelerometer reads gravity plus body acceleration; 1 g of noise keeps the
            // gravity update from tilting the estimate while manoeuvring
            gyro_noise: GyroNoiseParams {
                sigma_a: 9.81,
                ..Default::default()
            },
            extrinsics: StereoExtrinsics::default(),
            window: 20,
            keyframe: KeyframePolicy::default(),
            min_track_length: 3,
            coupling: Coupling::OrientationSeed,
            gating: true,
            triangulation: TriangulationConfig::default(),
            initial: InitialSigmas::default(),
            init: InitMode::Static,
            static_duration: 0.5,
            static_max_rate: 0.1,
            static_max_accel_spread: 0.5,
        }
    }
}

impl DsVioConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        self.imu_noise.validate()?;
        self.gyro_noise.validate()?;
        self.extrinsics.validate()?;
        if !(self.static_duration > 0.0 && self.static_max_rate > 0.0 && self.static_max_accel_spread > 0.0) {
            return Err(FilterError::Config(
                "static_duration, static_max_rate and static_max_accel_spread must be positive".into(),
            ));
        }
        if self.window < 2 {
            return Err(FilterError::Config("window must hold at least 2 poses".into()));
        }
        if self.min_track_length < 2 {
            return Err(FilterError::Config("min_track_length must be at least 2".into()));
        }
        if ((self.imu_noise.g_vec.norm() - self.gyro_noise.g) / self.gyro_noise.g).abs() > 1e-6 {
            return Err(FilterError::Config("gravity magnitude differs between the two stages".into()));
        }
        let t = &self.triangulation;
        if !(t.sigma_px > 0.0 && t.min_depth > 0.0 && t.max_depth > t.min_depth && t.max_iterations > 0) {
            return Err(FilterError::Config("invalid triangulation settings".into()));
        }
        let s = &self.initial;
        if ![s.theta, s.b_g, s.v, s.b_a, s.p].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(FilterError::Config("initial sigmas must be positive".into()));
        }
        Ok(())
    }
}

/// Snapshot of the second-stage IMU state with one-sigma bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseEstimate {
    pub t: f64,
    pub q: UnitQuat,
    pub p: Vec3,
    pub v: Vec3,
    pub b_g: Vec3,
    pub b_a: Vec3,
    pub sigma_p: Vec3,
    pub sigma_v: Vec3,
    pub sigma_theta: Vec3,
}

/// Counters reported by a run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub imu_samples: u64,
    pub frames: u64,
    pub keyframes: u64,
    pub marginalized: u64,
    pub updates: u64,
    pub features_used: u64,
    pub gate_rejections: u64,
    pub short_tracks_dropped: u64,
    pub triangulation_failures: BTreeMap<String, u64>,
    pub rank_deficient: u64,
    /// Largest `‖Aᵀ H_f‖_∞` over all processed features.
    pub max_nullspace_residual: f64,
    /// Features projected onto the left nullspace, with their observation and row totals.
    pub projected_features: u64,
    pub projected_observations: u64,
    pub projected_rows: u64,
    /// Stage-one accelerometer samples rejected by the magnitude gate.
    pub stage1_gated: u64,
}

/// Outcome of one stereo frame, for callers that inspect the update schedule.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrameReport {
    pub state_id: u64,
    pub keyframe: bool,
    pub removed: Option<u64>,
    /// Feature ids handed to the measurement update (before gating).
    pub updated_features: Vec<u64>,
}

/// The dual-stage estimator.
#[derive(Clone, Debug)]
pub struct DsVio {
    config: DsVioConfig,
    stage1: GyroEkf,
    state: EkfState,
    last_imu: ImuSample,
    tracks: BTreeMap<u64, FeatureTrack>,
    stats: RunStats,
}

impl DsVio {
    /// Starts both stages from `imu` at the time of `first` (which is consumed as the
    /// reference sample for the next interval).
    pub fn new(config: DsVioConfig, imu: ImuState, first: ImuSample) -> Result<Self, FilterError> {
        config.validate()?;
        if !imu.is_finite() {
            return Err(FilterError::NonFinite("initial state"));
        }
        let cov = EkfState::diagonal_cov(&config.initial);
        let stage1 = GyroEkf::new(GyroState::default(), GyroCovariance::diagonal(0.0, 0.0), config.gyro_noise);
        let mut vio = Self {
            stage1,
            state: EkfState::new(first.t, imu, cov),
            last_imu: first,
            tracks: BTreeMap::new(),
            stats: RunStats::default(),
            config,
        };
        vio.hand_back();
        Ok(vio)
    }

    /// Restarts stage 1 from the second-stage attitude, gyro bias and their covariance, so
    /// the gravity updates between frames are weighed against what the visual updates know.
    fn hand_back(&mut self) {
        let p6 = self.state.cov.fixed_view::<6, 6>(0, 0).into_owned();
        self.stage1.state = GyroState {
            q: self.state.imu.q,
            b_g: self.state.imu.b_g,
        };
        self.stage1.cov = GyroCovariance::from_error_state(&self.state.imu.q, &p6);
    }

    /// Levels the filter from a static prefix: roll and pitch from the mean specific force,
    /// yaw zero, gyro bias from the mean rate. Returns the filter and the number of samples
    /// consumed.
    pub fn from_static(config: DsVioConfig, samples: &[ImuSample]) -> Result<(Self, usize), FilterError> {
        let first = samples.first().ok_or(FilterError::Uninitialized)?;
        let n = samples
            .iter()
            .take_while(|s| s.t - first.t <= config.static_duration + 1e-9)
            .count();
        let (w, a) = samples[..n]
            .iter()
            .fold((Vec3::zeros(), Vec3::zeros()), |(w, a), s| (w + s.w_m, a + s.a_m));
        let (w, a) = (w / n as f64, a / n as f64);
        if a.norm() < 1e-6 {
            return Err(FilterError::Config("static prefix has no gravity reading".into()));
        }
        // a moving start would be read as gyro bias and zero velocity, which no update recovers from
        let spread = (samples[..n].iter().map(|s| (s.a_m - a).norm_squared()).sum::<f64>() / n as f64).sqrt();
        if w.norm() > config.static_max_rate || spread > config.static_max_accel_spread {
            return Err(FilterError::NotStatic(format!(
                "mean rate {:.3} rad/s (limit {}), accel spread {:.3} m/s^2 (limit {}) over the first {} s",
                w.norm(),
                config.static_max_rate,
                spread,
                config.static_max_accel_spread,
                config.static_duration
            )));
        }
        let roll = a.y.atan2(a.z);
        let pitch = (-a.x).atan2((a.y * a.y + a.z * a.z).sqrt());
        let imu = ImuState {
            q: UnitQuat::from_euler_zyx(roll, pitch, 0.0),
            b_g: w,
            ..Default::default()
        };
        Ok((Self::new(config, imu, samples[n - 1])?, n))
    }

    pub fn config(&self) -> &DsVioConfig {
        &self.config
    }

    pub fn state(&self) -> &EkfState {
        &self.state
    }

    pub fn stage1(&self) -> &GyroEkf {
        &self.stage1
    }

    pub fn stats(&self) -> RunStats {
        let mut s = self.stats.clone();
        s.stage1_gated = self.stage1.gated;
        s
    }

    /// Number of open feature tracks.
    pub fn open_tracks(&self) -> usize {
        self.tracks.len()
    }

    pub fn last_imu(&self) -> &ImuSample {
        &self.last_imu
    }

    pub fn current_estimate(&self) -> PoseEstimate {
        let s = &self.state;
        let sig = |o: usize| Vec3::new(s.cov[(o, o)].sqrt(), s.cov[(o + 1, o + 1)].sqrt(), s.cov[(o + 2, o + 2)].sqrt());
        PoseEstimate {
            t: s.t,
            q: s.imu.q,
            p: s.imu.p,
            v: s.imu.v,
            b_g: s.imu.b_g,
            b_a: s.imu.b_a,
            sigma_p: sig(idx::P),
            sigma_v: sig(idx::V),
            sigma_theta: sig(idx::THETA),
        }
    }

    /// Stage-one propagation and gravity update, then stage-two propagation over the
    /// interval since the previous sample. On error nothing changes.
    pub fn process_imu(&mut self, sample: &ImuSample) -> Result<PoseEstimate, FilterError> {
        let prev = self.last_imu;
        if !(sample.t > prev.t) {
            return Err(FilterError::OutOfOrder { t: sample.t, last: prev.t });
        }
        if !sample.w_m.iter().chain(sample.a_m.iter()).all(|v| v.is_finite()) {
            return Err(FilterError::NonFinite("IMU sample"));
        }
        let h = sample.t - prev.t;
        let iv = ImuInterval {
            w_start: prev.w_m,
            w_end: sample.w_m,
            a_start: prev.a_m,
            a_end: sample.a_m,
        };
        let seed = match self.config.coupling {
            Coupling::OrientationSeed => {
                let mut s1 = self.stage1.clone();
                s1.propagate(&(0.5 * (prev.w_m + sample.w_m)), h)?;
                s1.update(&(-sample.a_m));
                Some(s1)
            }
            Coupling::Off => None,
        };
        let attitude = seed.as_ref().map(|s| AttitudeSeed {
            q: s.state.q,
            b_g: s.state.b_g,
        });
        propagate_interval(&mut self.state, &iv, h, &self.config.imu_noise, attitude.as_ref())?;
        if let Some(s1) = seed {
            self.stage1 = s1;
        }
        self.last_imu = *sample;
        self.stats.imu_samples += 1;
        Ok(self.current_estimate())
    }

    /// Augments with the frame's pose and runs the measurement updates it triggers.
    ///
    /// A frame later than the last IMU sample is reached by holding that sample constant;
    /// the replay driver interpolates instead, so this only matters for live use.
    pub fn process_stereo(&mut self, frame: &StereoFrame) -> Result<FrameReport, FilterError> {
        if frame.t < self.last_imu.t - 1e-9 {
            return Err(FilterError::OutOfOrder { t: frame.t, last: self.last_imu.t });
        }
        let mut seen = BTreeSet::new();
        for (id, obs) in &frame.features {
            if !seen.insert(*id) {
                return Err(FilterError::Config(format!("feature id {id} repeated in frame")));
            }
            if !obs.is_finite() {
                return Err(FilterError::NonFinite("stereo observation"));
            }
        }
        if frame.t > self.last_imu.t + 1e-9 {
            let hold = ImuSample { t: frame.t, ..self.last_imu };
            self.process_imu(&hold)?;
        }
        let mut report = FrameReport {
            keyframe: classify_keyframe(&frame.stats, &self.config.keyframe),
            ..Default::default()
        };
        if self.state.window.len() >= self.config.window {
            let i = removal_index(&self.state.window, self.config.keyframe.mode).ok_or(FilterError::EmptyWindow)?;
            let id = self.state.window[i].state_id;
            let consumed: Vec<u64> = self
                .tracks
                .iter()
                .filter(|(_, t)| t.obs.contains_key(&id) && t.obs.len() >= self.config.min_track_length)
                .map(|(f, _)| *f)
                .collect();
            let batch: Vec<FeatureTrack> = consumed.iter().filter_map(|f| self.tracks.remove(f)).collect();
            self.update(&batch, &mut report);
            for t in self.tracks.values_mut() {
                t.obs.remove(&id);
            }
            let before = self.tracks.len();
            self.tracks.retain(|_, t| !t.obs.is_empty());
            self.stats.short_tracks_dropped += (before - self.tracks.len()) as u64;
            let i = self.state.pose_index(id).ok_or(FilterError::EmptyWindow)?;
            remove_pose(&mut self.state, i);
            self.stats.marginalized += 1;
            report.removed = Some(id);
        }
        report.state_id = augment_state(
            &mut self.state,
            &self.config.extrinsics,
            self.config.window,
            report.keyframe,
            frame.stats,
        )?;
        for (fid, obs) in &frame.features {
            self.tracks
                .entry(*fid)
                .or_insert_with(|| FeatureTrack::new(*fid))
                .obs
                .insert(report.state_id, *obs);
        }
        let closed: Vec<u64> = self.tracks.keys().filter(|f| !seen.contains(f)).copied().collect();
        let mut batch = Vec::new();
        for f in closed {
            let t = self.tracks.remove(&f).expect("key listed above");
            if t.obs.len() >= self.config.min_track_length {
                batch.push(t);
            } else {
                self.stats.short_tracks_dropped += 1;
            }
        }
        self.update(&batch, &mut report);
        if self.config.coupling == Coupling::OrientationSeed {
            self.hand_back();
        }
        self.stats.frames += 1;
        if report.keyframe {
            self.stats.keyframes += 1;
        }
        Ok(report)
    }

    fn update(&mut self, batch: &[FeatureTrack], report: &mut FrameReport) {
        if batch.is_empty() {
            return;
        }
        let ext = self.config.extrinsics;
        let mut blocks = Vec::with_capacity(batch.len());
        for track in batch {
            report.updated_features.push(track.feature_id);
            let tri = match triangulate_feature(track, &self.state.window, &ext, &self.config.triangulation) {
                Ok(t) => t,
                Err(e) => {
                    *self.stats.triangulation_failures.entry(failure_name(e).into()).or_default() += 1;
                    continue;
                }
            };
            let Ok(fj) = measurement_jacobians(&self.state, track, &tri.p_f, &ext) else {
                *self.stats.triangulation_failures.entry("cheirality".into()).or_default() += 1;
                continue;
            };
            match nullspace_project(&fj.h_x, &fj.h_f, &fj.r) {
                Ok(np) => {
                    self.stats.max_nullspace_residual = self.stats.max_nullspace_residual.max(np.residual_norm);
                    self.stats.projected_features += 1;
                    self.stats.projected_observations += fj.state_ids.len() as u64;
                    self.stats.projected_rows += np.h_o.nrows() as u64;
                    blocks.push(np);
                }
                Err(_) => self.stats.rank_deficient += 1,
            }
        }
        let rep = msckf_update(&mut self.state, &blocks, self.config.triangulation.sigma_px, self.config.gating);
        self.stats.gate_rejections += rep.rejected as u64;
        self.stats.features_used += rep.accepted as u64;
        if rep.accepted > 0 {
            self.stats.updates += 1;
        }
    }

    /// `true` while the second-stage covariance is symmetric and positive semi-definite.
    pub fn covariance_healthy(&self) -> bool {
        covariance_is_healthy(&self.state.cov)
    }
}

pub fn failure_name(e: TriangulationFailure) -> &'static str {
    match e {
        TriangulationFailure::TooFewObservations => "too_few_observations",
        TriangulationFailure::Degenerate => "degenerate",
        TriangulationFailure::NotConverged => "not_converged",
        TriangulationFailure::DepthOutOfRange => "depth_out_of_range",
        TriangulationFailure::Cheirality => "cheirality",
        TriangulationFailure::LargeResidual => "large_residual",
    }
}

/// Replays time-ordered IMU samples and frames through `filter`, interpolating an IMU sample
/// at each frame time. `imu` must start at or before the filter's current time; samples not
/// after it are skipped. `on_frame` sees the filter after every frame.
pub fn replay<F>(filter: &mut DsVio, imu: &[ImuSample], frames: &[StereoFrame], mut on_frame: F) -> Result<(), FilterError>
where
    F: FnMut(&DsVio, &FrameReport),
{
    let mut k = 0;
    let t0 = filter.last_imu().t;
    while k < imu.len() && imu[k].t <= t0 {
        k += 1;
    }
    for frame in frames.iter().filter(|f| f.t >= t0) {
        while k < imu.len() && imu[k].t <= frame.t {
            filter.process_imu(&imu[k])?;
            k += 1;
        }
        if frame.t > filter.last_imu().t {
            if let Some(next) = imu.get(k) {
                let s = filter.last_imu().lerp(next, frame.t);
                filter.process_imu(&s)?;
            }
        }
        let rep = filter.process_stereo(frame)?;
        on_frame(filter, &rep);
    }
    while k < imu.len() {
        filter.process_imu(&imu[k])?;
        k += 1;
    }
    Ok(())
}

/// One item of the time-ordered input stream.
#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Imu(ImuSample),
    Stereo(StereoFrame),
}

/// Drains `rx` into `filter` until every sender is dropped. Producers on other threads feed
/// it through a bounded `std::sync::mpsc::sync_channel`; `on_frame` sees the filter after
/// every frame. Stops at the first filter error.
pub fn consume<F>(filter: &mut DsVio, rx: std::sync::mpsc::Receiver<Event>, mut on_frame: F) -> Result<(), FilterError>
where
    F: FnMut(&DsVio, &FrameReport),
{
    for ev in rx {
        match ev {
            Event::Imu(s) => {
                filter.process_imu(&s)?;
            }
            Event::Stereo(f) => {
                let rep = filter.process_stereo(&f)?;
                on_frame(filter, &rep);
            }
        }
    }
    Ok(())
}
