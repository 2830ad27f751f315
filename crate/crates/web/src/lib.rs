//! Browser demo: simulate a short flight, run the estimator on it and compare variants.
//!
//! The JSON functions are plain Rust so they can be tested natively; the `wasm_bindgen`
//! wrappers only convert errors into JS exceptions.

use dsvio_core::eval::{align, ate_rmse, attitude_rmse, nees, AlignKind, AlignmentResult};
use dsvio_core::io::TrajectoryPoint;
use dsvio_core::msckf::{ImuState, MarginalizationMode};
use dsvio_core::pipeline::{replay, Coupling, DsVio, DsVioConfig, RunStats};
use dsvio_core::sim::{generate_scenario, Scenario, SimConfig, TrajectoryKind};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

/// Longest flight the page will simulate; keeps a single call under a few seconds.
pub const MAX_DURATION: f64 = 60.0;
/// Points per returned path, enough for a smooth plot.
const PLOT_POINTS: usize = 400;

#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct Request {
    pub seed: u64,
    pub duration: f64,
    pub trajectory: TrajectoryKind,
    /// Multiplies every IMU and pixel noise density of the simulator.
    pub noise_scale: f64,
    pub coupling: bool,
    pub gating: bool,
    pub fifo: bool,
    pub align: AlignKind,
}

impl Default for Request {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 20.0,
            trajectory: TrajectoryKind::FigureEight,
            noise_scale: 1.0,
            coupling: true,
            gating: true,
            fifo: false,
            align: AlignKind::FourDof,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub ate_rmse: f64,
    pub attitude_rmse_deg: f64,
    pub nees_mean: f64,
    pub final_error: f64,
    pub path_length: f64,
    pub stats: RunStats,
    /// Top-down (x, y) paths after alignment, downsampled.
    pub estimate_xy: Vec<[f64; 2]>,
    pub truth_xy: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    pub axis: String,
    pub labels: [String; 2],
    pub results: [RunResult; 2],
}

fn parse(json: &str) -> Result<Request, String> {
    let req: Request = if json.trim().is_empty() {
        Request::default()
    } else {
        serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))?
    };
    if !(req.duration > 1.0 && req.duration <= MAX_DURATION) {
        return Err(format!("duration must be in (1, {MAX_DURATION}] s"));
    }
    if !(req.noise_scale >= 0.0 && req.noise_scale <= 10.0) {
        return Err("noise_scale must be in [0, 10]".into());
    }
    Ok(req)
}

fn scenario(req: &Request) -> Result<(SimConfig, Scenario), String> {
    let mut sim = SimConfig {
        seed: req.seed,
        duration: req.duration,
        ..SimConfig::default()
    };
    sim.trajectory.kind = req.trajectory;
    let k = req.noise_scale;
    sim.noise.sigma_g *= k;
    sim.noise.sigma_wg *= k;
    sim.noise.sigma_a *= k;
    sim.noise.sigma_wa *= k;
    sim.pixel_sigma *= k;
    let sc = generate_scenario(&sim).map_err(|e| e.to_string())?;
    Ok((sim, sc))
}

fn estimate(req: &Request, sim: &SimConfig, sc: &Scenario) -> Result<RunResult, String> {
    let mut cfg = DsVioConfig {
        extrinsics: sim.extrinsics,
        coupling: if req.coupling { Coupling::OrientationSeed } else { Coupling::Off },
        gating: req.gating,
        ..DsVioConfig::default()
    };
    cfg.keyframe.mode = if req.fifo { MarginalizationMode::Fifo } else { MarginalizationMode::Paper };
    // the filter keeps its noise floors so a noise-free flight still has a proper covariance
    cfg.imu_noise.sigma_g = sim.noise.sigma_g.max(1e-6);
    cfg.imu_noise.sigma_wg = sim.noise.sigma_wg.max(1e-7);
    cfg.imu_noise.sigma_a = sim.noise.sigma_a.max(1e-5);
    cfg.imu_noise.sigma_wa = sim.noise.sigma_wa.max(1e-6);
    cfg.triangulation.sigma_px = sim.pixel_sigma.max(1e-4);

    let g0 = &sc.groundtruth[0];
    let x0 = ImuState {
        q: g0.q,
        b_g: g0.b_g.unwrap_or_default(),
        v: g0.v.unwrap_or_default(),
        b_a: g0.b_a.unwrap_or_default(),
        p: g0.p,
    };
    let mut vio = DsVio::new(cfg, x0, sc.imu[0]).map_err(|e| e.to_string())?;
    let mut est = vec![TrajectoryPoint::from(&vio.current_estimate())];
    replay(&mut vio, &sc.imu, &sc.frames, |f, _| est.push(TrajectoryPoint::from(&f.current_estimate())))
        .map_err(|e| e.to_string())?;
    if !vio.covariance_healthy() {
        return Err("covariance lost positive definiteness".into());
    }

    let gt: Vec<TrajectoryPoint> = sc.groundtruth.iter().map(TrajectoryPoint::from).collect();
    let al = align(&est, &gt, req.align).map_err(|e| e.to_string())?;
    let last = est.last().expect("at least the initial estimate");
    let truth_at_last = gt
        .iter()
        .min_by(|a, b| (a.t - last.t).abs().total_cmp(&(b.t - last.t).abs()))
        .expect("ground truth is not empty");
    let path_length = gt.windows(2).map(|w| (w[1].p - w[0].p).norm()).sum();
    let stride = |n: usize| (n / PLOT_POINTS).max(1);
    Ok(RunResult {
        ate_rmse: ate_rmse(&est, &gt, &al),
        attitude_rmse_deg: attitude_rmse(&est, &gt, &al).to_degrees(),
        nees_mean: nees(&est, &gt, &AlignmentResult::identity()).mean,
        final_error: (al.apply(&last.p) - truth_at_last.p).norm(),
        path_length,
        stats: vio.stats(),
        estimate_xy: est
            .iter()
            .step_by(stride(est.len()))
            .map(|e| {
                let p = al.apply(&e.p);
                [p.x, p.y]
            })
            .collect(),
        truth_xy: gt.iter().step_by(stride(gt.len())).map(|g| [g.p.x, g.p.y]).collect(),
    })
}

/// Simulates the requested flight and runs one estimator variant on it.
pub fn run_json(request: &str) -> Result<String, String> {
    let req = parse(request)?;
    let (sim, sc) = scenario(&req)?;
    let r = estimate(&req, &sim, &sc)?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

/// Runs two variants on the same simulated data. `axis` is `coupling` or `keyframe`.
pub fn compare_json(request: &str, axis: &str) -> Result<String, String> {
    let req = parse(request)?;
    let (sim, sc) = scenario(&req)?;
    let (a, b, labels) = match axis {
        "coupling" => (
            Request { coupling: true, ..req.clone() },
            Request { coupling: false, ..req.clone() },
            ["dual-stage", "single-stage"],
        ),
        "keyframe" => (
            Request { fifo: false, ..req.clone() },
            Request { fifo: true, ..req.clone() },
            ["keyframe", "fifo"],
        ),
        other => return Err(format!("unknown comparison axis {other:?}")),
    };
    let c = Comparison {
        axis: axis.to_string(),
        labels: labels.map(String::from),
        results: [estimate(&a, &sim, &sc)?, estimate(&b, &sim, &sc)?],
    };
    serde_json::to_string(&c).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn run(request: &str) -> Result<String, JsValue> {
    run_json(request).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compare(request: &str, axis: &str) -> Result<String, JsValue> {
    compare_json(request, axis).map_err(|e| JsValue::from_str(&e))
}
