#![allow(dead_code)]

use dsvio_core::io::{GroundTruthSample, TrajectoryPoint};
use dsvio_core::msckf::ImuState;
use dsvio_core::pipeline::{replay, DsVio, DsVioConfig, FrameReport, RunStats};
use dsvio_core::sim::{generate_scenario, Scenario, SimConfig};

pub struct RunOutput {
    pub scenario: Scenario,
    pub estimates: Vec<TrajectoryPoint>,
    pub stats: RunStats,
}

pub fn truth_state(g: &GroundTruthSample) -> ImuState {
    ImuState {
        q: g.q,
        b_g: g.b_g.unwrap(),
        v: g.v.unwrap(),
        b_a: g.b_a.unwrap(),
        p: g.p,
    }
}

pub fn gt_points(sc: &Scenario) -> Vec<TrajectoryPoint> {
    sc.groundtruth.iter().map(TrajectoryPoint::from).collect()
}

/// Runs the pipeline from the exact initial state; `on_frame` sees the filter after
/// every stereo frame.
pub fn run_exact<F>(sim: &SimConfig, cfg: &DsVioConfig, mut on_frame: F) -> RunOutput
where
    F: FnMut(&DsVio, &FrameReport),
{
    let scenario = generate_scenario(sim).unwrap();
    let mut vio = DsVio::new(cfg.clone(), truth_state(&scenario.groundtruth[0]), scenario.imu[0]).unwrap();
    let mut estimates = Vec::new();
    replay(&mut vio, &scenario.imu, &scenario.frames, |f, r| {
        estimates.push(TrajectoryPoint::from(&f.current_estimate()));
        on_frame(f, r);
    })
    .unwrap();
    let stats = vio.stats();
    RunOutput {
        scenario,
        estimates,
        stats,
    }
}

/// Filter configuration matching a simulator configuration.
pub fn matching_config(sim: &SimConfig) -> DsVioConfig {
    let mut cfg = DsVioConfig::default();
    cfg.extrinsics = sim.extrinsics;
    cfg.keyframe = sim.keyframe;
    let n = &sim.noise;
    // keep densities positive for the filter even when the simulator is noise-free
    cfg.imu_noise.sigma_g = n.sigma_g.max(1e-6);
    cfg.imu_noise.sigma_wg = n.sigma_wg.max(1e-7);
    cfg.imu_noise.sigma_a = n.sigma_a.max(1e-5);
    cfg.imu_noise.sigma_wa = n.sigma_wa.max(1e-6);
    cfg.triangulation.sigma_px = sim.pixel_sigma.max(1e-4);
    cfg
}
