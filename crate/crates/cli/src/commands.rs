use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, Context};
use dsvio_core::eval::{align_4dof, ate_rmse, attitude_rmse, evaluate, nees, write_step_csv, AlignKind, AlignmentResult};
use dsvio_core::io::{
    load_dataset, load_groundtruth_csv, load_toml, load_trajectory, write_trajectory, GroundTruthSample, TrajectoryPoint,
    TRAJECTORY_HEADER,
};
use dsvio_core::msckf::{ImuState, MarginalizationMode};
use dsvio_core::pipeline::{replay, Coupling, DsVio, DsVioConfig, ImuSample, InitMode, RunStats, StereoFrame};
use dsvio_core::sim::{generate_scenario, write_scenario, SimConfig};
use dsvio_core::FilterError;
use serde::Serialize;

use crate::{Align, Policy, RunArgs, Switch};

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: e.into() }
}

fn data_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: e.into() }
}

fn numeric_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 4, error: e.into() }
}

fn filter_err(e: FilterError) -> Failure {
    match e {
        FilterError::Config(_) => config_err(e),
        FilterError::OutOfOrder { .. } | FilterError::Uninitialized | FilterError::NotStatic(_) => data_err(e),
        _ => numeric_err(e),
    }
}

pub fn simulate(config: &Path, out: &Path) -> Result<(), Failure> {
    let sim: SimConfig = load_toml(config).map_err(config_err)?;
    sim.validate()
        .map_err(|e| config_err(anyhow!(e).context(config.display().to_string())))?;
    let sc = generate_scenario(&sim).map_err(filter_err)?;
    let manifest = write_scenario(out, &sim, &sc).map_err(data_err)?;
    let tracked: usize = sc.frames.iter().map(|f| f.features.len()).sum();
    println!("imu samples: {}", sc.imu.len());
    println!("frames: {}", sc.frames.len());
    println!("landmarks: {}", sc.landmarks.len());
    println!("mean features per frame: {:.1}", tracked as f64 / sc.frames.len().max(1) as f64);
    println!("manifest: {}", manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    seed: Option<u64>,
    trajectory: String,
    wall_time_s: f64,
    /// After 4-DoF alignment.
    ate_rmse: Option<f64>,
    attitude_rmse_deg: Option<f64>,
    /// Position NEES in the estimator's own frame.
    nees_mean: Option<f64>,
    stats: RunStats,
}

#[derive(Serialize)]
struct Aggregate {
    runs: usize,
    ate_mean: f64,
    ate_std: f64,
    attitude_rmse_deg_mean: f64,
    nees_mean: f64,
}

#[derive(Serialize)]
struct RunReport {
    variant: &'static str,
    coupling: Coupling,
    gating: bool,
    keyframe_policy: MarginalizationMode,
    config: DsVioConfig,
    runs: Vec<RunSummary>,
    aggregate: Option<Aggregate>,
}

struct Input {
    seed: Option<u64>,
    imu: Vec<ImuSample>,
    frames: Vec<StereoFrame>,
    groundtruth: Option<Vec<GroundTruthSample>>,
}

struct Output {
    summary: RunSummary,
    trajectory: Vec<TrajectoryPoint>,
}

fn initial_state(imu0: &ImuSample, gt: Option<&[GroundTruthSample]>) -> Result<ImuState, Failure> {
    let gt = gt.ok_or_else(|| data_err(anyhow!("ground-truth initialization needs a ground-truth file")))?;
    let g = gt
        .iter()
        .find(|g| (g.t - imu0.t).abs() < 1e-6)
        .ok_or_else(|| data_err(anyhow!("no ground-truth sample at the first IMU time {:.9}", imu0.t)))?;
    let (Some(v), Some(b_g), Some(b_a)) = (g.v, g.b_g, g.b_a) else {
        return Err(data_err(anyhow!("ground-truth initialization needs velocity and bias columns")));
    };
    Ok(ImuState { q: g.q, b_g, v, b_a, p: g.p })
}

fn execute(cfg: &DsVioConfig, input: &Input) -> Result<Output, Failure> {
    let start = Instant::now();
    let first = input.imu.first().ok_or_else(|| data_err(anyhow!("IMU stream is empty")))?;
    let mut vio = match cfg.init {
        InitMode::Static => DsVio::from_static(cfg.clone(), &input.imu).map_err(filter_err)?.0,
        InitMode::GroundTruth => {
            let x0 = initial_state(first, input.groundtruth.as_deref())?;
            DsVio::new(cfg.clone(), x0, *first).map_err(filter_err)?
        }
    };
    let mut trajectory = vec![TrajectoryPoint::from(&vio.current_estimate())];
    let mut broken: Option<f64> = None;
    replay(&mut vio, &input.imu, &input.frames, |f, _| {
        if broken.is_none() && !(f.state().imu.is_finite() && f.covariance_healthy()) {
            broken = Some(f.state().t);
        }
        trajectory.push(TrajectoryPoint::from(&f.current_estimate()));
    })
    .map_err(|e| {
        let code = filter_err(e.clone()).code;
        Failure {
            code,
            error: anyhow!(e).context(format!("replay stopped near t = {:.6} s", vio.last_imu().t)),
        }
    })?;
    if let Some(t) = broken {
        return Err(numeric_err(anyhow!("covariance lost symmetry or positive definiteness at t = {t:.6} s")));
    }
    let (mut ate, mut att, mut nees_mean) = (None, None, None);
    if let Some(gt) = &input.groundtruth {
        let gt: Vec<TrajectoryPoint> = gt.iter().map(TrajectoryPoint::from).collect();
        if let Ok(al) = align_4dof(&trajectory, &gt) {
            ate = Some(ate_rmse(&trajectory, &gt, &al));
            att = Some(attitude_rmse(&trajectory, &gt, &al).to_degrees());
        }
        let n = nees(&trajectory, &gt, &AlignmentResult::identity());
        nees_mean = (!n.steps.is_empty()).then_some(n.mean);
    }
    let stats = vio.stats();
    log::info!(
        "run seed {:?}: {} frames, {} updates, {} gate rejections",
        input.seed,
        stats.frames,
        stats.updates,
        stats.gate_rejections
    );
    Ok(Output {
        summary: RunSummary {
            seed: input.seed,
            trajectory: String::new(),
            wall_time_s: start.elapsed().as_secs_f64(),
            ate_rmse: ate,
            attitude_rmse_deg: att,
            nees_mean,
            stats,
        },
        trajectory,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn run(args: &RunArgs) -> Result<(), Failure> {
    if args.runs == 0 {
        return Err(config_err(anyhow!("--runs must be at least 1")));
    }
    let mut cfg: DsVioConfig = load_toml(&args.config).map_err(config_err)?;
    if let Some(s) = args.coupling {
        cfg.coupling = if s == Switch::On { Coupling::OrientationSeed } else { Coupling::Off };
    }
    if let Some(s) = args.gating {
        cfg.gating = s == Switch::On;
    }
    if let Some(p) = args.keyframe_policy {
        cfg.keyframe.mode = match p {
            Policy::Paper => MarginalizationMode::Paper,
            Policy::Fifo => MarginalizationMode::Fifo,
        };
    }
    let dataset = load_dataset(&args.manifest).map_err(data_err)?;
    // sensor calibration comes from the dataset; zero (noise-free) densities get a floor
    let cal = &dataset.calibration;
    cfg.extrinsics = cal.extrinsics;
    cfg.imu_noise.sigma_g = cal.imu_noise.sigma_g.max(1e-6);
    cfg.imu_noise.sigma_wg = cal.imu_noise.sigma_wg.max(1e-7);
    cfg.imu_noise.sigma_a = cal.imu_noise.sigma_a.max(1e-5);
    cfg.imu_noise.sigma_wa = cal.imu_noise.sigma_wa.max(1e-6);
    cfg.triangulation.sigma_px = cal.sigma_px.max(1e-4);
    cfg.validate()
        .map_err(|e| config_err(anyhow!(e).context(args.config.display().to_string())))?;

    let inputs: Vec<Input> = if args.runs > 1 || args.seed.is_some() {
        let sim = dataset
            .manifest
            .sim
            .clone()
            .ok_or_else(|| config_err(anyhow!("--runs and --seed need a synthetic dataset (manifest without [sim])")))?;
        let first = args.seed.unwrap_or(sim.seed);
        (0..args.runs as u64)
            .map(|i| {
                let s = SimConfig { seed: first + i, ..sim.clone() };
                let sc = generate_scenario(&s).map_err(filter_err)?;
                Ok(Input {
                    seed: Some(s.seed),
                    imu: sc.imu,
                    frames: sc.frames,
                    groundtruth: Some(sc.groundtruth),
                })
            })
            .collect::<Result<_, Failure>>()?
    } else {
        vec![Input {
            seed: None,
            imu: dataset.imu,
            frames: dataset.frames,
            groundtruth: dataset.groundtruth,
        }]
    };

    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(inputs.len());
    let mut results: Vec<Option<Result<Output, Failure>>> = (0..inputs.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (cfg, inputs) = (&cfg, &inputs);
                scope.spawn(move || {
                    (w..inputs.len())
                        .step_by(workers)
                        .map(|i| (i, execute(cfg, &inputs[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                results[i] = Some(r);
            }
        }
    });

    fs::create_dir_all(&args.out)
        .with_context(|| args.out.display().to_string())
        .map_err(data_err)?;
    let mut runs = Vec::new();
    for r in results.into_iter().map(|r| r.expect("every run executed")) {
        let mut out = r?;
        let rel = match out.summary.seed {
            Some(s) if args.runs > 1 => format!("seed_{s}/trajectory.csv"),
            _ => "trajectory.csv".to_string(),
        };
        let path = args.out.join(&rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).with_context(|| dir.display().to_string()).map_err(data_err)?;
        }
        write_trajectory(&path, &out.trajectory).map_err(data_err)?;
        out.summary.trajectory = rel;
        runs.push(out.summary);
    }
    let aggregate = (runs.len() > 1).then(|| {
        let ates: Vec<f64> = runs.iter().filter_map(|r| r.ate_rmse).collect();
        let atts: Vec<f64> = runs.iter().filter_map(|r| r.attitude_rmse_deg).collect();
        let nees: Vec<f64> = runs.iter().filter_map(|r| r.nees_mean).collect();
        let (ate_mean, ate_std) = mean_std(&ates);
        Aggregate {
            runs: runs.len(),
            ate_mean,
            ate_std,
            attitude_rmse_deg_mean: mean_std(&atts).0,
            nees_mean: mean_std(&nees).0,
        }
    });
    let report = RunReport {
        variant: match cfg.coupling {
            Coupling::OrientationSeed => "dual-stage",
            Coupling::Off => "single-stage",
        },
        coupling: cfg.coupling,
        gating: cfg.gating,
        keyframe_policy: cfg.keyframe.mode,
        config: cfg.clone(),
        runs,
        aggregate,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let report_path = args.out.join("report.json");
    fs::write(&report_path, json + "\n")
        .with_context(|| report_path.display().to_string())
        .map_err(data_err)?;
    println!("variant: {}", report.variant);
    for r in &report.runs {
        let ate = r.ate_rmse.map(|a| format!("{a:.4} m")).unwrap_or_else(|| "n/a".into());
        println!(
            "{}: ATE {ate}, {} frames, {} updates, {:.2} s",
            r.trajectory, r.stats.frames, r.stats.updates, r.wall_time_s
        );
    }
    if let Some(a) = &report.aggregate {
        println!("mean ATE {:.4} m (std {:.4}) over {} runs", a.ate_mean, a.ate_std, a.runs);
    }
    println!("report: {}", report_path.display());
    Ok(())
}

/// Loads either an estimated trajectory or a ground-truth CSV, by header.
fn load_points(path: &Path) -> Result<Vec<TrajectoryPoint>, Failure> {
    let file = fs::File::open(path)
        .with_context(|| path.display().to_string())
        .map_err(data_err)?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .with_context(|| path.display().to_string())
        .map_err(data_err)?;
    if first.trim_end() == TRAJECTORY_HEADER {
        load_trajectory(path).map_err(data_err)
    } else {
        let gt = load_groundtruth_csv(path).map_err(data_err)?;
        Ok(gt.iter().map(TrajectoryPoint::from).collect())
    }
}

pub fn eval(est: &Path, gt: &Path, align: Align, steps: Option<&Path>) -> Result<(), Failure> {
    let e = load_points(est)?;
    let g = load_points(gt)?;
    let kind = match align {
        Align::FourDof => AlignKind::FourDof,
        Align::Se3 => AlignKind::Se3,
    };
    let (report, _) = evaluate(&e, &g, kind)
        .map_err(|err| data_err(anyhow!(err).context("estimate and ground truth do not overlap in time")))?;
    if let Some(p) = steps {
        write_step_csv(p, &e, &g, &report.alignment).map_err(data_err)?;
    }
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}
