//! Dataset files.
//!
//! | file | layout |
//! |------|--------|
//! | `imu.csv` | `#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y,w_RS_S_z,a_RS_S_x [m s^-2],a_RS_S_y,a_RS_S_z` |
//! | `groundtruth.csv` | `#timestamp, p_RS_R_{x,y,z}, q_RS_{w,x,y,z}` then optional `v_RS_R_{x,y,z}, b_w_RS_S_{x,y,z}, b_a_RS_S_{x,y,z}` |
//! | `tracks.jsonl` | one frame per line: `{"t_ns": i64, "features": [[id, u1, v1, u2, v2], ...], "stats": {"mean_parallax": px, "tracked_count": n}}` |
//! | trajectory CSV | `timestamp_ns,px,py,pz,q0,q1,q2,q3,vx,vy,vz,sigma_px,sigma_py,sigma_pz,sigma_vx,sigma_vy,sigma_vz,sigma_thx,sigma_thy,sigma_thz` |
//! | `manifest.toml` | relative paths to the files above plus rates and an optional embedded `[sim]` table |
//! | `calibration.toml` | stereo extrinsics, IMU noise densities, observation sigma and nominal focal length |
//!
//! Timestamps are integer nanoseconds on disk and seconds in memory. Quaternions follow
//! the EuRoC order `(w, x, y, z)`, which is the same four numbers as [`UnitQuat`].

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::IoError;
use crate::math::{UnitQuat, Vec3};
use crate::msckf::{FrameStats, ImuNoiseParams, StereoExtrinsics, StereoObservation};
use crate::pipeline::{ImuSample, PoseEstimate, StereoFrame};
use crate::sim::SimConfig;

pub const IMU_HEADER: &str =
    "#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y [rad s^-1],w_RS_S_z [rad s^-1],a_RS_S_x [m s^-2],a_RS_S_y [m s^-2],a_RS_S_z [m s^-2]";
pub const GROUNDTRUTH_HEADER: &str = "#timestamp,p_RS_R_x [m],p_RS_R_y [m],p_RS_R_z [m],q_RS_w [],q_RS_x [],q_RS_y [],q_RS_z [],v_RS_R_x [m s^-1],v_RS_R_y [m s^-1],v_RS_R_z [m s^-1],b_w_RS_S_x [rad s^-1],b_w_RS_S_y [rad s^-1],b_w_RS_S_z [rad s^-1],b_a_RS_S_x [m s^-2],b_a_RS_S_y [m s^-2],b_a_RS_S_z [m s^-2]";
pub const TRAJECTORY_HEADER: &str = "timestamp_ns,px,py,pz,q0,q1,q2,q3,vx,vy,vz,sigma_px,sigma_py,sigma_pz,sigma_vx,sigma_vy,sigma_vz,sigma_thx,sigma_thy,sigma_thz";

pub fn seconds_to_ns(t: f64) -> i64 {
    (t * 1e9).round() as i64
}

pub fn ns_to_seconds(ns: i64) -> f64 {
    ns as f64 / 1e9
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, IoError> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| IoError::io(path, e))
}

fn open(path: &Path) -> Result<fs::File, IoError> {
    fs::File::open(path).map_err(|e| IoError::io(path, e))
}

fn v3(v: &Vec3) -> String {
    format!("{},{},{}", v.x, v.y, v.z)
}

/// Reads numeric CSV rows, skipping the header line. Returns `(line, timestamp_ns, fields)`;
/// the first column is parsed as an integer (EuRoC nanosecond stamps exceed f64 precision)
/// and `fields[0]` holds it only approximately.
fn read_rows(path: &Path, min_cols: usize) -> Result<Vec<(u64, i64, Vec<f64>)>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(open(path)?);
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            IoError::parse(path, line, e)
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() < min_cols {
            return Err(IoError::parse(path, line, format!("expected at least {min_cols} columns, got {}", rec.len())));
        }
        let vals = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| IoError::parse(path, line, format!("not a number: {f:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if let Some(bad) = vals.iter().position(|v| !v.is_finite()) {
            return Err(IoError::parse(path, line, format!("non-finite value in column {}", bad + 1)));
        }
        let ns = rec[0]
            .parse::<i64>()
            .map_err(|_| IoError::parse(path, line, format!("timestamp must be integer nanoseconds, got {:?}", &rec[0])))?;
        rows.push((line, ns, vals));
    }
    Ok(rows)
}

/// IMU samples plus the number of duplicate-timestamp rows dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuLoad {
    pub samples: Vec<ImuSample>,
    pub duplicates_dropped: usize,
}

pub fn load_imu_csv(path: impl AsRef<Path>) -> Result<ImuLoad, IoError> {
    let path = path.as_ref();
    let mut samples: Vec<ImuSample> = Vec::new();
    let mut last_ns: Option<i64> = None;
    let mut duplicates = 0;
    for (line, ns, r) in read_rows(path, 7)? {
        if let Some(prev) = last_ns {
            if ns == prev {
                duplicates += 1;
                continue;
            }
            if ns < prev {
                return Err(IoError::parse(path, line, format!("timestamp {ns} goes backwards (previous {prev})")));
            }
        }
        last_ns = Some(ns);
        samples.push(ImuSample {
            t: ns_to_seconds(ns),
            w_m: Vec3::new(r[1], r[2], r[3]),
            a_m: Vec3::new(r[4], r[5], r[6]),
        });
    }
    if duplicates > 0 {
        log::warn!("{}: dropped {duplicates} duplicate timestamps", path.display());
    }
    Ok(ImuLoad {
        samples,
        duplicates_dropped: duplicates,
    })
}

pub fn write_imu_csv(path: impl AsRef<Path>, samples: &[ImuSample]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut body = String::with_capacity(samples.len() * 120);
    body.push_str(IMU_HEADER);
    body.push('\n');
    for s in samples {
        body.push_str(&format!("{},{},{}\n", seconds_to_ns(s.t), v3(&s.w_m), v3(&s.a_m)));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    t_ns: i64,
    features: Vec<(u64, f64, f64, f64, f64)>,
    #[serde(default)]
    stats: FrameStats,
}

pub fn load_tracks(path: impl AsRef<Path>) -> Result<Vec<StereoFrame>, IoError> {
    let path = path.as_ref();
    let reader = BufReader::new(open(path)?);
    let mut frames = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i as u64 + 1;
        let line = line.map_err(|e| IoError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| IoError::parse(path, n, e))?;
        let mut ids = BTreeSet::new();
        let mut features = Vec::with_capacity(rec.features.len());
        for (id, u1, v1, u2, v2) in rec.features {
            if !ids.insert(id) {
                return Err(IoError::parse(path, n, format!("feature id {id} repeated in frame")));
            }
            let obs = StereoObservation { u1, v1, u2, v2 };
            if !obs.is_finite() {
                return Err(IoError::parse(path, n, format!("non-finite observation for feature {id}")));
            }
            features.push((id, obs));
        }
        frames.push((
            rec.t_ns,
            StereoFrame {
                t: ns_to_seconds(rec.t_ns),
                features,
                stats: rec.stats,
            },
        ));
    }
    frames.sort_by_key(|(ns, _)| *ns);
    Ok(frames.into_iter().map(|(_, f)| f).collect())
}

pub fn write_tracks(path: impl AsRef<Path>, frames: &[StereoFrame]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    for f in frames {
        let rec = FrameRecord {
            t_ns: seconds_to_ns(f.t),
            features: f.features.iter().map(|(id, o)| (*id, o.u1, o.v1, o.u2, o.v2)).collect(),
            stats: f.stats,
        };
        let line = serde_json::to_string(&rec).map_err(|e| IoError::invalid(path, e))?;
        writeln!(w, "{line}").map_err(|e| IoError::io(path, e))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// One ground-truth row. Velocity and biases are present only when the file has them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSample {
    pub t: f64,
    pub p: Vec3,
    pub q: UnitQuat,
    pub v: Option<Vec3>,
    pub b_g: Option<Vec3>,
    pub b_a: Option<Vec3>,
}

pub fn load_groundtruth_csv(path: impl AsRef<Path>) -> Result<Vec<GroundTruthSample>, IoError> {
    let path = path.as_ref();
    let mut out: Vec<GroundTruthSample> = Vec::new();
    for (line, ns, r) in read_rows(path, 8)? {
        let t = ns_to_seconds(ns);
        if out.last().is_some_and(|p| t <= p.t) {
            return Err(IoError::parse(path, line, "timestamps must increase"));
        }
        let raw = UnitQuat {
            q0: r[4],
            q1: r[5],
            q2: r[6],
            q3: r[7],
        };
        // rows written by this crate are already unit; renormalizing would move the last bit
        let q = if (raw.norm() - 1.0).abs() < 1e-12 && raw.q0 >= 0.0 {
            raw
        } else {
            UnitQuat::new_normalize(r[4], r[5], r[6], r[7])
        };
        let opt = |o: usize| (r.len() >= o + 3).then(|| Vec3::new(r[o], r[o + 1], r[o + 2]));
        out.push(GroundTruthSample {
            t,
            p: Vec3::new(r[1], r[2], r[3]),
            q,
            v: opt(8),
            b_g: opt(11),
            b_a: opt(14),
        });
    }
    Ok(out)
}

pub fn write_groundtruth_csv(path: impl AsRef<Path>, gt: &[GroundTruthSample]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut body = String::with_capacity(gt.len() * 250);
    body.push_str(GROUNDTRUTH_HEADER);
    body.push('\n');
    let zero = Vec3::zeros();
    for g in gt {
        let q = g.q;
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            seconds_to_ns(g.t),
            v3(&g.p),
            q.q0,
            q.q1,
            q.q2,
            q.q3,
            v3(g.v.as_ref().unwrap_or(&zero)),
            v3(g.b_g.as_ref().unwrap_or(&zero)),
            v3(g.b_a.as_ref().unwrap_or(&zero)),
        ));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

/// One row of an estimated trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub p: Vec3,
    pub q: UnitQuat,
    pub v: Vec3,
    pub sigma_p: Vec3,
    pub sigma_v: Vec3,
    pub sigma_theta: Vec3,
}

impl From<&PoseEstimate> for TrajectoryPoint {
    fn from(e: &PoseEstimate) -> Self {
        Self {
            t: e.t,
            p: e.p,
            q: e.q,
            v: e.v,
            sigma_p: e.sigma_p,
            sigma_v: e.sigma_v,
            sigma_theta: e.sigma_theta,
        }
    }
}

impl From<&GroundTruthSample> for TrajectoryPoint {
    fn from(g: &GroundTruthSample) -> Self {
        Self {
            t: g.t,
            p: g.p,
            q: g.q,
            v: g.v.unwrap_or_else(Vec3::zeros),
            sigma_p: Vec3::zeros(),
            sigma_v: Vec3::zeros(),
            sigma_theta: Vec3::zeros(),
        }
    }
}

pub fn write_trajectory(path: impl AsRef<Path>, points: &[TrajectoryPoint]) -> Result<(), IoError> {
    let path = path.as_ref();
    let mut w = create(path)?;
    let mut body = String::with_capacity(points.len() * 300);
    body.push_str(TRAJECTORY_HEADER);
    body.push('\n');
    for p in points {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            seconds_to_ns(p.t),
            v3(&p.p),
            p.q.q0,
            p.q.q1,
            p.q.q2,
            p.q.q3,
            v3(&p.v),
            v3(&p.sigma_p),
            v3(&p.sigma_v),
            v3(&p.sigma_theta),
        ));
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(|e| IoError::io(path, e))
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Vec<TrajectoryPoint>, IoError> {
    let path = path.as_ref();
    let mut out: Vec<TrajectoryPoint> = Vec::new();
    for (line, ns, r) in read_rows(path, 20)? {
        let t = ns_to_seconds(ns);
        if out.last().is_some_and(|p| t <= p.t) {
            return Err(IoError::parse(path, line, "timestamps must increase"));
        }
        let v = |o: usize| Vec3::new(r[o], r[o + 1], r[o + 2]);
        out.push(TrajectoryPoint {
            t,
            p: v(1),
            // written from unit quaternions; keep the stored numbers exactly
            q: UnitQuat {
                q0: r[4],
                q1: r[5],
                q2: r[6],
                q3: r[7],
            },
            v: v(8),
            sigma_p: v(11),
            sigma_v: v(14),
            sigma_theta: v(17),
        });
    }
    Ok(out)
}

/// Sensor calibration shipped with a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Calibration {
    pub extrinsics: StereoExtrinsics,
    pub imu_noise: ImuNoiseParams,
    /// Observation noise in normalized image coordinates.
    pub sigma_px: f64,
    /// Nominal focal length in pixels, used to express parallax in pixels.
    pub focal: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Self {
            extrinsics: StereoExtrinsics::default(),
            imu_noise: ImuNoiseParams::default(),
            sigma_px: 1.5 / 460.0,
            focal: 460.0,
        }
    }
}

/// Paths are stored relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub imu: PathBuf,
    pub tracks: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groundtruth: Option<PathBuf>,
    pub calibration: PathBuf,
    pub imu_hz: f64,
    pub cam_hz: f64,
    /// Generating configuration, when the dataset is synthetic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|e| IoError::io(path, e))?;
    toml::from_str(&text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start].matches('\n').count() as u64 + 1)
            .unwrap_or(0);
        IoError::parse(path, line, e.message())
    })
}

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = toml::to_string(value).map_err(|e| IoError::invalid(path, e))?;
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest, IoError> {
    read_toml(path.as_ref())
}

pub fn write_manifest(path: impl AsRef<Path>, m: &DatasetManifest) -> Result<(), IoError> {
    write_toml(path.as_ref(), m)
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<Calibration, IoError> {
    read_toml(path.as_ref())
}

pub fn write_calibration(path: impl AsRef<Path>, c: &Calibration) -> Result<(), IoError> {
    write_toml(path.as_ref(), c)
}

/// Generic TOML config reader with located parse errors.
pub fn load_toml<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T, IoError> {
    read_toml(path.as_ref())
}

/// Everything referenced by a manifest, loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub calibration: Calibration,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<StereoFrame>,
    pub groundtruth: Option<Vec<GroundTruthSample>>,
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset, IoError> {
    let manifest_path = manifest_path.as_ref();
    let manifest = load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| dir.join(p);
    for p in [&manifest.imu, &manifest.tracks, &manifest.calibration]
        .into_iter()
        .chain(manifest.groundtruth.as_ref())
    {
        let full = resolve(p);
        if !full.exists() {
            return Err(IoError::invalid(&full, "referenced file does not exist"));
        }
    }
    let calibration = load_calibration(resolve(&manifest.calibration))?;
    let imu = load_imu_csv(resolve(&manifest.imu))?.samples;
    let frames = load_tracks(resolve(&manifest.tracks))?;
    let groundtruth = match &manifest.groundtruth {
        Some(p) => Some(load_groundtruth_csv(resolve(p))?),
        None => None,
    };
    if let (Some(a), Some(b), Some(f), Some(l)) = (imu.first(), imu.last(), frames.first(), frames.last()) {
        if l.t < a.t || f.t > b.t {
            return Err(IoError::invalid(manifest_path, "IMU and frame timestamps do not overlap"));
        }
    }
    Ok(Dataset {
        manifest,
        calibration,
        imu,
        frames,
        groundtruth,
    })
}
