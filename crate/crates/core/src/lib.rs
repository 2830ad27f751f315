//! Dual-stage EKF stereo visual-inertial odometry.
//!
//! Stage one ([`gyro_ekf`]) fuses gyroscope and accelerometer on a 7-dim quaternion/bias
//! state. Stage two ([`msckf`]) is a sliding-window stereo MSCKF. The [`pipeline`] schedules
//! both per IMU sample and stereo frame. [`sim`], [`io`] and [`eval`] provide synthetic
//! data, file formats and trajectory metrics.

pub mod error;
pub mod eval;
pub mod gyro_ekf;
pub mod io;
pub mod math;
pub mod msckf;
pub mod pipeline;
pub mod sim;

pub use error::{FilterError, IoError};
