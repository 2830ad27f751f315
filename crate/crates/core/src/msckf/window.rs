//! Keyframe classification and pose removal from the sliding window.

use serde::{Deserialize, Serialize};

use super::{CameraPose, EkfState, FrameStats, POSE_DIM};
use crate::error::FilterError;
use crate::math::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MarginalizationMode {
    /// Drop the oldest non-keyframe, or the oldest pose if every pose is a keyframe.
    #[default]
    Paper,
    /// Always drop the oldest pose.
    Fifo,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyframePolicy {
    /// Mean parallax (px) against the previous keyframe that makes a keyframe.
    pub parallax_threshold: f64,
    /// Tracked-feature count at or below which a frame becomes a keyframe.
    pub min_tracked: u32,
    pub mode: MarginalizationMode,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            parallax_threshold: 10.0,
            min_tracked: 50,
            mode: MarginalizationMode::Paper,
        }
    }
}

pub fn classify_keyframe(stats: &FrameStats, policy: &KeyframePolicy) -> bool {
    stats.mean_parallax >= policy.parallax_threshold || stats.tracked_count <= policy.min_tracked
}

/// Index of the pose the policy would remove next.
pub fn removal_index(window: &[CameraPose], mode: MarginalizationMode) -> Option<usize> {
    if window.is_empty() {
        return None;
    }
    match mode {
        MarginalizationMode::Fifo => Some(0),
        MarginalizationMode::Paper => Some(window.iter().position(|p| !p.keyframe).unwrap_or(0)),
    }
}

/// Deletes pose `i` and its rows and columns of the covariance.
pub fn remove_pose(state: &mut EkfState, i: usize) -> CameraPose {
    let o = EkfState::pose_offset(i);
    let keep: Vec<usize> = (0..state.dim()).filter(|k| *k < o || *k >= o + POSE_DIM).collect();
    let n = keep.len();
    state.cov = Mat::from_fn(n, n, |r, c| state.cov[(keep[r], keep[c])]);
    state.window.remove(i)
}

/// Removes one pose chosen by `policy.mode`; returns the removed state ids.
pub fn marginalize_poses(state: &mut EkfState, policy: &KeyframePolicy) -> Result<Vec<u64>, FilterError> {
    let i = removal_index(&state.window, policy.mode).ok_or(FilterError::EmptyWindow)?;
    Ok(vec![remove_pose(state, i).state_id])
}
