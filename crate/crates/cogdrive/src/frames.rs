//! Instance-centric coordinate frames, global/local transforms, and pairwise
//! relative positional features.
//!
//! Every agent and map polyline gets its own local frame; downstream features
//! are expressed relative to these frames, which is what makes the whole
//! pipeline invariant under global rigid motions.

use crate::scene::{AgentHistory, MapPolyline, Pose2};
use crate::util::wrap_angle;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalFrame {
    pub origin: [f64; 2],
    pub heading: f64,
}

impl LocalFrame {
    pub fn new(origin: [f64; 2], heading: f64) -> Self {
        Self {
            origin,
            heading: wrap_angle(heading),
        }
    }
}

/// Five-dimensional pairwise feature:
/// `[sin dtheta, cos dtheta, sin bearing, cos bearing, distance]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelPosFeature(pub [f64; 5]);

#[derive(Debug, Clone)]
pub struct RelPosTensor {
    pub n: usize,
    /// Row-major `n * n` grid: entry `(i, j)` at index `i * n + j`.
    pub entries: Vec<RelPosFeature>,
}

impl RelPosTensor {
    pub fn get(&self, i: usize, j: usize) -> &RelPosFeature {
        &self.entries[i * self.n + j]
    }

    /// Flatten to row-major `n*n x 5` values.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.0).collect()
    }
}

/// Local frame of an agent: its last observed pose.
pub fn agent_frame(agent: &AgentHistory) -> LocalFrame {
    let pose = agent.last_state().pose;
    LocalFrame::new([pose.x, pose.y], pose.heading)
}

/// Local frame of a polyline: the arc-length midpoint, headed along the
/// segment that contains it.
pub fn polyline_frame(polyline: &MapPolyline) -> LocalFrame {
    let pts = &polyline.points;
    let mut seg_lens = Vec::with_capacity(pts.len() - 1);
    let mut total = 0.0;
    for w in pts.windows(2) {
        let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        seg_lens.push(len);
        total += len;
    }
    let mut remaining = total / 2.0;
    for (k, w) in pts.windows(2).enumerate() {
        if remaining <= seg_lens[k] || k == seg_lens.len() - 1 {
            let f = remaining / seg_lens[k];
            let dx = w[1][0] - w[0][0];
            let dy = w[1][1] - w[0][1];
            return LocalFrame::new(
                [w[0][0] + f * dx, w[0][1] + f * dy],
                dy.atan2(dx),
            );
        }
        remaining -= seg_lens[k];
    }
    unreachable!("polyline has >= 2 points")
}

/// Transform a global pose into `frame` coordinates (translate by `-origin`,
/// rotate by `-heading`).
pub fn to_local(frame: &LocalFrame, pose: &Pose2) -> Pose2 {
    let dx = pose.x - frame.origin[0];
    let dy = pose.y - frame.origin[1];
    let (sin, cos) = frame.heading.sin_cos();
    Pose2 {
        x: cos * dx + sin * dy,
        y: -sin * dx + cos * dy,
        heading: wrap_angle(pose.heading - frame.heading),
    }
}

/// Inverse of [`to_local`].
pub fn to_global(frame: &LocalFrame, pose: &Pose2) -> Pose2 {
    let (sin, cos) = frame.heading.sin_cos();
    Pose2 {
        x: frame.origin[0] + cos * pose.x - sin * pose.y,
        y: frame.origin[1] + sin * pose.x + cos * pose.y,
        heading: wrap_angle(pose.heading + frame.heading),
    }
}

/// Transform a global point into frame coordinates.
pub fn point_to_local(frame: &LocalFrame, p: [f64; 2]) -> [f64; 2] {
    let dx = p[0] - frame.origin[0];
    let dy = p[1] - frame.origin[1];
    let (sin, cos) = frame.heading.sin_cos();
    [cos * dx + sin * dy, -sin * dx + cos * dy]
}

/// Transform a frame-local point back to global coordinates.
pub fn point_to_global(frame: &LocalFrame, p: [f64; 2]) -> [f64; 2] {
    let (sin, cos) = frame.heading.sin_cos();
    [
        frame.origin[0] + cos * p[0] - sin * p[1],
        frame.origin[1] + sin * p[0] + cos * p[1],
    ]
}

/// Pairwise relative feature between frames `i` and `j`. The bearing uses the
/// two-argument arctangent; the diagonal (and coincident origins) gets zero
/// bearing and heading difference.
pub fn rel_feature(fi: &LocalFrame, fj: &LocalFrame) -> RelPosFeature {
    let dx = fj.origin[0] - fi.origin[0];
    let dy = fj.origin[1] - fi.origin[1];
    let d = (dx * dx + dy * dy).sqrt();
    let theta = wrap_angle(fj.heading - fi.heading);
    // near-coincident origins (within float noise of a rigid motion) leave
    // the bearing undefined; use the same zero convention as the diagonal
    let beta = if d < 1e-9 {
        0.0
    } else {
        wrap_angle(dy.atan2(dx) - fi.heading)
    };
    RelPosFeature([theta.sin(), theta.cos(), beta.sin(), beta.cos(), d])
}

/// All-pairs relative features over an ordered list of frames.
pub fn rel_features(frames: &[LocalFrame]) -> RelPosTensor {
    let n = frames.len();
    let mut entries = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                // diagonal carries no information: d = 0, angles = 0
                entries.push(RelPosFeature([0.0, 1.0, 0.0, 1.0, 0.0]));
            } else {
                entries.push(rel_feature(&frames[i], &frames[j]));
            }
        }
    }
    RelPosTensor { n, entries }
}
