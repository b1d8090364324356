//! Planar poses, trajectories and the frame conventions shared by every stage.
//!
//! Ego frame: +x forward, +y left, heading counter-clockwise from +x, wrapped
//! to (-pi, pi]. Timestamps are implicit: pose `i` sits at `i / rate_hz`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const WORLD_FRAME: &str = "world";
pub const EGO_FRAME: &str = "ego";

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        x: 0.0,
        y: 0.0,
        psi: 0.0,
    };

    pub fn new(x: f64, y: f64, psi: f64) -> Self {
        Pose {
            x,
            y,
            psi: wrap_angle(psi),
        }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// Expresses `self` (given in the same frame as `anchor`) relative to `anchor`.
    pub fn relative_to(&self, anchor: &Pose) -> Pose {
        let (s, c) = anchor.psi.sin_cos();
        let dx = self.x - anchor.x;
        let dy = self.y - anchor.y;
        Pose {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            psi: wrap_angle(self.psi - anchor.psi),
        }
    }

    /// Inverse of [`Pose::relative_to`]: maps a pose given relative to `anchor` back out.
    pub fn compose(anchor: &Pose, local: &Pose) -> Pose {
        let (s, c) = anchor.psi.sin_cos();
        Pose {
            x: anchor.x + c * local.x - s * local.y,
            y: anchor.y + s * local.x + c * local.y,
            psi: wrap_angle(anchor.psi + local.psi),
        }
    }

    pub fn point_relative_to(p: [f64; 2], anchor: &Pose) -> [f64; 2] {
        let q = Pose::new(p[0], p[1], 0.0).relative_to(anchor);
        [q.x, q.y]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<Pose>,
    pub rate_hz: f64,
    pub frame_id: String,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>, rate_hz: f64, frame_id: impl Into<String>) -> Result<Self> {
        if poses.is_empty() {
            return Err(Error::EmptyInput);
        }
        if !(rate_hz > 0.0) {
            return Err(Error::InvalidArgument(format!("rate_hz must be positive, got {rate_hz}")));
        }
        Ok(Trajectory {
            poses,
            rate_hz,
            frame_id: frame_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.rate_hz
    }

    pub fn first(&self) -> &Pose {
        &self.poses[0]
    }

    pub fn last(&self) -> &Pose {
        &self.poses[self.poses.len() - 1]
    }

    /// Sub-trajectory over `range`, keeping rate and frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Trajectory {
        Trajectory {
            poses: self.poses[range].to_vec(),
            rate_hz: self.rate_hz,
            frame_id: self.frame_id.clone(),
        }
    }

    /// Cumulative arc length at every pose (first entry 0).
    pub fn cumulative_arc_length(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.poses.len());
        out.push(0.0);
        for w in self.poses.windows(2) {
            acc += w[0].distance(&w[1]);
            out.push(acc);
        }
        out
    }

    pub fn arc_length(&self) -> f64 {
        self.poses.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }

    /// Point at arc length `s` along the polyline, clamped to the ends.
    pub fn point_at_arc_length(&self, s: f64) -> [f64; 2] {
        let cum = self.cumulative_arc_length();
        let total = *cum.last().unwrap();
        if s <= 0.0 || self.poses.len() == 1 {
            return self.poses[0].xy();
        }
        if s >= total {
            return self.last().xy();
        }
        let seg = cum.partition_point(|&c| c <= s).saturating_sub(1);
        let seg = seg.min(self.poses.len() - 2);
        let len = cum[seg + 1] - cum[seg];
        let f = if len > 0.0 { (s - cum[seg]) / len } else { 0.0 };
        let a = &self.poses[seg];
        let b = &self.poses[seg + 1];
        [a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)]
    }

    /// Ego states with forward speed projected on the heading and yaw rate,
    /// both by forward differences (the last state repeats its predecessor).
    pub fn ego_states(&self) -> Vec<EgoState> {
        let n = self.poses.len();
        let dt = self.dt();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let (a, b) = if n < 2 {
                (i, i)
            } else if i + 1 < n {
                (i, i + 1)
            } else {
                (i - 1, i)
            };
            let pa = &self.poses[a];
            let pb = &self.poses[b];
            let (s, c) = pa.psi.sin_cos();
            let (v, omega) = if a == b {
                (0.0, 0.0)
            } else {
                (
                    ((pb.x - pa.x) * c + (pb.y - pa.y) * s) / dt,
                    wrap_angle(pb.psi - pa.psi) / dt,
                )
            };
            out.push(EgoState {
                pose: self.poses[i],
                v,
                omega,
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgoState {
    pub pose: Pose,
    pub v: f64,
    pub omega: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalEncoding {
    pub d: f64,
    pub cos_phi: f64,
    pub sin_phi: f64,
}

impl GoalEncoding {
    pub fn as_array(&self) -> [f64; 3] {
        [self.d, self.cos_phi, self.sin_phi]
    }
}

/// Re-expresses a world-frame trajectory relative to `anchor_pose`.
pub fn transform_to_ego(world_traj: &Trajectory, anchor_pose: &Pose) -> Trajectory {
    Trajectory {
        poses: world_traj
            .poses
            .iter()
            .map(|p| p.relative_to(anchor_pose))
            .collect(),
        rate_hz: world_traj.rate_hz,
        frame_id: EGO_FRAME.to_string(),
    }
}

/// Inverse of [`transform_to_ego`].
pub fn transform_to_world(ego_traj: &Trajectory, anchor_pose: &Pose) -> Trajectory {
    Trajectory {
        poses: ego_traj
            .poses
            .iter()
            .map(|p| Pose::compose(anchor_pose, p))
            .collect(),
        rate_hz: ego_traj.rate_hz,
        frame_id: WORLD_FRAME.to_string(),
    }
}

/// Distance and bearing of an ego-frame goal. A goal at the origin encodes as `(0, 1, 0)`.
pub fn encode_goal(goal_xy: [f64; 2]) -> GoalEncoding {
    let d = goal_xy[0].hypot(goal_xy[1]);
    if d == 0.0 {
        return GoalEncoding {
            d: 0.0,
            cos_phi: 1.0,
            sin_phi: 0.0,
        };
    }
    let phi = goal_xy[1].atan2(goal_xy[0]);
    GoalEncoding {
        d,
        cos_phi: phi.cos(),
        sin_phi: phi.sin(),
    }
}

/// Shortest-arc interpolation between two headings.
pub fn slerp_heading(a: f64, b: f64, f: f64) -> f64 {
    wrap_angle(a + f * wrap_angle(b - a))
}

/// Resamples `traj` to `n_out` poses equally spaced in arc length.
///
/// Positions are interpolated linearly on the input polyline and headings by
/// shortest-arc interpolation between the bracketing input poses. Both
/// endpoints are copied exactly. A path of zero length yields `n_out` copies
/// of the first pose and logs a warning.
pub fn resample_constant_velocity(traj: &Trajectory, n_out: usize) -> Result<Trajectory> {
    if traj.len() < 2 {
        return Err(Error::TooShort(format!(
            "resampling needs at least 2 poses, got {}",
            traj.len()
        )));
    }
    if n_out < 2 {
        return Err(Error::InvalidArgument(format!("n_out must be >= 2, got {n_out}")));
    }
    let cum = traj.cumulative_arc_length();
    let total = *cum.last().unwrap();
    let mut poses = Vec::with_capacity(n_out);
    if total <= 0.0 {
        log::warn!("zero-length path: returning {n_out} copies of the first pose");
        poses.resize(n_out, traj.poses[0]);
        return Ok(Trajectory {
            poses,
            rate_hz: traj.rate_hz,
            frame_id: traj.frame_id.clone(),
        });
    }
    let last_seg = traj.len() - 2;
    let mut seg = 0usize;
    poses.push(traj.poses[0]);
    for j in 1..n_out - 1 {
        let s = total * j as f64 / (n_out - 1) as f64;
        while seg < last_seg && cum[seg + 1] <= s {
            seg += 1;
        }
        let len = cum[seg + 1] - cum[seg];
        let f = if len > 0.0 {
            ((s - cum[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let a = &traj.poses[seg];
        let b = &traj.poses[seg + 1];
        poses.push(Pose {
            x: a.x + f * (b.x - a.x),
            y: a.y + f * (b.y - a.y),
            psi: slerp_heading(a.psi, b.psi, f),
        });
    }
    poses.push(*traj.last());
    Ok(Trajectory {
        poses,
        rate_hz: traj.rate_hz,
        frame_id: traj.frame_id.clone(),
    })
}

/// Distance from a point to the polyline through `poses`.
pub fn distance_to_polyline(p: [f64; 2], poses: &[Pose]) -> f64 {
    if poses.len() == 1 {
        return (p[0] - poses[0].x).hypot(p[1] - poses[0].y);
    }
    poses
        .windows(2)
        .map(|w| point_segment_distance(p, w[0].xy(), w[1].xy()))
        .fold(f64::INFINITY, f64::min)
}

pub fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 > 0.0 {
        ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (ap[0] - t * ab[0]).hypot(ap[1] - t * ab[1])
}

/// Text log of ego states: a `#TRAJ v1 rate_hz=<f> frame=<s>` header, then
/// one `t_index x y psi v omega` record per line.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog {
    pub rate_hz: f64,
    pub frame_id: String,
    pub states: Vec<EgoState>,
}

impl TrajectoryLog {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        TrajectoryLog {
            rate_hz: traj.rate_hz,
            frame_id: traj.frame_id.clone(),
            states: traj.ego_states(),
        }
    }

    pub fn trajectory(&self) -> Result<Trajectory> {
        Trajectory::new(
            self.states.iter().map(|s| s.pose).collect(),
            self.rate_hz,
            self.frame_id.clone(),
        )
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("#TRAJ v1 rate_hz={} frame={}\n", self.rate_hz, self.frame_id);
        for (i, s) in self.states.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {}",
                i, s.pose.x, s.pose.y, s.pose.psi, s.v, s.omega
            );
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::format(origin, "missing header"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("#TRAJ") || parts.next() != Some("v1") {
            return Err(Error::format(origin, format!("bad header `{header}`")));
        }
        let mut rate_hz = None;
        let mut frame_id = None;
        for kv in parts {
            match kv.split_once('=') {
                Some(("rate_hz", v)) => {
                    rate_hz = Some(v.parse::<f64>().map_err(|e| Error::format(origin, e.to_string()))?)
                }
                Some(("frame", v)) => frame_id = Some(v.to_string()),
                _ => return Err(Error::format(origin, format!("unknown header field `{kv}`"))),
            }
        }
        let rate_hz = rate_hz.ok_or_else(|| Error::format(origin, "missing rate_hz"))?;
        let frame_id = frame_id.ok_or_else(|| Error::format(origin, "missing frame"))?;
        let mut states = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(origin, format!("line {}: {e}", lineno + 2)))?;
            if vals.len() != 6 {
                return Err(Error::format(
                    origin,
                    format!("line {}: expected 6 fields, got {}", lineno + 2, vals.len()),
                ));
            }
            if vals[0] as usize != states.len() {
                return Err(Error::format(origin, format!("line {}: t_index out of order", lineno + 2)));
            }
            states.push(EgoState {
                pose: Pose {
                    x: vals[1],
                    y: vals[2],
                    psi: vals[3],
                },
                v: vals[4],
                omega: vals[5],
            });
        }
        Ok(TrajectoryLog {
            rate_hz,
            frame_id,
            states,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}
