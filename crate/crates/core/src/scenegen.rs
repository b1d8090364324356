//! Synthetic sidewalk scenarios.
//!
//! A world is a textured ground plane with a paved corridor, box obstacles and
//! an enclosing set of facades plus a sky ceiling, so every camera ray hits
//! something within [`crate::camgeom::DEFAULT_D_MAX`]. Rendering is an exact
//! analytic ray cast, which keeps depth consistent with the pinhole model.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Point3, Vector3};
use rand::Rng as _;
use rayon::prelude::*;

use crate::camgeom::{compose_rigid, CameraModel, DepthFrame, RgbFrame};
use crate::error::{Error, Result};
use crate::rng;
use crate::trajcore::{distance_to_polyline, wrap_angle, Pose, Trajectory, WORLD_FRAME};

pub const RATE_HZ: f64 = 5.0;
pub const NOMINAL_SPEED: f64 = 1.0;
pub const ROBOT_RADIUS: f64 = 0.3;
const CORRIDOR_STEP: f64 = 0.25;
const GROUND_CELL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxObstacle {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub color: [f32; 3],
}

impl BoxObstacle {
    /// Planar distance from a point to the box footprint.
    pub fn footprint_distance(&self, p: [f64; 2]) -> f64 {
        let dx = (self.min[0] - p[0]).max(0.0).max(p[0] - self.max[0]);
        let dy = (self.min[1] - p[1]).max(0.0).max(p[1] - self.max[1]);
        dx.hypot(dy)
    }

    fn center(&self) -> [f64; 2] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
        ]
    }

    fn footprint_radius(&self) -> f64 {
        0.5 * (self.max[0] - self.min[0]).hypot(self.max[1] - self.min[1])
    }
}

/// Signed distance of the ground to the corridor centerline, rasterized.
#[derive(Clone, Debug, PartialEq)]
struct GroundMap {
    origin: [f64; 2],
    nx: usize,
    ny: usize,
    dist: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub difficulty: f64,
    /// Corridor centerline, densely sampled.
    pub corridor: Vec<[f64; 2]>,
    pub corridor_half_width: f64,
    pub obstacles: Vec<BoxObstacle>,
    /// Enclosing facades `[xmin, xmax, ymin, ymax]`.
    pub bounds: [f64; 4],
    pub ceiling: f64,
    ground: GroundMap,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub world: World,
    pub expert: Trajectory,
    pub camera: CameraModel,
}

/// A scenario with its recorded observations.
#[derive(Clone, Debug)]
pub struct ScenarioData {
    pub id: String,
    pub scenario: Scenario,
    pub frames: Vec<Arc<RgbFrame>>,
    pub depths: Vec<Arc<DepthFrame>>,
}

impl ScenarioData {
    pub fn log(&self) -> crate::curation::RecordedLog {
        crate::curation::RecordedLog {
            id: self.id.clone(),
            trajectory: self.scenario.expert.clone(),
            frames: self.frames.clone(),
            depths: self.depths.clone(),
            camera: self.scenario.camera.clone(),
        }
    }
}

fn hash01(a: i64, b: i64, seed: u64) -> f64 {
    let h = rng::derive_seed(seed, &[a as u64, b as u64]);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn corridor_pose_at(corridor: &[[f64; 2]], s: f64) -> ([f64; 2], [f64; 2]) {
    let i = ((s / CORRIDOR_STEP).floor() as usize).min(corridor.len() - 2);
    let f = (s / CORRIDOR_STEP - i as f64).clamp(0.0, 1.0);
    let a = corridor[i];
    let b = corridor[i + 1];
    let t = [b[0] - a[0], b[1] - a[1]];
    let n = t[0].hypot(t[1]).max(1e-12);
    (
        [a[0] + f * t[0], a[1] + f * t[1]],
        [t[0] / n, t[1] / n],
    )
}

/// Arc length station and signed lateral offset (left positive) of `p` relative to the corridor.
fn corridor_coordinates(corridor: &[[f64; 2]], p: [f64; 2]) -> (f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for (i, w) in corridor.windows(2).enumerate() {
        let t = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
        let len2 = t[0] * t[0] + t[1] * t[1];
        let ap = [p[0] - w[0][0], p[1] - w[0][1]];
        let f = ((ap[0] * t[0] + ap[1] * t[1]) / len2).clamp(0.0, 1.0);
        let d = [ap[0] - f * t[0], ap[1] - f * t[1]];
        let dist = d[0].hypot(d[1]);
        if dist < best.0 {
            let cross = t[0] * ap[1] - t[1] * ap[0];
            best = (dist, (i as f64 + f) * CORRIDOR_STEP, dist.copysign(cross));
        }
    }
    (best.1, best.2)
}

impl World {
    fn build_ground(corridor: &[[f64; 2]], bounds: [f64; 4]) -> GroundMap {
        let nx = ((bounds[1] - bounds[0]) / GROUND_CELL).ceil() as usize + 1;
        let ny = ((bounds[3] - bounds[2]) / GROUND_CELL).ceil() as usize + 1;
        let origin = [bounds[0], bounds[2]];
        let poses: Vec<Pose> = corridor.iter().map(|p| Pose::new(p[0], p[1], 0.0)).collect();
        let dist: Vec<f32> = (0..nx * ny)
            .into_par_iter()
            .map(|k| {
                let (ix, iy) = (k % nx, k / nx);
                let p = [
                    origin[0] + (ix as f64 + 0.5) * GROUND_CELL,
                    origin[1] + (iy as f64 + 0.5) * GROUND_CELL,
                ];
                distance_to_polyline(p, &poses) as f32
            })
            .collect();
        GroundMap {
            origin,
            nx,
            ny,
            dist,
        }
    }

    fn corridor_distance(&self, x: f64, y: f64) -> f64 {
        let g = &self.ground;
        let ix = ((x - g.origin[0]) / GROUND_CELL).floor();
        let iy = ((y - g.origin[1]) / GROUND_CELL).floor();
        if ix < 0.0 || iy < 0.0 || ix as usize >= g.nx || iy as usize >= g.ny {
            return f64::INFINITY;
        }
        g.dist[iy as usize * g.nx + ix as usize] as f64
    }

    fn from_parts(
        seed: u64,
        difficulty: f64,
        corridor: Vec<[f64; 2]>,
        corridor_half_width: f64,
        obstacles: Vec<BoxObstacle>,
        bounds: [f64; 4],
        ceiling: f64,
    ) -> World {
        let ground = Self::build_ground(&corridor, bounds);
        World {
            seed,
            difficulty,
            corridor,
            corridor_half_width,
            obstacles,
            bounds,
            ceiling,
            ground,
        }
    }

    pub fn corridor_length(&self) -> f64 {
        (self.corridor.len() - 1) as f64 * CORRIDOR_STEP
    }

    /// `world.txt`: header, scalar records, one `corridor x y` per centerline
    /// vertex and one `box` record per obstacle.
    pub fn to_text(&self) -> String {
        let mut s = format!("#WORLD v1 seed={} difficulty={}\n", self.seed, self.difficulty);
        let _ = writeln!(s, "half_width {}", self.corridor_half_width);
        let b = self.bounds;
        let _ = writeln!(s, "bounds {} {} {} {} {}", b[0], b[1], b[2], b[3], self.ceiling);
        for p in &self.corridor {
            let _ = writeln!(s, "corridor {} {}", p[0], p[1]);
        }
        for o in &self.obstacles {
            let _ = writeln!(
                s,
                "box {} {} {} {} {} {} {} {} {}",
                o.min[0], o.min[1], o.min[2], o.max[0], o.max[1], o.max[2], o.color[0], o.color[1], o.color[2]
            );
        }
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<World> {
        let bad = |m: String| Error::format(origin, m);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty world file".into()))?;
        let mut seed = None;
        let mut difficulty = None;
        let mut hp = header.split_whitespace();
        if hp.next() != Some("#WORLD") || hp.next() != Some("v1") {
            return Err(bad(format!("bad header `{header}`")));
        }
        for kv in hp {
            match kv.split_once('=') {
                Some(("seed", v)) => seed = v.parse().ok(),
                Some(("difficulty", v)) => difficulty = v.parse().ok(),
                _ => return Err(bad(format!("unknown header field `{kv}`"))),
            }
        }
        let (mut half_width, mut bounds, mut ceiling) = (None, None, None);
        let mut corridor = Vec::new();
        let mut obstacles = Vec::new();
        for line in lines {
            let mut it = line.split_whitespace();
            let Some(tag) = it.next() else { continue };
            let vals: Vec<f64> = it
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(format!("`{line}`: {e}")))?;
            match (tag, vals.len()) {
                ("half_width", 1) => half_width = Some(vals[0]),
                ("bounds", 5) => {
                    bounds = Some([vals[0], vals[1], vals[2], vals[3]]);
                    ceiling = Some(vals[4]);
                }
                ("corridor", 2) => corridor.push([vals[0], vals[1]]),
                ("box", 9) => {
                    let color: Vec<f32> = line
                        .split_whitespace()
                        .skip(7)
                        .map(|t| t.parse::<f32>().unwrap_or(0.0))
                        .collect();
                    obstacles.push(BoxObstacle {
                        min: [vals[0], vals[1], vals[2]],
                        max: [vals[3], vals[4], vals[5]],
                        color: [color[0], color[1], color[2]],
                    })
                }
                _ => return Err(bad(format!("unrecognized record `{line}`"))),
            }
        }
        if corridor.len() < 2 {
            return Err(bad("corridor needs at least two vertices".into()));
        }
        Ok(World::from_parts(
            seed.ok_or_else(|| bad("missing seed".into()))?,
            difficulty.ok_or_else(|| bad("missing difficulty".into()))?,
            corridor,
            half_width.ok_or_else(|| bad("missing half_width".into()))?,
            obstacles,
            bounds.ok_or_else(|| bad("missing bounds".into()))?,
            ceiling.unwrap_or(10.0),
        ))
    }
}

/// Builds a world. Difficulty in `[0, 1]` scales obstacle count and the share of curved corridor pieces.
pub fn generate_world(seed: u64, difficulty: f64) -> World {
    let difficulty = difficulty.clamp(0.0, 1.0);
    let mut r = rng::stream(seed, &[0x77]);
    let length = 33.0;
    let half_width = 1.5;

    // Centerline: straight start, then straights and arcs.
    let mut pts = vec![[0.0, 0.0]];
    let (mut x, mut y, mut heading) = (0.0f64, 0.0f64, 0.0f64);
    let mut pieces: Vec<(f64, f64)> = vec![(5.0, 0.0)];
    let mut planned = 5.0;
    while planned < length {
        if r.gen_bool(0.7 * difficulty) {
            let angle = if r.gen_bool(0.5) { PI / 2.0 } else { PI / 4.0 };
            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            let radius = r.gen_range(4.0..6.0);
            let arc = angle * radius;
            pieces.push((arc, sign * angle / arc));
            planned += arc;
        } else {
            let l = r.gen_range(3.0..7.0);
            pieces.push((l, 0.0));
            planned += l;
        }
    }
    let total_steps = (length / CORRIDOR_STEP).round() as usize;
    let mut piece = 0;
    let mut left_in_piece = pieces[0].0;
    for _ in 0..total_steps {
        let kappa = pieces[piece].1;
        heading += kappa * CORRIDOR_STEP * 0.5;
        x += CORRIDOR_STEP * heading.cos();
        y += CORRIDOR_STEP * heading.sin();
        heading += kappa * CORRIDOR_STEP * 0.5;
        pts.push([x, y]);
        left_in_piece -= CORRIDOR_STEP;
        if left_in_piece <= 1e-9 && piece + 1 < pieces.len() {
            piece += 1;
            left_in_piece += pieces[piece].0;
        }
    }

    let n_obstacles = (difficulty * 10.0).round() as usize;
    let n_intruding = n_obstacles.div_ceil(2);
    let mut obstacles = Vec::new();
    let palette = |r: &mut rng::Rng| -> [f32; 3] {
        [r.gen_range(0.15..0.95), r.gen_range(0.1..0.9), r.gen_range(0.1..0.9)]
    };
    // Intruding obstacles sit on the corridor, spaced so their detours never overlap.
    let mut s = 8.0;
    for _ in 0..n_intruding {
        if s > length - 6.0 {
            break;
        }
        let (c, t) = corridor_pose_at(&pts, s);
        let normal = [-t[1], t[0]];
        let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * r.gen_range(0.5..1.1);
        let half = [r.gen_range(0.2..0.4), r.gen_range(0.2..0.4)];
        let center = [c[0] + lateral * normal[0], c[1] + lateral * normal[1]];
        obstacles.push(BoxObstacle {
            min: [center[0] - half[0], center[1] - half[1], 0.0],
            max: [center[0] + half[0], center[1] + half[1], r.gen_range(0.6..1.8)],
            color: palette(&mut r),
        });
        s += r.gen_range(8.0..11.0);
    }
    // Roadside clutter off the corridor.
    for _ in n_intruding..n_obstacles {
        let s = r.gen_range(3.0..length - 1.0);
        let (c, t) = corridor_pose_at(&pts, s);
        let normal = [-t[1], t[0]];
        let side = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
        let lateral = side * r.gen_range(half_width + 0.9..half_width + 3.0);
        let half = r.gen_range(0.2..0.6);
        let center = [c[0] + lateral * normal[0], c[1] + lateral * normal[1]];
        obstacles.push(BoxObstacle {
            min: [center[0] - half, center[1] - half, 0.0],
            max: [center[0] + half, center[1] + half, r.gen_range(0.5..2.5)],
            color: palette(&mut r),
        });
    }

    let margin = 6.0;
    let mut bounds = [f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY];
    for p in &pts {
        bounds[0] = bounds[0].min(p[0] - margin);
        bounds[1] = bounds[1].max(p[0] + margin);
        bounds[2] = bounds[2].min(p[1] - margin);
        bounds[3] = bounds[3].max(p[1] + margin);
    }
    World::from_parts(seed, difficulty, pts, half_width, obstacles, bounds, 10.0)
}

/// Knobs for the expert planner.
#[derive(Clone, Debug)]
pub struct ExpertConfig {
    pub frames: usize,
    pub speed: f64,
    pub stop_prob: f64,
    /// Stop duration range in seconds.
    pub stop_s: (f64, f64),
    /// Probability that a stop contains a spurious in-place heading swing.
    pub anomaly_prob: f64,
    pub clearance: f64,
    /// Fractional speed reduction while passing an obstacle.
    pub obstacle_slowdown: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            frames: 150,
            speed: NOMINAL_SPEED,
            stop_prob: 0.35,
            stop_s: (8.5, 10.0),
            anomaly_prob: 0.3,
            clearance: ROBOT_RADIUS,
            obstacle_slowdown: 0.45,
        }
    }
}

fn bell(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        0.0
    } else {
        (0.5 * PI * x).cos().powi(2)
    }
}

/// Plans a smooth collision-free expert run along the corridor at 5 Hz with the default settings.
pub fn plan_expert(world: &World, seed: u64) -> Result<Trajectory> {
    plan_expert_with(world, seed, &ExpertConfig::default())
}

pub fn plan_expert_with(world: &World, seed: u64, cfg: &ExpertConfig) -> Result<Trajectory> {
    let mut r = rng::stream(seed, &[0x99]);
    let corridor = &world.corridor;
    let detour_width = 3.5;
    let margin = 0.25;

    // Lateral detours around obstacles that reach into the corridor.
    let mut bumps = Vec::new();
    for o in &world.obstacles {
        let (s_b, lat) = corridor_coordinates(corridor, o.center());
        let need = o.footprint_radius() + cfg.clearance + margin - lat.abs();
        if need > 0.0 && lat.abs() < world.corridor_half_width + 1.0 {
            bumps.push((s_b, -lat.signum() * need * 1.1));
        }
    }
    let offset = |s: f64| -> f64 {
        bumps
            .iter()
            .map(|&(sb, a)| a * bell((s - sb) / detour_width))
            .sum()
    };

    // Dense path samples.
    let ds = 0.05;
    let n = (world.corridor_length() / ds).floor() as usize;
    let mut path = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = k as f64 * ds;
        let (c, t) = corridor_pose_at(corridor, s);
        let o = offset(s);
        path.push([c[0] - o * t[1], c[1] + o * t[0]]);
    }
    let mut cum = vec![0.0];
    for w in path.windows(2) {
        let l = (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1]);
        cum.push(cum.last().unwrap() + l);
    }
    let path_len = *cum.last().unwrap();
    // Slow down over the detour around each obstacle.
    let slow_width = 3.0;
    let slowdown = |sigma: f64| -> f64 {
        let s = cum.partition_point(|&c| c <= sigma) as f64 * ds;
        let d = bumps
            .iter()
            .map(|&(sb, _)| bell((s - sb) / slow_width))
            .fold(0.0, f64::max);
        1.0 - cfg.obstacle_slowdown * d
    };

    for p in &path {
        for o in &world.obstacles {
            let d = o.footprint_distance(*p);
            if d < cfg.clearance {
                return Err(Error::Infeasible(format!(
                    "path passes {d:.3} m from an obstacle (need {:.3})",
                    cfg.clearance
                )));
            }
        }
    }

    // Speed profile with an optional stop.
    let dt = 1.0 / RATE_HZ;
    let duration = cfg.frames as f64 * dt;
    let stop = if r.gen_bool(cfg.stop_prob) {
        let len = r.gen_range(cfg.stop_s.0..cfg.stop_s.1);
        let start = r.gen_range(4.0..(duration - len - 4.0).max(4.5));
        Some((start, len, r.gen_bool(cfg.anomaly_prob), if r.gen_bool(0.5) { 1.0 } else { -1.0 }))
    } else {
        None
    };
    let ramp = 1.0;
    let speed_at = |t: f64| -> f64 {
        match stop {
            Some((start, len, _, _)) => {
                let end = start + len;
                if t < start - ramp || t > end + ramp {
                    cfg.speed
                } else if t < start {
                    cfg.speed * (start - t) / ramp
                } else if t <= end {
                    0.0
                } else {
                    cfg.speed * (t - end) / ramp
                }
            }
            None => cfg.speed,
        }
    };

    let heading_at = |sigma: f64| -> f64 {
        let i = cum.partition_point(|&c| c <= sigma).clamp(1, path.len() - 1);
        let a = path[i - 1];
        let b = path[i];
        (b[1] - a[1]).atan2(b[0] - a[0])
    };
    let point_at = |sigma: f64| -> [f64; 2] {
        let i = cum.partition_point(|&c| c <= sigma).clamp(1, path.len() - 1);
        let (a, b) = (path[i - 1], path[i]);
        let l = cum[i] - cum[i - 1];
        let f = if l > 0.0 { ((sigma - cum[i - 1]) / l).clamp(0.0, 1.0) } else { 0.0 };
        [a[0] + f * (b[0] - a[0]), a[1] + f * (b[1] - a[1])]
    };

    let substeps = 20;
    let mut sigma = 0.0;
    let mut poses = Vec::with_capacity(cfg.frames);
    for k in 0..cfg.frames {
        let t = k as f64 * dt;
        let p = point_at(sigma);
        // Heading from a short look-ahead chord keeps it smooth along the dense path.
        let mut psi = heading_at(sigma + 0.1);
        if let Some((start, len, true, sign)) = stop {
            // Spurious sensor yaw: 1 rad/s out and back while standing.
            let mid = start + 0.5 * len;
            let swing = 1.6;
            if (t - mid).abs() < swing {
                psi += sign * (swing - (t - mid).abs());
            }
        }
        poses.push(Pose::new(p[0], p[1], wrap_angle(psi)));
        for j in 0..substeps {
            let tm = t + (j as f64 + 0.5) * dt / substeps as f64;
            sigma += speed_at(tm) * slowdown(sigma) * dt / substeps as f64;
        }
        if sigma > path_len - 0.2 {
            return Err(Error::Infeasible("corridor too short for the requested duration".into()));
        }
    }
    Trajectory::new(poses, RATE_HZ, WORLD_FRAME)
}

#[derive(Clone, Copy, Debug)]
enum Surface {
    Ground,
    Sky,
    Facade(u8),
    Box(usize, u8),
}

/// Nearest hit along `o + t d` with `t > 0`.
fn cast(world: &World, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(f64, Surface)> {
    let mut best: Option<(f64, Surface)> = None;
    let mut consider = |t: f64, s: Surface| {
        if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, s));
        }
    };
    if d.z < 0.0 {
        consider(-o.z / d.z, Surface::Ground);
    }
    if d.z > 0.0 {
        consider((world.ceiling - o.z) / d.z, Surface::Sky);
    }
    let b = world.bounds;
    if d.x < 0.0 {
        consider((b[0] - o.x) / d.x, Surface::Facade(0));
    }
    if d.x > 0.0 {
        consider((b[1] - o.x) / d.x, Surface::Facade(1));
    }
    if d.y < 0.0 {
        consider((b[2] - o.y) / d.y, Surface::Facade(2));
    }
    if d.y > 0.0 {
        consider((b[3] - o.y) / d.y, Surface::Facade(3));
    }
    for (i, bx) in world.obstacles.iter().enumerate() {
        let mut t_near = f64::NEG_INFINITY;
        let mut t_far = f64::INFINITY;
        let mut axis = 0u8;
        let mut miss = false;
        for k in 0..3 {
            let (ok, dk) = (o[k], d[k]);
            if dk.abs() < 1e-15 {
                if ok < bx.min[k] || ok > bx.max[k] {
                    miss = true;
                    break;
                }
                continue;
            }
            let t1 = (bx.min[k] - ok) / dk;
            let t2 = (bx.max[k] - ok) / dk;
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_near {
                t_near = lo;
                axis = k as u8;
            }
            t_far = t_far.min(hi);
        }
        if !miss && t_near <= t_far && t_near > 0.0 {
            consider(t_near, Surface::Box(i, axis));
        }
    }
    best
}

fn shade(world: &World, hit: &Point3<f64>, surface: Surface) -> [f32; 3] {
    match surface {
        Surface::Ground => {
            let dist = world.corridor_distance(hit.x, hit.y);
            let hw = world.corridor_half_width;
            if dist <= hw {
                if dist > hw - 0.12 {
                    return [0.85, 0.85, 0.8];
                }
                let fx = hit.x - hit.x.floor();
                let fy = hit.y - hit.y.floor();
                if fx < 0.06 || fy < 0.06 {
                    return [0.38, 0.37, 0.36];
                }
                let v = 0.56 + 0.1 * hash01(hit.x.floor() as i64, hit.y.floor() as i64, world.seed) as f32;
                [v, v * 0.98, v * 0.95]
            } else {
                let n = hash01((hit.x * 2.0).floor() as i64, (hit.y * 2.0).floor() as i64, world.seed ^ 1);
                let g = (0.38 + 0.16 * n) as f32;
                [0.45 * g, g, 0.3 * g]
            }
        }
        Surface::Sky => [0.55, 0.7, 0.92],
        Surface::Facade(k) => {
            let along = if k < 2 { hit.y } else { hit.x };
            let bay = (along / 2.5).floor() as i64;
            let base = hash01(bay, k as i64, world.seed ^ 2) as f32;
            let window = hit.z > 1.5 && (hit.z % 3.0) > 1.2 && (along.rem_euclid(2.5)) > 0.6;
            let c = [0.5 + 0.35 * base, 0.35 + 0.25 * base, 0.3 + 0.2 * base];
            if window {
                [c[0] * 0.35, c[1] * 0.4, c[2] * 0.55]
            } else {
                c
            }
        }
        Surface::Box(i, axis) => {
            let f = [0.8f32, 0.65, 1.0][axis as usize];
            let c = world.obstacles[i].color;
            [c[0] * f, c[1] * f, c[2] * f]
        }
    }
}

/// Ray-cast render of the camera carried by a robot at `pose`. Depth is the
/// camera-frame z of the nearest surface hit.
pub fn render_frame(world: &World, cam: &CameraModel, pose: &Pose) -> (RgbFrame, DepthFrame) {
    let world_from_cam = compose_rigid(pose, &cam.extrinsic).inverse();
    let origin = world_from_cam * Point3::origin();
    let mut rgb = Vec::with_capacity(cam.pixel_count());
    let mut depth = Vec::with_capacity(cam.pixel_count());
    for v in 0..cam.height {
        for u in 0..cam.width {
            let d = crate::camgeom::pixel_ray_world(cam, &world_from_cam, u as f64, v as f64);
            match cast(world, &origin, &d) {
                Some((t, s)) => {
                    let hit = origin + d * t;
                    rgb.push(shade(world, &hit, s));
                    depth.push(t);
                }
                None => {
                    rgb.push([0.0; 3]);
                    depth.push(0.0);
                }
            }
        }
    }
    (
        RgbFrame {
            width: cam.width,
            height: cam.height,
            data: rgb,
        },
        DepthFrame {
            width: cam.width,
            height: cam.height,
            values: depth,
        },
    )
}

/// Generates a world, its expert run and renders every frame.
pub fn generate_scenario(
    seed: u64,
    difficulty: f64,
    camera: &CameraModel,
    expert_cfg: &ExpertConfig,
) -> Result<ScenarioData> {
    // Resample the world a few times if the planner cannot clear an obstacle.
    let mut last_err = None;
    for attempt in 0..8u64 {
        let wseed = rng::derive_seed(seed, &[attempt]);
        let world = generate_world(wseed, difficulty);
        match plan_expert_with(&world, seed, expert_cfg) {
            Ok(expert) => {
                let rendered: Vec<(RgbFrame, DepthFrame)> = expert
                    .poses
                    .par_iter()
                    .map(|p| render_frame(&world, camera, p))
                    .collect();
                let (frames, depths) = rendered
                    .into_iter()
                    .map(|(r, d)| (Arc::new(r), Arc::new(d)))
                    .unzip();
                return Ok(ScenarioData {
                    id: format!("scn{seed:06}"),
                    scenario: Scenario {
                        world,
                        expert,
                        camera: camera.clone(),
                    },
                    frames,
                    depths,
                });
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap())
}

/// What a driving policy sees at one control step.
pub struct Observation<'a> {
    /// The `T_h` history frames followed by the current view.
    pub frames: &'a [Arc<RgbFrame>],
    pub goal_xy: [f64; 2],
    pub camera: &'a CameraModel,
    pub step: usize,
    /// Ground-truth world pose, exposed for scripted reference policies.
    pub pose: Pose,
}

pub trait DrivingPolicy {
    /// Ego-frame waypoints at the control rate, starting with the current
    /// pose. Only the step to the second waypoint is executed.
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Vec<Pose>>;
}

#[derive(Clone, Debug)]
pub struct RolloutConfig {
    pub controller_step_s: f64,
    pub max_steps: usize,
    /// History frames before the current one.
    pub history: usize,
    /// Goal look-ahead along the expert path, in expert frames.
    pub goal_lookahead: usize,
    pub max_speed: f64,
    pub goal_radius: f64,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            controller_step_s: 1.0 / RATE_HZ,
            max_steps: 200,
            history: 16,
            goal_lookahead: 10,
            max_speed: 1.5,
            goal_radius: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutStats {
    pub max_lateral: f64,
    pub mean_lateral: f64,
    pub goal_reached: bool,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct RolloutTrace {
    pub poses: Vec<Pose>,
    pub stats: RolloutStats,
}

/// Unicycle step of duration `dt` with speed `v` and yaw rate `omega`.
pub fn unicycle_step(p: &Pose, v: f64, omega: f64, dt: f64) -> Pose {
    if omega.abs() < 1e-9 {
        return Pose::new(p.x + v * dt * p.psi.cos(), p.y + v * dt * p.psi.sin(), p.psi);
    }
    let psi2 = p.psi + omega * dt;
    Pose::new(
        p.x + v / omega * (psi2.sin() - p.psi.sin()),
        p.y - v / omega * (psi2.cos() - p.psi.cos()),
        psi2,
    )
}

/// Speed and yaw rate of the circular arc from the ego origin through `target`,
/// traversed in `dt`. The speed is clamped, keeping the arc's curvature.
pub fn arc_command(target: [f64; 2], dt: f64, max_speed: f64) -> (f64, f64) {
    let chord = target[0].hypot(target[1]);
    if chord < 1e-12 {
        return (0.0, 0.0);
    }
    let turn = 2.0 * target[1].atan2(target[0]);
    let arc = if turn.abs() < 1e-9 {
        chord
    } else {
        chord * (0.5 * turn) / (0.5 * turn).sin()
    };
    let v = (arc / dt).min(max_speed);
    (v, turn / arc * v)
}

/// Deviation statistics of an executed trace against the expert path. The
/// first pose (the shared start) is excluded.
pub fn deviation_stats(trace: &[Pose], expert: &Trajectory, goal_radius: f64) -> RolloutStats {
    let devs: Vec<f64> = trace[1..]
        .iter()
        .map(|p| distance_to_polyline(p.xy(), &expert.poses))
        .collect();
    let goal = expert.last();
    RolloutStats {
        max_lateral: devs.iter().cloned().fold(0.0, f64::max),
        mean_lateral: if devs.is_empty() { 0.0 } else { devs.iter().sum::<f64>() / devs.len() as f64 },
        goal_reached: trace.iter().any(|p| p.distance(goal) <= goal_radius),
        steps: devs.len(),
    }
}

/// Closed-loop rollout: render, plan, execute the first waypoint with a
/// unicycle step, repeat until the expert endpoint is reached or `max_steps`.
pub fn rollout(
    policy: &mut dyn DrivingPolicy,
    scenario: &Scenario,
    cfg: &RolloutConfig,
) -> Result<RolloutTrace> {
    let expert = &scenario.expert;
    let cam = &scenario.camera;
    if expert.len() < cfg.history + 2 {
        return Err(Error::TooShort(format!(
            "expert has {} poses, rollout needs {}",
            expert.len(),
            cfg.history + 2
        )));
    }
    let start = cfg.history;
    let mut frames: Vec<Arc<RgbFrame>> = expert.poses[..=start]
        .iter()
        .map(|p| Arc::new(render_frame(&scenario.world, cam, p).0))
        .collect();
    let mut pose = expert.poses[start];
    let mut trace = vec![pose];
    let goal_end = *expert.last();
    let dt = cfg.controller_step_s;
    for step in 0..cfg.max_steps {
        if pose.distance(&goal_end) <= cfg.goal_radius {
            break;
        }
        // Route goal: a fixed look-ahead past the closest expert pose.
        let nearest = expert
            .poses
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.distance(&pose).total_cmp(&b.1.distance(&pose)))
            .map(|(i, _)| i)
            .unwrap();
        let goal_idx = (nearest + cfg.goal_lookahead).min(expert.len() - 1);
        let goal_xy = Pose::point_relative_to(expert.poses[goal_idx].xy(), &pose);
        let obs = Observation {
            frames: &frames,
            goal_xy,
            camera: cam,
            step,
            pose,
        };
        let plan = policy.plan(&obs)?;
        let w = plan.get(1).copied().unwrap_or(Pose::IDENTITY);
        let (v, omega) = arc_command(w.xy(), dt, cfg.max_speed);
        pose = unicycle_step(&pose, v, omega, dt);
        trace.push(pose);
        frames.remove(0);
        frames.push(Arc::new(render_frame(&scenario.world, cam, &pose).0));
    }
    let stats = deviation_stats(&trace, expert, cfg.goal_radius);
    Ok(RolloutTrace {
        poses: trace,
        stats,
    })
}

/// Steers toward the expert pose one step ahead of the current step.
pub struct ExpertReplayPolicy {
    pub expert: Trajectory,
    pub offset: usize,
}

impl DrivingPolicy for ExpertReplayPolicy {
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Vec<Pose>> {
        let i = (self.offset + obs.step).min(self.expert.len() - 1);
        let j = (i + 1).min(self.expert.len() - 1);
        Ok(vec![Pose::IDENTITY, self.expert.poses[j].relative_to(&obs.pose)])
    }
}

/// Never moves.
pub struct StandStillPolicy;

impl DrivingPolicy for StandStillPolicy {
    fn plan(&mut self, _obs: &Observation<'_>) -> Result<Vec<Pose>> {
        Ok(vec![Pose::IDENTITY, Pose::IDENTITY])
    }
}

/// Writes a scenario bundle: `world.txt`, `traj.log`, `camera.txt`,
/// `frames/NNNN.ppm` + `frames/NNNN.mdpt` and a `manifest.txt`.
pub fn write_bundle(data: &ScenarioData, dir: &Path) -> Result<()> {
    let frames_dir = dir.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;
    let world_path = dir.join("world.txt");
    std::fs::write(&world_path, data.scenario.world.to_text()).map_err(|e| Error::io(&world_path, e))?;
    crate::trajcore::TrajectoryLog::from_trajectory(&data.scenario.expert).write(&dir.join("traj.log"))?;
    write_camera(&data.scenario.camera, &dir.join("camera.txt"))?;
    let mut manifest = format!("#SCENARIO v1 id={} frames={}\n", data.id, data.frames.len());
    for (i, (rgb, depth)) in data.frames.iter().zip(&data.depths).enumerate() {
        let img = format!("frames/{i:04}.ppm");
        let dep = format!("frames/{i:04}.mdpt");
        rgb.write_ppm(&dir.join(&img))?;
        depth.write(&dir.join(&dep))?;
        let _ = writeln!(manifest, "{i} {img} {dep}");
    }
    let mpath = dir.join("manifest.txt");
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

/// `#CAM v1` followed by the 16-value camera feature vector.
pub fn write_camera(cam: &CameraModel, path: &Path) -> Result<()> {
    let line = cam.feature_vector().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    std::fs::write(path, format!("#CAM v1\n{line}\n")).map_err(|e| Error::io(path, e))
}

pub fn read_camera(path: &Path) -> Result<CameraModel> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let line = text
        .lines()
        .find(|l| !l.starts_with('#') && !l.trim().is_empty())
        .ok_or_else(|| Error::format(&origin, "missing camera record"))?;
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format(&origin, e.to_string()))?;
    if v.len() != 16 {
        return Err(Error::format(&origin, format!("expected 16 camera values, got {}", v.len())));
    }
    CameraModel::new(
        v[0],
        v[1],
        v[2],
        v[3],
        v[4] as usize,
        v[5] as usize,
        crate::camgeom::Extrinsic {
            translation: [v[6], v[7], v[8]],
            yaw: v[9],
            pitch: v[10],
            roll: v[11],
        },
    )
}

pub fn read_bundle(dir: &Path) -> Result<ScenarioData> {
    let wpath = dir.join("world.txt");
    let wtext = std::fs::read_to_string(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let world = World::parse(&wtext, &wpath.display().to_string())?;
    let expert = crate::trajcore::TrajectoryLog::read(&dir.join("traj.log"))?.trajectory()?;
    let camera = read_camera(&dir.join("camera.txt"))?;
    let mpath = dir.join("manifest.txt");
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let origin = mpath.display().to_string();
    let mut lines = mtext.lines();
    let header = lines.next().ok_or_else(|| Error::format(&origin, "empty manifest"))?;
    let id = header
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("id="))
        .ok_or_else(|| Error::format(&origin, "missing id"))?
        .to_string();
    let mut frames = Vec::new();
    let mut depths = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(Error::format(&origin, format!("bad record `{line}`")));
        }
        frames.push(Arc::new(RgbFrame::read_ppm(&dir.join(parts[1]))?));
        depths.push(Arc::new(DepthFrame::read(&dir.join(parts[2]))?));
    }
    if frames.len() != expert.len() {
        return Err(Error::format(
            &origin,
            format!("{} frames for {} poses", frames.len(), expert.len()),
        ));
    }
    Ok(ScenarioData {
        id,
        scenario: Scenario {
            world,
            expert,
            camera,
        },
        frames,
        depths,
    })
}
