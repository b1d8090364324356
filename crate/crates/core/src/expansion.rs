//! Corrective-behavior expansion and photometric augmentation.
//!
//! A recorded window is pushed off its path by a sine-shaped drift, the
//! history frames are re-rendered from the drifted poses out of each frame's
//! own colored point cloud, and the label becomes a recovery trajectory that
//! rejoins the recorded path by the end of the horizon.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;

use crate::camgeom::{
    pose_to_rigid, splat_render, unproject_clipped, DepthFrame, RgbFrame, DEFAULT_D_MAX,
    DEFAULT_SPLAT_PX,
};
use crate::curation::{Provenance, TrainingSample};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajcore::{encode_goal, transform_to_ego, wrap_angle, Pose, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Lateral,
    Longitudinal,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Lateral => "lateral",
            Direction::Longitudinal => "longitudinal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lateral" => Some(Direction::Lateral),
            "longitudinal" => Some(Direction::Longitudinal),
            _ => None,
        }
    }
}

/// `values[τ] = alpha·sin(π·τ/length)`; `side` (±1) picks left/right or
/// ahead/behind.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationProfile {
    pub alpha: f64,
    pub length: usize,
    pub direction: Direction,
    pub side: f64,
    pub values: Vec<f64>,
}

pub fn perturbation_profile(alpha: f64, t_h: usize, t: usize, direction: Direction) -> PerturbationProfile {
    let length = t_h + t;
    PerturbationProfile {
        alpha,
        length,
        direction,
        side: 1.0,
        values: (0..length)
            .map(|tau| alpha * (PI * tau as f64 / length as f64).sin())
            .collect(),
    }
}

/// Unit tangent of the path at `i` by central differences, falling back to
/// one-sided differences and finally to the heading on stationary stretches.
fn path_tangent(poses: &[Pose], i: usize) -> [f64; 2] {
    let n = poses.len();
    let candidates = [
        (i.saturating_sub(1), (i + 1).min(n - 1)),
        (i, (i + 1).min(n - 1)),
        (i.saturating_sub(1), i),
    ];
    for (a, b) in candidates {
        let dx = poses[b].x - poses[a].x;
        let dy = poses[b].y - poses[a].y;
        let l = dx.hypot(dy);
        if l > 1e-9 {
            return [dx / l, dy / l];
        }
    }
    [poses[i].psi.cos(), poses[i].psi.sin()]
}

/// Moves pose `i` by `disp[i]` along the path normal or tangent. Each heading
/// is rotated by the change in direction of its outgoing step, so a zero
/// displacement leaves the trajectory untouched; the last pose copies the
/// correction of its predecessor.
pub fn displace(world: &Trajectory, disp: &[f64], direction: Direction, side: f64) -> Result<Trajectory> {
    let n = world.len();
    if disp.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: disp.len(),
        });
    }
    let p = &world.poses;
    let moved: Vec<[f64; 2]> = (0..n)
        .map(|i| {
            let t = path_tangent(p, i);
            let u = match direction {
                Direction::Lateral => [-t[1], t[0]],
                Direction::Longitudinal => t,
            };
            let d = side * disp[i];
            [p[i].x + d * u[0], p[i].y + d * u[1]]
        })
        .collect();
    let mut corrections = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let (ox, oy) = (p[i + 1].x - p[i].x, p[i + 1].y - p[i].y);
        let (mx, my) = (moved[i + 1][0] - moved[i][0], moved[i + 1][1] - moved[i][1]);
        if ox.hypot(oy) > 1e-6 && mx.hypot(my) > 1e-6 {
            corrections[i] = wrap_angle(my.atan2(mx) - oy.atan2(ox));
        }
    }
    if n >= 2 {
        corrections[n - 1] = corrections[n - 2];
    }
    let poses = (0..n)
        .map(|i| Pose::new(moved[i][0], moved[i][1], p[i].psi + corrections[i]))
        .collect();
    Trajectory::new(poses, world.rate_hz, world.frame_id.clone())
}

pub fn perturb_trajectory(world: &Trajectory, profile: &PerturbationProfile) -> Result<Trajectory> {
    displace(world, &profile.values, profile.direction, profile.side)
}

/// Displacements for the corrective window: the profile through the current
/// index `t_h`, then the profile's tail stretched so that the last future
/// pose gets `Δ(T_h+T) = 0` and the recovery ends on the recorded path.
pub fn recovery_displacements(profile: &PerturbationProfile, t_h: usize) -> Vec<f64> {
    let l = profile.length;
    let mut d = profile.values.clone();
    if t_h + 1 < l {
        let span = (l - 1 - t_h) as f64;
        for (j, dj) in d.iter_mut().enumerate().skip(t_h + 1) {
            let tau = t_h as f64 + (j - t_h) as f64 * (l - t_h) as f64 / span;
            *dj = profile.alpha * (PI * tau / l as f64).sin();
        }
        d[l - 1] = 0.0;
    }
    d
}

#[derive(Clone, Debug)]
pub struct CorrectiveConfig {
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub p_lateral: f64,
    pub c_min: f64,
    pub splat_px: usize,
    pub d_max: f64,
}

impl Default for CorrectiveConfig {
    fn default() -> Self {
        CorrectiveConfig {
            alpha_min: 0.2,
            alpha_max: 1.0,
            p_lateral: 0.8,
            c_min: 0.6,
            splat_px: DEFAULT_SPLAT_PX,
            d_max: DEFAULT_D_MAX,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorrectivePair {
    pub source_id: String,
    pub alpha: f64,
    pub direction: Direction,
    pub side: f64,
    /// Re-rendered frames for indices `0..=T_h`.
    pub frames: Vec<Arc<RgbFrame>>,
    pub depths: Vec<Arc<DepthFrame>>,
    /// Poses the frames were rendered from.
    pub view_poses: Vec<Pose>,
    /// Drifted world window; index `T_h` is the perturbed current pose.
    pub window: Trajectory,
    /// Recovery supervision in the perturbed ego frame.
    pub recovery_future: Trajectory,
    pub goal_xy: [f64; 2],
    pub min_coverage: f64,
}

impl CorrectivePair {
    pub fn to_sample(&self, src: &TrainingSample) -> TrainingSample {
        let t_h = src.t_h();
        TrainingSample {
            id: format!("{}_c", src.id),
            source_id: src.id.clone(),
            provenance: Provenance::Corrective,
            history: self.window.slice(0..t_h),
            future: self.recovery_future.clone(),
            window: self.window.clone(),
            goal_world: src.goal_world,
            goal_xy: self.goal_xy,
            goal: encode_goal(self.goal_xy),
            camera: src.camera.clone(),
            frames: self.frames.clone(),
            depths: self.depths.clone(),
            frame_poses: self.view_poses.clone(),
            behavior: src.behavior,
            alpha: self.alpha,
            direction: Some(self.direction),
        }
    }
}

/// Builds one failure/recovery pair from an original sample.
pub fn synthesize_corrective_pair(
    sample: &TrainingSample,
    alpha: f64,
    direction: Direction,
    side: f64,
    cfg: &CorrectiveConfig,
) -> Result<CorrectivePair> {
    let t_h = sample.t_h();
    let t = sample.future.len();
    let l = t_h + t;
    if sample.window.len() != l {
        return Err(Error::LengthMismatch {
            expected: l,
            got: sample.window.len(),
        });
    }
    if sample.depths.len() != t_h + 1 || sample.frames.len() != t_h + 1 {
        return Err(Error::LengthMismatch {
            expected: t_h + 1,
            got: sample.depths.len().min(sample.frames.len()),
        });
    }
    let mut profile = perturbation_profile(alpha, t_h, t, direction);
    profile.side = side;
    let disp = recovery_displacements(&profile, t_h);
    let window = displace(&sample.window, &disp, direction, side)?;

    let cam = &sample.camera;
    let mut frames = Vec::with_capacity(t_h + 1);
    let mut depths = Vec::with_capacity(t_h + 1);
    let mut view_poses = Vec::with_capacity(t_h + 1);
    let mut min_coverage = 1.0f64;
    for j in 0..=t_h {
        // Apply the window's displacement at j to the pose the frame was captured from.
        let src = sample.frame_poses[j];
        let (o, m) = (sample.window.poses[j], window.poses[j]);
        let view = Pose::new(src.x + m.x - o.x, src.y + m.y - o.y, src.psi + wrap_angle(m.psi - o.psi));
        let cloud = unproject_clipped(&sample.depths[j], &sample.frames[j], cam, cfg.d_max)?
            .transformed(&pose_to_rigid(&src), crate::trajcore::WORLD_FRAME);
        let img = splat_render(&cloud, cam, &view, cfg.splat_px);
        let coverage = img.coverage_fraction();
        if coverage < cfg.c_min {
            return Err(Error::InsufficientCoverage {
                coverage,
                threshold: cfg.c_min,
            });
        }
        min_coverage = min_coverage.min(coverage);
        depths.push(Arc::new(DepthFrame {
            width: cam.width,
            height: cam.height,
            values: img.depth.clone(),
        }));
        frames.push(Arc::new(img.rgb));
        view_poses.push(view);
    }
    let current = window.poses[t_h];
    let recovery_future = transform_to_ego(&window.slice(t_h..l), &current);
    Ok(CorrectivePair {
        source_id: sample.id.clone(),
        alpha,
        direction,
        side,
        frames,
        depths,
        view_poses,
        window,
        recovery_future,
        goal_xy: Pose::point_relative_to(sample.goal_world, &current),
        min_coverage,
    })
}

/// Draws alpha, direction and side, then synthesizes the pair.
pub fn sample_corrective(sample: &TrainingSample, cfg: &CorrectiveConfig, rng: &mut Rng) -> Result<CorrectivePair> {
    let alpha = if cfg.alpha_max > cfg.alpha_min {
        rng.gen_range(cfg.alpha_min..cfg.alpha_max)
    } else {
        cfg.alpha_min
    };
    let direction = if rng.gen_bool(cfg.p_lateral.clamp(0.0, 1.0)) {
        Direction::Lateral
    } else {
        Direction::Longitudinal
    };
    let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    synthesize_corrective_pair(sample, alpha, direction, side, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelightParams {
    pub gain: f64,
    pub gamma: f64,
    pub tint: [f64; 3],
    pub strength_f: f64,
    pub strength_b: f64,
}

impl RelightParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gain > 0.0
            && self.gamma > 0.0
            && 0.0 <= self.strength_f
            && self.strength_f <= self.strength_b
            && self.strength_b <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid relight parameters {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct RelightConfig {
    pub gain: (f64, f64),
    pub gamma: (f64, f64),
    pub tint: (f64, f64),
    pub strength_f: f64,
    pub strength_b: f64,
    pub d_split: f64,
}

impl Default for RelightConfig {
    fn default() -> Self {
        RelightConfig {
            gain: (0.6, 1.4),
            gamma: (0.7, 1.5),
            tint: (0.8, 1.2),
            strength_f: 0.1,
            strength_b: 0.5,
            d_split: 8.0,
        }
    }
}

pub fn sample_relight_params(cfg: &RelightConfig, rng: &mut Rng) -> RelightParams {
    let mut draw = |r: (f64, f64)| if r.1 > r.0 { rng.gen_range(r.0..r.1) } else { r.0 };
    RelightParams {
        gain: draw(cfg.gain),
        gamma: draw(cfg.gamma),
        tint: [draw(cfg.tint), draw(cfg.tint), draw(cfg.tint)],
        strength_f: cfg.strength_f,
        strength_b: cfg.strength_b,
    }
}

/// Foreground mask (valid depth closer than `d_split`) and the two masked images.
pub fn split_foreground(rgb: &RgbFrame, depth: &DepthFrame, d_split: f64) -> Result<(Vec<bool>, RgbFrame, RgbFrame)> {
    if rgb.width != depth.width || rgb.height != depth.height {
        return Err(Error::DimensionMismatch(format!(
            "rgb {}x{} vs depth {}x{}",
            rgb.width, rgb.height, depth.width, depth.height
        )));
    }
    let mask: Vec<bool> = depth
        .values
        .iter()
        .map(|&d| d.is_finite() && d > 0.0 && d < d_split)
        .collect();
    let pick = |fg: bool| RgbFrame {
        width: rgb.width,
        height: rgb.height,
        data: rgb
            .data
            .iter()
            .zip(&mask)
            .map(|(c, &m)| if m == fg { *c } else { [0.0; 3] })
            .collect(),
    };
    let (f, b) = (pick(true), pick(false));
    Ok((mask, f, b))
}

fn relight_pixel(c: [f32; 3], p: &RelightParams, s: f64) -> [f32; 3] {
    let mut out = [0.0f32; 3];
    for k in 0..3 {
        let i = c[k] as f64;
        let lit = (p.tint[k] * p.gain * i.max(0.0).powf(p.gamma)).clamp(0.0, 1.0);
        out[k] = ((1.0 - s) * i + s * lit).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Foreground relit with `strength_f`, background with `strength_b`.
pub fn relight_blend(rgb: &RgbFrame, depth: &DepthFrame, params: &RelightParams, d_split: f64) -> Result<RgbFrame> {
    params.validate()?;
    let (mask, _, _) = split_foreground(rgb, depth, d_split)?;
    Ok(RgbFrame {
        width: rgb.width,
        height: rgb.height,
        data: rgb
            .data
            .iter()
            .zip(&mask)
            .map(|(c, &fg)| relight_pixel(*c, params, if fg { params.strength_f } else { params.strength_b }))
            .collect(),
    })
}

/// Relit copy of a sample; one parameter draw is shared by all its frames.
pub fn relight_sample(sample: &TrainingSample, cfg: &RelightConfig, rng: &mut Rng) -> Result<TrainingSample> {
    let params = sample_relight_params(cfg, rng);
    let frames = sample
        .frames
        .iter()
        .zip(&sample.depths)
        .map(|(f, d)| relight_blend(f, d, &params, cfg.d_split).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainingSample {
        id: format!("{}_r", sample.id),
        source_id: sample.id.clone(),
        provenance: Provenance::Relit,
        frames,
        ..sample.clone()
    })
}
