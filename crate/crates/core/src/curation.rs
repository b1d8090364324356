//! Turning recorded runs into training samples: behavior labels, balancing,
//! abnormal-segment filtering, goal definition and windowing.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;

use crate::camgeom::{CameraModel, DepthFrame, RgbFrame};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::trajcore::{
    encode_goal, resample_constant_velocity, transform_to_ego, wrap_angle, EgoState, GoalEncoding,
    Pose, Trajectory,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BehaviorLabel {
    Straight,
    TurnLeft,
    TurnRight,
    Stop,
}

impl BehaviorLabel {
    pub const ALL: [BehaviorLabel; 4] = [
        BehaviorLabel::Straight,
        BehaviorLabel::TurnLeft,
        BehaviorLabel::TurnRight,
        BehaviorLabel::Stop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BehaviorLabel::Straight => "straight",
            BehaviorLabel::TurnLeft => "left",
            BehaviorLabel::TurnRight => "right",
            BehaviorLabel::Stop => "stop",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == s)
    }
}

impl fmt::Display for BehaviorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    Corrective,
    Relit,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "original",
            Provenance::Corrective => "corrective",
            Provenance::Relit => "relit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Provenance::Original, Provenance::Corrective, Provenance::Relit]
            .into_iter()
            .find(|p| p.as_str() == s)
    }
}

/// Thresholds and windowing knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct CurationConfig {
    pub v_stop: f64,
    pub theta_turn: f64,
    pub omega_max: f64,
    pub v_back: f64,
    pub n_abn: usize,
    pub straight_cap: f64,
    pub t_h: usize,
    pub t: usize,
    pub stride: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            v_stop: 0.1,
            theta_turn: std::f64::consts::PI / 6.0,
            omega_max: 0.5,
            v_back: 0.05,
            n_abn: 5,
            straight_cap: 0.5,
            t_h: 16,
            t: 40,
            stride: 4,
        }
    }
}

/// A recorded run: world-frame poses with the frames captured at each pose.
#[derive(Clone, Debug)]
pub struct RecordedLog {
    pub id: String,
    pub trajectory: Trajectory,
    pub frames: Vec<Arc<RgbFrame>>,
    pub depths: Vec<Arc<DepthFrame>>,
    pub camera: CameraModel,
}

/// One training window.
///
/// The window holds `T_h + T` world poses after constant-velocity
/// resampling. Index `T_h` is the current pose: the history is the `T_h`
/// poses before it and the future is the `T` poses from it onward, expressed
/// in its ego frame. Frames cover indices `0..=T_h`; the last one is the
/// current view. `frame_poses` are the recorded poses the frames were
/// captured from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub source_id: String,
    pub provenance: Provenance,
    pub window: Trajectory,
    pub history: Trajectory,
    pub future: Trajectory,
    pub goal_world: [f64; 2],
    pub goal_xy: [f64; 2],
    pub goal: GoalEncoding,
    pub camera: CameraModel,
    pub frames: Vec<Arc<RgbFrame>>,
    pub depths: Vec<Arc<DepthFrame>>,
    pub frame_poses: Vec<Pose>,
    pub behavior: BehaviorLabel,
    pub alpha: f64,
    pub direction: Option<crate::expansion::Direction>,
}

impl TrainingSample {
    pub fn t_h(&self) -> usize {
        self.history.len()
    }

    pub fn current_pose(&self) -> &Pose {
        &self.window.poses[self.t_h()]
    }
}

pub fn classify_behavior(segment: &Trajectory, cfg: &CurationConfig) -> BehaviorLabel {
    let n = segment.len();
    if n < 2 {
        return BehaviorLabel::Stop;
    }
    let duration = (n - 1) as f64 * segment.dt();
    let mean_speed = segment.arc_length() / duration;
    if mean_speed < cfg.v_stop {
        return BehaviorLabel::Stop;
    }
    // Net heading change, accumulated step by step so it can exceed pi.
    let turn: f64 = segment
        .poses
        .windows(2)
        .map(|w| wrap_angle(w[1].psi - w[0].psi))
        .sum();
    if turn > cfg.theta_turn {
        BehaviorLabel::TurnLeft
    } else if turn < -cfg.theta_turn {
        BehaviorLabel::TurnRight
    } else {
        BehaviorLabel::Straight
    }
}

/// Indices kept after capping the Straight share at `cap`. Every other label
/// is kept; the surviving Straight indices are a seeded random subset.
pub fn balance_by_behavior(labels: &[BehaviorLabel], cap: f64, seed: u64) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }
    let straight: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == BehaviorLabel::Straight)
        .collect();
    let n_other = labels.len() - straight.len();
    let allowed = if cap >= 1.0 {
        straight.len()
    } else {
        ((cap.max(0.0) * n_other as f64 / (1.0 - cap.max(0.0))) + 1e-9).floor() as usize
    };
    let mut keep: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] != BehaviorLabel::Straight)
        .collect();
    if allowed >= straight.len() {
        keep.extend(&straight);
    } else {
        let mut r = rng::stream(seed, &[0xba1]);
        keep.extend(
            sample_indices(&mut r, straight.len(), allowed)
                .into_iter()
                .map(|j| straight[j]),
        );
    }
    keep.sort_unstable();
    Ok(keep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DropReason {
    RotationWhileStill,
    Backward,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::RotationWhileStill => "rotation-while-still",
            DropReason::Backward => "backward",
        }
    }
}

/// `None` keeps the segment.
pub fn filter_abnormal(states: &[EgoState], cfg: &CurationConfig) -> Option<DropReason> {
    let longest_run = |pred: &dyn Fn(&EgoState) -> bool| -> usize {
        let mut best = 0;
        let mut run = 0;
        for s in states {
            run = if pred(s) { run + 1 } else { 0 };
            best = best.max(run);
        }
        best
    };
    let n = cfg.n_abn.max(1);
    if longest_run(&|s| s.v.abs() < cfg.v_stop && s.omega.abs() > cfg.omega_max) >= n {
        return Some(DropReason::RotationWhileStill);
    }
    if longest_run(&|s| s.v < -cfg.v_back) >= n {
        return Some(DropReason::Backward);
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GoalMode {
    RandomAhead,
    SegmentEndpoint,
}

/// World position of the pose `k` frames after `t`, clamped to the end.
pub fn goal_ahead(traj: &Trajectory, t: usize, k: usize) -> [f64; 2] {
    traj.poses[(t + k).min(traj.len() - 1)].xy()
}

/// First endpoint, strictly ahead of `t` in arc length, of `n` equal-arc
/// segments of `traj`. `None` when nothing lies ahead.
pub fn segment_endpoint_goal(traj: &Trajectory, t: usize, n: usize) -> Option<[f64; 2]> {
    let cum = traj.cumulative_arc_length();
    let total = *cum.last().unwrap();
    let here = cum[t];
    (1..=n)
        .map(|j| total * j as f64 / n as f64)
        .find(|&s| s > here)
        .map(|s| traj.point_at_arc_length(s))
}

/// Goal in the ego frame of pose `t`. Falls back to `RandomAhead` when the
/// path ahead has no length.
pub fn define_goal(traj: &Trajectory, t: usize, mode: GoalMode, rng: &mut Rng) -> Result<[f64; 2]> {
    Ok(Pose::point_relative_to(define_goal_world(traj, t, mode, rng)?, &traj.poses[t]))
}

pub fn define_goal_world(traj: &Trajectory, t: usize, mode: GoalMode, rng: &mut Rng) -> Result<[f64; 2]> {
    if t >= traj.len() || traj.len() - 1 - t < 5 {
        return Err(Error::TooShort(format!(
            "goal at index {t} needs 5 frames ahead in a trajectory of {}",
            traj.len()
        )));
    }
    let random_ahead = |rng: &mut Rng| goal_ahead(traj, t, rng.gen_range(5..=20));
    Ok(match mode {
        GoalMode::RandomAhead => random_ahead(rng),
        GoalMode::SegmentEndpoint => {
            let n = rng.gen_range(3..=7);
            match segment_endpoint_goal(traj, t, n) {
                Some(g) => g,
                None => random_ahead(rng),
            }
        }
    })
}

pub fn window_count(len: usize, window: usize, stride: usize) -> usize {
    if len < window || stride == 0 {
        0
    } else {
        (len - window) / stride + 1
    }
}

/// Sliding windows over a log. Goals use a per-window random stream derived
/// from `(seed, log id, window index)`.
pub fn build_samples(log: &RecordedLog, cfg: &CurationConfig, seed: u64) -> Result<Vec<TrainingSample>> {
    let l = cfg.t_h + cfg.t;
    let len = log.trajectory.len();
    if cfg.t < 6 || cfg.t_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "windows need T_h >= 1 and T >= 6, got T_h={} T={}",
            cfg.t_h, cfg.t
        )));
    }
    if len < l {
        return Err(Error::TooShort(format!("log {} has {len} poses, windows need {l}", log.id)));
    }
    if log.frames.len() != len || log.depths.len() != len {
        return Err(Error::LengthMismatch {
            expected: len,
            got: log.frames.len().min(log.depths.len()),
        });
    }
    let stride = cfg.stride.max(1);
    let n = window_count(len, l, stride);
    let log_hash = rng::hash_str(&log.id);
    (0..n)
        .map(|w| {
            let start = w * stride;
            let raw = log.trajectory.slice(start..start + l);
            let window = resample_constant_velocity(&raw, l)?;
            let current = window.poses[cfg.t_h];
            let future = transform_to_ego(&window.slice(cfg.t_h..l), &current);
            let behavior = classify_behavior(&raw.slice(cfg.t_h..l), cfg);
            let mut r = rng::stream(seed, &[log_hash, w as u64]);
            let mode = if r.gen_bool(0.5) {
                GoalMode::RandomAhead
            } else {
                GoalMode::SegmentEndpoint
            };
            let goal_world = define_goal_world(&window, cfg.t_h, mode, &mut r)?;
            let goal_xy = Pose::point_relative_to(goal_world, &current);
            let frames = start..=start + cfg.t_h;
            Ok(TrainingSample {
                id: format!("{}_w{w:03}", log.id),
                source_id: log.id.clone(),
                provenance: Provenance::Original,
                history: window.slice(0..cfg.t_h),
                future,
                window,
                goal_world,
                goal_xy,
                goal: encode_goal(goal_xy),
                camera: log.camera.clone(),
                frames: log.frames[frames.clone()].to_vec(),
                depths: log.depths[frames.clone()].to_vec(),
                frame_poses: log.trajectory.poses[frames].to_vec(),
                behavior,
                alpha: 0.0,
                direction: None,
            })
        })
        .collect()
}

/// Counts of what curation kept and dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurationReport {
    pub logs: usize,
    pub windows: usize,
    pub too_short: usize,
    pub dropped: BTreeMap<DropReason, usize>,
    pub balanced_out: usize,
    pub kept: BTreeMap<BehaviorLabel, usize>,
}

impl CurationReport {
    pub fn kept_total(&self) -> usize {
        self.kept.values().sum()
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("logs             {:>6}\n", self.logs));
        s.push_str(&format!("logs too short   {:>6}\n", self.too_short));
        s.push_str(&format!("windows          {:>6}\n", self.windows));
        for r in [DropReason::RotationWhileStill, DropReason::Backward] {
            s.push_str(&format!(
                "dropped {:<20} {:>6}\n",
                r.as_str(),
                self.dropped.get(&r).copied().unwrap_or(0)
            ));
        }
        s.push_str(&format!("balanced out     {:>6}\n", self.balanced_out));
        for b in BehaviorLabel::ALL {
            s.push_str(&format!(
                "kept {:<10} {:>6}\n",
                b.as_str(),
                self.kept.get(&b).copied().unwrap_or(0)
            ));
        }
        s.push_str(&format!("kept total       {:>6}\n", self.kept_total()));
        s
    }
}

/// Windows every log, drops abnormal windows (judged on the recorded poses)
/// and balances behaviors. Logs shorter than one window are counted, not fatal.
pub fn curate(logs: &[RecordedLog], cfg: &CurationConfig, seed: u64) -> Result<(Vec<TrainingSample>, CurationReport)> {
    if logs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut report = CurationReport {
        logs: logs.len(),
        ..Default::default()
    };
    let l = cfg.t_h + cfg.t;
    let mut candidates = Vec::new();
    for log in logs {
        let samples = match build_samples(log, cfg, seed) {
            Ok(s) => s,
            Err(Error::TooShort(msg)) => {
                log::warn!("{msg}");
                report.too_short += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let stride = cfg.stride.max(1);
        for (w, s) in samples.into_iter().enumerate() {
            report.windows += 1;
            let raw = log.trajectory.slice(w * stride..w * stride + l);
            match filter_abnormal(&raw.ego_states(), cfg) {
                Some(reason) => *report.dropped.entry(reason).or_default() += 1,
                None => candidates.push(s),
            }
        }
    }
    if candidates.is_empty() {
        return Ok((candidates, report));
    }
    let labels: Vec<BehaviorLabel> = candidates.iter().map(|s| s.behavior).collect();
    let keep = balance_by_behavior(&labels, cfg.straight_cap, seed)?;
    report.balanced_out = candidates.len() - keep.len();
    let mut kept = Vec::with_capacity(keep.len());
    let mut slots: Vec<Option<TrainingSample>> = candidates.into_iter().map(Some).collect();
    for i in keep {
        let s = slots[i].take().unwrap();
        *report.kept.entry(s.behavior).or_default() += 1;
        kept.push(s);
    }
    Ok((kept, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajcore::WORLD_FRAME;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn traj(poses: Vec<Pose>) -> Trajectory {
        Trajectory::new(poses, 5.0, WORLD_FRAME).unwrap()
    }

    fn straight(n: usize, speed: f64) -> Trajectory {
        traj((0..n).map(|i| Pose::new(i as f64 * speed * 0.2, 0.0, 0.0)).collect())
    }

    fn arc(n: usize, radius: f64, total_turn: f64) -> Trajectory {
        traj(
            (0..n)
                .map(|i| {
                    let th = total_turn * i as f64 / (n - 1) as f64;
                    Pose::new(radius * th.sin(), radius * (1.0 - th.cos()), th)
                })
                .collect(),
        )
    }

    #[test]
    fn classify_examples() {
        let cfg = CurationConfig::default();
        assert_eq!(classify_behavior(&traj(vec![Pose::new(1.0, 2.0, 0.3); 10]), &cfg), BehaviorLabel::Stop);
        assert_eq!(classify_behavior(&straight(20, 1.0), &cfg), BehaviorLabel::Straight);
        assert_eq!(classify_behavior(&arc(20, 3.0, PI / 2.0), &cfg), BehaviorLabel::TurnLeft);
        assert_eq!(classify_behavior(&arc(20, -3.0, -PI / 2.0), &cfg), BehaviorLabel::TurnRight);
    }

    #[test]
    fn balance_examples() {
        let mut labels = vec![BehaviorLabel::Straight; 100];
        labels.extend(vec![BehaviorLabel::TurnLeft; 100]);
        let keep = balance_by_behavior(&labels, 0.5, 3).unwrap();
        let n_straight = keep.iter().filter(|&&i| labels[i] == BehaviorLabel::Straight).count();
        assert_eq!(keep.len() - n_straight, 100);
        assert!(n_straight <= 100 && n_straight as f64 / keep.len() as f64 <= 0.5);
        assert_eq!(keep, balance_by_behavior(&labels, 0.5, 3).unwrap());

        let turns = vec![BehaviorLabel::TurnRight, BehaviorLabel::Stop, BehaviorLabel::TurnLeft];
        assert_eq!(balance_by_behavior(&turns, 0.5, 1).unwrap(), vec![0, 1, 2]);
        assert!(matches!(balance_by_behavior(&[], 0.5, 1), Err(Error::EmptyInput)));
    }

    #[test]
    fn abnormal_examples() {
        let cfg = CurationConfig::default();
        assert_eq!(filter_abnormal(&straight(20, 1.0).ego_states(), &cfg), None);
        let spin = traj((0..20).map(|i| Pose::new(0.0, 0.0, 0.2 * i as f64)).collect());
        assert_eq!(filter_abnormal(&spin.ego_states(), &cfg), Some(DropReason::RotationWhileStill));
        let back = traj((0..20).map(|i| Pose::new(-0.1 * i as f64, 0.0, 0.0)).collect());
        let states = back.ego_states();
        assert!((states[3].v + 0.5).abs() < 1e-12);
        assert_eq!(filter_abnormal(&states, &cfg), Some(DropReason::Backward));
    }

    #[test]
    fn goal_examples() {
        let t = straight(60, 1.0);
        let g = goal_ahead(&t, 10, 5);
        let ego = Pose::point_relative_to(g, &t.poses[10]);
        assert!((ego[0] - 1.0).abs() < 1e-12 && ego[1].abs() < 1e-12);
        // 4 segments over 59 steps of 0.2 m; index 0 sits at s=0, so the first endpoint is ahead.
        let total = t.arc_length();
        let g = segment_endpoint_goal(&t, 0, 4).unwrap();
        assert!((g[0] - total / 4.0).abs() < 1e-9);
        // Sitting exactly on an endpoint returns the next one.
        let t2 = straight(41, 1.0);
        let on = segment_endpoint_goal(&t2, 10, 4).unwrap();
        assert!((on[0] - 4.0).abs() < 1e-9, "{on:?}");
        let mut a = rng::stream(4, &[]);
        let mut b = rng::stream(4, &[]);
        for mode in [GoalMode::RandomAhead, GoalMode::SegmentEndpoint] {
            assert_eq!(define_goal(&t, 3, mode, &mut a).unwrap(), define_goal(&t, 3, mode, &mut b).unwrap());
        }
        assert!(matches!(define_goal(&t, 56, GoalMode::RandomAhead, &mut a), Err(Error::TooShort(_))));
    }

    fn dummy_log(traj: Trajectory) -> RecordedLog {
        let cam = CameraModel::forward_facing(4, 1.2, 0.8, 0.2);
        let f = Arc::new(RgbFrame::filled(4, 4, [0.5; 3]));
        let d = Arc::new(DepthFrame::filled(4, 4, 3.0));
        RecordedLog {
            id: "log".into(),
            frames: vec![f; traj.len()],
            depths: vec![d; traj.len()],
            trajectory: traj,
            camera: cam,
        }
    }

    #[test]
    fn build_samples_examples() {
        let cfg = CurationConfig { t_h: 4, t: 8, stride: 3, ..Default::default() };
        let exact = dummy_log(straight(12, 1.0));
        assert_eq!(build_samples(&exact, &cfg, 0).unwrap().len(), 1);
        let two = dummy_log(straight(15, 1.0));
        let samples = build_samples(&two, &cfg, 0).unwrap();
        assert_eq!(samples.len(), 2);
        let s = &samples[1];
        assert_eq!(s.history.len(), 4);
        assert_eq!(s.future.len(), 8);
        assert_eq!(s.frames.len(), 5);
        for (k, p) in s.future.poses.iter().enumerate() {
            assert!((p.x - 0.2 * k as f64).abs() < 1e-9 && p.y.abs() < 1e-12);
        }
        assert!(matches!(build_samples(&dummy_log(straight(11, 1.0)), &cfg, 0), Err(Error::TooShort(_))));
    }

    fn rigid(p: &Pose, tx: f64, ty: f64, rot: f64) -> Pose {
        let (s, c) = rot.sin_cos();
        Pose::new(c * p.x - s * p.y + tx, s * p.x + c * p.y + ty, p.psi + rot)
    }

    proptest! {
        #[test]
        fn classification_is_rigid_invariant(
            turn in -2.5f64..2.5, radius in 2.0f64..8.0, n in 5usize..30,
            tx in -50.0f64..50.0, ty in -50.0f64..50.0, rot in -3.1f64..3.1,
        ) {
            let cfg = CurationConfig::default();
            let a = arc(n, radius, turn);
            let b = traj(a.poses.iter().map(|p| rigid(p, tx, ty, rot)).collect());
            prop_assert_eq!(classify_behavior(&a, &cfg), classify_behavior(&b, &cfg));
        }

        #[test]
        fn well_behaved_segments_are_kept(speeds in proptest::collection::vec(0.1f64..2.0, 6..30), yaw in proptest::collection::vec(-0.5f64..0.5, 30)) {
            let cfg = CurationConfig::default();
            let mut p = Pose::IDENTITY;
            let mut poses = vec![p];
            for (v, w) in speeds.iter().zip(&yaw) {
                // Move along the current heading, then turn, so projected speed stays v.
                p = Pose::new(p.x + v * 0.2 * p.psi.cos(), p.y + v * 0.2 * p.psi.sin(), p.psi + w * 0.2);
                poses.push(p);
            }
            let states = traj(poses).ego_states();
            prop_assert!(filter_abnormal(&states, &cfg).is_none());
        }

        #[test]
        fn random_ahead_goal_lies_on_path(seed in 0u64..1000, t in 0usize..30) {
            let tr = arc(40, 4.0, 1.2);
            let mut r = rng::stream(seed, &[]);
            let g = define_goal_world(&tr, t, GoalMode::RandomAhead, &mut r).unwrap();
            prop_assert!(tr.poses[t + 5..].iter().any(|p| p.x == g[0] && p.y == g[1]));
        }

        #[test]
        fn window_count_formula(len in 12usize..80, stride in 1usize..9) {
            let cfg = CurationConfig { t_h: 4, t: 8, stride, ..Default::default() };
            let n = build_samples(&dummy_log(straight(len, 1.0)), &cfg, 1).unwrap().len();
            prop_assert_eq!(n, (len - 12) / stride + 1);
        }

        #[test]
        fn balancing_respects_cap(counts in proptest::collection::vec(0usize..40, 4), cap in 0.05f64..0.95, seed in 0u64..100) {
            let mut labels = Vec::new();
            for (b, &c) in BehaviorLabel::ALL.iter().zip(&counts) {
                labels.extend(std::iter::repeat_n(*b, c));
            }
            prop_assume!(!labels.is_empty());
            let keep = balance_by_behavior(&labels, cap, seed).unwrap();
            let n_straight = keep.iter().filter(|&&i| labels[i] == BehaviorLabel::Straight).count();
            prop_assert_eq!(keep.len() - n_straight, labels.len() - counts[0]);
            if !keep.is_empty() {
                prop_assert!(n_straight as f64 <= cap * keep.len() as f64 + 1e-9);
            }
        }
    }
}
