//! Sample stores on disk.
//!
//! A store is a directory with a `samples.txt` manifest, one record per line
//! of space-separated `key=value` fields, plus the files those records name:
//! `frames/*.ppm`, `frames/*.mdpt`, `cameras/*.txt` and
//! `trajs/<id>.{window,future,views}.log`. Frames shared by several samples
//! (overlapping windows of one log) are written once.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::camgeom::{CameraModel, DepthFrame, RgbFrame};
use crate::curation::{BehaviorLabel, Provenance, TrainingSample};
use crate::error::{Error, Result};
use crate::expansion::Direction;
use crate::scenegen::{read_camera, write_camera};
use crate::trajcore::{encode_goal, Trajectory, TrajectoryLog};

pub const MANIFEST: &str = "samples.txt";

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn traj_log(traj: &Trajectory, path: &Path) -> Result<()> {
    TrajectoryLog::from_trajectory(traj).write(path)
}

pub fn write_store(dir: &Path, samples: &[TrainingSample]) -> Result<()> {
    for sub in ["frames", "cameras", "trajs"] {
        mkdir(&dir.join(sub))?;
    }
    let mut rgb_paths: HashMap<*const RgbFrame, String> = HashMap::new();
    let mut depth_paths: HashMap<*const DepthFrame, String> = HashMap::new();
    let mut cameras: Vec<(CameraModel, String)> = Vec::new();
    let mut manifest = format!("#SAMPLES v1 count={}\n", samples.len());
    for s in samples {
        let cam = match cameras.iter().find(|(c, _)| c == &s.camera) {
            Some((_, p)) => p.clone(),
            None => {
                let p = format!("cameras/{:03}.txt", cameras.len());
                write_camera(&s.camera, &dir.join(&p))?;
                cameras.push((s.camera.clone(), p.clone()));
                p
            }
        };
        let mut frames = Vec::with_capacity(s.frames.len());
        for f in &s.frames {
            let n = rgb_paths.len();
            let p = match rgb_paths.get(&Arc::as_ptr(f)) {
                Some(p) => p.clone(),
                None => {
                    let p = format!("frames/{n:06}.ppm");
                    f.write_ppm(&dir.join(&p))?;
                    rgb_paths.insert(Arc::as_ptr(f), p.clone());
                    p
                }
            };
            frames.push(p);
        }
        let mut depths = Vec::with_capacity(s.depths.len());
        for d in &s.depths {
            let n = depth_paths.len();
            let p = match depth_paths.get(&Arc::as_ptr(d)) {
                Some(p) => p.clone(),
                None => {
                    let p = format!("frames/{n:06}.mdpt");
                    d.write(&dir.join(&p))?;
                    depth_paths.insert(Arc::as_ptr(d), p.clone());
                    p
                }
            };
            depths.push(p);
        }
        let base = format!("trajs/{}", s.id);
        traj_log(&s.window, &dir.join(format!("{base}.window.log")))?;
        traj_log(&s.future, &dir.join(format!("{base}.future.log")))?;
        let views = Trajectory::new(s.frame_poses.clone(), s.window.rate_hz, s.window.frame_id.clone())?;
        traj_log(&views, &dir.join(format!("{base}.views.log")))?;
        let _ = writeln!(
            manifest,
            "id={} source={} provenance={} behavior={} alpha={} direction={} goal_world={},{} goal={},{} camera={} trajs={} frames={} depths={}",
            s.id,
            s.source_id,
            s.provenance.as_str(),
            s.behavior.as_str(),
            s.alpha,
            s.direction.map_or("-", |d| d.as_str()),
            s.goal_world[0],
            s.goal_world[1],
            s.goal_xy[0],
            s.goal_xy[1],
            cam,
            base,
            frames.join(";"),
            depths.join(";"),
        );
    }
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))
}

fn pair(v: &str) -> Option<[f64; 2]> {
    let (a, b) = v.split_once(',')?;
    Some([a.parse().ok()?, b.parse().ok()?])
}

pub fn read_store(dir: &Path) -> Result<Vec<TrainingSample>> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let origin = mpath.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    if !header.starts_with("#SAMPLES v1") {
        return Err(Error::format(&origin, "missing #SAMPLES v1 header"));
    }
    let mut rgb: HashMap<String, Arc<RgbFrame>> = HashMap::new();
    let mut depth: HashMap<String, Arc<DepthFrame>> = HashMap::new();
    let mut cams: HashMap<String, CameraModel> = HashMap::new();
    let mut out = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = |m: &str| Error::format(&origin, format!("record {}: {m}", n + 1));
        let kv: BTreeMap<&str, &str> = line.split_whitespace().filter_map(|t| t.split_once('=')).collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(&format!("missing {k}")));
        let provenance = Provenance::parse(get("provenance")?).ok_or_else(|| bad("bad provenance"))?;
        let behavior = BehaviorLabel::parse(get("behavior")?).ok_or_else(|| bad("bad behavior"))?;
        let alpha: f64 = get("alpha")?.parse().map_err(|_| bad("bad alpha"))?;
        let direction = match get("direction")? {
            "-" => None,
            d => Some(Direction::parse(d).ok_or_else(|| bad("bad direction"))?),
        };
        let goal_world = pair(get("goal_world")?).ok_or_else(|| bad("bad goal_world"))?;
        let goal_xy = pair(get("goal")?).ok_or_else(|| bad("bad goal"))?;
        let cam_key = get("camera")?;
        let camera = match cams.get(cam_key) {
            Some(c) => c.clone(),
            None => {
                let c = read_camera(&dir.join(cam_key))?;
                cams.insert(cam_key.to_string(), c.clone());
                c
            }
        };
        let mut frames = Vec::new();
        for p in get("frames")?.split(';') {
            if !rgb.contains_key(p) {
                rgb.insert(p.to_string(), Arc::new(RgbFrame::read_ppm(&dir.join(p))?));
            }
            frames.push(rgb[p].clone());
        }
        let mut depths = Vec::new();
        for p in get("depths")?.split(';') {
            if !depth.contains_key(p) {
                depth.insert(p.to_string(), Arc::new(DepthFrame::read(&dir.join(p))?));
            }
            depths.push(depth[p].clone());
        }
        let base = get("trajs")?;
        let read = |suffix: &str| TrajectoryLog::read(&dir.join(format!("{base}.{suffix}.log")))?.trajectory();
        let window = read("window")?;
        let future = read("future")?;
        let views = read("views")?;
        let t_h = frames.len().checked_sub(1).ok_or_else(|| bad("no frames"))?;
        if views.len() != frames.len() || depths.len() != frames.len() || window.len() < t_h {
            return Err(bad("frame, depth and view counts disagree"));
        }
        out.push(TrainingSample {
            id: get("id")?.to_string(),
            source_id: get("source")?.to_string(),
            provenance,
            history: window.slice(0..t_h),
            future,
            window,
            goal_world,
            goal_xy,
            goal: encode_goal(goal_xy),
            camera,
            frames,
            depths,
            frame_poses: views.poses,
            behavior,
            alpha,
            direction,
        });
    }
    Ok(out)
}

pub fn provenance_counts(samples: &[TrainingSample]) -> BTreeMap<&'static str, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.provenance.as_str()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curation::{build_samples, CurationConfig};
    use crate::expansion::{sample_corrective, CorrectiveConfig};
    use crate::scenegen::{generate_scenario, ExpertConfig};
    use rand::SeedableRng;

    #[test]
    fn store_round_trip() {
        let cam = CameraModel::forward_facing(32, 1.4, 0.6, 0.15);
        let data = generate_scenario(3, 0.4, &cam, &ExpertConfig { frames: 60, ..Default::default() }).unwrap();
        let cfg = CurationConfig {
            t_h: 4,
            t: 16,
            stride: 8,
            ..Default::default()
        };
        let mut samples = build_samples(&data.log(), &cfg, 1).unwrap();
        let mut r = crate::rng::Rng::seed_from_u64(0);
        let pair = sample_corrective(&samples[0], &CorrectiveConfig { c_min: 0.0, ..Default::default() }, &mut r).unwrap();
        samples.push(pair.to_sample(&samples[0]));
        let dir = tempfile::tempdir().unwrap();
        write_store(dir.path(), &samples).unwrap();
        let back = read_store(dir.path()).unwrap();
        assert_eq!(back.len(), samples.len());
        let dir2 = tempfile::tempdir().unwrap();
        write_store(dir2.path(), &back).unwrap();
        let again = read_store(dir2.path()).unwrap();
        assert_eq!(again, back);
        for (a, b) in back.iter().zip(&samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.window, b.window);
            assert_eq!(a.future, b.future);
            assert_eq!(a.frame_poses, b.frame_poses);
            assert_eq!(a.goal_xy, b.goal_xy);
            assert_eq!(a.provenance, b.provenance);
            assert_eq!(a.direction, b.direction);
            assert_eq!(a.camera, b.camera);
        }
        assert_eq!(
            std::fs::read(dir.path().join(MANIFEST)).unwrap(),
            std::fs::read(dir2.path().join(MANIFEST)).unwrap()
        );
        let counts = provenance_counts(&back);
        assert_eq!(counts["corrective"], 1);
    }
}
