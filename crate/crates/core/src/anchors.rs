//! Horizon-specific anchor trajectories from K-means over future positions.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng;
use crate::trajcore::{Pose, Trajectory};

pub const N_HORIZONS: usize = 4;

/// Prefix lengths `{T/8, T/4, T/2, T}`.
pub fn horizon_lengths(t: usize) -> Result<[usize; N_HORIZONS]> {
    if t == 0 || !t.is_multiple_of(8) {
        return Err(Error::IndivisibleHorizon(t));
    }
    Ok([t / 8, t / 4, t / 2, t])
}

pub fn horizon_split(future: &Trajectory) -> Result<[Trajectory; N_HORIZONS]> {
    let lens = horizon_lengths(future.len())?;
    Ok(lens.map(|l| future.slice(0..l)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every assignment step.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd iterations from a k-means++ start. Ties go to the lowest center
/// index; an empty cluster is moved onto the point farthest from its center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<KMeansResult> {
    let n = points.len();
    if k == 0 || n < k {
        return Err(Error::TooFewPoints { n, k });
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch(format!("k-means points must share a nonzero dimension {dim}")));
    }
    let mut r = rng::stream(seed, &[0x6b6d]);

    let mut centers = vec![points[r.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut x = r.gen::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if x < w {
                    idx = i;
                    break;
                }
                x -= w;
            }
            idx
        } else {
            r.gen_range(0..n)
        };
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, centers.last().unwrap()));
        }
    }

    let mut assignment: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let near: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
        let new_assign: Vec<usize> = near.iter().map(|x| x.0).collect();
        history.push(near.iter().map(|x| x.1).sum());
        iterations += 1;
        if new_assign == assignment || iterations > max_iter {
            assignment = new_assign;
            break;
        }
        assignment = new_assign;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .map(|i| (i, nearest(&points[i], &centers).1))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b });
                centers[j] = points[far.0].clone();
            }
        }
    }
    let inertia = *history.last().unwrap();
    Ok(KMeansResult {
        centers,
        assignment,
        inertia,
        history,
        iterations,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// 1-based horizon index.
    pub horizon_index: usize,
    pub horizon_len: usize,
    /// `M` anchors of `horizon_len` ego-frame poses each.
    pub anchors: Vec<Vec<Pose>>,
}

impl AnchorSet {
    pub fn m(&self) -> usize {
        self.anchors.len()
    }

    /// Row-major `x y psi` per waypoint, one row per anchor.
    pub fn flattened(&self) -> Vec<f64> {
        self.anchors
            .iter()
            .flat_map(|a| a.iter().flat_map(|p| [p.x, p.y, p.psi]))
            .collect()
    }
}

/// Anchor poses from flattened `(x, y)` centers; each heading points along
/// the next step, the last copies its predecessor.
pub fn anchor_from_positions(flat_xy: &[f64]) -> Vec<Pose> {
    let n = flat_xy.len() / 2;
    let pts: Vec<[f64; 2]> = (0..n).map(|j| [flat_xy[2 * j], flat_xy[2 * j + 1]]).collect();
    let mut psi = vec![0.0; n];
    for j in 0..n.saturating_sub(1) {
        let (dx, dy) = (pts[j + 1][0] - pts[j][0], pts[j + 1][1] - pts[j][1]);
        psi[j] = if dx.hypot(dy) > 1e-9 {
            dy.atan2(dx)
        } else if j > 0 {
            psi[j - 1]
        } else {
            0.0
        };
    }
    if n >= 2 {
        psi[n - 1] = psi[n - 2];
    }
    pts.iter().zip(psi).map(|(p, h)| Pose::new(p[0], p[1], h)).collect()
}

pub fn build_anchor_sets(futures: &[Trajectory], m: usize, seed: u64, max_iter: usize) -> Result<Vec<AnchorSet>> {
    let t = futures.first().ok_or(Error::TooFewPoints { n: 0, k: m })?.len();
    if futures.iter().any(|f| f.len() != t) {
        return Err(Error::DimensionMismatch("futures must share one length".into()));
    }
    let lens = horizon_lengths(t)?;
    lens.iter()
        .enumerate()
        .map(|(i, &len)| {
            let points: Vec<Vec<f64>> = futures
                .iter()
                .map(|f| f.poses[..len].iter().flat_map(|p| [p.x, p.y]).collect())
                .collect();
            let km = kmeans(&points, m, rng::derive_seed(seed, &[i as u64]), max_iter)?;
            Ok(AnchorSet {
                horizon_index: i + 1,
                horizon_len: len,
                anchors: km.centers.iter().map(|c| anchor_from_positions(c)).collect(),
            })
        })
        .collect()
}

/// Anchor whose endpoint is closest to the endpoint of `gt`, lowest index on ties.
pub fn nearest_anchor_by_endpoint(set: &AnchorSet, gt: &Trajectory) -> Result<usize> {
    if gt.len() != set.horizon_len {
        return Err(Error::LengthMismatch {
            expected: set.horizon_len,
            got: gt.len(),
        });
    }
    let e = gt.last();
    let mut best = (0, f64::INFINITY);
    for (m, a) in set.anchors.iter().enumerate() {
        let d = a.last().unwrap().distance(e);
        if d < best.1 {
            best = (m, d);
        }
    }
    Ok(best.0)
}

/// Anchor file: one `#ANCH v1 horizon=<i> len=<Ti> M=<m>` block per horizon,
/// each followed by one anchor per line as `x y psi` triples.
pub fn anchors_to_text(sets: &[AnchorSet]) -> String {
    let mut s = String::new();
    for set in sets {
        let _ = writeln!(s, "#ANCH v1 horizon={} len={} M={}", set.horizon_index, set.horizon_len, set.m());
        for a in &set.anchors {
            let line: Vec<String> = a.iter().map(|p| format!("{} {} {}", p.x, p.y, p.psi)).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    s
}

pub fn parse_anchors(text: &str, origin: &str) -> Result<Vec<AnchorSet>> {
    let bad = |m: String| Error::format(origin, m);
    let mut sets: Vec<AnchorSet> = Vec::new();
    let mut expected = 0usize;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(rest) = line.strip_prefix("#ANCH") {
            if expected != 0 {
                return Err(bad(format!("block ended {expected} anchors early")));
            }
            let mut fields = rest.split_whitespace();
            if fields.next() != Some("v1") {
                return Err(bad(format!("unsupported header `{line}`")));
            }
            let (mut h, mut len, mut m) = (None, None, None);
            for kv in fields {
                match kv.split_once('=') {
                    Some(("horizon", v)) => h = v.parse::<usize>().ok(),
                    Some(("len", v)) => len = v.parse::<usize>().ok(),
                    Some(("M", v)) => m = v.parse::<usize>().ok(),
                    _ => return Err(bad(format!("unknown header field `{kv}`"))),
                }
            }
            let (Some(h), Some(len), Some(m)) = (h, len, m) else {
                return Err(bad(format!("incomplete header `{line}`")));
            };
            expected = m;
            sets.push(AnchorSet {
                horizon_index: h,
                horizon_len: len,
                anchors: Vec::with_capacity(m),
            });
            continue;
        }
        let set = sets.last_mut().ok_or_else(|| bad("anchor line before header".into()))?;
        if expected == 0 {
            return Err(bad("more anchors than declared".into()));
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        if vals.len() != 3 * set.horizon_len {
            return Err(bad(format!("anchor has {} values, expected {}", vals.len(), 3 * set.horizon_len)));
        }
        set.anchors
            .push(vals.chunks(3).map(|c| Pose { x: c[0], y: c[1], psi: c[2] }).collect());
        expected -= 1;
    }
    if expected != 0 {
        return Err(bad(format!("file ended {expected} anchors early")));
    }
    Ok(sets)
}

pub fn write_anchors(sets: &[AnchorSet], path: &Path) -> Result<()> {
    std::fs::write(path, anchors_to_text(sets)).map_err(|e| Error::io(path, e))
}

pub fn read_anchors(path: &Path) -> Result<Vec<AnchorSet>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_anchors(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajcore::EGO_FRAME;
    use proptest::prelude::*;

    fn traj(pts: &[[f64; 2]]) -> Trajectory {
        Trajectory::new(pts.iter().map(|p| Pose::new(p[0], p[1], 0.0)).collect(), 5.0, EGO_FRAME).unwrap()
    }

    #[test]
    fn horizon_examples() {
        assert_eq!(horizon_lengths(40).unwrap(), [5, 10, 20, 40]);
        assert_eq!(horizon_lengths(8).unwrap(), [1, 2, 4, 8]);
        assert!(matches!(horizon_lengths(12), Err(Error::IndivisibleHorizon(12))));
        let f = traj(&(0..16).map(|i| [i as f64, 0.0]).collect::<Vec<_>>());
        let parts = horizon_split(&f).unwrap();
        assert_eq!(parts[3], f);
        assert_eq!(parts.map(|p| p.len()), [2, 4, 8, 16]);
    }

    /// Minimum 2-partition inertia of a sorted 1D set, by enumeration of cut points.
    fn best_two_partition(xs: &[f64]) -> (f64, f64, f64) {
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for cut in 1..xs.len() {
            let (a, b) = xs.split_at(cut);
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
            if cost < best.0 {
                best = (cost, ma, mb);
            }
        }
        best
    }

    #[test]
    fn kmeans_planted_case() {
        let xs = [0.0, 1.0, 10.0, 11.0];
        let oracle = best_two_partition(&xs);
        for seed in 0..20 {
            let pts: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let r = kmeans(&pts, 2, seed, 100).unwrap();
            let mut c: Vec<f64> = r.centers.iter().map(|c| c[0]).collect();
            c.sort_by(f64::total_cmp);
            assert_eq!(c, vec![0.5, 10.5]);
            assert_eq!(r.inertia, 1.0);
            assert_eq!((r.inertia, c[0], c[1]), oracle);
        }
    }

    #[test]
    fn kmeans_examples() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let r = kmeans(&pts, 6, 1, 50).unwrap();
        assert_eq!(r.inertia, 0.0);
        let mut got = r.centers.clone();
        got.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(got, pts);
        assert!(matches!(kmeans(&pts, 7, 1, 10), Err(Error::TooFewPoints { n: 6, k: 7 })));
    }

    #[test]
    fn anchors_recover_planted_shapes() {
        let shapes: Vec<Vec<[f64; 2]>> = (0..4)
            .map(|s| (0..8).map(|j| [0.2 * j as f64, 0.05 * s as f64 * j as f64]).collect())
            .collect();
        let futures: Vec<Trajectory> = (0..40).map(|i| traj(&shapes[i % 4])).collect();
        let sets = build_anchor_sets(&futures, 4, 3, 100).unwrap();
        assert_eq!(sets.len(), 4);
        let full = &sets[3];
        for shape in &shapes {
            assert!(full.anchors.iter().any(|a| a.iter().zip(shape).all(|(p, q)| (p.x - q[0]).abs() < 1e-12 && (p.y - q[1]).abs() < 1e-12)));
        }
        let same: Vec<Trajectory> = (0..10).map(|_| traj(&shapes[1])).collect();
        let sets = build_anchor_sets(&same, 3, 3, 100).unwrap();
        for s in &sets {
            for a in &s.anchors {
                for (p, q) in a.iter().zip(&s.anchors[0]) {
                    assert!(p.distance(q) < 1e-12 && (p.psi - q.psi).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn anchors_match_direct_kmeans() {
        let futures: Vec<Trajectory> = (0..30)
            .map(|i| traj(&(0..16).map(|j| [0.2 * j as f64, 0.01 * (i as f64 - 15.0) * j as f64]).collect::<Vec<_>>()))
            .collect();
        let sets = build_anchor_sets(&futures, 5, 9, 100).unwrap();
        let pts: Vec<Vec<f64>> = futures.iter().map(|f| f.poses[..2].iter().flat_map(|p| [p.x, p.y]).collect()).collect();
        let km = kmeans(&pts, 5, rng::derive_seed(9, &[0]), 100).unwrap();
        for (a, c) in sets[0].anchors.iter().zip(&km.centers) {
            assert_eq!(a.iter().flat_map(|p| [p.x, p.y]).collect::<Vec<_>>(), *c);
        }
    }

    #[test]
    fn nearest_anchor_examples() {
        let set = AnchorSet {
            horizon_index: 1,
            horizon_len: 1,
            anchors: vec![vec![Pose::new(1.0, 0.0, 0.0)], vec![Pose::new(0.0, 1.0, 0.0)], vec![Pose::new(-1.0, 0.0, 0.0)], vec![Pose::new(0.0, -1.0, 0.0)]],
        };
        assert_eq!(nearest_anchor_by_endpoint(&set, &traj(&[[0.0, -1.0]])).unwrap(), 3);
        assert_eq!(nearest_anchor_by_endpoint(&set, &traj(&[[0.9, 0.1]])).unwrap(), 0);
        assert_eq!(nearest_anchor_by_endpoint(&set, &traj(&[[0.0, 0.0]])).unwrap(), 0);
        assert!(nearest_anchor_by_endpoint(&set, &traj(&[[0.0, 0.0], [1.0, 0.0]])).is_err());
    }

    #[test]
    fn anchor_file_roundtrip() {
        let futures: Vec<Trajectory> = (0..12)
            .map(|i| traj(&(0..8).map(|j| [0.21 * j as f64, 0.013 * i as f64 * j as f64]).collect::<Vec<_>>()))
            .collect();
        let sets = build_anchor_sets(&futures, 3, 0, 50).unwrap();
        assert_eq!(parse_anchors(&anchors_to_text(&sets), "mem").unwrap(), sets);
        assert!(parse_anchors("#ANCH v1 horizon=1 len=1 M=2\n0 0 0\n", "mem").is_err());
    }

    proptest! {
        #[test]
        fn lloyd_is_monotone_and_fixed(
            pts in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 8..40),
            k in 1usize..6, seed in 0u64..1000,
        ) {
            let r = kmeans(&pts, k, seed, 200).unwrap();
            for w in r.history.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            if r.iterations <= 200 {
                for (p, &a) in pts.iter().zip(&r.assignment) {
                    prop_assert_eq!(nearest(p, &r.centers).0, a);
                }
            }
        }

        #[test]
        fn nearest_anchor_ignores_interior_waypoints(noise in proptest::collection::vec(-3.0f64..3.0, 12), ex in -2.0f64..2.0, ey in -2.0f64..2.0) {
            let make = |bump: f64| AnchorSet {
                horizon_index: 2,
                horizon_len: 4,
                anchors: (0..3)
                    .map(|m| (0..4).map(|j| if j == 3 { Pose::new(m as f64, 1.0 - m as f64, 0.0) } else { Pose::new(bump * noise[m * 4 + j], -bump * noise[m * 4 + j], 0.0) }).collect())
                    .collect(),
            };
            let gt = traj(&[[0.0, 0.0], [0.1, 0.0], [0.2, 0.1], [ex, ey]]);
            prop_assert_eq!(nearest_anchor_by_endpoint(&make(0.0), &gt).unwrap(), nearest_anchor_by_endpoint(&make(1.0), &gt).unwrap());
        }
    }
}
