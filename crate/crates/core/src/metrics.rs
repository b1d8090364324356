//! Open-loop metrics: minADE, minFDE, single-ground-truth AP, L2 and
//! endpoint NMS.
//!
//! A horizon of `h` seconds covers the first `round(h * rate)` waypoints of a
//! trajectory and its endpoint is the last of those.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::policynet::PredictionBundle;
use crate::trajcore::Pose;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub match_time_s: f64,
    pub match_radius_m: f64,
    pub horizons_s: Vec<f64>,
    pub nms_top_k: usize,
    pub nms_radius_m: f64,
    pub rate_hz: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            match_time_s: 1.0,
            match_radius_m: 1.0,
            horizons_s: vec![1.0, 2.0, 4.0, 8.0],
            nms_top_k: 6,
            nms_radius_m: 0.5,
            rate_hz: 5.0,
        }
    }
}

/// Waypoints covered by a horizon.
pub fn horizon_steps(horizon_s: f64, rate_hz: f64) -> usize {
    (horizon_s * rate_hz).round() as usize
}

fn covered(n: usize, available: usize) -> Result<()> {
    if n == 0 || n > available {
        return Err(Error::HorizonExceedsPrediction { needed: n, available });
    }
    Ok(())
}

fn dist(a: &Pose, b: &Pose) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

fn shortest(candidates: &[Vec<Pose>]) -> usize {
    candidates.iter().map(|c| c.len()).min().unwrap_or(0)
}

pub fn min_ade(candidates: &[Vec<Pose>], gt: &[Pose], horizon_s: f64, rate_hz: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = horizon_steps(horizon_s, rate_hz);
    covered(n, shortest(candidates).min(gt.len()))?;
    Ok(candidates
        .iter()
        .map(|c| c[..n].iter().zip(gt).map(|(p, g)| dist(p, g)).sum::<f64>() / n as f64)
        .fold(f64::INFINITY, f64::min))
}

pub fn min_fde(candidates: &[Vec<Pose>], gt: &[Pose], horizon_s: f64, rate_hz: f64) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = horizon_steps(horizon_s, rate_hz);
    covered(n, shortest(candidates).min(gt.len()))?;
    Ok(candidates
        .iter()
        .map(|c| dist(&c[n - 1], &gt[n - 1]))
        .fold(f64::INFINITY, f64::min))
}

/// Endpoint distance at the horizon for a single chosen trajectory.
pub fn l2_at(best: &[Pose], gt: &[Pose], horizon_s: f64, rate_hz: f64) -> Result<f64> {
    let n = horizon_steps(horizon_s, rate_hz);
    covered(n, best.len().min(gt.len()))?;
    Ok(dist(&best[n - 1], &gt[n - 1]))
}

/// One sample's ranked predictions for AP: endpoints at the match time.
#[derive(Clone, Debug, PartialEq)]
pub struct ApSample {
    pub endpoints: Vec<[f64; 2]>,
    pub confidences: Vec<f64>,
    pub gt: [f64; 2],
}

/// Pooled AP with one ground truth per sample and all-point interpolation.
pub fn average_precision(samples: &[ApSample], radius: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut preds: Vec<(f64, usize, usize)> = samples
        .iter()
        .enumerate()
        .flat_map(|(s, smp)| smp.confidences.iter().enumerate().map(move |(m, &c)| (c, s, m)))
        .collect();
    preds.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut matched = vec![false; samples.len()];
    let n_gt = samples.len() as f64;
    let mut tp = 0.0;
    let mut curve = Vec::with_capacity(preds.len());
    for (k, &(_, s, m)) in preds.iter().enumerate() {
        let e = samples[s].endpoints[m];
        let g = samples[s].gt;
        let hit = !matched[s] && (e[0] - g[0]).hypot(e[1] - g[1]) <= radius;
        if hit {
            matched[s] = true;
            tp += 1.0;
        }
        curve.push((tp / n_gt, tp / (k + 1) as f64));
    }
    // precision envelope from the right
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for &(r, p) in &curve {
        if r > prev_r {
            ap += (r - prev_r) * p;
            prev_r = r;
        }
    }
    ap
}

/// Greedy endpoint NMS; returns kept indices in decreasing confidence.
pub fn endpoint_nms(endpoints: &[[f64; 2]], confidences: &[f64], top_k: usize, radius: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..endpoints.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept.len() >= top_k {
            break;
        }
        let e = endpoints[i];
        if kept.iter().all(|&j| (endpoints[j][0] - e[0]).hypot(endpoints[j][1] - e[1]) > radius) {
            kept.push(i);
        }
    }
    kept
}

/// Candidates and confidences the bundle offers for a horizon of `n`
/// waypoints: the shortest anchor head that covers it, or the query-free
/// trajectory with unit confidence.
pub fn candidates_for(bundle: &PredictionBundle, n: usize) -> Option<(Vec<Vec<Pose>>, Option<Vec<f64>>)> {
    let last = bundle.last_layer();
    for h in last.horizons.iter().flatten() {
        if h.trajectories.first().map_or(0, |t| t.len()) >= n {
            return Some((h.trajectories.clone(), Some(h.confidences.clone())));
        }
    }
    let qf = last.qf.as_ref()?;
    (qf.len() >= n).then(|| (vec![qf.clone()], None))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub min_ade_1s: f64,
    pub min_fde_1s: f64,
    /// Absent when the model has no confidence-bearing head.
    pub map: Option<f64>,
    /// `(horizon seconds, L2)`; absent where the prediction is too short.
    pub l2: Vec<(f64, Option<f64>)>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn l2_at(&self, horizon_s: f64) -> Option<f64> {
        self.l2.iter().find(|(h, _)| (*h - horizon_s).abs() < 1e-9).and_then(|(_, v)| *v)
    }

    pub fn to_table(&self) -> String {
        let mut head = format!("{:>10} {:>10} {:>8}", "minADE_1s", "minFDE_1s", "mAP");
        let mut row = format!("{:>10.4} {:>10.4} {:>8}", self.min_ade_1s, self.min_fde_1s, opt(self.map));
        for (h, v) in &self.l2 {
            let _ = write!(head, " {:>8}", format!("L2_{h}s"));
            let _ = write!(row, " {:>8}", opt(*v));
        }
        format!("{head}\n{row}\nsamples={}\n", self.samples)
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "minADE={:.6} minFDE={:.6} mAP={}",
            self.min_ade_1s,
            self.min_fde_1s,
            self.map.map_or("none".to_string(), |m| format!("{m:.6}"))
        );
        for (h, v) in &self.l2 {
            let _ = write!(s, " L2_{h}s={}", v.map_or("none".to_string(), |x| format!("{x:.6}")));
        }
        s
    }
}

/// Metrics over prediction bundles paired with ego-frame ground truth.
pub fn evaluate_bundles(bundles: &[PredictionBundle], gts: &[Vec<Pose>], cfg: &EvalConfig) -> Result<EvalReport> {
    if bundles.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if bundles.len() != gts.len() {
        return Err(Error::LengthMismatch {
            expected: bundles.len(),
            got: gts.len(),
        });
    }
    let n1 = horizon_steps(cfg.match_time_s, cfg.rate_hz);
    struct Per {
        ade: f64,
        fde: f64,
        ap: Option<ApSample>,
        l2: Vec<Option<f64>>,
    }
    let per: Vec<Per> = bundles
        .par_iter()
        .zip(gts)
        .map(|(b, gt)| {
            let (cands, conf) = candidates_for(b, n1).ok_or(Error::HorizonExceedsPrediction {
                needed: n1,
                available: 0,
            })?;
            let ade = min_ade(&cands, gt, cfg.match_time_s, cfg.rate_hz)?;
            let fde = min_fde(&cands, gt, cfg.match_time_s, cfg.rate_hz)?;
            let ap = conf.map(|c| ApSample {
                endpoints: cands.iter().map(|t| t[n1 - 1].xy()).collect(),
                confidences: c,
                gt: gt[n1 - 1].xy(),
            });
            let best = b.best_trajectory().unwrap_or(&[]);
            let l2 = cfg
                .horizons_s
                .iter()
                .map(|&h| l2_at(best, gt, h, cfg.rate_hz).ok())
                .collect();
            Ok(Per { ade, fde, ap, l2 })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let aps: Option<Vec<ApSample>> = per.iter().map(|p| p.ap.clone()).collect();
    let l2 = cfg
        .horizons_s
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let vals: Option<Vec<f64>> = per.iter().map(|p| p.l2[k]).collect();
            (h, vals.map(|v| v.iter().sum::<f64>() / n))
        })
        .collect();
    Ok(EvalReport {
        samples: per.len(),
        min_ade_1s: per.iter().map(|p| p.ade).sum::<f64>() / n,
        min_fde_1s: per.iter().map(|p| p.fde).sum::<f64>() / n,
        map: aps.map(|a| average_precision(&a, cfg.match_radius_m)),
        l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policynet::{HorizonPrediction, LayerPrediction};
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn straight(n: usize, vx: f64, y: f64) -> Vec<Pose> {
        (0..n).map(|k| Pose::new(vx * k as f64, y, 0.0)).collect()
    }

    #[test]
    fn ade_fde_examples() {
        let gt = straight(10, 0.2, 0.0);
        assert_eq!(min_ade(&[gt.clone(), straight(10, 0.5, 1.0)], &gt, 1.0, 5.0).unwrap(), 0.0);
        assert!((min_ade(&[straight(10, 0.2, 0.3)], &gt, 1.0, 5.0).unwrap() - 0.3).abs() < 1e-15);
        let mut bent = gt.clone();
        bent[2].y = 0.7;
        assert_eq!(min_fde(&[bent], &gt, 1.0, 5.0).unwrap(), 0.0);
        let far = vec![straight(10, 0.2, 2.0), straight(10, 0.2, -2.0)];
        assert!((min_fde(&far, &gt, 1.0, 5.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(min_ade(&far, &gt, 4.0, 5.0), Err(Error::HorizonExceedsPrediction { .. })));
    }

    #[test]
    fn l2_picks_the_given_trajectory() {
        let gt = straight(10, 0.2, 0.0);
        let best: Vec<Pose> = gt.iter().map(|p| Pose::new(p.x + 1.0, p.y, 0.0)).collect();
        for h in [0.2, 1.0, 2.0] {
            assert!((l2_at(&best, &gt, h, 5.0).unwrap() - 1.0).abs() < 1e-15);
        }
        // most confident mode is not the closest one
        let cands = vec![straight(10, 0.2, 0.5), straight(10, 0.2, 0.1)];
        let conf = [0.9, 0.1];
        let top = if conf[0] >= conf[1] { 0 } else { 1 };
        let l2 = l2_at(&cands[top], &gt, 1.0, 5.0).unwrap();
        let fde = min_fde(&cands, &gt, 1.0, 5.0).unwrap();
        assert!((l2 - 0.5).abs() < 1e-15 && (fde - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ap_examples() {
        let hit = ApSample {
            endpoints: vec![[0.0, 0.0], [5.0, 0.0]],
            confidences: vec![0.9, 0.1],
            gt: [0.2, 0.0],
        };
        assert_eq!(average_precision(&[hit.clone(), hit.clone()], 1.0), 1.0);
        let miss = ApSample {
            endpoints: vec![[5.0, 0.0]],
            confidences: vec![0.9],
            gt: [0.0, 0.0],
        };
        assert_eq!(average_precision(std::slice::from_ref(&miss), 1.0), 0.0);
        // ranking: A-wrong(0.9) FP, B-right(0.8) TP, A-right(0.7) TP
        let a = ApSample {
            endpoints: vec![[5.0, 0.0], [0.0, 0.5]],
            confidences: vec![0.9, 0.7],
            gt: [0.0, 0.0],
        };
        let b = ApSample {
            endpoints: vec![[1.0, 1.0], [0.0, 0.0]],
            confidences: vec![0.2, 0.8],
            gt: [0.0, 0.0],
        };
        // precisions 0, 1/2, 2/3 -> envelope 2/3 at recall 1/2 and 1
        assert!((average_precision(&[a, b], 1.0) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nms_examples() {
        let same = vec![[1.0, 1.0]; 5];
        assert_eq!(endpoint_nms(&same, &[0.1, 0.5, 0.3, 0.2, 0.4], 6, 0.5), vec![1]);
        let spread: Vec<[f64; 2]> = (0..8).map(|k| [k as f64, 0.0]).collect();
        let conf: Vec<f64> = (0..8).map(|k| k as f64 * 0.1).collect();
        assert_eq!(endpoint_nms(&spread, &conf, 6, 0.5), vec![7, 6, 5, 4, 3, 2]);
        let pts = [[0.0, 0.0], [0.3, 0.0], [0.7, 0.0], [2.0, 0.0]];
        assert_eq!(endpoint_nms(&pts, &[0.5, 0.9, 0.4, 0.1], 6, 0.5), vec![1, 3]);
    }

    fn brute_ade(c: &[Vec<Pose>], gt: &[Pose], n: usize) -> f64 {
        let mut best = f64::MAX;
        for cand in c {
            let mut s = 0.0;
            for k in 0..n {
                s += ((cand[k].x - gt[k].x).powi(2) + (cand[k].y - gt[k].y).powi(2)).sqrt();
            }
            if s / n as f64 <= best {
                best = s / n as f64;
            }
        }
        best
    }

    fn brute_fde(c: &[Vec<Pose>], gt: &[Pose], n: usize) -> f64 {
        let mut ds: Vec<f64> = c
            .iter()
            .map(|cand| ((cand[n - 1].x - gt[n - 1].x).powi(2) + (cand[n - 1].y - gt[n - 1].y).powi(2)).sqrt())
            .collect();
        ds.sort_by(f64::total_cmp);
        ds[0]
    }

    /// AP as the mean over ground truths of the best precision reachable at
    /// or beyond each recall level.
    fn brute_ap(samples: &[ApSample], radius: f64) -> f64 {
        let mut preds = Vec::new();
        for (s, smp) in samples.iter().enumerate() {
            for m in 0..smp.confidences.len() {
                preds.push((s, m));
            }
        }
        // insertion sort by (conf desc, sample, mode)
        let key = |&(s, m): &(usize, usize)| (samples[s].confidences[m], s, m);
        for i in 1..preds.len() {
            let mut j = i;
            while j > 0 {
                let (a, b) = (key(&preds[j - 1]), key(&preds[j]));
                if b.0 > a.0 || (b.0 == a.0 && (b.1, b.2) < (a.1, a.2)) {
                    preds.swap(j - 1, j);
                    j -= 1;
                } else {
                    break;
                }
            }
        }
        let mut matched = vec![false; samples.len()];
        let mut points = Vec::new();
        let mut tp = 0usize;
        for (k, &(s, m)) in preds.iter().enumerate() {
            let e = samples[s].endpoints[m];
            let g = samples[s].gt;
            if !matched[s] && ((e[0] - g[0]).powi(2) + (e[1] - g[1]).powi(2)).sqrt() <= radius {
                matched[s] = true;
                tp += 1;
            }
            points.push((tp, tp as f64 / (k + 1) as f64));
        }
        let n = samples.len();
        let mut ap = 0.0;
        for level in 1..=n {
            let best = points.iter().filter(|(t, _)| *t >= level).map(|(_, p)| *p).fold(0.0, f64::max);
            ap += best / n as f64;
        }
        ap
    }

    fn brute_nms(e: &[[f64; 2]], c: &[f64], k: usize, r: f64) -> Vec<usize> {
        let mut alive = vec![true; e.len()];
        let mut kept = Vec::new();
        while kept.len() < k {
            let mut best: Option<usize> = None;
            for i in 0..e.len() {
                if alive[i] && best.is_none_or(|b| c[i] > c[b]) {
                    best = Some(i);
                }
            }
            let Some(b) = best else { break };
            kept.push(b);
            for i in 0..e.len() {
                if ((e[i][0] - e[b][0]).powi(2) + (e[i][1] - e[b][1]).powi(2)).sqrt() <= r {
                    alive[i] = false;
                }
            }
        }
        kept
    }

    fn random_traj(r: &mut crate::rng::Rng, n: usize) -> Vec<Pose> {
        (0..n).map(|_| Pose::new(r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0), 0.0)).collect()
    }

    #[test]
    fn metrics_match_brute_force_oracles() {
        let mut r = crate::rng::Rng::seed_from_u64(42);
        for _ in 0..100 {
            let m = r.gen_range(1..=8);
            let gt = random_traj(&mut r, 10);
            let cands: Vec<Vec<Pose>> = (0..m).map(|_| random_traj(&mut r, 10)).collect();
            assert!((min_ade(&cands, &gt, 1.0, 5.0).unwrap() - brute_ade(&cands, &gt, 5)).abs() <= 1e-12);
            assert!((min_fde(&cands, &gt, 2.0, 5.0).unwrap() - brute_fde(&cands, &gt, 10)).abs() <= 1e-12);
            let ns = r.gen_range(1..=4);
            let samples: Vec<ApSample> = (0..ns)
                .map(|_| {
                    let k = r.gen_range(1..=8);
                    ApSample {
                        endpoints: (0..k).map(|_| [r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)]).collect(),
                        // coarse confidences so ties occur
                        confidences: (0..k).map(|_| r.gen_range(0..5) as f64 / 4.0).collect(),
                        gt: [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)],
                    }
                })
                .collect();
            assert!((average_precision(&samples, 1.0) - brute_ap(&samples, 1.0)).abs() <= 1e-12);
            let e: Vec<[f64; 2]> = cands.iter().map(|c| c[9].xy()).collect();
            let c: Vec<f64> = (0..m).map(|_| r.gen()).collect();
            assert_eq!(endpoint_nms(&e, &c, 6, 0.8), brute_nms(&e, &c, 6, 0.8));
        }
    }

    fn bundle(trajs: Vec<Vec<Pose>>, conf: Vec<f64>) -> PredictionBundle {
        let full = HorizonPrediction {
            trajectories: trajs,
            confidences: conf,
        };
        PredictionBundle {
            layers: vec![LayerPrediction {
                horizons: [None, None, None, Some(full)],
                qf: None,
            }],
        }
    }

    #[test]
    fn bundle_evaluation_and_report_format() {
        let gt = straight(40, 0.2, 0.0);
        let b = bundle(vec![straight(40, 0.2, 0.5), gt.clone()], vec![0.2, 0.8]);
        let rep = evaluate_bundles(&[b.clone(), b], &[gt.clone(), gt], &EvalConfig::default()).unwrap();
        assert_eq!(rep.min_ade_1s, 0.0);
        assert_eq!(rep.map, Some(1.0));
        assert_eq!(rep.l2_at(8.0), Some(0.0));
        assert!(rep.to_line().starts_with("minADE=0.000000 minFDE=0.000000 mAP=1.000000 L2_1s="));
        assert!(rep.to_table().contains("L2_2s"));
    }

    proptest! {
        #[test]
        fn invariances(seed in 0u64..1000, tx in -5.0f64..5.0, ty in -5.0f64..5.0, th in -3.1f64..3.1) {
            let mut r = crate::rng::Rng::seed_from_u64(seed);
            let m = r.gen_range(1..=6);
            let gt = random_traj(&mut r, 10);
            let cands: Vec<Vec<Pose>> = (0..m).map(|_| random_traj(&mut r, 10)).collect();
            let mut rev = cands.clone();
            rev.reverse();
            let ade = min_ade(&cands, &gt, 1.0, 5.0).unwrap();
            let fde = min_fde(&cands, &gt, 1.0, 5.0).unwrap();
            prop_assert_eq!(ade, min_ade(&rev, &gt, 1.0, 5.0).unwrap());
            prop_assert_eq!(fde, min_fde(&rev, &gt, 1.0, 5.0).unwrap());

            let frame = Pose::new(tx, ty, th);
            let mv = |t: &Vec<Pose>| -> Vec<Pose> { t.iter().map(|p| Pose::compose(&frame, p)).collect() };
            let cands_t: Vec<Vec<Pose>> = cands.iter().map(mv).collect();
            let gt_t = mv(&gt);
            prop_assert!((ade - min_ade(&cands_t, &gt_t, 1.0, 5.0).unwrap()).abs() < 1e-9);
            prop_assert!((fde - min_fde(&cands_t, &gt_t, 1.0, 5.0).unwrap()).abs() < 1e-9);

            let conf: Vec<f64> = (0..m).map(|_| r.gen()).collect();
            let e: Vec<[f64; 2]> = cands.iter().map(|c| c[4].xy()).collect();
            let e_t: Vec<[f64; 2]> = cands_t.iter().map(|c| c[4].xy()).collect();
            let s = vec![ApSample { endpoints: e.clone(), confidences: conf.clone(), gt: gt[4].xy() }];
            let s_mono = vec![ApSample { endpoints: e.clone(), confidences: conf.iter().map(|c| (3.0 * c).exp() - 7.0).collect(), gt: gt[4].xy() }];
            let s_t = vec![ApSample { endpoints: e_t.clone(), confidences: conf.clone(), gt: gt_t[4].xy() }];
            let ap = average_precision(&s, 1.0);
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert_eq!(ap, average_precision(&s_mono, 1.0));
            prop_assert!((ap - average_precision(&s_t, 1.0)).abs() < 1e-12);

            let kept = endpoint_nms(&e, &conf, 6, 0.5);
            prop_assert!(kept.windows(2).all(|w| conf[w[0]] >= conf[w[1]]));
            prop_assert_eq!(kept, endpoint_nms(&e_t, &conf, 6, 0.5));

            let one = vec![cands[0].clone()];
            prop_assert_eq!(min_fde(&one, &gt, 1.0, 5.0).unwrap(), l2_at(&cands[0], &gt, 1.0, 5.0).unwrap());
        }
    }
}
