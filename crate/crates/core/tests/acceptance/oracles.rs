//! Brute-force reference implementations of the open-loop metrics.

fn d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

/// Waypoint count for a horizon, rounding halves up.
pub fn steps(horizon_s: f64, rate_hz: f64) -> usize {
    (horizon_s * rate_hz + 0.5).floor() as usize
}

pub fn min_ade(cands: &[Vec<[f64; 2]>], gt: &[[f64; 2]], n: usize) -> f64 {
    let mut best = f64::INFINITY;
    for c in cands {
        let mut s = 0.0;
        for k in 0..n {
            s += d(c[k], gt[k]);
        }
        best = best.min(s / n as f64);
    }
    best
}

pub fn min_fde(cands: &[Vec<[f64; 2]>], gt: &[[f64; 2]], n: usize) -> f64 {
    cands.iter().map(|c| d(c[n - 1], gt[n - 1])).fold(f64::INFINITY, f64::min)
}

/// AP over pooled predictions: `preds` are `(confidence, sample, endpoint)`,
/// `gts` one endpoint per sample. Precision and recall are recomputed from
/// scratch at every cut-off.
pub fn average_precision(preds: &[(f64, usize, [f64; 2])], gts: &[[f64; 2]], radius: f64) -> f64 {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    // Ties broken by sample, then by position within the sample.
    order.sort_by(|&a, &b| preds[b].0.partial_cmp(&preds[a].0).unwrap().then(preds[a].1.cmp(&preds[b].1)).then(a.cmp(&b)));
    let p = order.len();
    let n = gts.len() as f64;
    let mut prec = vec![0.0; p + 1];
    let mut rec = vec![0.0; p + 1];
    for k in 1..=p {
        let mut taken = vec![false; gts.len()];
        let mut tp = 0usize;
        for &i in &order[..k] {
            let (_, s, e) = preds[i];
            if !taken[s] && d(e, gts[s]) <= radius {
                taken[s] = true;
                tp += 1;
            }
        }
        prec[k] = tp as f64 / k as f64;
        rec[k] = tp as f64 / n;
    }
    let mut ap = 0.0;
    for k in 1..=p {
        let envelope = (k..=p).map(|j| prec[j]).fold(0.0, f64::max);
        ap += (rec[k] - rec[k - 1]) * envelope;
    }
    ap
}

/// Classical NMS: repeatedly take the most confident survivor and delete
/// everything within `radius` of it.
pub fn nms(endpoints: &[[f64; 2]], conf: &[f64], top_k: usize, radius: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; endpoints.len()];
    let mut out = Vec::new();
    while out.len() < top_k {
        let mut pick: Option<usize> = None;
        for i in 0..endpoints.len() {
            if alive[i] && pick.is_none_or(|p| conf[i] > conf[p]) {
                pick = Some(i);
            }
        }
        let Some(p) = pick else { break };
        out.push(p);
        for i in 0..endpoints.len() {
            if d(endpoints[i], endpoints[p]) <= radius {
                alive[i] = false;
            }
        }
    }
    out
}
