//! Target assignment, the multi-scale loss, mixture likelihood and training.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::anchors::{nearest_anchor_by_endpoint, AnchorSet, N_HORIZONS};
use crate::curation::TrainingSample;
use crate::error::{Error, Result};
use crate::policynet::tape::{smooth_l1, Tape, Var};
use crate::policynet::{
    LayerVars, ModelInput, Optimizer, OptimizerKind, PolicyConfig, PolicyNet, PredictionBundle, PreparedAnchors, Stage, Tensor,
    TokenMask,
};
use crate::rng::{self, Rng};
use crate::trajcore::{wrap_angle, Pose, Trajectory};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct AssignedTargets {
    /// Positive mode per horizon.
    pub positives: [usize; N_HORIZONS],
    pub m: usize,
    /// Ground-truth prefix per horizon, flattened `x y psi`.
    pub gt_prefix: [Vec<f64>; N_HORIZONS],
    /// Ground truth over the query-free span.
    pub qf_target: Vec<f64>,
}

impl AssignedTargets {
    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        one_hot(self.positives[i], self.m)
    }
}

pub fn one_hot(k: usize, m: usize) -> Vec<f64> {
    (0..m).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
}

fn flat(poses: &[Pose]) -> Vec<f64> {
    poses.iter().flat_map(|p| [p.x, p.y, p.psi]).collect()
}

/// Positive mode per horizon by anchor endpoint distance to the matching
/// ground-truth prefix endpoint.
pub fn assign_targets(anchors: &[AnchorSet], gt: &Trajectory) -> Result<AssignedTargets> {
    if anchors.len() != N_HORIZONS {
        return Err(Error::LengthMismatch {
            expected: N_HORIZONS,
            got: anchors.len(),
        });
    }
    let lens = crate::anchors::horizon_lengths(gt.len())?;
    let mut positives = [0; N_HORIZONS];
    let mut prefixes: [Vec<f64>; N_HORIZONS] = Default::default();
    for i in 0..N_HORIZONS {
        let prefix = gt.slice(0..lens[i]);
        positives[i] = nearest_anchor_by_endpoint(&anchors[i], &prefix)?;
        prefixes[i] = flat(&prefix.poses);
    }
    let m = anchors[0].m();
    if anchors.iter().any(|a| a.m() != m) {
        return Err(Error::ShapeMismatch("anchor sets differ in mode count".into()));
    }
    Ok(AssignedTargets {
        positives,
        m,
        qf_target: flat(&gt.poses[..gt.len() / 4]),
        gt_prefix: prefixes,
    })
}

/// Smooth-L1 over `x`, `y` and `w_psi` times the wrapped heading error,
/// averaged over waypoints.
pub fn regression_loss(pred: &[Pose], gt: &[Pose], w_psi: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let s: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| smooth_l1(p.x - g.x) + smooth_l1(p.y - g.y) + w_psi * smooth_l1(wrap_angle(p.psi - g.psi)))
        .sum();
    Ok(s / pred.len() as f64)
}

/// Mean binary cross-entropy over modes with confidences clamped to `[ε, 1-ε]`.
pub fn classification_loss(conf: &[f64], targets: &[f64]) -> f64 {
    let s: f64 = conf
        .iter()
        .zip(targets)
        .map(|(&q, &t)| {
            let q = q.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * q.ln() + (1.0 - t) * (1.0 - q).ln())
        })
        .sum();
    s / conf.len() as f64
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerLoss {
    pub total: f64,
    pub reg: f64,
    /// Classification term already weighted by λ.
    pub cls: f64,
    pub qf: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub per_layer: Vec<LayerLoss>,
    /// Layer means of the components.
    pub reg: f64,
    pub cls: f64,
    pub qf: f64,
}

impl LossReport {
    fn from_layers(per_layer: Vec<LayerLoss>) -> Self {
        let k = per_layer.len() as f64;
        let mean = |f: fn(&LayerLoss) -> f64| per_layer.iter().map(f).sum::<f64>() / k;
        LossReport {
            total: mean(|l| l.total),
            reg: mean(|l| l.reg),
            cls: mean(|l| l.cls),
            qf: mean(|l| l.qf),
            per_layer,
        }
    }

    fn add_scaled(&mut self, o: &LossReport, s: f64) {
        self.total += s * o.total;
        self.reg += s * o.reg;
        self.cls += s * o.cls;
        self.qf += s * o.qf;
    }
}

/// Loss of a bundle computed directly from its values.
pub fn total_loss(bundle: &PredictionBundle, targets: &AssignedTargets, cfg: &PolicyConfig) -> Result<LossReport> {
    if bundle.layers.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut layers = Vec::with_capacity(bundle.layers.len());
    for l in &bundle.layers {
        let mut ll = LayerLoss::default();
        for (i, h) in l.horizons.iter().enumerate() {
            let Some(h) = h else { continue };
            let gt: Vec<Pose> = targets.gt_prefix[i].chunks(3).map(|w| Pose::new(w[0], w[1], w[2])).collect();
            ll.reg += regression_loss(&h.trajectories[targets.positives[i]], &gt, cfg.w_psi)?;
            ll.cls += cfg.lambda * classification_loss(&h.confidences, &targets.one_hot(i));
        }
        if let Some(qf) = &l.qf {
            let gt: Vec<Pose> = targets.qf_target.chunks(3).map(|w| Pose::new(w[0], w[1], w[2])).collect();
            ll.qf = regression_loss(qf, &gt, cfg.w_psi)?;
        }
        ll.total = ll.reg + ll.cls + ll.qf;
        layers.push(ll);
    }
    Ok(LossReport::from_layers(layers))
}

/// Anchor-head terms of one layer: per horizon the positive-mode
/// regression, then λ times the classification.
fn anchor_terms(tape: &mut Tape, l: &LayerVars, targets: &AssignedTargets, cfg: &PolicyConfig) -> Result<(Vec<Var>, LayerLoss)> {
    let mut terms = Vec::new();
    let mut ll = LayerLoss::default();
    for i in 0..N_HORIZONS {
        let (Some(traj), Some(conf)) = (l.traj[i], l.conf[i]) else { continue };
        let pos = tape.gather_rows(traj, &[targets.positives[i]])?;
        let reg = tape.traj_smooth_l1(pos, &targets.gt_prefix[i], cfg.w_psi)?;
        let bce = tape.bce(conf, &targets.one_hot(i), BCE_EPS)?;
        let cls = tape.scale(bce, cfg.lambda);
        ll.reg += tape.value(reg).data[0];
        ll.cls += tape.value(cls).data[0];
        terms.push(reg);
        terms.push(cls);
    }
    Ok((terms, ll))
}

fn qf_term(tape: &mut Tape, qf: Var, targets: &AssignedTargets, cfg: &PolicyConfig) -> Result<Var> {
    tape.traj_smooth_l1(qf, &targets.qf_target, cfg.w_psi)
}

/// Appends the loss to a forward pass's tape and returns its scalar node.
pub fn tape_loss(
    fp: &mut crate::policynet::model::ForwardPass<'_>,
    targets: &AssignedTargets,
    cfg: &PolicyConfig,
) -> Result<(Var, LossReport)> {
    let tape = &mut fp.graph.tape;
    let mut layer_vars = Vec::with_capacity(fp.layers.len());
    let mut reports = Vec::with_capacity(fp.layers.len());
    for l in &fp.layers {
        let (mut terms, mut ll) = anchor_terms(tape, l, targets, cfg)?;
        if let Some(qf) = l.qf {
            let q = qf_term(tape, qf, targets, cfg)?;
            ll.qf = tape.value(q).data[0];
            terms.push(q);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        ll.total = tape.value(acc).data[0];
        layer_vars.push(acc);
        reports.push(ll);
    }
    let mut sum = layer_vars[0];
    for &v in &layer_vars[1..] {
        sum = tape.add(sum, v)?;
    }
    let total = tape.scale(sum, 1.0 / layer_vars.len() as f64);
    Ok((total, LossReport::from_layers(reports)))
}

/// Loss and parameter gradients for one sample under a given token mask.
pub fn loss_and_gradients(
    net: &PolicyNet,
    input: &ModelInput,
    anchors: &PreparedAnchors,
    targets: &AssignedTargets,
    mask: &TokenMask,
) -> Result<(LossReport, Vec<Tensor>)> {
    let mut fp = net.forward(input, anchors, mask)?;
    let (loss, report) = tape_loss(&mut fp, targets, &net.cfg)?;
    let grads = fp.graph.tape.backward(loss).param_grads(&net.params.shapes());
    Ok((report, grads))
}

pub fn loss_value(
    net: &PolicyNet,
    input: &ModelInput,
    anchors: &PreparedAnchors,
    targets: &AssignedTargets,
    mask: &TokenMask,
) -> Result<f64> {
    let mut fp = net.forward(input, anchors, mask)?;
    Ok(tape_loss(&mut fp, targets, &net.cfg)?.1.total)
}

/// Denominator floor of the gradient-check relative error. Central
/// differences carry roundoff of about `eps * |loss| / step`, near 1e-10 for
/// losses of order one at step 1e-5, so gradients far below this floor are
/// compared in absolute terms (1e-9 at a 1e-4 tolerance).
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: String,
    pub checked: usize,
}

/// Intermediate values of an unperturbed forward pass. A perturbed parameter
/// only re-runs the stages it feeds into, starting from these.
#[derive(Clone)]
struct StageCache {
    encoded: Tensor,
    /// Context after each layer's self-attention block.
    fused: Vec<Tensor>,
    /// Queries entering each layer.
    queries: Vec<[Option<Tensor>; N_HORIZONS]>,
    anchor_loss: Vec<f64>,
    qf_loss: Vec<f64>,
}

/// Total loss with every stage before `start` taken from `cache`. With
/// `start = Stage::Encoder` the cache is not read and a fresh one is returned.
fn staged_loss(
    net: &PolicyNet,
    input: &ModelInput,
    anchors: &PreparedAnchors,
    targets: &AssignedTargets,
    mask: &TokenMask,
    start: Stage,
    cache: Option<&StageCache>,
) -> Result<(f64, StageCache)> {
    let kl = net.cfg.k_layers;
    let mut g = net.graph();
    let mut out = match (start, cache) {
        (Stage::Encoder, _) | (_, None) => {
            let v = g.encode_context(input, mask)?;
            StageCache {
                encoded: g.tape.value(v).clone(),
                fused: vec![Tensor::zeros(0, 0); kl],
                queries: vec![Default::default(); kl],
                anchor_loss: vec![0.0; kl],
                qf_loss: vec![0.0; kl],
            }
        }
        (_, Some(c)) => c.clone(),
    };
    let start = if cache.is_none() { Stage::Encoder } else { start };
    let context_from = match start {
        Stage::Encoder => 0,
        Stage::Context(k) => k,
        _ => kl,
    };
    let query_from = match start {
        Stage::Encoder | Stage::Queries => 0,
        Stage::Context(k) | Stage::Query(k) => k,
        Stage::QueryFree(_) => kl,
    };
    let mut live_v = (context_from == 0).then(|| g.tape.constant(out.encoded.clone()));
    let mut live_q = if query_from == 0 { Some(g.initial_queries(anchors)?) } else { None };
    for j in 0..kl {
        let fused = if j >= context_from {
            let v_in = match live_v {
                Some(v) => v,
                None => g.tape.constant(out.fused[j - 1].clone()),
            };
            let f = g.context_block(j, v_in)?;
            out.fused[j] = g.tape.value(f).clone();
            live_v = Some(f);
            Some(f)
        } else {
            None
        };
        let recompute_qf = j >= context_from || start == Stage::QueryFree(j);
        if j < query_from && !recompute_qf {
            continue;
        }
        let fused = match fused {
            Some(f) => f,
            None => g.tape.constant(out.fused[j].clone()),
        };
        if j >= query_from {
            let q_in = match live_q {
                Some(q) => q,
                None => out.queries[j].clone().map(|t| t.map(|t| g.tape.constant(t))),
            };
            out.queries[j] = q_in.map(|q| q.map(|q| g.tape.value(q).clone()));
            let (lv, refined) = g.query_block(j, q_in, fused, anchors)?;
            let (_, ll) = anchor_terms(&mut g.tape, &lv, targets, &net.cfg)?;
            out.anchor_loss[j] = ll.reg + ll.cls;
            live_q = Some(refined);
        }
        if recompute_qf {
            out.qf_loss[j] = match g.qf_head(j, fused)? {
                Some(qf) => {
                    let q = qf_term(&mut g.tape, qf, targets, &net.cfg)?;
                    g.tape.value(q).data[0]
                }
                None => 0.0,
            };
        }
    }
    let total = (0..kl).map(|j| out.anchor_loss[j] + out.qf_loss[j]).sum::<f64>() / kl as f64;
    Ok((total, out))
}

/// Compares every `stride`-th parameter entry against central differences.
/// Relative error is `|a - n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
pub fn gradient_check(
    net: &PolicyNet,
    input: &ModelInput,
    anchors: &PreparedAnchors,
    targets: &AssignedTargets,
    mask: &TokenMask,
    step: f64,
    stride: usize,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_gradients(net, input, anchors, targets, mask)?;
    let (_, cache) = staged_loss(net, input, anchors, targets, mask, Stage::Encoder, None)?;
    let stages = net.param_stages();
    let mut work = net.clone();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut flat_index = 0usize;
    for p in 0..net.params.len() {
        for k in 0..net.params.get(p).data.len() {
            flat_index += 1;
            if !(flat_index - 1).is_multiple_of(stride.max(1)) {
                continue;
            }
            let orig = net.params.get(p).data[k];
            work.params.get_mut(p).data[k] = orig + step;
            let (fp, _) = staged_loss(&work, input, anchors, targets, mask, stages[p], Some(&cache))?;
            work.params.get_mut(p).data[k] = orig - step;
            let (fm, _) = staged_loss(&work, input, anchors, targets, mask, stages[p], Some(&cache))?;
            work.params.get_mut(p).data[k] = orig;
            let num = (fp - fm) / (2.0 * step);
            let ana = grads[p].data[k];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(GRAD_CHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{}[{k}] analytic {ana:e} numeric {num:e}", net.params.name(p));
            }
        }
    }
    Ok(report)
}

/// Gaussian mixture over trajectories with isotropic per-waypoint spread.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<[f64; 2]>>,
    pub sigmas: Vec<Vec<f64>>,
}

impl GmmParams {
    pub fn validate(&self) -> Result<()> {
        let m = self.weights.len();
        if m == 0 {
            return Err(Error::EmptyInput);
        }
        if self.means.len() != m || self.sigmas.len() != m {
            return Err(Error::LengthMismatch {
                expected: m,
                got: self.means.len().min(self.sigmas.len()),
            });
        }
        if self.sigmas.iter().flatten().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::DegenerateSigma);
        }
        if self.weights.iter().any(|&w| w < 0.0) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument("mixture weights must be non-negative and sum to 1".into()));
        }
        let t = self.means[0].len();
        if self.means.iter().any(|mu| mu.len() != t) || self.sigmas.iter().any(|s| s.len() != t) {
            return Err(Error::ShapeMismatch("mixture components differ in length".into()));
        }
        Ok(())
    }
}

/// Negative log-likelihood of `action` positions under the mixture.
pub fn gmm_nll(params: &GmmParams, action: &[[f64; 2]]) -> Result<f64> {
    params.validate()?;
    if action.len() != params.means[0].len() {
        return Err(Error::LengthMismatch {
            expected: params.means[0].len(),
            got: action.len(),
        });
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    let logs: Vec<f64> = (0..params.weights.len())
        .map(|m| {
            let mut l = params.weights[m].ln();
            for (tau, a) in action.iter().enumerate() {
                let mu = params.means[m][tau];
                let s2 = params.sigmas[m][tau] * params.sigmas[m][tau];
                let d2 = (a[0] - mu[0]).powi(2) + (a[1] - mu[1]).powi(2);
                l += -(two_pi * s2).ln() - d2 / (2.0 * s2);
            }
            l
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    let s: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
    Ok(-(mx + s.ln()))
}

/// One precomputed training example.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub input: ModelInput,
    pub targets: AssignedTargets,
}

pub fn prepare_items(cfg: &PolicyConfig, samples: &[TrainingSample], anchors: &[AnchorSet]) -> Result<Vec<TrainItem>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(TrainItem {
                id: s.id.clone(),
                input: ModelInput::from_sample(cfg, s)?,
                targets: assign_targets(anchors, &s.future)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Train-mode token masking.
    pub masking: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            lr0: 1e-4,
            optimizer: OptimizerKind::default(),
            grad_clip: None,
            seed: 0,
            masking: true,
        }
    }
}

/// Cosine decay from `lr0` at step 0 to 0 at `total`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let f = (step.min(total) as f64) / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * f).cos())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: LossReport,
    /// Learning rate at the first step of the epoch.
    pub lr: f64,
}

pub fn curve_to_text(curve: &[EpochLog]) -> String {
    let mut s = String::from("# epoch total reg cls qf lr\n");
    for e in curve {
        let _ = writeln!(
            s,
            "{} {:.6e} {:.6e} {:.6e} {:.6e} {:.6e}",
            e.epoch, e.loss.total, e.loss.reg, e.loss.cls, e.loss.qf, e.lr
        );
    }
    s
}

fn clip(grads: &mut [Tensor], max_norm: f64) {
    let n: f64 = grads.iter().flat_map(|g| &g.data).map(|x| x * x).sum::<f64>().sqrt();
    if n > max_norm {
        let s = max_norm / n;
        grads.iter_mut().flat_map(|g| &mut g.data).for_each(|x| *x *= s);
    }
}

/// Mini-batch training. Per-sample masks come from streams keyed by
/// `(seed, epoch, item)`, and batch gradients are summed in item order, so
/// the result does not depend on thread scheduling.
pub fn train(net: &mut PolicyNet, items: &[TrainItem], anchors: &PreparedAnchors, tc: &TrainConfig) -> Result<Vec<EpochLog>> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bs = tc.batch_size.max(1);
    let steps_per_epoch = items.len().div_ceil(bs);
    let total_steps = steps_per_epoch * tc.epochs;
    let mut opt = Optimizer::new(tc.optimizer, &net.params);
    let shapes = net.params.shapes();
    let mut curve = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut rng::stream(tc.seed, &[epoch as u64, u64::MAX]));
        let mut epoch_loss = LossReport::default();
        let lr_start = cosine_lr(tc.lr0, step, total_steps);
        for batch in order.chunks(bs) {
            let net_ref = &*net;
            let results: Vec<(LossReport, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| {
                    let mask = if tc.masking {
                        let mut r: Rng = rng::stream(tc.seed, &[epoch as u64, i as u64]);
                        TokenMask::sample(&net_ref.cfg, &mut r)
                    } else {
                        TokenMask::none(&net_ref.cfg)
                    };
                    loss_and_gradients(net_ref, &items[i].input, anchors, &items[i].targets, &mask)
                })
                .collect::<Result<_>>()?;
            let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
            let inv = 1.0 / batch.len() as f64;
            for (rep, g) in &results {
                epoch_loss.add_scaled(rep, 1.0 / items.len() as f64);
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, b) in acc.data.iter_mut().zip(&gi.data) {
                        *a += b * inv;
                    }
                }
            }
            if let Some(c) = tc.grad_clip {
                clip(&mut grads, c);
            }
            opt.apply(&mut net.params, &grads, cosine_lr(tc.lr0, step, total_steps));
            step += 1;
        }
        log::debug!("epoch {epoch} loss {:.5}", epoch_loss.total);
        curve.push(EpochLog {
            epoch,
            loss: epoch_loss,
            lr: lr_start,
        });
    }
    Ok(curve)
}

/// Mean eval-mode loss over items.
pub fn evaluate_loss(net: &PolicyNet, items: &[TrainItem], anchors: &PreparedAnchors) -> Result<LossReport> {
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let reps: Vec<LossReport> = items
        .par_iter()
        .map(|it| {
            let b = net.predict(&it.input, anchors)?;
            total_loss(&b, &it.targets, &net.cfg)
        })
        .collect::<Result<_>>()?;
    let mut out = LossReport::default();
    for r in &reps {
        out.add_scaled(r, 1.0 / reps.len() as f64);
    }
    Ok(out)
}
