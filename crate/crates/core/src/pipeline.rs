//! Stage wiring shared by the CLI and the acceptance suite.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::anchors::{build_anchor_sets, AnchorSet};
use crate::camgeom::CameraModel;
use crate::curation::{curate, CurationConfig, CurationReport, RecordedLog, TrainingSample};
use crate::error::{Error, Result};
use crate::expansion::{relight_sample, sample_corrective, CorrectiveConfig, RelightConfig};
use crate::metrics::{evaluate_bundles, EvalConfig, EvalReport};
use crate::policynet::{HorizonPrediction, LayerPrediction, ModelInput, PolicyConfig, PolicyNet, PredictionBundle, PreparedAnchors};
use crate::rng::{self, hash_str};
use crate::scenegen::{generate_scenario, rollout, DrivingPolicy, ExpertConfig, Observation, RolloutConfig, RolloutStats, ScenarioData};
use crate::supervision::{prepare_items, train, EpochLog, TrainConfig};
use crate::trajcore::{encode_goal, Pose};

#[derive(Clone, Debug, PartialEq)]
pub struct CameraSpec {
    pub size: usize,
    pub hfov: f64,
    pub height_m: f64,
    pub pitch: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        CameraSpec {
            size: 64,
            hfov: 1.4,
            height_m: 0.6,
            pitch: 0.15,
        }
    }
}

impl CameraSpec {
    pub fn model(&self) -> CameraModel {
        CameraModel::forward_facing(self.size, self.hfov, self.height_m, self.pitch)
    }
}

/// Scenario `i` of a dataset uses seed `derive_seed(seed, [i])`.
pub fn scenario_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[i as u64])
}

pub fn generate_dataset(
    n: usize,
    seed: u64,
    difficulty: f64,
    camera: &CameraSpec,
    expert: &ExpertConfig,
) -> Result<Vec<ScenarioData>> {
    let cam = camera.model();
    (0..n)
        .into_par_iter()
        .map(|i| generate_scenario(scenario_seed(seed, i), difficulty, &cam, expert))
        .collect()
}

/// Whether scenario `i` belongs to the test split: every `holdout_every`-th
/// scenario does.
pub fn is_holdout(i: usize, holdout_every: usize) -> bool {
    let k = holdout_every.max(2);
    i % k == k - 1
}

pub fn split_scenarios(data: &[ScenarioData], holdout_every: usize) -> (Vec<&ScenarioData>, Vec<&ScenarioData>) {
    let (test, train): (Vec<_>, Vec<_>) = data.iter().enumerate().partition(|(i, _)| is_holdout(*i, holdout_every));
    (train.into_iter().map(|x| x.1).collect(), test.into_iter().map(|x| x.1).collect())
}

pub fn curate_scenarios(data: &[&ScenarioData], cfg: &CurationConfig, seed: u64) -> Result<(Vec<TrainingSample>, CurationReport)> {
    let logs: Vec<RecordedLog> = data.iter().map(|d| d.log()).collect();
    curate(&logs, cfg, seed)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExpandReport {
    pub originals: usize,
    pub corrective: usize,
    pub relit: usize,
    /// Corrective draws rejected for low reprojection coverage.
    pub low_coverage: usize,
}

/// Originals followed by their corrective and relit expansions. Each sample
/// draws from its own stream keyed by its id.
pub fn expand_samples(
    samples: &[TrainingSample],
    corrective: Option<&CorrectiveConfig>,
    relight: Option<&RelightConfig>,
    seed: u64,
) -> Result<(Vec<TrainingSample>, ExpandReport)> {
    let mut report = ExpandReport {
        originals: samples.len(),
        ..Default::default()
    };
    let mut out = samples.to_vec();
    if let Some(cc) = corrective {
        let pairs: Vec<Option<TrainingSample>> = samples
            .par_iter()
            .map(|s| {
                let mut r = rng::stream(seed, &[hash_str(&s.id), 1]);
                match sample_corrective(s, cc, &mut r) {
                    Ok(p) => Ok(Some(p.to_sample(s))),
                    Err(Error::InsufficientCoverage { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        for p in pairs {
            match p {
                Some(s) => {
                    report.corrective += 1;
                    out.push(s);
                }
                None => report.low_coverage += 1,
            }
        }
    }
    if let Some(rc) = relight {
        let relit: Vec<TrainingSample> = samples
            .par_iter()
            .map(|s| relight_sample(s, rc, &mut rng::stream(seed, &[hash_str(&s.id), 2])))
            .collect::<Result<_>>()?;
        report.relit = relit.len();
        out.extend(relit);
    }
    Ok((out, report))
}

/// Held-out samples seen from perturbed viewpoints, labelled with their
/// recovery futures. Uses a different stream than training expansion.
pub fn recovery_split(samples: &[TrainingSample], cfg: &CorrectiveConfig, seed: u64) -> Result<Vec<TrainingSample>> {
    let out: Vec<Option<TrainingSample>> = samples
        .par_iter()
        .map(|s| {
            let mut r = rng::stream(seed, &[hash_str(&s.id), 3]);
            match sample_corrective(s, cfg, &mut r) {
                Ok(p) => Ok(Some(p.to_sample(s))),
                Err(Error::InsufficientCoverage { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

pub fn fit_anchors(samples: &[TrainingSample], m: usize, seed: u64, max_iter: usize) -> Result<Vec<AnchorSet>> {
    let futures: Vec<_> = samples.iter().map(|s| s.future.clone()).collect();
    build_anchor_sets(&futures, m, seed, max_iter)
}

pub fn train_policy(
    policy: &PolicyConfig,
    tc: &TrainConfig,
    samples: &[TrainingSample],
    anchors: &[AnchorSet],
) -> Result<(PolicyNet, Vec<EpochLog>)> {
    let mut net = PolicyNet::new(policy.clone(), rng::derive_seed(tc.seed, &[1]))?;
    let pa = PreparedAnchors::new(policy, anchors)?;
    let items = prepare_items(policy, samples, anchors)?;
    let curve = train(&mut net, &items, &pa, tc)?;
    Ok((net, curve))
}

pub fn predict_all(net: &PolicyNet, anchors: &[AnchorSet], samples: &[TrainingSample]) -> Result<Vec<PredictionBundle>> {
    let pa = PreparedAnchors::new(&net.cfg, anchors)?;
    samples
        .par_iter()
        .map(|s| net.predict(&ModelInput::from_sample(&net.cfg, s)?, &pa))
        .collect()
}

pub fn evaluate(net: &PolicyNet, anchors: &[AnchorSet], samples: &[TrainingSample], cfg: &EvalConfig) -> Result<EvalReport> {
    let bundles = predict_all(net, anchors, samples)?;
    let gts: Vec<Vec<Pose>> = samples.iter().map(|s| s.future.poses.clone()).collect();
    evaluate_bundles(&bundles, &gts, cfg)
}

/// The anchors themselves as a one-layer prediction with uniform confidence.
pub fn anchor_bundle(anchors: &[AnchorSet]) -> PredictionBundle {
    let horizons = [0, 1, 2, 3].map(|i| {
        anchors.get(i).map(|a| HorizonPrediction {
            trajectories: a.anchors.clone(),
            confidences: vec![0.5; a.m()],
        })
    });
    PredictionBundle {
        layers: vec![LayerPrediction { horizons, qf: None }],
    }
}

pub fn anchor_baseline(anchors: &[AnchorSet], samples: &[TrainingSample], cfg: &EvalConfig) -> Result<EvalReport> {
    let b = anchor_bundle(anchors);
    let bundles = vec![b; samples.len()];
    let gts: Vec<Vec<Pose>> = samples.iter().map(|s| s.future.poses.clone()).collect();
    evaluate_bundles(&bundles, &gts, cfg)
}

/// Drives with the most confident full-horizon trajectory of a network.
pub struct NetPolicy<'a> {
    pub net: &'a PolicyNet,
    pub anchors: PreparedAnchors,
}

impl<'a> NetPolicy<'a> {
    pub fn new(net: &'a PolicyNet, anchors: &[AnchorSet]) -> Result<Self> {
        Ok(NetPolicy {
            net,
            anchors: PreparedAnchors::new(&net.cfg, anchors)?,
        })
    }
}

impl DrivingPolicy for NetPolicy<'_> {
    fn plan(&mut self, obs: &Observation<'_>) -> Result<Vec<Pose>> {
        let input = ModelInput::new(&self.net.cfg, obs.frames, &encode_goal(obs.goal_xy), obs.camera)?;
        let b = self.net.predict(&input, &self.anchors)?;
        let best = b.best_trajectory().ok_or(Error::EmptyInput)?;
        if best.len() < 2 {
            return Err(Error::TooShort("plan needs two waypoints".into()));
        }
        Ok(best.to_vec())
    }
}

pub fn rollout_config(policy: &PolicyConfig) -> RolloutConfig {
    RolloutConfig {
        history: policy.t_h,
        controller_step_s: 1.0 / policy.rate_hz,
        ..Default::default()
    }
}

pub fn rollout_many(net: &PolicyNet, anchors: &[AnchorSet], scenarios: &[&ScenarioData], cfg: &RolloutConfig) -> Result<Vec<RolloutStats>> {
    scenarios
        .par_iter()
        .map(|s| {
            let mut p = NetPolicy::new(net, anchors)?;
            Ok(rollout(&mut p, &s.scenario, cfg)?.stats)
        })
        .collect()
}

/// Mean of max lateral deviation, mean lateral deviation and goal rate.
pub fn summarize_rollouts(stats: &[RolloutStats]) -> BTreeMap<&'static str, f64> {
    let n = stats.len().max(1) as f64;
    let mut m = BTreeMap::new();
    m.insert("max_lateral", stats.iter().map(|s| s.max_lateral).sum::<f64>() / n);
    m.insert("mean_lateral", stats.iter().map(|s| s.mean_lateral).sum::<f64>() / n);
    m.insert("goal_rate", stats.iter().filter(|s| s.goal_reached).count() as f64 / n);
    m
}
