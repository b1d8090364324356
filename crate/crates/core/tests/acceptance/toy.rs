//! Toy-scale training runs shared by the trainability, ablation, closed-loop
//! and head-structure criteria.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use walkpilot_core::anchors::AnchorSet;
use walkpilot_core::curation::CurationConfig;
use walkpilot_core::expansion::CorrectiveConfig;
use walkpilot_core::metrics::{EvalConfig, EvalReport};
use walkpilot_core::pipeline::{
    anchor_baseline, curate_scenarios, evaluate, expand_samples, fit_anchors, generate_dataset, recovery_split,
    rollout_config, rollout_many, split_scenarios, summarize_rollouts, train_policy, CameraSpec,
};
use walkpilot_core::policynet::{HeadMask, PolicyConfig, PolicyNet, PreparedAnchors};
use walkpilot_core::scenegen::ExpertConfig;
use walkpilot_core::supervision::{evaluate_loss, prepare_items, train, TrainConfig};
use walkpilot_core::TrainingSample;

use crate::Outcome;

const SCENARIOS: usize = 64;
const DATA_SEED: u64 = 7;
const SEEDS: [u64; 3] = [0, 1, 2];
const ROLLOUT_SCENARIOS: usize = 10;

fn camera() -> CameraSpec {
    CameraSpec {
        size: 32,
        ..Default::default()
    }
}

fn curation() -> CurationConfig {
    CurationConfig {
        t_h: 4,
        t: 40,
        stride: 4,
        ..Default::default()
    }
}

fn policy() -> PolicyConfig {
    PolicyConfig {
        t_h: 4,
        t: 40,
        m: 4,
        c: 16,
        k_layers: 2,
        image: 32,
        patch: 4,
        pool: 1,
        coarse_grid: 4,
        time_embed: 8,
        ..Default::default()
    }
}

/// Default momentum optimizer; the learning rate is raised for the small
/// model and short schedule.
fn training(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        batch_size: 16,
        lr0: 3e-2,
        seed,
        ..Default::default()
    }
}

pub struct Model {
    pub net: PolicyNet,
    pub anchors: Vec<AnchorSet>,
}

fn fit(samples: &[TrainingSample], pc: &PolicyConfig, seed: u64) -> Model {
    let anchors = fit_anchors(samples, pc.m, seed, 50).unwrap();
    let (net, _) = train_policy(pc, &training(seed), samples, &anchors).unwrap();
    Model { net, anchors }
}

pub struct SeedRun {
    pub seed: u64,
    pub corrective: usize,
    pub regular_without: EvalReport,
    pub regular_with: EvalReport,
    pub baseline_without: EvalReport,
    pub recovery_without: EvalReport,
    pub recovery_with: EvalReport,
    pub lateral_without: f64,
    pub lateral_with: f64,
}

pub struct ToyRuns {
    pub train_samples: usize,
    pub test_samples: usize,
    pub recovery_samples: usize,
    pub seeds: Vec<SeedRun>,
    pub qf_only: EvalReport,
    pub qf_reenabled: EvalReport,
    pub full: EvalReport,
    pub seconds: f64,
}

static RUNS: OnceLock<Result<ToyRuns, String>> = OnceLock::new();

pub fn runs() -> Result<&'static ToyRuns, String> {
    RUNS.get_or_init(|| {
        catch_unwind(AssertUnwindSafe(build)).map_err(|e| {
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "toy runs panicked".into())
        })
    })
    .as_ref()
    .map_err(|e| format!("toy runs failed: {e}"))
}

fn build() -> ToyRuns {
    let t0 = Instant::now();
    let data = generate_dataset(SCENARIOS, DATA_SEED, 0.5, &camera(), &ExpertConfig::default()).unwrap();
    let (train_sc, test_sc) = split_scenarios(&data, 4);
    let cc = curation();
    let (train_s, _) = curate_scenarios(&train_sc, &cc, 1).unwrap();
    let (test_s, _) = curate_scenarios(&test_sc, &cc, 1).unwrap();
    let corr = CorrectiveConfig::default();
    let recovery = recovery_split(&test_s, &corr, 99).unwrap();
    let pc = policy();
    let ec = EvalConfig::default();
    let rc = rollout_config(&pc);
    let probe: Vec<_> = test_sc.iter().take(ROLLOUT_SCENARIOS).copied().collect();
    let lateral = |m: &Model| summarize_rollouts(&rollout_many(&m.net, &m.anchors, &probe, &rc).unwrap())["max_lateral"];

    let mut seeds = Vec::new();
    let mut full = None;
    let mut full_anchors = None;
    for seed in SEEDS {
        let without = fit(&train_s, &pc, seed);
        let (expanded, rep) = expand_samples(&train_s, Some(&corr), None, seed).unwrap();
        let with = fit(&expanded, &pc, seed);
        let run = SeedRun {
            seed,
            corrective: rep.corrective,
            regular_without: evaluate(&without.net, &without.anchors, &test_s, &ec).unwrap(),
            regular_with: evaluate(&with.net, &with.anchors, &test_s, &ec).unwrap(),
            baseline_without: anchor_baseline(&without.anchors, &test_s, &ec).unwrap(),
            recovery_without: evaluate(&without.net, &without.anchors, &recovery, &ec).unwrap(),
            recovery_with: evaluate(&with.net, &with.anchors, &recovery, &ec).unwrap(),
            lateral_without: lateral(&without),
            lateral_with: lateral(&with),
        };
        eprintln!(
            "seed {seed}: regular without {} | with {}\n        recovery without {} | with {}\n        max lateral without {:.4} with {:.4} [{:.0}s]",
            run.regular_without.to_line(),
            run.regular_with.to_line(),
            run.recovery_without.to_line(),
            run.recovery_with.to_line(),
            run.lateral_without,
            run.lateral_with,
            t0.elapsed().as_secs_f64()
        );
        if seed == SEEDS[0] {
            full = Some(run.regular_without.clone());
            full_anchors = Some(without.anchors.clone());
        }
        seeds.push(run);
    }

    // Same data and anchors as the seed-0 model, only the query-free head.
    let anchors = full_anchors.unwrap();
    let qf_cfg = PolicyConfig {
        heads: HeadMask::qf_only(),
        ..pc.clone()
    };
    let (qf_net, _) = train_policy(&qf_cfg, &training(SEEDS[0]), &train_s, &anchors).unwrap();
    let qf_only = evaluate(&qf_net, &anchors, &test_s, &ec).unwrap();
    let reenabled = qf_net.with_heads(HeadMask::ALL, SEEDS[0]).unwrap();
    let qf_reenabled = evaluate(&reenabled, &anchors, &test_s, &ec).unwrap();

    ToyRuns {
        train_samples: train_s.len(),
        test_samples: test_s.len(),
        recovery_samples: recovery.len(),
        seeds,
        qf_only,
        qf_reenabled,
        full: full.unwrap(),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

pub fn overfit() -> Outcome {
    let data = generate_dataset(1, 11, 0.5, &camera(), &ExpertConfig::default()).unwrap();
    let refs: Vec<_> = data.iter().collect();
    let cc = CurationConfig {
        straight_cap: 1.0,
        ..curation()
    };
    let (samples, _) = curate_scenarios(&refs, &cc, 1).unwrap();
    let pc = policy();
    let anchors = fit_anchors(&samples, pc.m, 0, 50).unwrap();
    let pa = PreparedAnchors::new(&pc, &anchors).unwrap();
    let items = prepare_items(&pc, &samples[samples.len() / 2..samples.len() / 2 + 1], &anchors).unwrap();
    let mut net = PolicyNet::new(pc, 0).unwrap();
    let before = evaluate_loss(&net, &items, &pa).unwrap().total;
    let tc = TrainConfig {
        epochs: 500,
        batch_size: 1,
        lr0: 3e-2,
        grad_clip: Some(1.0),
        masking: false,
        ..Default::default()
    };
    train(&mut net, &items, &pa, &tc).unwrap();
    let after = evaluate_loss(&net, &items, &pa).unwrap().total;
    Outcome::new(
        after * 10.0 <= before,
        format!("total loss {before:.4} -> {after:.5} in 500 steps ({:.1}x)", before / after),
    )
}

pub fn trainability() -> Outcome {
    let r = match runs() {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e),
    };
    let s = &r.seeds[0];
    let net = s.regular_without.min_ade_1s;
    let base = s.baseline_without.min_ade_1s;
    Outcome::new(
        net <= 0.7 * base,
        format!(
            "{} train / {} test samples, {:.0}s total: minADE_1s {net:.4} vs anchors {base:.4} (ratio {:.3}, need <= 0.7)",
            r.train_samples,
            r.test_samples,
            r.seconds,
            net / base
        ),
    )
}

pub fn ablation() -> Outcome {
    let r = match runs() {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e),
    };
    let n = r.seeds.len() as f64;
    let ade_wins = r
        .seeds
        .iter()
        .filter(|s| s.recovery_with.min_ade_1s < s.recovery_without.min_ade_1s)
        .count();
    let l2 = |rep: &EvalReport| rep.l2_at(2.0).unwrap_or(f64::INFINITY);
    let l2_with = r.seeds.iter().map(|s| l2(&s.recovery_with)).sum::<f64>() / n;
    let l2_without = r.seeds.iter().map(|s| l2(&s.recovery_without)).sum::<f64>() / n;
    let worst_regular = r
        .seeds
        .iter()
        .map(|s| s.regular_with.min_ade_1s / s.regular_without.min_ade_1s)
        .fold(0.0, f64::max);
    let per_seed: Vec<String> = r
        .seeds
        .iter()
        .map(|s| {
            format!(
                "seed {} (+{} corrective): {:.4}/{:.4}",
                s.seed, s.corrective, s.recovery_with.min_ade_1s, s.recovery_without.min_ade_1s
            )
        })
        .collect();
    Outcome::new(
        ade_wins == r.seeds.len() && l2_with < l2_without && worst_regular <= 1.1,
        format!(
            "{} recovery samples; minADE_1s with/without {}; wins {ade_wins}/{}; mean L2_2s {l2_with:.4} vs {l2_without:.4}; worst regular ratio {worst_regular:.3}",
            r.recovery_samples,
            per_seed.join(", "),
            r.seeds.len()
        ),
    )
}

pub fn closed_loop() -> Outcome {
    let r = match runs() {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e),
    };
    let n = r.seeds.len() as f64;
    let with = r.seeds.iter().map(|s| s.lateral_with).sum::<f64>() / n;
    let without = r.seeds.iter().map(|s| s.lateral_without).sum::<f64>() / n;
    Outcome::new(
        with < without,
        format!(
            "{ROLLOUT_SCENARIOS} scenarios x {} seeds: mean max lateral deviation {with:.4} m with vs {without:.4} m without",
            r.seeds.len()
        ),
    )
}

pub fn qf_only() -> Outcome {
    let r = match runs() {
        Ok(r) => r,
        Err(e) => return Outcome::new(false, e),
    };
    let fmt = |m: Option<f64>| m.map_or("none".to_string(), |v| format!("{v:.4}"));
    let ok = r.qf_only.map.is_none()
        && match (r.qf_reenabled.map, r.full.map) {
            (Some(a), Some(b)) => a < b,
            _ => false,
        };
    Outcome::new(
        ok,
        format!(
            "QF-only mAP {}; re-enabled heads mAP {} vs full model {}",
            fmt(r.qf_only.map),
            fmt(r.qf_reenabled.map),
            fmt(r.full.map)
        ),
    )
}
