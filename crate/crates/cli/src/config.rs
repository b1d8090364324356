//! Flat `key = value` run configuration.
//!
//! Every knob has a default taken from the owning module. A config file sets
//! any subset of keys, `--set key=value` flags override the file, and unknown
//! keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use walkpilot_core::curation::CurationConfig;
use walkpilot_core::expansion::{CorrectiveConfig, RelightConfig};
use walkpilot_core::metrics::EvalConfig;
use walkpilot_core::pipeline::CameraSpec;
use walkpilot_core::policynet::model::HeadMask;
use walkpilot_core::policynet::{OptimizerKind, PolicyConfig};
use walkpilot_core::scenegen::{ExpertConfig, RolloutConfig};
use walkpilot_core::supervision::TrainConfig;

/// A malformed command line or configuration. Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

struct Key {
    name: &'static str,
    default: String,
    help: &'static str,
}

fn key(name: &'static str, default: impl ToString, help: &'static str) -> Key {
    Key {
        name,
        default: default.to_string(),
        help,
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn keys() -> Vec<Key> {
    let cam = CameraSpec::default();
    let ex = ExpertConfig::default();
    let cu = CurationConfig::default();
    let co = CorrectiveConfig::default();
    let re = RelightConfig::default();
    let po = PolicyConfig::default();
    let tr = TrainConfig::default();
    let ev = EvalConfig::default();
    let ro = RolloutConfig::default();
    vec![
        key("seed", 0, "master seed; every stage derives its own stream"),
        key("scenarios", 64, "scenarios generated by `gen`"),
        key("difficulty", 0.5, "obstacle density in [0, 1]"),
        key("frames", ex.frames, "expert frames per scenario at 5 Hz"),
        key("image", cam.size, "square render size in pixels"),
        key("hfov", cam.hfov, "horizontal field of view, radians"),
        key("camera_height", cam.height_m, "camera height above ground, m"),
        key("camera_pitch", cam.pitch, "downward camera pitch, radians"),
        key("expert_speed", ex.speed, "expert cruise speed, m/s"),
        key("stop_prob", ex.stop_prob, "probability of a stop in an expert run"),
        key("anomaly_prob", ex.anomaly_prob, "probability that a stop carries a heading swing"),
        key("obstacle_slowdown", ex.obstacle_slowdown, "fractional slowdown while passing obstacles"),
        key("holdout_every", 4, "every k-th scenario is held out for testing"),
        key("t_h", cu.t_h, "history frames before the current one"),
        key("t", cu.t, "future waypoints, divisible by 8"),
        key("stride", cu.stride, "window stride in frames"),
        key("v_stop", cu.v_stop, "speed below which the robot counts as still, m/s"),
        key("theta_turn", cu.theta_turn, "heading change that labels a turn, radians"),
        key("omega_max", cu.omega_max, "yaw rate that flags rotation while still, rad/s"),
        key("v_back", cu.v_back, "backward speed that flags reversing, m/s"),
        key("n_abn", cu.n_abn, "consecutive abnormal frames before a window is dropped"),
        key("straight_cap", cu.straight_cap, "maximum share of straight windows"),
        key("alpha_min", co.alpha_min, "smallest corrective displacement, m or rad"),
        key("alpha_max", co.alpha_max, "largest corrective displacement, m or rad"),
        key("p_lateral", co.p_lateral, "probability of a lateral rather than angular perturbation"),
        key("c_min", co.c_min, "minimum reprojection coverage of a corrective frame"),
        key("splat_px", co.splat_px, "splat size in pixels"),
        key("d_max", co.d_max, "depth beyond which points are not reprojected, m"),
        key("relight_gain", format!("{},{}", re.gain.0, re.gain.1), "relighting gain range"),
        key("relight_gamma", format!("{},{}", re.gamma.0, re.gamma.1), "relighting gamma range"),
        key("relight_tint", format!("{},{}", re.tint.0, re.tint.1), "per-channel tint range"),
        key("relight_strength_f", re.strength_f, "relighting strength on the foreground"),
        key("relight_strength_b", re.strength_b, "relighting strength on the background"),
        key("relight_d_split", re.d_split, "foreground/background depth split, m"),
        key("m", po.m, "anchors per horizon"),
        key("kmeans_iters", 50, "k-means iteration cap"),
        key("c", po.c, "hidden size"),
        key("layers", po.k_layers, "decoder layers"),
        key("heads", po.n_heads, "attention heads"),
        key("patch", po.patch, "patch size in pixels"),
        key("pool", po.pool, "patches pooled per fine token along each axis"),
        key("coarse_grid", po.coarse_grid, "pooling grid of history frames"),
        key("time_embed", po.time_embed, "time embedding size"),
        key("ffn_mult", po.ffn_mult, "feed-forward width multiplier"),
        key("lambda", po.lambda, "classification loss weight"),
        key("w_psi", po.w_psi, "heading weight in the regression loss"),
        key("goal_mask_p", po.goal_mask_p, "training probability of masking the goal token"),
        key("token_mask_p", po.token_mask_p, "training probability of masking an observation token"),
        key("head_mask", po.heads.to_text(), "enabled heads I,S,M,L,QF as 0/1"),
        key("positional", po.positional, "learned positions on fine tokens"),
        key("epochs", tr.epochs, "training epochs"),
        key("batch_size", tr.batch_size, "mini-batch size"),
        key("lr", tr.lr0, "initial learning rate, cosine-decayed to 0"),
        key("optimizer", "momentum", "momentum or adam"),
        key("momentum", 0.9, "momentum coefficient"),
        key("grad_clip", 0, "global gradient-norm clip, 0 disables"),
        key("masking", tr.masking, "token masking during training"),
        key("match_time_s", ev.match_time_s, "time of the endpoint used for mAP matching, s"),
        key("match_radius_m", ev.match_radius_m, "mAP match radius, m"),
        key("horizons_s", join(&ev.horizons_s), "L2 horizons, s"),
        key("nms_top_k", ev.nms_top_k, "trajectories kept by endpoint NMS"),
        key("nms_radius_m", ev.nms_radius_m, "endpoint NMS radius, m"),
        key("rollout_steps", ro.max_steps, "control steps per rollout"),
        key("goal_lookahead", ro.goal_lookahead, "goal look-ahead along the expert path, frames"),
        key("max_speed", ro.max_speed, "rollout speed clamp, m/s"),
        key("goal_radius", ro.goal_radius, "goal-reached radius, m"),
    ]
}

/// The `--help` epilogue: every key with its default.
pub fn key_help() -> String {
    let ks = keys();
    let w = ks.iter().map(|k| k.name.len() + k.default.len() + 3).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (file lines or --set key=value):\n");
    for k in ks {
        let kv = format!("{} = {}", k.name, k.default);
        s += &format!("  {kv:<w$}  {}\n", k.help);
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: keys().into_iter().map(|k| (k.name, k.default)).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, k: &str, v: &str) -> anyhow::Result<()> {
        let Some((&name, _)) = self.values.get_key_value(k) else {
            return Err(usage(format!("unknown config key `{k}`")));
        };
        self.values.insert(name, v.trim().to_string());
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> anyhow::Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects key=value, got `{o}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn get<T: FromStr>(&self, k: &str) -> anyhow::Result<T> {
        let v = &self.values[k];
        v.parse().map_err(|_| usage(format!("bad value `{v}` for `{k}`")))
    }

    fn range(&self, k: &str) -> anyhow::Result<(f64, f64)> {
        let v = self.list(k)?;
        match v[..] {
            [a, b] if a <= b => Ok((a, b)),
            _ => Err(usage(format!("`{k}` expects lo,hi"))),
        }
    }

    fn list(&self, k: &str) -> anyhow::Result<Vec<f64>> {
        self.values[k]
            .split(',')
            .map(|t| t.trim().parse().map_err(|_| usage(format!("bad list `{}` for `{k}`", self.values[k]))))
            .collect()
    }

    pub fn seed(&self) -> anyhow::Result<u64> {
        self.get("seed")
    }

    pub fn camera(&self) -> anyhow::Result<CameraSpec> {
        Ok(CameraSpec {
            size: self.get("image")?,
            hfov: self.get("hfov")?,
            height_m: self.get("camera_height")?,
            pitch: self.get("camera_pitch")?,
        })
    }

    pub fn expert(&self) -> anyhow::Result<ExpertConfig> {
        Ok(ExpertConfig {
            frames: self.get("frames")?,
            speed: self.get("expert_speed")?,
            stop_prob: self.get("stop_prob")?,
            anomaly_prob: self.get("anomaly_prob")?,
            obstacle_slowdown: self.get("obstacle_slowdown")?,
            ..Default::default()
        })
    }

    pub fn curation(&self) -> anyhow::Result<CurationConfig> {
        Ok(CurationConfig {
            v_stop: self.get("v_stop")?,
            theta_turn: self.get("theta_turn")?,
            omega_max: self.get("omega_max")?,
            v_back: self.get("v_back")?,
            n_abn: self.get("n_abn")?,
            straight_cap: self.get("straight_cap")?,
            t_h: self.get("t_h")?,
            t: self.get("t")?,
            stride: self.get("stride")?,
        })
    }

    pub fn corrective(&self) -> anyhow::Result<CorrectiveConfig> {
        Ok(CorrectiveConfig {
            alpha_min: self.get("alpha_min")?,
            alpha_max: self.get("alpha_max")?,
            p_lateral: self.get("p_lateral")?,
            c_min: self.get("c_min")?,
            splat_px: self.get("splat_px")?,
            d_max: self.get("d_max")?,
        })
    }

    pub fn relight(&self) -> anyhow::Result<RelightConfig> {
        Ok(RelightConfig {
            gain: self.range("relight_gain")?,
            gamma: self.range("relight_gamma")?,
            tint: self.range("relight_tint")?,
            strength_f: self.get("relight_strength_f")?,
            strength_b: self.get("relight_strength_b")?,
            d_split: self.get("relight_d_split")?,
        })
    }

    /// Policy shape for inputs of `image` pixels.
    pub fn policy(&self, image: usize) -> anyhow::Result<PolicyConfig> {
        let mask: String = self.get("head_mask")?;
        Ok(PolicyConfig {
            t_h: self.get("t_h")?,
            t: self.get("t")?,
            m: self.get("m")?,
            c: self.get("c")?,
            k_layers: self.get("layers")?,
            n_heads: self.get("heads")?,
            image,
            patch: self.get("patch")?,
            pool: self.get("pool")?,
            coarse_grid: self.get("coarse_grid")?,
            time_embed: self.get("time_embed")?,
            ffn_mult: self.get("ffn_mult")?,
            lambda: self.get("lambda")?,
            w_psi: self.get("w_psi")?,
            goal_mask_p: self.get("goal_mask_p")?,
            token_mask_p: self.get("token_mask_p")?,
            heads: HeadMask::parse(&mask).ok_or_else(|| usage(format!("bad head_mask `{mask}`")))?,
            positional: self.get("positional")?,
            ..Default::default()
        })
    }

    pub fn train(&self) -> anyhow::Result<TrainConfig> {
        let optimizer = match self.get::<String>("optimizer")?.as_str() {
            "momentum" => OptimizerKind::Momentum {
                beta: self.get("momentum")?,
            },
            "adam" => OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            other => return Err(usage(format!("unknown optimizer `{other}`"))),
        };
        let clip: f64 = self.get("grad_clip")?;
        Ok(TrainConfig {
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            lr0: self.get("lr")?,
            optimizer,
            grad_clip: (clip > 0.0).then_some(clip),
            seed: self.seed()?,
            masking: self.get("masking")?,
        })
    }

    pub fn eval(&self) -> anyhow::Result<EvalConfig> {
        Ok(EvalConfig {
            match_time_s: self.get("match_time_s")?,
            match_radius_m: self.get("match_radius_m")?,
            horizons_s: self.list("horizons_s")?,
            nms_top_k: self.get("nms_top_k")?,
            nms_radius_m: self.get("nms_radius_m")?,
            ..Default::default()
        })
    }

    pub fn rollout(&self, base: RolloutConfig) -> anyhow::Result<RolloutConfig> {
        Ok(RolloutConfig {
            max_steps: self.get("rollout_steps")?,
            goal_lookahead: self.get("goal_lookahead")?,
            max_speed: self.get("max_speed")?,
            goal_radius: self.get("goal_radius")?,
            ..base
        })
    }
}
