//! The policy network: patch encoder, FiLM-modulated history tokens,
//! self-attention context fusion and an anchor-query decoder with per-layer
//! query-based and query-free heads.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng as _;
use rand::SeedableRng;

use super::params::{Init, ParamStore};
use super::tape::{Tape, Tensor, Var};
use crate::anchors::{horizon_lengths, AnchorSet, N_HORIZONS};
use crate::camgeom::{CameraModel, RgbFrame};
use crate::curation::TrainingSample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trajcore::{GoalEncoding, Pose};

pub const FINE_GRID: usize = 8;
pub const FINE_TOKENS: usize = FINE_GRID * FINE_GRID;

/// Which decoder heads exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadMask {
    pub horizons: [bool; N_HORIZONS],
    pub qf: bool,
}

impl HeadMask {
    pub const ALL: HeadMask = HeadMask {
        horizons: [true; N_HORIZONS],
        qf: true,
    };

    pub fn qf_only() -> Self {
        HeadMask {
            horizons: [false; N_HORIZONS],
            qf: true,
        }
    }

    pub fn any_anchor_head(&self) -> bool {
        self.horizons.iter().any(|&h| h)
    }

    pub fn to_text(self) -> String {
        let mut s: String = self.horizons.iter().map(|&h| if h { '1' } else { '0' }).collect();
        s.push(if self.qf { '1' } else { '0' });
        s
    }

    /// Five characters of `0`/`1`: the four horizons shortest first, then QF.
    pub fn parse(s: &str) -> Option<Self> {
        let b: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '0' => Some(false),
                '1' => Some(true),
                _ => None,
            })
            .collect::<Option<_>>()?;
        if b.len() != N_HORIZONS + 1 {
            return None;
        }
        Some(HeadMask {
            horizons: [b[0], b[1], b[2], b[3]],
            qf: b[4],
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub t_h: usize,
    pub t: usize,
    pub rate_hz: f64,
    pub m: usize,
    pub c: usize,
    pub k_layers: usize,
    pub n_heads: usize,
    /// Square input resolution in pixels.
    pub image: usize,
    pub patch: usize,
    /// Patches averaged per fine token along each axis.
    pub pool: usize,
    /// History frames are average-pooled to this grid before their perceptron.
    pub coarse_grid: usize,
    pub time_embed: usize,
    pub ffn_mult: usize,
    pub lambda: f64,
    pub w_psi: f64,
    pub goal_mask_p: f64,
    pub token_mask_p: f64,
    pub heads: HeadMask,
    /// Learned per-position embedding on fine tokens.
    pub positional: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            t_h: 16,
            t: 40,
            rate_hz: 5.0,
            m: 64,
            c: 32,
            k_layers: 4,
            n_heads: 1,
            image: 64,
            patch: 4,
            pool: 2,
            coarse_grid: 4,
            time_embed: 16,
            ffn_mult: 2,
            lambda: 1.0,
            w_psi: 0.5,
            goal_mask_p: 0.5,
            token_mask_p: 0.2,
            heads: HeadMask::ALL,
            positional: true,
        }
    }
}

impl PolicyConfig {
    /// The configuration used for gradient checks.
    pub fn small() -> Self {
        PolicyConfig {
            t_h: 2,
            t: 8,
            m: 4,
            c: 16,
            k_layers: 2,
            image: 16,
            patch: 2,
            pool: 1,
            coarse_grid: 2,
            time_embed: 4,
            ..Default::default()
        }
    }

    pub fn horizon_lengths(&self) -> [usize; N_HORIZONS] {
        // validated to be divisible by 8
        [self.t / 8, self.t / 4, self.t / 2, self.t]
    }

    pub fn qf_len(&self) -> usize {
        self.t / 4
    }

    pub fn token_count(&self) -> usize {
        self.t_h + FINE_TOKENS + 2
    }

    fn patch_grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn validate(&self) -> Result<()> {
        horizon_lengths(self.t)?;
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.patch == 0 || self.pool == 0 || !self.image.is_multiple_of(self.patch) || self.patch_grid() != FINE_GRID * self.pool {
            return bad(format!(
                "image {} with patch {} and pool {} does not give an {FINE_GRID}x{FINE_GRID} token grid",
                self.image, self.patch, self.pool
            ));
        }
        if self.coarse_grid == 0 || !self.image.is_multiple_of(self.coarse_grid) {
            return bad(format!("coarse grid {} must divide image {}", self.coarse_grid, self.image));
        }
        if self.t_h == 0 || self.m == 0 || self.k_layers == 0 || self.ffn_mult == 0 {
            return bad("T_h, M, layer count and FFN multiplier must be positive".into());
        }
        if self.n_heads == 0 || !self.c.is_multiple_of(self.n_heads) {
            return bad(format!("hidden size {} not divisible into {} heads", self.c, self.n_heads));
        }
        if self.time_embed == 0 || !self.time_embed.is_multiple_of(2) {
            return bad("time embedding size must be even and positive".into());
        }
        if !(0.0..=1.0).contains(&self.goal_mask_p) || !(0.0..=1.0).contains(&self.token_mask_p) {
            return bad("mask probabilities must lie in [0, 1]".into());
        }
        if !self.heads.any_anchor_head() && !self.heads.qf {
            return bad("at least one head must be enabled".into());
        }
        if self.lambda < 0.0 || self.w_psi < 0.0 || self.rate_hz <= 0.0 {
            return bad("lambda and w_psi must be non-negative, rate positive".into());
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("#POLICY v1\n");
        let _ = writeln!(s, "t_h={}", self.t_h);
        let _ = writeln!(s, "t={}", self.t);
        let _ = writeln!(s, "rate_hz={}", self.rate_hz);
        let _ = writeln!(s, "m={}", self.m);
        let _ = writeln!(s, "c={}", self.c);
        let _ = writeln!(s, "layers={}", self.k_layers);
        let _ = writeln!(s, "heads={}", self.n_heads);
        let _ = writeln!(s, "image={}", self.image);
        let _ = writeln!(s, "patch={}", self.patch);
        let _ = writeln!(s, "pool={}", self.pool);
        let _ = writeln!(s, "coarse_grid={}", self.coarse_grid);
        let _ = writeln!(s, "time_embed={}", self.time_embed);
        let _ = writeln!(s, "ffn_mult={}", self.ffn_mult);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "w_psi={}", self.w_psi);
        let _ = writeln!(s, "goal_mask_p={}", self.goal_mask_p);
        let _ = writeln!(s, "token_mask_p={}", self.token_mask_p);
        let _ = writeln!(s, "head_mask={}", self.heads.to_text());
        let _ = writeln!(s, "positional={}", self.positional);
        s
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("#POLICY v1") {
            return Err(Error::format(origin, "missing #POLICY v1 header"));
        }
        let mut cfg = PolicyConfig::default();
        for line in lines.map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(origin, format!("expected key=value, got {line:?}")))?;
            let bad = || Error::format(origin, format!("bad value for {k}: {v:?}"));
            let us = || v.parse::<usize>().map_err(|_| bad());
            let fl = || v.parse::<f64>().map_err(|_| bad());
            match k {
                "t_h" => cfg.t_h = us()?,
                "t" => cfg.t = us()?,
                "rate_hz" => cfg.rate_hz = fl()?,
                "m" => cfg.m = us()?,
                "c" => cfg.c = us()?,
                "layers" => cfg.k_layers = us()?,
                "heads" => cfg.n_heads = us()?,
                "image" => cfg.image = us()?,
                "patch" => cfg.patch = us()?,
                "pool" => cfg.pool = us()?,
                "coarse_grid" => cfg.coarse_grid = us()?,
                "time_embed" => cfg.time_embed = us()?,
                "ffn_mult" => cfg.ffn_mult = us()?,
                "lambda" => cfg.lambda = fl()?,
                "w_psi" => cfg.w_psi = fl()?,
                "goal_mask_p" => cfg.goal_mask_p = fl()?,
                "token_mask_p" => cfg.token_mask_p = fl()?,
                "head_mask" => cfg.heads = HeadMask::parse(v).ok_or_else(bad)?,
                "positional" => cfg.positional = v.parse().map_err(|_| bad())?,
                _ => return Err(Error::format(origin, format!("unknown key {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network inputs after pixel preprocessing, reusable across passes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// One row per patch of the current frame, row-major over the patch grid.
    pub patches: Tensor,
    /// One row per history frame, oldest first.
    pub coarse: Tensor,
    pub goal: [f64; 3],
    pub camera: [f64; 16],
}

fn check_frame(f: &RgbFrame, cfg: &PolicyConfig) -> Result<()> {
    if f.width != cfg.image || f.height != cfg.image {
        return Err(Error::ShapeMismatch(format!(
            "frame is {}x{}, model expects {}x{}",
            f.width, f.height, cfg.image, cfg.image
        )));
    }
    Ok(())
}

/// Pixels are centered on zero.
fn pixel(f: &RgbFrame, u: usize, v: usize) -> [f64; 3] {
    let p = f.data[v * f.width + u];
    [p[0] as f64 - 0.5, p[1] as f64 - 0.5, p[2] as f64 - 0.5]
}

pub fn camera_features(cam: &CameraModel) -> [f64; 16] {
    let mut f = cam.feature_vector();
    let (w, h) = (cam.width as f64, cam.height as f64);
    f[0] /= w;
    f[1] /= h;
    f[2] /= w;
    f[3] /= h;
    f[4] /= 100.0;
    f[5] /= 100.0;
    f
}

pub fn goal_features(goal: &GoalEncoding) -> [f64; 3] {
    [goal.d / 10.0, goal.cos_phi, goal.sin_phi]
}

impl ModelInput {
    /// `frames` holds `T_h` history frames followed by the current frame.
    pub fn new(cfg: &PolicyConfig, frames: &[Arc<RgbFrame>], goal: &GoalEncoding, camera: &CameraModel) -> Result<Self> {
        if frames.len() != cfg.t_h + 1 {
            return Err(Error::LengthMismatch {
                expected: cfg.t_h + 1,
                got: frames.len(),
            });
        }
        for f in frames {
            check_frame(f, cfg)?;
        }
        let cur = &frames[cfg.t_h];
        let (p, g) = (cfg.patch, cfg.patch_grid());
        let mut patches = Vec::with_capacity(g * g * p * p * 3);
        for gy in 0..g {
            for gx in 0..g {
                for dy in 0..p {
                    for dx in 0..p {
                        patches.extend(pixel(cur, gx * p + dx, gy * p + dy));
                    }
                }
            }
        }
        let cg = cfg.coarse_grid;
        let cell = cfg.image / cg;
        let inv = 1.0 / (cell * cell) as f64;
        let mut coarse = Vec::with_capacity(cfg.t_h * cg * cg * 3);
        for f in &frames[..cfg.t_h] {
            for cy in 0..cg {
                for cx in 0..cg {
                    let mut acc = [0.0; 3];
                    for v in cy * cell..(cy + 1) * cell {
                        for u in cx * cell..(cx + 1) * cell {
                            let q = pixel(f, u, v);
                            for k in 0..3 {
                                acc[k] += q[k];
                            }
                        }
                    }
                    coarse.extend(acc.map(|a| a * inv));
                }
            }
        }
        Ok(ModelInput {
            patches: Tensor::new(g * g, p * p * 3, patches)?,
            coarse: Tensor::new(cfg.t_h, cg * cg * 3, coarse)?,
            goal: goal_features(goal),
            camera: camera_features(camera),
        })
    }

    pub fn from_sample(cfg: &PolicyConfig, s: &TrainingSample) -> Result<Self> {
        Self::new(cfg, &s.frames, &s.goal, &s.camera)
    }
}

/// Per-token training masks; `true` zeroes the token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    pub masked: Vec<bool>,
}

impl TokenMask {
    pub fn none(cfg: &PolicyConfig) -> Self {
        TokenMask {
            masked: vec![false; cfg.token_count()],
        }
    }

    /// Goal token with `goal_mask_p`, every other token with `token_mask_p`.
    pub fn sample(cfg: &PolicyConfig, rng: &mut Rng) -> Self {
        let goal = cfg.t_h + FINE_TOKENS;
        let masked = (0..cfg.token_count())
            .map(|i| {
                let p = if i == goal { cfg.goal_mask_p } else { cfg.token_mask_p };
                rng.gen_bool(p)
            })
            .collect();
        TokenMask { masked }
    }

    pub fn goal_index(cfg: &PolicyConfig) -> usize {
        cfg.t_h + FINE_TOKENS
    }

    fn any(&self) -> bool {
        self.masked.iter().any(|&m| m)
    }
}

/// Flattened anchors as constant `M × 3T_i` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedAnchors {
    pub flat: [Tensor; N_HORIZONS],
}

impl PreparedAnchors {
    pub fn new(cfg: &PolicyConfig, sets: &[AnchorSet]) -> Result<Self> {
        if sets.len() != N_HORIZONS {
            return Err(Error::LengthMismatch {
                expected: N_HORIZONS,
                got: sets.len(),
            });
        }
        let lens = cfg.horizon_lengths();
        for (i, s) in sets.iter().enumerate() {
            if s.horizon_len != lens[i] || s.m() != cfg.m {
                return Err(Error::ShapeMismatch(format!(
                    "anchor set {} is {}x{}, model expects {}x{}",
                    i + 1,
                    s.m(),
                    s.horizon_len,
                    cfg.m,
                    lens[i]
                )));
            }
        }
        let flat = [0, 1, 2, 3].map(|i| Tensor {
            rows: cfg.m,
            cols: 3 * lens[i],
            data: sets[i].flattened(),
        });
        Ok(PreparedAnchors { flat })
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    self_ffn: Mlp,
    cross_attn: Attention,
    cross_ffn: Mlp,
    offset: [Option<Linear>; N_HORIZONS],
    conf: [Option<Linear>; N_HORIZONS],
    qf: Option<Mlp>,
}

#[derive(Clone, Debug)]
struct Layout {
    fine: Mlp,
    pos: Option<usize>,
    coarse: Mlp,
    film: Mlp,
    goal: Mlp,
    camera: Mlp,
    query: [Option<Linear>; N_HORIZONS],
    layers: Vec<DecoderLayer>,
}

impl Linear {
    fn ids(self) -> [usize; 2] {
        [self.w, self.b]
    }
}

impl Mlp {
    fn ids(self) -> [usize; 4] {
        let ([a, b], [c, d]) = (self.l1.ids(), self.l2.ids());
        [a, b, c, d]
    }
}

impl Attention {
    fn ids(self) -> [usize; 8] {
        let ([a, b], [c, d], [e, f], [g, h]) = (self.q.ids(), self.k.ids(), self.v.ids(), self.o.ids());
        [a, b, c, d, e, f, g, h]
    }
}

/// The first part of the forward pass a parameter feeds into. A change to a
/// parameter leaves everything computed before its stage untouched.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Encoder,
    /// Linear maps from anchors to initial queries.
    Queries,
    /// Self-attention block of decoder layer `k`.
    Context(usize),
    /// Cross-attention block and anchor heads of decoder layer `k`.
    Query(usize),
    /// Query-free head of decoder layer `k`.
    QueryFree(usize),
}

struct Builder<'a> {
    ps: &'a mut ParamStore,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, i: usize, o: usize, init: Init) -> Linear {
        Linear {
            w: self.ps.add(&format!("{name}.w"), i, o, init, self.rng),
            b: self.ps.add(&format!("{name}.b"), 1, o, Init::Zero, self.rng),
        }
    }

    fn mlp(&mut self, name: &str, i: usize, h: usize, o: usize, last: Init) -> Mlp {
        Mlp {
            l1: self.linear(&format!("{name}.l1"), i, h, Init::Xavier),
            l2: self.linear(&format!("{name}.l2"), h, o, last),
        }
    }

    fn attention(&mut self, name: &str, c: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), c, c, Init::Xavier),
            k: self.linear(&format!("{name}.k"), c, c, Init::Xavier),
            v: self.linear(&format!("{name}.v"), c, c, Init::Xavier),
            o: self.linear(&format!("{name}.o"), c, c, Init::Xavier),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub params: ParamStore,
    layout: Layout,
    pool: Tensor,
    time_embedding: Tensor,
}

/// Sinusoidal embedding of a frame offset.
pub fn time_embedding(offset: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let w = 1.0 / 100f64.powf(j as f64 / half as f64);
        out.push((offset * w).sin());
        out.push((offset * w).cos());
    }
    out
}

/// Feature-wise affine modulation `tokens ⊙ γ + β`.
pub fn film(tape: &mut Tape, tokens: Var, gamma: Var, beta: Var) -> Result<Var> {
    let s = tape.mul(tokens, gamma)?;
    tape.add(s, beta)
}

impl PolicyNet {
    /// The same network with a different head set. Shared parameters are
    /// copied; heads that did not exist before start from their initial
    /// values.
    pub fn with_heads(&self, heads: HeadMask, seed: u64) -> Result<Self> {
        let mut net = PolicyNet::new(PolicyConfig { heads, ..self.cfg.clone() }, seed)?;
        let entries: Vec<(String, Tensor)> = self
            .params
            .names()
            .iter()
            .cloned()
            .zip(self.params.tensors().iter().cloned())
            .collect();
        net.params.assign_shared(&entries)?;
        Ok(net)
    }

    pub fn new(cfg: PolicyConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let mut b = Builder {
            ps: &mut ps,
            rng: &mut rng,
        };
        let c = cfg.c;
        let h = c * cfg.ffn_mult;
        let lens = cfg.horizon_lengths();
        let patch_dim = cfg.patch * cfg.patch * 3;
        let coarse_dim = cfg.coarse_grid * cfg.coarse_grid * 3;
        let fine = b.mlp("enc.fine", patch_dim, c, c, Init::Xavier);
        let pos = cfg
            .positional
            .then(|| b.ps.add("enc.fine.pos", FINE_TOKENS, c, Init::Uniform(0.1), b.rng));
        let coarse = b.mlp("enc.coarse", coarse_dim, c, c, Init::Xavier);
        // γ starts at 1 and β at 0
        let film = b.mlp("enc.film", cfg.time_embed, c, 2 * c, Init::Zero);
        let goal = b.mlp("enc.goal", 3, c, c, Init::Xavier);
        let camera = b.mlp("enc.cam", 16, c, c, Init::Xavier);
        let query = [0, 1, 2, 3].map(|i| {
            cfg.heads.horizons[i].then(|| b.linear(&format!("dec.query{}", i + 1), 3 * lens[i], c, Init::Xavier))
        });
        let layers = (0..cfg.k_layers)
            .map(|k| {
                let n = format!("dec{k}");
                DecoderLayer {
                    self_attn: b.attention(&format!("{n}.self"), c),
                    self_ffn: b.mlp(&format!("{n}.self_ffn"), c, h, c, Init::Xavier),
                    cross_attn: b.attention(&format!("{n}.cross"), c),
                    cross_ffn: b.mlp(&format!("{n}.cross_ffn"), c, h, c, Init::Xavier),
                    offset: [0, 1, 2, 3].map(|i| {
                        cfg.heads.horizons[i].then(|| b.linear(&format!("{n}.offset{}", i + 1), c, 3 * lens[i], Init::Zero))
                    }),
                    conf: [0, 1, 2, 3].map(|i| {
                        cfg.heads.horizons[i].then(|| b.linear(&format!("{n}.conf{}", i + 1), c, 1, Init::Zero))
                    }),
                    qf: cfg
                        .heads
                        .qf
                        .then(|| b.mlp(&format!("{n}.qf"), c, c, 3 * cfg.qf_len(), Init::Uniform(1e-3))),
                }
            })
            .collect();
        let layout = Layout {
            fine,
            pos,
            coarse,
            film,
            goal,
            camera,
            query,
            layers,
        };
        // average pool x pool blocks of patches into each fine token
        let g = cfg.patch_grid();
        let mut pool = Tensor::zeros(FINE_TOKENS, g * g);
        let inv = 1.0 / (cfg.pool * cfg.pool) as f64;
        for ty in 0..FINE_GRID {
            for tx in 0..FINE_GRID {
                for dy in 0..cfg.pool {
                    for dx in 0..cfg.pool {
                        let patch = (ty * cfg.pool + dy) * g + tx * cfg.pool + dx;
                        pool.data[(ty * FINE_GRID + tx) * g * g + patch] = inv;
                    }
                }
            }
        }
        let te: Vec<f64> = (0..cfg.t_h)
            .flat_map(|i| time_embedding((cfg.t_h - i) as f64, cfg.time_embed))
            .collect();
        let time_embedding = Tensor::new(cfg.t_h, cfg.time_embed, te)?;
        Ok(PolicyNet {
            cfg,
            params: ps,
            layout,
            pool,
            time_embedding,
        })
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph {
            tape: Tape::new(),
            net: self,
            vars: vec![None; self.params.len()],
        }
    }

    /// Stage of every parameter, indexed like the parameter store.
    pub fn param_stages(&self) -> Vec<Stage> {
        let mut out = vec![Stage::Encoder; self.params.len()];
        let lay = &self.layout;
        for l in lay.query.iter().flatten() {
            for id in l.ids() {
                out[id] = Stage::Queries;
            }
        }
        for (k, layer) in lay.layers.iter().enumerate() {
            let mut set = |ids: &[usize], st: Stage| ids.iter().for_each(|&id| out[id] = st);
            set(&layer.self_attn.ids(), Stage::Context(k));
            set(&layer.self_ffn.ids(), Stage::Context(k));
            set(&layer.cross_attn.ids(), Stage::Query(k));
            set(&layer.cross_ffn.ids(), Stage::Query(k));
            for l in layer.offset.iter().chain(&layer.conf).flatten() {
                set(&l.ids(), Stage::Query(k));
            }
            if let Some(m) = layer.qf {
                set(&m.ids(), Stage::QueryFree(k));
            }
        }
        out
    }

    /// Encoder plus all decoder layers on a fresh tape.
    pub fn forward(&self, input: &ModelInput, anchors: &PreparedAnchors, mask: &TokenMask) -> Result<ForwardPass<'_>> {
        let mut g = self.graph();
        let v = g.encode_context(input, mask)?;
        let layers = g.decode(v, anchors)?;
        Ok(ForwardPass { graph: g, layers })
    }

    /// Eval-mode prediction: no masking, deterministic.
    pub fn predict(&self, input: &ModelInput, anchors: &PreparedAnchors) -> Result<PredictionBundle> {
        Ok(self.forward(input, anchors, &TokenMask::none(&self.cfg))?.bundle())
    }

    /// Train-mode prediction with masks drawn from `rng`.
    pub fn predict_train(&self, input: &ModelInput, anchors: &PreparedAnchors, rng: &mut Rng) -> Result<PredictionBundle> {
        let mask = TokenMask::sample(&self.cfg, rng);
        Ok(self.forward(input, anchors, &mask)?.bundle())
    }
}

/// A forward pass under construction; parameters enter the tape on first use.
pub struct Graph<'a> {
    pub tape: Tape,
    net: &'a PolicyNet,
    vars: Vec<Option<Var>>,
}

/// Output nodes of one decoder layer.
#[derive(Clone, Debug)]
pub struct LayerVars {
    /// `M × 3T_i` trajectories.
    pub traj: [Option<Var>; N_HORIZONS],
    /// `M × 1` confidences.
    pub conf: [Option<Var>; N_HORIZONS],
    /// `1 × 3(T/4)` query-free trajectory.
    pub qf: Option<Var>,
}

impl<'a> Graph<'a> {
    fn p(&mut self, id: usize) -> Var {
        if let Some(v) = self.vars[id] {
            return v;
        }
        let v = self.tape.param(id, self.net.params.get(id).clone());
        self.vars[id] = Some(v);
        v
    }

    fn linear(&mut self, x: Var, l: Linear) -> Result<Var> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn mlp(&mut self, x: Var, m: Mlp) -> Result<Var> {
        let h = self.linear(x, m.l1)?;
        let h = self.tape.gelu(h);
        self.linear(h, m.l2)
    }

    fn attention(&mut self, xq: Var, xkv: Var, a: Attention) -> Result<Var> {
        let q = self.linear(xq, a.q)?;
        let k = self.linear(xkv, a.k)?;
        let v = self.linear(xkv, a.v)?;
        let heads = self.net.cfg.n_heads;
        let dh = self.net.cfg.c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.tape.slice_cols(q, h * dh, dh)?,
                    self.tape.slice_cols(k, h * dh, dh)?,
                    self.tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let s = self.tape.matmul_t(qh, kh)?;
            let s = self.tape.scale(s, scale);
            let w = self.tape.softmax_rows(s);
            outs.push(self.tape.matmul(w, vh)?);
        }
        let o = if heads == 1 { outs[0] } else { self.tape.concat_cols(&outs)? };
        self.linear(o, a.o)
    }

    /// Context tokens `[coarse, fine, goal, camera]`, `(T_h + 66) × C`.
    pub fn encode_context(&mut self, input: &ModelInput, mask: &TokenMask) -> Result<Var> {
        let net = self.net;
        let cfg = &net.cfg;
        let lay = &net.layout;
        if mask.masked.len() != cfg.token_count() {
            return Err(Error::LengthMismatch {
                expected: cfg.token_count(),
                got: mask.masked.len(),
            });
        }
        let patches = self.tape.constant(input.patches.clone());
        let f = self.mlp(patches, lay.fine)?;
        let pool = self.tape.constant(net.pool.clone());
        let mut fine = self.tape.matmul(pool, f)?;
        if let Some(pos) = lay.pos {
            let pv = self.p(pos);
            fine = self.tape.add(fine, pv)?;
        }

        let hist = self.tape.constant(input.coarse.clone());
        let coarse = self.mlp(hist, lay.coarse)?;
        let te = self.tape.constant(net.time_embedding.clone());
        let gb = self.mlp(te, lay.film)?;
        let dg = self.tape.slice_cols(gb, 0, cfg.c)?;
        let beta = self.tape.slice_cols(gb, cfg.c, cfg.c)?;
        let ones = self.tape.constant(Tensor::filled(cfg.t_h, cfg.c, 1.0));
        let gamma = self.tape.add(dg, ones)?;
        let coarse = film(&mut self.tape, coarse, gamma, beta)?;

        let gin = self.tape.constant(Tensor::row(input.goal.to_vec()));
        let goal = self.mlp(gin, lay.goal)?;
        let cin = self.tape.constant(Tensor::row(input.camera.to_vec()));
        let cam = self.mlp(cin, lay.camera)?;
        let v = self.tape.concat_rows(&[coarse, fine, goal, cam])?;
        if !mask.any() {
            return Ok(v);
        }
        let mut m = Tensor::filled(cfg.token_count(), cfg.c, 1.0);
        for (i, _) in mask.masked.iter().enumerate().filter(|(_, &x)| x) {
            m.data[i * cfg.c..(i + 1) * cfg.c].fill(0.0);
        }
        let mv = self.tape.constant(m);
        self.tape.mul(v, mv)
    }

    /// Initial per-horizon query tokens from the anchors.
    pub fn initial_queries(&mut self, anchors: &PreparedAnchors) -> Result<[Option<Var>; N_HORIZONS]> {
        let mut q = [None; N_HORIZONS];
        for (i, slot) in q.iter_mut().enumerate() {
            if let Some(l) = self.net.layout.query[i] {
                let a = self.tape.constant(anchors.flat[i].clone());
                *slot = Some(self.linear(a, l)?);
            }
        }
        Ok(q)
    }

    /// One decoder layer. Returns the layer outputs, the fused context and the
    /// refined queries.
    pub fn decode_layer(
        &mut self,
        k: usize,
        queries: [Option<Var>; N_HORIZONS],
        v: Var,
        anchors: &PreparedAnchors,
    ) -> Result<(LayerVars, Var, [Option<Var>; N_HORIZONS])> {
        let v = self.context_block(k, v)?;
        let (mut out, refined) = self.query_block(k, queries, v, anchors)?;
        out.qf = self.qf_head(k, v)?;
        Ok((out, v, refined))
    }

    /// Self-attention and feed-forward over the context tokens of layer `k`.
    pub fn context_block(&mut self, k: usize, v: Var) -> Result<Var> {
        let layer = &self.net.layout.layers[k];
        let ln = self.tape.layernorm(v);
        let a = self.attention(ln, ln, layer.self_attn)?;
        let v = self.tape.add(v, a)?;
        let ln = self.tape.layernorm(v);
        let f = self.mlp(ln, layer.self_ffn)?;
        self.tape.add(v, f)
    }

    /// Cross-attention of the queries into the fused context `v` of layer `k`
    /// and the anchor heads. The query-free output is left empty.
    pub fn query_block(
        &mut self,
        k: usize,
        queries: [Option<Var>; N_HORIZONS],
        v: Var,
        anchors: &PreparedAnchors,
    ) -> Result<(LayerVars, [Option<Var>; N_HORIZONS])> {
        let layer = &self.net.layout.layers[k];
        let kv = self.tape.layernorm(v);
        let mut out = LayerVars {
            traj: [None; N_HORIZONS],
            conf: [None; N_HORIZONS],
            qf: None,
        };
        let mut refined = [None; N_HORIZONS];
        // Attention, FFN and layernorm act row by row, so the query sets of
        // all horizons run as one block and share the key/value projections.
        let active: Vec<(usize, Var)> = (0..N_HORIZONS)
            .filter_map(|i| match (queries[i], layer.offset[i], layer.conf[i]) {
                (Some(q), Some(_), Some(_)) => Some((i, q)),
                _ => None,
            })
            .collect();
        if !active.is_empty() {
            let parts: Vec<Var> = active.iter().map(|&(_, q)| q).collect();
            let q = self.tape.concat_rows(&parts)?;
            let lq = self.tape.layernorm(q);
            let a = self.attention(lq, kv, layer.cross_attn)?;
            let q = self.tape.add(q, a)?;
            let lq = self.tape.layernorm(q);
            let f = self.mlp(lq, layer.cross_ffn)?;
            let q = self.tape.add(q, f)?;
            let lq = self.tape.layernorm(q);
            let mut start = 0;
            for &(i, qi) in &active {
                let rows = self.tape.shape(qi)[0];
                let (Some(off), Some(cl)) = (layer.offset[i], layer.conf[i]) else {
                    unreachable!("filtered above")
                };
                let li = self.tape.slice_rows(lq, start, rows)?;
                let o = self.linear(li, off)?;
                let anchor = self.tape.constant(anchors.flat[i].clone());
                out.traj[i] = Some(self.tape.add(anchor, o)?);
                let logit = self.linear(li, cl)?;
                out.conf[i] = Some(self.tape.sigmoid(logit));
                refined[i] = Some(self.tape.slice_rows(q, start, rows)?);
                start += rows;
            }
        }
        Ok((out, refined))
    }

    /// Query-free trajectory from the mean of the fused context of layer `k`.
    pub fn qf_head(&mut self, k: usize, v: Var) -> Result<Option<Var>> {
        let Some(qf) = self.net.layout.layers[k].qf else {
            return Ok(None);
        };
        let pooled = self.tape.mean_rows(v);
        Ok(Some(self.mlp(pooled, qf)?))
    }

    pub fn decode(&mut self, v: Var, anchors: &PreparedAnchors) -> Result<Vec<LayerVars>> {
        let mut queries = self.initial_queries(anchors)?;
        let mut v = v;
        let mut layers = Vec::with_capacity(self.net.cfg.k_layers);
        for k in 0..self.net.cfg.k_layers {
            let (out, v2, q2) = self.decode_layer(k, queries, v, anchors)?;
            layers.push(out);
            v = v2;
            queries = q2;
        }
        Ok(layers)
    }
}

pub struct ForwardPass<'a> {
    pub graph: Graph<'a>,
    pub layers: Vec<LayerVars>,
}

fn poses_from_flat(d: &[f64]) -> Vec<Pose> {
    d.chunks(3).map(|w| Pose::new(w[0], w[1], w[2])).collect()
}

impl ForwardPass<'_> {
    pub fn tape(&self) -> &Tape {
        &self.graph.tape
    }

    pub fn bundle(&self) -> PredictionBundle {
        let tape = &self.graph.tape;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let horizons = [0, 1, 2, 3].map(|i| {
                    let (t, c) = (l.traj[i]?, l.conf[i]?);
                    let tv = tape.value(t);
                    Some(HorizonPrediction {
                        trajectories: (0..tv.rows).map(|m| poses_from_flat(tv.row_slice(m))).collect(),
                        confidences: tape.value(c).data.clone(),
                    })
                });
                LayerPrediction {
                    horizons,
                    qf: l.qf.map(|q| poses_from_flat(&tape.value(q).data)),
                }
            })
            .collect();
        PredictionBundle { layers }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HorizonPrediction {
    /// `M` ego-frame trajectories of `T_i` poses.
    pub trajectories: Vec<Vec<Pose>>,
    pub confidences: Vec<f64>,
}

impl HorizonPrediction {
    /// Index of the most confident mode, lowest index on ties.
    pub fn best(&self) -> usize {
        let mut best = 0;
        for (m, &c) in self.confidences.iter().enumerate() {
            if c > self.confidences[best] {
                best = m;
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPrediction {
    pub horizons: [Option<HorizonPrediction>; N_HORIZONS],
    pub qf: Option<Vec<Pose>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBundle {
    pub layers: Vec<LayerPrediction>,
}

impl PredictionBundle {
    pub fn last_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("bundle has at least one layer")
    }

    /// Longest enabled anchor head of the last layer.
    pub fn longest_head(&self) -> Option<&HorizonPrediction> {
        self.last_layer().horizons.iter().rev().flatten().next()
    }

    /// The most confident trajectory of the longest anchor head, or the
    /// query-free trajectory when no anchor head exists.
    pub fn best_trajectory(&self) -> Option<&[Pose]> {
        match self.longest_head() {
            Some(h) => Some(&h.trajectories[h.best()]),
            None => self.last_layer().qf.as_deref(),
        }
    }

    pub fn all_finite(&self) -> bool {
        let ok = |t: &[Pose]| t.iter().all(|p| p.x.is_finite() && p.y.is_finite() && p.psi.is_finite());
        self.layers.iter().all(|l| {
            l.horizons.iter().flatten().all(|h| {
                h.confidences.iter().all(|c| c.is_finite()) && h.trajectories.iter().all(|t| ok(t))
            }) && l.qf.as_deref().is_none_or(ok)
        })
    }
}
