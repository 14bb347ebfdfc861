//! Latent world model: frozen random-feature visual encoder, trainable
//! proprio/action encoders, and a context-windowed feedforward predictor
//! with two action-conditioning schemes and exact reverse-mode gradients.
//!
//! All trainable parameters (predictor layers, action encoder, proprio
//! encoder, output heads) live in one flat `Vec<f64>` described by a named
//! segment [`Layout`], so the optimizer, gradient clipping, and checkpoint
//! serialization treat every parameter uniformly. The visual projection is
//! frozen at construction and never appears in that vector.
//!
//! Forward passes record a [`Tape`]; [`backward`] replays it in reverse to
//! produce gradients for every trainable parameter and for the context
//! inputs (latents and action embeddings), which gradient-based planners
//! consume.

use crate::dataset::NormStats;
use crate::env::Observation;
use crate::rng::stream_rng;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read as IoRead, Write as IoWrite};
use std::path::Path;

/// LayerNorm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

/// How actions condition the predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Action embeddings are appended to each context slot's features.
    FeatureConcat,
    /// Per-layer scale/shift computed from the pooled action embedding,
    /// applied to a normalized pre-activation (identity at init).
    LayerModulation,
}

/// Model architecture section of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Visual embedding dimension D.
    pub d_vis: usize,
    /// Proprio embedding dimension P.
    pub p_prop: usize,
    /// Action embedding dimension A_e.
    pub a_embed: usize,
    /// Hidden width of each predictor layer.
    pub width: usize,
    /// Number of hidden layers.
    pub depth: usize,
    /// Context window capacity (maximum number of slots).
    pub capacity: usize,
    pub conditioning: Conditioning,
    /// Whether observations carry a proprio channel the model encodes.
    pub proprio: bool,
    /// Std of the random-Fourier projection entries; calibrated so that
    /// nearby agent positions give embedding cosine similarity near 0.9.
    pub vis_bandwidth: f64,
    /// Output scale of the visual features.
    pub vis_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_vis: 64,
            p_prop: 8,
            a_embed: 8,
            width: 128,
            depth: 3,
            capacity: 3,
            conditioning: Conditioning::FeatureConcat,
            proprio: false,
            // Calibrated on the 28x28 Wall raster: a 0.1 position shift
            // moves the raster by ~2.14 in L2, giving ~0.9 cosine
            // similarity at this bandwidth.
            vis_bandwidth: 0.21,
            vis_scale: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_vis", self.d_vis),
            ("p_prop", self.p_prop),
            ("a_embed", self.a_embed),
            ("width", self.width),
            ("depth", self.depth),
            ("capacity", self.capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !(self.vis_bandwidth > 0.0 && self.vis_bandwidth.is_finite()) {
            return Err(Error::Config("model.vis_bandwidth must be positive".into()));
        }
        if !(self.vis_scale > 0.0 && self.vis_scale.is_finite()) {
            return Err(Error::Config("model.vis_scale must be positive".into()));
        }
        Ok(())
    }

    /// Per-slot feature dimension for this configuration.
    pub fn slot_dim(&self) -> usize {
        let base = self.d_vis + if self.proprio { self.p_prop } else { 0 };
        match self.conditioning {
            Conditioning::FeatureConcat => base + self.a_embed,
            Conditioning::LayerModulation => base,
        }
    }

    /// Flattened predictor input dimension.
    pub fn in_dim(&self) -> usize {
        self.capacity * self.slot_dim()
    }
}

/// Per-timestep embedding pair.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z_vis: Vec<f64>,
    pub z_prop: Option<Vec<f64>>,
}

/// The frozen visual projection.
#[derive(Debug, Clone)]
pub enum VisMap {
    /// `z = scale * cos(M r + b)` with `M ~ N(0, bandwidth^2)` and phases
    /// `b ~ U[0, 2pi)`, regenerable from the seed.
    RandomFourier {
        seed: u64,
        bandwidth: f64,
        scale: f64,
        input_len: usize,
        /// D x input_len projection, row-major.
        m: Vec<f64>,
        /// D phase offsets.
        b: Vec<f64>,
    },
    /// Plain linear map (diagnostic/toy use only; not checkpointable).
    Linear {
        input_len: usize,
        /// D x input_len, row-major.
        m: Vec<f64>,
    },
}

/// Salt for the visual projection parameter stream.
const SALT_VIS: u64 = 0x51;

impl VisMap {
    /// Builds the frozen random-feature map for `d_vis` outputs over rasters
    /// of `input_len` pixels.
    pub fn random_fourier(seed: u64, d_vis: usize, input_len: usize, bandwidth: f64, scale: f64) -> VisMap {
        let mut rng = stream_rng(seed, SALT_VIS);
        let mut m = Vec::with_capacity(d_vis * input_len);
        for _ in 0..d_vis * input_len {
            m.push(bandwidth * standard_normal(&mut rng));
        }
        let b = (0..d_vis)
            .map(|_| rng.gen_range(0.0..std::f64::consts::TAU))
            .collect();
        VisMap::RandomFourier {
            seed,
            bandwidth,
            scale,
            input_len,
            m,
            b,
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            VisMap::RandomFourier { input_len, .. } | VisMap::Linear { input_len, .. } => *input_len,
        }
    }

    pub fn d_out(&self) -> usize {
        match self {
            VisMap::RandomFourier { b, .. } => b.len(),
            VisMap::Linear { m, input_len } => m.len() / (*input_len).max(1),
        }
    }

    /// SHA-256 over the projection bytes; equal iff the frozen weights are.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        match self {
            VisMap::RandomFourier { m, b, .. } => {
                for v in m.iter().chain(b.iter()) {
                    hasher.update(v.to_le_bytes());
                }
            }
            VisMap::Linear { m, .. } => {
                for v in m {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher.finalize().iter().map(|x| format!("{x:02x}")).collect()
    }
}

/// One standard-normal draw via Box-Muller (cosine branch).
fn standard_normal(rng: &mut impl Rng) -> f64 {
    // Open interval keeps ln() finite.
    let u1: f64 = loop {
        let u = rng.gen_range(0.0..1.0);
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Frozen encoder parameters (the visual projection only; the trainable
/// proprio/action linear layers live in the shared flat parameter block of
/// [`PredictorParams`] so one optimizer state covers everything).
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub vis: VisMap,
}

/// One named parameter block inside the flat vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    /// Rows of the matrix, or the vector length when `cols == 0`.
    pub rows: usize,
    /// Columns; 0 marks a bias/vector segment.
    pub cols: usize,
    /// Half-width of the uniform init range (0 = zero-initialized).
    pub init_bound: f64,
}

impl Segment {
    pub fn len(&self) -> usize {
        if self.cols == 0 {
            self.rows
        } else {
            self.rows * self.cols
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered segment table over the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
}

impl Layout {
    fn build(cfg: &ModelConfig) -> Layout {
        let mut segments = Vec::new();
        let mut offset = 0usize;
        let mut push = |segments: &mut Vec<Segment>, name: String, rows: usize, cols: usize, bound: f64| {
            let seg = Segment {
                name,
                offset,
                rows,
                cols,
                init_bound: bound,
            };
            offset += seg.len();
            segments.push(seg);
        };
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        push(&mut segments, "act_w".into(), cfg.a_embed, 2, fan(2));
        push(&mut segments, "act_b".into(), cfg.a_embed, 0, fan(2));
        if cfg.proprio {
            push(&mut segments, "prop_w".into(), cfg.p_prop, 4, fan(4));
            push(&mut segments, "prop_b".into(), cfg.p_prop, 0, fan(4));
        }
        let mut in_l = cfg.in_dim();
        for l in 0..cfg.depth {
            push(&mut segments, format!("layer{l}_w"), cfg.width, in_l, fan(in_l));
            push(&mut segments, format!("layer{l}_b"), cfg.width, 0, fan(in_l));
            in_l = cfg.width;
        }
        if cfg.conditioning == Conditioning::LayerModulation {
            for l in 0..cfg.depth {
                push(&mut segments, format!("mod{l}_g"), cfg.width, cfg.a_embed, 0.0);
                push(&mut segments, format!("mod{l}_b"), cfg.width, cfg.a_embed, 0.0);
            }
        }
        push(&mut segments, "head_vis_w".into(), cfg.d_vis, cfg.width, fan(cfg.width));
        push(&mut segments, "head_vis_b".into(), cfg.d_vis, 0, fan(cfg.width));
        if cfg.proprio {
            push(&mut segments, "head_prop_w".into(), cfg.p_prop, cfg.width, fan(cfg.width));
            push(&mut segments, "head_prop_b".into(), cfg.p_prop, 0, fan(cfg.width));
        }
        Layout {
            segments,
            total: offset,
        }
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Resolved offsets for the hot compute path (no name lookups per call).
#[derive(Debug, Clone)]
struct Wiring {
    act_w: Segment,
    act_b: Segment,
    prop: Option<(Segment, Segment)>,
    layers: Vec<(Segment, Segment)>,
    mods: Vec<(Segment, Segment)>,
    head_vis: (Segment, Segment),
    head_prop: Option<(Segment, Segment)>,
}

impl Wiring {
    fn resolve(cfg: &ModelConfig, layout: &Layout) -> Wiring {
        let get = |name: &str| layout.segment(name).expect("layout segment").clone();
        Wiring {
            act_w: get("act_w"),
            act_b: get("act_b"),
            prop: cfg.proprio.then(|| (get("prop_w"), get("prop_b"))),
            layers: (0..cfg.depth)
                .map(|l| (get(&format!("layer{l}_w")), get(&format!("layer{l}_b"))))
                .collect(),
            mods: if cfg.conditioning == Conditioning::LayerModulation {
                (0..cfg.depth)
                    .map(|l| (get(&format!("mod{l}_g")), get(&format!("mod{l}_b"))))
                    .collect()
            } else {
                Vec::new()
            },
            head_vis: (get("head_vis_w"), get("head_vis_b")),
            head_prop: cfg.proprio.then(|| (get("head_prop_w"), get("head_prop_b"))),
        }
    }
}

/// All trainable parameters in one flat block plus its layout.
#[derive(Debug, Clone)]
pub struct PredictorParams {
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl PredictorParams {
    /// Seeded uniform(-bound, +bound) init per segment; zero-bound segments
    /// (modulation heads) start at exactly zero.
    pub fn init(cfg: &ModelConfig, seed: u64) -> PredictorParams {
        let layout = Layout::build(cfg);
        let mut rng = stream_rng(seed, 0x1417);
        let mut data = vec![0.0; layout.total];
        for seg in &layout.segments {
            if seg.init_bound > 0.0 {
                for v in &mut data[seg.range()] {
                    *v = rng.gen_range(-seg.init_bound..=seg.init_bound);
                }
            }
        }
        PredictorParams { layout, data }
    }
}

/// A complete model: frozen encoder, trainable parameters, wiring, and the
/// normalization statistics it was built against.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub enc: EncoderParams,
    pub params: PredictorParams,
    pub norm: NormStats,
    /// Maximum context length seen in training (planning validates its
    /// window against this; may be below `cfg.capacity`).
    pub trained_w: usize,
    wiring: Wiring,
}

impl Model {
    /// Builds a model with a fresh random-Fourier visual map over
    /// `input_len`-pixel rasters.
    pub fn new(cfg: &ModelConfig, input_len: usize, vis_seed: u64, init_seed: u64, norm: NormStats, trained_w: usize) -> Result<Model> {
        cfg.validate()?;
        if trained_w == 0 || trained_w > cfg.capacity {
            return Err(Error::Config(format!(
                "trained_w {} must lie in 1..=capacity {}",
                trained_w, cfg.capacity
            )));
        }
        let vis = VisMap::random_fourier(vis_seed, cfg.d_vis, input_len, cfg.vis_bandwidth, cfg.vis_scale);
        Ok(Self::from_parts(cfg.clone(), EncoderParams { vis }, PredictorParams::init(cfg, init_seed), norm, trained_w))
    }

    /// Assembles a model from explicit parts (used by tests and loading).
    pub fn from_parts(cfg: ModelConfig, enc: EncoderParams, params: PredictorParams, norm: NormStats, trained_w: usize) -> Model {
        let wiring = Wiring::resolve(&cfg, &params.layout);
        Model {
            cfg,
            enc,
            params,
            norm,
            trained_w,
            wiring,
        }
    }

    /// View of a named parameter segment.
    pub fn seg(&self, name: &str) -> &[f64] {
        let s = self.params.layout.segment(name).expect("unknown segment");
        &self.params.data[s.range()]
    }
}

// ---------------------------------------------------------------------------
// Encoders
// ---------------------------------------------------------------------------

/// Applies the frozen visual map to a raster.
pub fn encode_vis(obs: &Observation, enc: &EncoderParams) -> Result<Vec<f64>> {
    let n = enc.vis.input_len();
    if obs.raster.len() != n {
        return Err(Error::InvalidArgument(format!(
            "encode_vis: raster has {} pixels, encoder expects {n}",
            obs.raster.len()
        )));
    }
    Ok(match &enc.vis {
        VisMap::RandomFourier { scale, m, b, .. } => {
            let d = b.len();
            let mut z = Vec::with_capacity(d);
            for i in 0..d {
                let row = &m[i * n..(i + 1) * n];
                let mut acc = b[i];
                for (w, r) in row.iter().zip(&obs.raster) {
                    acc += w * r;
                }
                z.push(scale * acc.cos());
            }
            z
        }
        VisMap::Linear { m, input_len } => {
            let d = m.len() / input_len;
            let mut z = Vec::with_capacity(d);
            for i in 0..d {
                let row = &m[i * n..(i + 1) * n];
                z.push(row.iter().zip(&obs.raster).map(|(w, r)| w * r).sum());
            }
            z
        }
    })
}

/// Encodes an observation to a latent state. The proprio channel, when the
/// model uses one, is normalized with the model's stored statistics before
/// the linear proprio encoder.
pub fn encode_state(obs: &Observation, model: &Model) -> Result<LatentState> {
    let z_vis = encode_vis(obs, &model.enc)?;
    let z_prop = if model.cfg.proprio {
        let p = obs.proprio.ok_or_else(|| {
            Error::InvalidArgument("encode_state: model expects proprio but observation has none".into())
        })?;
        let p = model.norm.normalize_proprio(&p);
        Some(encode_proprio_normalized(&p, model))
    } else {
        None
    };
    Ok(LatentState { z_vis, z_prop })
}

/// Linear proprio encoder on an already-normalized 4-vector.
pub fn encode_proprio_normalized(p_norm: &[f64; 4], model: &Model) -> Vec<f64> {
    let (w, b) = model.wiring.prop.as_ref().expect("proprio encoder disabled");
    let wv = &model.params.data[w.range()];
    let bv = &model.params.data[b.range()];
    let mut out = Vec::with_capacity(w.rows);
    for i in 0..w.rows {
        let row = &wv[i * 4..(i + 1) * 4];
        out.push(bv[i] + row.iter().zip(p_norm).map(|(x, y)| x * y).sum::<f64>());
    }
    out
}

/// Accumulates proprio-encoder gradients for one encoded vector.
pub fn encode_proprio_backward(p_norm: &[f64; 4], d_embed: &[f64], model: &Model, grads: &mut [f64]) {
    let (w, b) = model.wiring.prop.as_ref().expect("proprio encoder disabled");
    for i in 0..w.rows {
        for j in 0..4 {
            grads[w.offset + i * 4 + j] += d_embed[i] * p_norm[j];
        }
        grads[b.offset + i] += d_embed[i];
    }
}

/// Linear action encoder on an already-normalized 2-vector.
pub fn encode_action(a_norm: &[f64; 2], model: &Model) -> Vec<f64> {
    let w = &model.wiring.act_w;
    let b = &model.wiring.act_b;
    let wv = &model.params.data[w.range()];
    let bv = &model.params.data[b.range()];
    let mut out = Vec::with_capacity(w.rows);
    for i in 0..w.rows {
        out.push(bv[i] + wv[i * 2] * a_norm[0] + wv[i * 2 + 1] * a_norm[1]);
    }
    out
}

/// Accumulates action-encoder parameter gradients for one embedding.
pub fn encode_action_backward(a_norm: &[f64; 2], d_embed: &[f64], model: &Model, grads: &mut [f64]) {
    let w = &model.wiring.act_w;
    let b = &model.wiring.act_b;
    for i in 0..w.rows {
        grads[w.offset + i * 2] += d_embed[i] * a_norm[0];
        grads[w.offset + i * 2 + 1] += d_embed[i] * a_norm[1];
        grads[b.offset + i] += d_embed[i];
    }
}

/// Gradient of an action embedding w.r.t. the normalized action input
/// (planners chain through this).
pub fn encode_action_input_grad(d_embed: &[f64], model: &Model) -> [f64; 2] {
    let w = &model.wiring.act_w;
    let wv = &model.params.data[w.range()];
    let mut d = [0.0; 2];
    for i in 0..w.rows {
        d[0] += wv[i * 2] * d_embed[i];
        d[1] += wv[i * 2 + 1] * d_embed[i];
    }
    d
}

// ---------------------------------------------------------------------------
// Context window
// ---------------------------------------------------------------------------

/// Sliding context of up to `capacity` (latent, action-embedding) slots,
/// oldest first. Slots below capacity are implicitly zero-padded on the left
/// inside the predictor.
#[derive(Debug, Clone)]
pub struct ContextWindow {
    pub latents: Vec<LatentState>,
    pub action_embeds: Vec<Vec<f64>>,
    pub valid_len: usize,
}

impl ContextWindow {
    pub fn new() -> ContextWindow {
        ContextWindow {
            latents: Vec::new(),
            action_embeds: Vec::new(),
            valid_len: 0,
        }
    }

    /// Appends a slot, evicting the oldest once `capacity` is exceeded.
    pub fn push(&mut self, latent: LatentState, action_embed: Vec<f64>, capacity: usize) {
        self.latents.push(latent);
        self.action_embeds.push(action_embed);
        if self.latents.len() > capacity {
            self.latents.remove(0);
            self.action_embeds.remove(0);
        }
        self.valid_len = self.latents.len();
    }
}

impl Default for ContextWindow {
    fn default() -> Self {
        Self::new()
    }
}

// ---------------------------------------------------------------------------
// Predictor forward/backward
// ---------------------------------------------------------------------------

/// Forward-pass record for one [`predict_next`] call.
#[derive(Debug, Clone)]
pub struct Tape {
    valid_len: usize,
    x0: Vec<f64>,
    /// Pooled action embedding (layer_modulation only; empty otherwise).
    u: Vec<f64>,
    /// Post-activation of each hidden layer.
    hidden: Vec<Vec<f64>>,
    /// LayerNorm outputs per layer (layer_modulation only).
    xhat: Vec<Vec<f64>>,
    /// LayerNorm inverse stddev per layer (layer_modulation only).
    inv_std: Vec<f64>,
    /// Modulation scales per layer (layer_modulation only).
    gamma: Vec<Vec<f64>>,
}

fn check_window(ctx: &ContextWindow, model: &Model) -> Result<()> {
    let cfg = &model.cfg;
    if ctx.valid_len == 0 || ctx.latents.is_empty() {
        return Err(Error::InvalidArgument("predict_next: empty context window".into()));
    }
    if ctx.valid_len != ctx.latents.len() || ctx.valid_len != ctx.action_embeds.len() {
        return Err(Error::InvalidArgument(format!(
            "predict_next: inconsistent window (valid_len {}, {} latents, {} action embeds)",
            ctx.valid_len,
            ctx.latents.len(),
            ctx.action_embeds.len()
        )));
    }
    if ctx.valid_len > cfg.capacity {
        return Err(Error::InvalidArgument(format!(
            "predict_next: window holds {} slots, capacity is {}",
            ctx.valid_len, cfg.capacity
        )));
    }
    for l in &ctx.latents {
        if l.z_vis.len() != cfg.d_vis {
            return Err(Error::InvalidArgument(format!(
                "predict_next: latent z_vis has dim {}, model expects {}",
                l.z_vis.len(),
                cfg.d_vis
            )));
        }
        match (&l.z_prop, cfg.proprio) {
            (Some(p), true) if p.len() != cfg.p_prop => {
                return Err(Error::InvalidArgument(format!(
                    "predict_next: latent z_prop has dim {}, model expects {}",
                    p.len(),
                    cfg.p_prop
                )));
            }
            (None, true) => {
                return Err(Error::InvalidArgument(
                    "predict_next: model expects proprio latents".into(),
                ));
            }
            (Some(_), false) => {
                return Err(Error::InvalidArgument(
                    "predict_next: model does not use proprio latents".into(),
                ));
            }
            _ => {}
        }
    }
    for a in &ctx.action_embeds {
        if a.len() != cfg.a_embed {
            return Err(Error::InvalidArgument(format!(
                "predict_next: action embed has dim {}, model expects {}",
                a.len(),
                cfg.a_embed
            )));
        }
    }
    Ok(())
}

/// Flattens the window into the predictor input: `capacity` slots, zero
/// padding on the left, each valid slot `[z_vis | z_prop? | a_embed?]`.
fn flatten_window(ctx: &ContextWindow, cfg: &ModelConfig) -> Vec<f64> {
    let slot = cfg.slot_dim();
    let mut x0 = vec![0.0; cfg.capacity * slot];
    let pad = cfg.capacity - ctx.valid_len;
    for (k, (latent, a)) in ctx.latents.iter().zip(&ctx.action_embeds).enumerate() {
        let base = (pad + k) * slot;
        let mut at = base;
        x0[at..at + cfg.d_vis].copy_from_slice(&latent.z_vis);
        at += cfg.d_vis;
        if cfg.proprio {
            let p = latent.z_prop.as_ref().expect("checked");
            x0[at..at + cfg.p_prop].copy_from_slice(p);
            at += cfg.p_prop;
        }
        if cfg.conditioning == Conditioning::FeatureConcat {
            x0[at..at + cfg.a_embed].copy_from_slice(a);
        }
    }
    x0
}

/// Predicts the next latent from a context window, recording a tape for
/// [`backward`].
pub fn predict_next(ctx: &ContextWindow, model: &Model) -> Result<(LatentState, Tape)> {
    check_window(ctx, model)?;
    let cfg = &model.cfg;
    let data = &model.params.data;
    let x0 = flatten_window(ctx, cfg);

    let u = if cfg.conditioning == Conditioning::LayerModulation {
        // Masked mean over the valid action embeddings.
        let mut u = vec![0.0; cfg.a_embed];
        for a in &ctx.action_embeds {
            for (ui, ai) in u.iter_mut().zip(a) {
                *ui += ai;
            }
        }
        for ui in &mut u {
            *ui /= ctx.valid_len as f64;
        }
        u
    } else {
        Vec::new()
    };

    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(cfg.depth);
    let mut xhat: Vec<Vec<f64>> = Vec::new();
    let mut inv_std: Vec<f64> = Vec::new();
    let mut gamma: Vec<Vec<f64>> = Vec::new();

    let mut input: &[f64] = &x0;
    for l in 0..cfg.depth {
        let (w, b) = &model.wiring.layers[l];
        let wv = &data[w.range()];
        let bv = &data[b.range()];
        let cols = w.cols;
        let mut a = vec![0.0; w.rows];
        for i in 0..w.rows {
            let row = &wv[i * cols..(i + 1) * cols];
            let mut acc = bv[i];
            for (x, y) in row.iter().zip(input) {
                acc += x * y;
            }
            a[i] = acc;
        }
        let h = if cfg.conditioning == Conditioning::LayerModulation {
            let n = a.len() as f64;
            let mean = a.iter().sum::<f64>() / n;
            let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let istd = 1.0 / (var + LN_EPS).sqrt();
            let xh: Vec<f64> = a.iter().map(|v| (v - mean) * istd).collect();
            let (gs, bs) = &model.wiring.mods[l];
            let gv = &data[gs.range()];
            let bvv = &data[bs.range()];
            let mut g = vec![1.0; w.rows];
            let mut beta = vec![0.0; w.rows];
            for i in 0..w.rows {
                let grow = &gv[i * cfg.a_embed..(i + 1) * cfg.a_embed];
                let brow = &bvv[i * cfg.a_embed..(i + 1) * cfg.a_embed];
                for j in 0..cfg.a_embed {
                    g[i] += grow[j] * u[j];
                    beta[i] += brow[j] * u[j];
                }
            }
            let h: Vec<f64> = (0..w.rows).map(|i| (g[i] * xh[i] + beta[i]).tanh()).collect();
            xhat.push(xh);
            inv_std.push(istd);
            gamma.push(g);
            h
        } else {
            a.iter().map(|v| v.tanh()).collect()
        };
        hidden.push(h);
        input = hidden.last().unwrap();
    }

    let h_last = hidden.last().unwrap();
    let (hw, hb) = &model.wiring.head_vis;
    let hwv = &data[hw.range()];
    let hbv = &data[hb.range()];
    let mut z_vis = Vec::with_capacity(cfg.d_vis);
    for i in 0..cfg.d_vis {
        let row = &hwv[i * cfg.width..(i + 1) * cfg.width];
        z_vis.push(hbv[i] + row.iter().zip(h_last).map(|(x, y)| x * y).sum::<f64>());
    }
    let z_prop = model.wiring.head_prop.as_ref().map(|(pw, pb)| {
        let pwv = &data[pw.range()];
        let pbv = &data[pb.range()];
        (0..cfg.p_prop)
            .map(|i| {
                let row = &pwv[i * cfg.width..(i + 1) * cfg.width];
                pbv[i] + row.iter().zip(h_last).map(|(x, y)| x * y).sum::<f64>()
            })
            .collect()
    });

    let tape = Tape {
        valid_len: ctx.valid_len,
        x0,
        u,
        hidden,
        xhat,
        inv_std,
        gamma,
    };
    Ok((
        LatentState { z_vis, z_prop },
        tape,
    ))
}

/// Gradients flowing out of [`backward`] into the context inputs.
#[derive(Debug, Clone)]
pub struct ContextGrads {
    /// Per valid slot (oldest first): gradient w.r.t. z_vis and, when the
    /// model uses proprio, z_prop.
    pub d_latents: Vec<(Vec<f64>, Option<Vec<f64>>)>,
    /// Per valid slot: gradient w.r.t. the action embedding.
    pub d_action_embeds: Vec<Vec<f64>>,
}

/// Reverse pass for one recorded forward call.
///
/// `d_vis` / `d_prop` are the loss gradients at the predicted latent.
/// Parameter gradients accumulate (+=) into `grads`, which must span the
/// full flat layout; returns the gradients w.r.t. the window inputs.
pub fn backward(
    d_vis: &[f64],
    d_prop: Option<&[f64]>,
    tape: &Tape,
    model: &Model,
    grads: &mut [f64],
) -> Result<ContextGrads> {
    let cfg = &model.cfg;
    let data = &model.params.data;
    if d_vis.len() != cfg.d_vis {
        return Err(Error::InvalidArgument("backward: d_vis dimension mismatch".into()));
    }
    if grads.len() != model.params.layout.total {
        return Err(Error::InvalidArgument("backward: gradient buffer length mismatch".into()));
    }
    match (d_prop, cfg.proprio) {
        (Some(d), true) if d.len() != cfg.p_prop => {
            return Err(Error::InvalidArgument("backward: d_prop dimension mismatch".into()))
        }
        (Some(_), false) => {
            return Err(Error::InvalidArgument(
                "backward: d_prop given but model has no proprio head".into(),
            ))
        }
        _ => {}
    }

    let h_last = tape.hidden.last().expect("tape has layers");
    let mut d_h = vec![0.0; cfg.width];

    // Output heads.
    let (hw, hb) = &model.wiring.head_vis;
    let hwv = &data[hw.range()];
    for i in 0..cfg.d_vis {
        let g = d_vis[i];
        for j in 0..cfg.width {
            grads[hw.offset + i * cfg.width + j] += g * h_last[j];
            d_h[j] += hwv[i * cfg.width + j] * g;
        }
        grads[hb.offset + i] += g;
    }
    if let (Some(dp), Some((pw, pb))) = (d_prop, model.wiring.head_prop.as_ref()) {
        let pwv = &data[pw.range()];
        for i in 0..cfg.p_prop {
            let g = dp[i];
            for j in 0..cfg.width {
                grads[pw.offset + i * cfg.width + j] += g * h_last[j];
                d_h[j] += pwv[i * cfg.width + j] * g;
            }
            grads[pb.offset + i] += g;
        }
    }

    // Hidden layers in reverse.
    let mut d_u = vec![0.0; tape.u.len()];
    let mut d_x0 = vec![0.0; tape.x0.len()];
    for l in (0..cfg.depth).rev() {
        let h = &tape.hidden[l];
        // tanh'(m) = 1 - h^2.
        let d_m: Vec<f64> = d_h.iter().zip(h).map(|(dh, hv)| dh * (1.0 - hv * hv)).collect();
        let d_a: Vec<f64> = if cfg.conditioning == Conditioning::LayerModulation {
            let xh = &tape.xhat[l];
            let g = &tape.gamma[l];
            let istd = tape.inv_std[l];
            let (gs, bs) = &model.wiring.mods[l];
            let gv = &data[gs.range()];
            let d_xh: Vec<f64> = d_m.iter().zip(g).map(|(dm, gv)| dm * gv).collect();
            for i in 0..cfg.width {
                let d_gamma_i = d_m[i] * xh[i];
                let d_beta_i = d_m[i];
                let grow = &gv[i * cfg.a_embed..(i + 1) * cfg.a_embed];
                for j in 0..cfg.a_embed {
                    grads[gs.offset + i * cfg.a_embed + j] += d_gamma_i * tape.u[j];
                    grads[bs.offset + i * cfg.a_embed + j] += d_beta_i * tape.u[j];
                    d_u[j] += grow[j] * d_gamma_i;
                }
                let brow_off = bs.offset + i * cfg.a_embed;
                let brow = &data[brow_off..brow_off + cfg.a_embed];
                for j in 0..cfg.a_embed {
                    d_u[j] += brow[j] * d_beta_i;
                }
            }
            // LayerNorm backward (population variance, no affine).
            let n = cfg.width as f64;
            let mean_d = d_xh.iter().sum::<f64>() / n;
            let mean_dx = d_xh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
            d_xh
                .iter()
                .zip(xh)
                .map(|(d, x)| istd * (d - mean_d - x * mean_dx))
                .collect()
        } else {
            d_m
        };

        let (w, bseg) = &model.wiring.layers[l];
        let wv = &data[w.range()];
        let cols = w.cols;
        let input: &[f64] = if l == 0 { &tape.x0 } else { &tape.hidden[l - 1] };
        let mut d_input = vec![0.0; cols];
        for i in 0..w.rows {
            let g = d_a[i];
            let row = &wv[i * cols..(i + 1) * cols];
            for j in 0..cols {
                grads[w.offset + i * cols + j] += g * input[j];
                d_input[j] += row[j] * g;
            }
            grads[bseg.offset + i] += g;
        }
        if l == 0 {
            d_x0 = d_input;
        } else {
            d_h = d_input;
        }
    }

    // Unpack input gradients for the valid slots.
    let slot = cfg.slot_dim();
    let pad = cfg.capacity - tape.valid_len;
    let mut d_latents = Vec::with_capacity(tape.valid_len);
    let mut d_action_embeds = vec![vec![0.0; cfg.a_embed]; tape.valid_len];
    for k in 0..tape.valid_len {
        let base = (pad + k) * slot;
        let mut at = base;
        let dv = d_x0[at..at + cfg.d_vis].to_vec();
        at += cfg.d_vis;
        let dp = if cfg.proprio {
            let v = d_x0[at..at + cfg.p_prop].to_vec();
            at += cfg.p_prop;
            Some(v)
        } else {
            None
        };
        if cfg.conditioning == Conditioning::FeatureConcat {
            d_action_embeds[k].copy_from_slice(&d_x0[at..at + cfg.a_embed]);
        }
        d_latents.push((dv, dp));
    }
    if cfg.conditioning == Conditioning::LayerModulation {
        // The pooled embedding distributes its gradient evenly.
        let scale = 1.0 / tape.valid_len as f64;
        for da in &mut d_action_embeds {
            for (dj, du) in da.iter_mut().zip(&d_u) {
                *dj += du * scale;
            }
        }
    }
    Ok(ContextGrads {
        d_latents,
        d_action_embeds,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"WMPLCKPT";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    model: ModelConfig,
    trained_w: usize,
    vis_seed: u64,
    vis_input_len: usize,
    norm_stats: NormStats,
    param_count: usize,
}

/// Writes a self-contained checkpoint: magic, JSON header (dims, mode,
/// frozen-encoder seed, normalization stats), then the flat parameters as
/// little-endian float32.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let (vis_seed, vis_input_len) = match &model.enc.vis {
        VisMap::RandomFourier { seed, input_len, .. } => (*seed, *input_len),
        VisMap::Linear { .. } => {
            return Err(Error::InvalidArgument(
                "save_checkpoint: linear visual maps are a diagnostic feature and cannot be checkpointed".into(),
            ))
        }
    };
    let header = CheckpointHeader {
        version: 1,
        model: model.cfg.clone(),
        trained_w: model.trained_w,
        vis_seed,
        vis_input_len,
        norm_stats: model.norm.clone(),
        param_count: model.params.data.len(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Runtime(format!("checkpoint header: {e}")))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(&json)?;
    for v in &model.params.data {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

/// Loads a checkpoint, regenerating the frozen visual map from its seed.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Config(format!("{} is not a checkpoint file", path.display())));
    }
    let mut len4 = [0u8; 4];
    f.read_exact(&mut len4)?;
    let hlen = u32::from_le_bytes(len4) as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: CheckpointHeader = serde_json::from_slice(&hbuf)
        .map_err(|e| Error::Config(format!("invalid checkpoint header: {e}")))?;
    if header.version != 1 {
        return Err(Error::Config(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let layout = Layout::build(&header.model);
    if layout.total != header.param_count {
        return Err(Error::Config(format!(
            "checkpoint parameter count {} does not match layout {}",
            header.param_count, layout.total
        )));
    }
    let mut payload = vec![0u8; header.param_count * 4];
    f.read_exact(&mut payload)?;
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let vis = VisMap::random_fourier(
        header.vis_seed,
        header.model.d_vis,
        header.vis_input_len,
        header.model.vis_bandwidth,
        header.model.vis_scale,
    );
    Ok(Model::from_parts(
        header.model,
        EncoderParams { vis },
        PredictorParams { layout, data },
        header.norm_stats,
        header.trained_w,
    ))
}
