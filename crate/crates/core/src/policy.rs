//! Recurrent actor-critic: visual CNN, optional map encoder, fusion layer,
//! GRU over (fused features, previous action, goal), actor and critic heads.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};

use crate::mapper::{occupancy_view, EgoMap};
use crate::nn::{add_param, Linear};
use crate::sim::{Action, GoalVector};
use crate::tensor::{read_params, write_params, Graph, InitScheme, ParamId, ParamStore, Result, Tensor, TensorError, Var};
use crate::transformer::{MapTransformer, MapTransformerConfig, Pooling};

/// Id of the start-of-episode entry in the previous-action embedding.
pub const START_TOKEN: usize = Action::COUNT;
/// Goal distance is fed in units of this many cells.
pub const GOAL_DISTANCE_UNIT: f64 = 10.0;
pub const GOAL_FEATURES: usize = 3;
const IMAGE_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MapVariant {
    None,
    SemanticAttention,
    OccupancyAttention,
    SemanticCnn,
}

impl MapVariant {
    pub fn name(self) -> &'static str {
        match self {
            MapVariant::None => "none",
            MapVariant::SemanticAttention => "semantic-attention",
            MapVariant::OccupancyAttention => "occupancy-attention",
            MapVariant::SemanticCnn => "semantic-cnn",
        }
    }
}

impl FromStr for MapVariant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        [MapVariant::None, MapVariant::SemanticAttention, MapVariant::OccupancyAttention, MapVariant::SemanticCnn]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown map variant {s:?}"))
    }
}

/// The ablation variants: map input and exploration reward switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Rgbd,
    RgbdExp,
    RgbdSem,
    RgbdOccAtt,
    Mast,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Rgbd, Variant::RgbdExp, Variant::RgbdSem, Variant::RgbdOccAtt, Variant::Mast];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Rgbd => "RGBD",
            Variant::RgbdExp => "RGBD+EXP",
            Variant::RgbdSem => "RGBD+SEM",
            Variant::RgbdOccAtt => "RGBD+OCC+ATT",
            Variant::Mast => "MaAST",
        }
    }

    pub fn map_variant(self) -> MapVariant {
        match self {
            Variant::Rgbd | Variant::RgbdExp => MapVariant::None,
            Variant::RgbdSem => MapVariant::SemanticCnn,
            Variant::RgbdOccAtt => MapVariant::OccupancyAttention,
            Variant::Mast => MapVariant::SemanticAttention,
        }
    }

    pub fn exploration(self) -> bool {
        !matches!(self, Variant::Rgbd)
    }

    /// Label of the map column in reports.
    pub fn map_label(self) -> &'static str {
        match self.map_variant() {
            MapVariant::None => "-",
            MapVariant::SemanticAttention | MapVariant::SemanticCnn => "Semantic",
            MapVariant::OccupancyAttention => "Occupancy",
        }
    }

    /// Variant whose switches match a policy configuration.
    pub fn of(cfg: &PolicyConfig) -> Option<Variant> {
        Self::ALL.into_iter().find(|v| v.map_variant() == cfg.map_variant && v.exploration() == cfg.exploration)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
            format!("unknown variant {s:?}; valid: {}", names.join(", "))
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub hidden: usize,
    pub action_embedding: usize,
    pub map_variant: MapVariant,
    pub exploration: bool,
    pub image_height: usize,
    pub image_width: usize,
    pub radius: usize,
    pub n_classes: usize,
    pub map_dim: usize,
    pub map_heads: usize,
    pub map_layers: usize,
    pub pooling: Pooling,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            action_embedding: 32,
            map_variant: MapVariant::SemanticAttention,
            exploration: true,
            image_height: 64,
            image_width: 64,
            radius: 8,
            n_classes: 8,
            map_dim: 128,
            map_heads: 4,
            map_layers: 2,
            pooling: Pooling::Mean,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn with_variant(mut self, v: Variant) -> Self {
        self.map_variant = v.map_variant();
        self.exploration = v.exploration();
        self
    }

    /// Channels of the map fed to the encoder.
    pub fn map_channels(&self) -> usize {
        match self.map_variant {
            MapVariant::OccupancyAttention => 3,
            _ => self.n_classes + 1,
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("variant", self.map_variant.name().to_string()),
            ("exploration", self.exploration.to_string()),
            ("hidden", self.hidden.to_string()),
            ("action_embedding", self.action_embedding.to_string()),
            ("image_height", self.image_height.to_string()),
            ("image_width", self.image_width.to_string()),
            ("radius", self.radius.to_string()),
            ("n_classes", self.n_classes.to_string()),
            ("map_dim", self.map_dim.to_string()),
            ("map_heads", self.map_heads.to_string()),
            ("map_layers", self.map_layers.to_string()),
            ("pooling", if self.pooling == Pooling::Mean { "mean" } else { "max" }.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> std::result::Result<Self, String> {
        let mut cfg = PolicyConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (k, v) in pairs {
            let bad = |e: &dyn fmt::Display| format!("{k}={v}: {e}");
            match k.as_str() {
                "variant" => cfg.map_variant = v.parse()?,
                "exploration" => cfg.exploration = v.parse().map_err(|e| bad(&e))?,
                "hidden" => cfg.hidden = v.parse().map_err(|e| bad(&e))?,
                "action_embedding" => cfg.action_embedding = v.parse().map_err(|e| bad(&e))?,
                "image_height" => cfg.image_height = v.parse().map_err(|e| bad(&e))?,
                "image_width" => cfg.image_width = v.parse().map_err(|e| bad(&e))?,
                "radius" => cfg.radius = v.parse().map_err(|e| bad(&e))?,
                "n_classes" => cfg.n_classes = v.parse().map_err(|e| bad(&e))?,
                "map_dim" => cfg.map_dim = v.parse().map_err(|e| bad(&e))?,
                "map_heads" => cfg.map_heads = v.parse().map_err(|e| bad(&e))?,
                "map_layers" => cfg.map_layers = v.parse().map_err(|e| bad(&e))?,
                "pooling" => {
                    cfg.pooling = match v.as_str() {
                        "mean" => Pooling::Mean,
                        "max" => Pooling::Max,
                        _ => return Err(bad(&"expected mean or max")),
                    }
                }
                "seed" => cfg.seed = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(format!("unknown checkpoint key {k:?}")),
            }
            seen.insert(k.clone());
        }
        let missing: Vec<&str> = cfg.to_pairs().iter().map(|(k, _)| *k).filter(|k| !seen.contains(*k)).collect();
        if !missing.is_empty() {
            return Err(format!("missing checkpoint keys: {}", missing.join(", ")));
        }
        Ok(cfg)
    }
}

/// Stack of strided valid convolutions (relu after each) then a dense layer
/// to `out_dim` with relu.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    pub convs: Vec<(ParamId, ParamId, usize)>,
    pub fc: Linear,
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
}

/// Kernel, stride and output channels of the three conv layers.
pub const CONV_LAYERS: [(usize, usize, usize); 3] = [(8, 4, 32), (4, 2, 64), (3, 1, 32)];

impl ConvEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (mut c, mut h, mut w) = (in_channels, in_h, in_w);
        let mut convs = Vec::new();
        for (i, &(k, s, o)) in CONV_LAYERS.iter().enumerate() {
            if h < k || w < k {
                return Err(TensorError::Contract(format!(
                    "{name}: {in_h}x{in_w} input too small for conv layer {i} ({k}x{k} on {h}x{w})"
                )));
            }
            let wt = add_param(store, &format!("{name}.conv{i}.w"), &[o, c, k, k], InitScheme::FanInUniform, rng)?;
            let b = add_param(store, &format!("{name}.conv{i}.b"), &[o], InitScheme::Zeros, rng)?;
            convs.push((wt, b, s));
            h = (h - k) / s + 1;
            w = (w - k) / s + 1;
            c = o;
        }
        let fc = Linear::new(store, &format!("{name}.fc"), c * h * w, out_dim, InitScheme::FanInUniform, rng)?;
        Ok(Self { convs, fc, in_channels, in_h, in_w })
    }

    /// `x: [N, C, H, W]` -> `[N, out_dim]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let mut y = x;
        for &(w, b, s) in &self.convs {
            let w = g.param(store, w);
            let b = g.param(store, b);
            y = g.conv2d(y, w, b, s)?;
            y = g.relu(y)?;
        }
        let n = g.dims(y)[0];
        let flat = g.value(y).len() / n.max(1);
        let y = g.reshape(y, &[n, flat])?;
        let y = self.fc.forward(g, store, y)?;
        g.relu(y)
    }
}

#[derive(Clone, Debug)]
pub enum MapEncoder {
    None,
    Attention(MapTransformer),
    Cnn(ConvEncoder),
}

/// Single-layer GRU, gates ordered (reset, update, candidate).
#[derive(Clone, Debug)]
pub struct Gru {
    pub w_ih: ParamId,
    pub b_ih: ParamId,
    pub w_hh: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let w_ih = add_param(store, &format!("{name}.w_ih"), &[input, 3 * hidden], InitScheme::FanInUniform, rng)?;
        let b_ih = add_param(store, &format!("{name}.b_ih"), &[3 * hidden], InitScheme::Zeros, rng)?;
        let mut hh = Tensor::zeros(&[hidden, 3 * hidden]);
        for gate in 0..3 {
            let q = crate::tensor::init_parameters(&[hidden, hidden], InitScheme::Orthogonal, rng)?;
            for i in 0..hidden {
                let dst = &mut hh.data_mut()[i * 3 * hidden + gate * hidden..i * 3 * hidden + (gate + 1) * hidden];
                dst.copy_from_slice(&q.data()[i * hidden..(i + 1) * hidden]);
            }
        }
        let w_hh = store.add(format!("{name}.w_hh"), hh)?;
        let b_hh = add_param(store, &format!("{name}.b_hh"), &[3 * hidden], InitScheme::Zeros, rng)?;
        Ok(Self { w_ih, b_ih, w_hh, b_hh, hidden })
    }

    /// Input projection `x·W_ih + b_ih` for all steps at once.
    pub fn project_input(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w_ih);
        let b = g.param(store, self.b_ih);
        g.linear(x, w, b)
    }

    /// One step from the projected input `gi: [B, 3H]` and hidden `h: [B, H]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, gi: Var, h: Var) -> Result<Var> {
        let n = self.hidden;
        let w = g.param(store, self.w_hh);
        let b = g.param(store, self.b_hh);
        let gh = g.linear(h, w, b)?;
        let (ir, iz, in_) = (g.slice(gi, 1, 0, n)?, g.slice(gi, 1, n, 2 * n)?, g.slice(gi, 1, 2 * n, 3 * n)?);
        let (hr, hz, hn) = (g.slice(gh, 1, 0, n)?, g.slice(gh, 1, n, 2 * n)?, g.slice(gh, 1, 2 * n, 3 * n)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, hn)?;
        let c = g.add(in_, rn)?;
        let c = g.tanh(c)?;
        // h' = (1 - z)·c + z·h = c + z·(h - c)
        let d = g.sub(h, c)?;
        let zd = g.mul(z, d)?;
        g.add(c, zd)
    }
}

/// Network inputs for `N` steps, row `t·B + b` for step `t` of env `b`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepInputs {
    /// `[N, 4, H, W]`, channel-first.
    pub images: Vec<f64>,
    /// Per-step cell masks in the encoder's channel layout (empty without a map).
    pub maps: Vec<Vec<u32>>,
    pub goals: Vec<[f64; GOAL_FEATURES]>,
    pub prev_actions: Vec<usize>,
}

impl StepInputs {
    pub fn len(&self) -> usize {
        self.prev_actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prev_actions.is_empty()
    }

    pub fn extend(&mut self, other: &StepInputs) {
        self.images.extend_from_slice(&other.images);
        self.maps.extend(other.maps.iter().cloned());
        self.goals.extend_from_slice(&other.goals);
        self.prev_actions.extend_from_slice(&other.prev_actions);
    }

    /// Rows `range` as a new input set.
    pub fn rows(&self, range: std::ops::Range<usize>) -> StepInputs {
        let per = self.images.len() / self.len().max(1);
        StepInputs {
            images: self.images[range.start * per..range.end * per].to_vec(),
            maps: if self.maps.is_empty() { Vec::new() } else { self.maps[range.clone()].to_vec() },
            goals: self.goals[range.clone()].to_vec(),
            prev_actions: self.prev_actions[range].to_vec(),
        }
    }
}

pub fn goal_features(g: &GoalVector) -> [f64; GOAL_FEATURES] {
    [g.distance / GOAL_DISTANCE_UNIT, g.bearing.cos(), g.bearing.sin()]
}

/// Per-env recurrent state.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub hidden: Vec<f64>,
    pub prev_action: usize,
}

impl PolicyState {
    pub fn new(hidden: usize) -> Self {
        Self { hidden: vec![0.0; hidden], prev_action: START_TOKEN }
    }

    pub fn reset(&mut self) {
        self.hidden.iter_mut().for_each(|h| *h = 0.0);
        self.prev_action = START_TOKEN;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActOutput {
    pub action: Action,
    pub log_prob: f64,
    pub value: f64,
}

/// Outputs of [`PolicyNet::unroll`].
pub struct Unrolled {
    /// `[N, 4]`.
    pub logits: Var,
    /// `[N, 1]`.
    pub values: Var,
    /// `[B, H]`.
    pub last_hidden: Var,
}

#[derive(Clone, Debug)]
pub struct PolicyNet {
    pub cfg: PolicyConfig,
    pub visual: ConvEncoder,
    pub map: MapEncoder,
    pub fuse: Linear,
    pub action_emb: ParamId,
    pub gru: Gru,
    pub actor: Linear,
    pub critic: Linear,
}

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(cfg: PolicyConfig, rng: &mut R) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let h = cfg.hidden;
        let visual = ConvEncoder::new(&mut store, "visual", IMAGE_CHANNELS, cfg.image_height, cfg.image_width, h, rng)?;
        let map = match cfg.map_variant {
            MapVariant::None => MapEncoder::None,
            MapVariant::SemanticAttention | MapVariant::OccupancyAttention => {
                let mc = MapTransformerConfig {
                    heads: cfg.map_heads,
                    layers: cfg.map_layers,
                    pooling: cfg.pooling,
                    ..MapTransformerConfig::new(cfg.radius, cfg.map_channels(), cfg.map_dim, h)
                };
                MapEncoder::Attention(MapTransformer::new(&mut store, "map", mc, rng)?)
            }
            MapVariant::SemanticCnn => MapEncoder::Cnn(ConvEncoder::new(
                &mut store,
                "mapcnn",
                cfg.map_channels(),
                cfg.image_height,
                cfg.image_width,
                h,
                rng,
            )?),
        };
        let fuse_in = if matches!(map, MapEncoder::None) { h } else { 2 * h };
        let fuse = Linear::new(&mut store, "fuse", fuse_in, h, InitScheme::FanInUniform, rng)?;
        let action_emb = add_param(
            &mut store,
            "action_emb",
            &[Action::COUNT + 1, cfg.action_embedding],
            InitScheme::Normal { std: 1.0 },
            rng,
        )?;
        let gru = Gru::new(&mut store, "gru", h + cfg.action_embedding + GOAL_FEATURES, h, rng)?;
        let actor = Linear::new(&mut store, "actor", h, Action::COUNT, InitScheme::Orthogonal, rng)?;
        actor.scale_weights(&mut store, 0.01);
        let critic = Linear::new(&mut store, "critic", h, 1, InitScheme::Orthogonal, rng)?;
        Ok((Self { cfg, visual, map, fuse, action_emb, gru, actor, critic }, store))
    }

    pub fn image_len(&self) -> usize {
        IMAGE_CHANNELS * self.cfg.image_height * self.cfg.image_width
    }

    /// Append one step's inputs. `image` is `[H, W, 4]` as rendered.
    pub fn push_inputs(
        &self,
        inputs: &mut StepInputs,
        image: &Tensor,
        ego: &EgoMap,
        goal: &GoalVector,
        prev_action: usize,
    ) -> Result<()> {
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        if image.dims() != [h, w, IMAGE_CHANNELS] {
            return Err(TensorError::Shape {
                op: "policy-input",
                detail: format!("image dims {:?}, expected {:?}", image.dims(), [h, w, IMAGE_CHANNELS]),
            });
        }
        let d = image.data();
        for c in 0..IMAGE_CHANNELS {
            for p in 0..h * w {
                inputs.images.push(d[p * IMAGE_CHANNELS + c]);
            }
        }
        inputs.maps.extend(self.map_input(ego));
        inputs.goals.push(goal_features(goal));
        inputs.prev_actions.push(prev_action);
        Ok(())
    }

    /// Multi-hot map channels nearest-upsampled to the image size, `[N, C, H, W]`.
    fn map_as_image(&self, maps: &[Vec<u32>]) -> Tensor {
        let (h, w, c) = (self.cfg.image_height, self.cfg.image_width, self.cfg.map_channels());
        let side = 2 * self.cfg.radius + 1;
        let mut data = vec![0.0; maps.len() * c * h * w];
        for (n, m) in maps.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    let mask = m[(y * side / h) * side + x * side / w];
                    for ch in 0..c {
                        if mask >> ch & 1 == 1 {
                            data[((n * c + ch) * h + y) * w + x] = 1.0;
                        }
                    }
                }
            }
        }
        Tensor::new(&[maps.len(), c, h, w], data).expect("dims match data")
    }

    /// Cell masks this variant feeds its map encoder, if any.
    pub fn map_input(&self, ego: &EgoMap) -> Option<Vec<u32>> {
        match self.cfg.map_variant {
            MapVariant::None => None,
            MapVariant::OccupancyAttention => Some(occupancy_view(ego).masks()),
            MapVariant::SemanticAttention | MapVariant::SemanticCnn => Some(ego.masks.clone()),
        }
    }

    /// Encoders and fusion: `[N, H]`.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, inputs: &StepInputs) -> Result<Var> {
        let n = inputs.len();
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        if inputs.images.len() != n * self.image_len() {
            return Err(TensorError::Contract(format!("{} image values for {n} steps", inputs.images.len())));
        }
        let img = g.constant(Tensor::new(&[n, IMAGE_CHANNELS, h, w], inputs.images.clone())?);
        let r = self.visual.forward(g, store, img)?;
        let m = match &self.map {
            MapEncoder::None => None,
            MapEncoder::Attention(t) => {
                let maps: Vec<&[u32]> = inputs.maps.iter().map(|m| m.as_slice()).collect();
                Some(t.forward(g, store, &maps)?.feature)
            }
            MapEncoder::Cnn(cnn) => {
                let x = g.constant(self.map_as_image(&inputs.maps));
                Some(cnn.forward(g, store, x)?)
            }
        };
        let x = match m {
            None => r,
            Some(m) => g.concat(&[r, m], 1)?,
        };
        let y = self.fuse.forward(g, store, x)?;
        g.relu(y)
    }

    /// Run `T = N / B` steps for `B` envs from hidden `h0: [B, H]`. The
    /// hidden state is zeroed before any step whose `resets` flag is set.
    pub fn unroll(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &StepInputs,
        h0: &Tensor,
        resets: &[bool],
    ) -> Result<Unrolled> {
        let hd = self.cfg.hidden;
        let b = h0.dims()[0];
        let n = inputs.len();
        if b == 0 || n % b != 0 || resets.len() != n || h0.dims() != [b, hd] {
            return Err(TensorError::Contract(format!(
                "unroll: {n} steps, {} reset flags, hidden {:?} for hidden size {hd}",
                resets.len(),
                h0.dims()
            )));
        }
        let fused = self.encode(g, store, inputs)?;
        let table = g.param(store, self.action_emb);
        let a = g.embedding(table, inputs.prev_actions.clone())?;
        let goals = g.constant(Tensor::new(&[n, GOAL_FEATURES], inputs.goals.iter().flatten().copied().collect())?);
        let x = g.concat(&[fused, a, goals], 1)?;
        let gi = self.gru.project_input(g, store, x)?;
        let mut h = g.constant(h0.clone());
        let mut hs = Vec::with_capacity(n / b);
        for t in 0..n / b {
            let flags = &resets[t * b..(t + 1) * b];
            if flags.iter().any(|&f| f) {
                let mask: Vec<f64> = flags.iter().flat_map(|&f| std::iter::repeat_n(if f { 0.0 } else { 1.0 }, hd)).collect();
                let mask = g.constant(Tensor::new(&[b, hd], mask)?);
                h = g.mul(h, mask)?;
            }
            let gi_t = g.slice(gi, 0, t * b, (t + 1) * b)?;
            h = self.gru.step(g, store, gi_t, h)?;
            hs.push(h);
        }
        let all = if hs.len() == 1 { hs[0] } else { g.concat(&hs, 0)? };
        let logits = self.actor.forward(g, store, all)?;
        let values = self.critic.forward(g, store, all)?;
        Ok(Unrolled { logits, values, last_hidden: h })
    }

    /// One step for each env in `states` (inputs hold one row per env). The
    /// states' hidden vectors and previous actions are advanced.
    pub fn act<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        inputs: &StepInputs,
        states: &mut [PolicyState],
        mode: ActMode,
        rng: &mut R,
    ) -> Result<Vec<ActOutput>> {
        let b = states.len();
        let hd = self.cfg.hidden;
        let h0 = Tensor::new(&[b, hd], states.iter().flat_map(|s| s.hidden.iter().copied()).collect())?;
        let mut g = Graph::inference();
        let out = self.unroll(&mut g, store, inputs, &h0, &vec![false; b])?;
        let logits = g.value(out.logits).data().to_vec();
        let values = g.value(out.values).data().to_vec();
        let hidden = g.value(out.last_hidden).data().to_vec();
        let mut res = Vec::with_capacity(b);
        for (i, st) in states.iter_mut().enumerate() {
            let row = &logits[i * Action::COUNT..(i + 1) * Action::COUNT];
            let (a, lp) = choose(row, mode, rng);
            st.hidden.copy_from_slice(&hidden[i * hd..(i + 1) * hd]);
            st.prev_action = a;
            res.push(ActOutput {
                action: Action::from_index(a).expect("valid action index"),
                log_prob: lp,
                value: values[i],
            });
        }
        Ok(res)
    }
}

/// Log-softmax of one logit row.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Pick an action from one logit row; returns (index, log-probability).
pub fn choose<R: Rng + ?Sized>(logits: &[f64], mode: ActMode, rng: &mut R) -> (usize, f64) {
    let lp = log_softmax(logits);
    let a = match mode {
        ActMode::Greedy => {
            let mut best = 0;
            for i in 1..logits.len() {
                if logits[i] > logits[best] {
                    best = i;
                }
            }
            best
        }
        ActMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = lp.len() - 1;
            for (i, l) in lp.iter().enumerate() {
                acc += l.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        }
    };
    (a, lp[a])
}

const CHECKPOINT_MAGIC: &str = "MASTCKPT 1";

/// Checkpoint: a text header (`MASTCKPT 1`, `key=value` lines, blank line)
/// followed by the parameter container.
pub fn write_checkpoint(w: &mut impl Write, cfg: &PolicyConfig, store: &ParamStore) -> Result<()> {
    let mut head = format!("{CHECKPOINT_MAGIC}\n");
    for (k, v) in cfg.to_pairs() {
        head.push_str(&format!("{k}={v}\n"));
    }
    head.push('\n');
    w.write_all(head.as_bytes())?;
    write_params(store, w)
}

pub fn read_checkpoint(r: &mut impl BufRead) -> Result<(PolicyConfig, ParamStore)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != CHECKPOINT_MAGIC {
        return Err(TensorError::Format(format!("not a checkpoint (header {:?})", line.trim_end())));
    }
    let mut pairs = Vec::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(TensorError::Format("checkpoint header not terminated".into()));
        }
        let l = line.trim_end_matches('\n');
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| TensorError::Format(format!("bad header line {l:?}")))?;
        pairs.push((k.to_string(), v.to_string()));
    }
    let cfg = PolicyConfig::from_pairs(&pairs).map_err(TensorError::Format)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let store = read_params(&mut rest.as_slice())?;
    Ok((cfg, store))
}

pub fn save_checkpoint(path: &Path, cfg: &PolicyConfig, store: &ParamStore) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, cfg, store)?;
    std::fs::write(path, buf).map_err(|e| TensorError::Format(format!("writing {}: {e}", path.display())))
}

/// Load a checkpoint and rebuild the network it belongs to.
pub fn load_policy(path: &Path) -> Result<(PolicyNet, ParamStore)> {
    let f = std::fs::File::open(path).map_err(|e| TensorError::Format(format!("opening {}: {e}", path.display())))?;
    let (cfg, loaded) = read_checkpoint(&mut std::io::BufReader::new(f))?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let (net, mut store) = PolicyNet::new(cfg, &mut rng)?;
    store.load_from(&loaded)?;
    Ok((net, store))
}
