//! Episode scoring: the three-condition success test, SPL, aggregate
//! reports and the train/val split manifest.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mapper::{egocentric_crop, integrate, EgoMap, WorldSemanticMap};
use crate::policy::{ActMode, PolicyNet, PolicyState, StepInputs, Variant};
use crate::sim::{sample_episode, Action, Episode, Pose, SensorConfig, SimError, Simulator, World, MAX_EPISODE_STEPS};
use crate::tensor::{ParamStore, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("checkpoint incompatible with evaluation setup: {0}")]
    Compatibility(String),
    #[error("split violation: {0}")]
    Split(String),
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuccessConfig {
    /// Stopping strictly closer than this (geodesic cells) counts.
    pub goal_radius: f64,
    /// Success needs strictly fewer steps than this.
    pub max_steps: usize,
}

impl Default for SuccessConfig {
    fn default() -> Self {
        Self { goal_radius: 1.0, max_steps: MAX_EPISODE_STEPS }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    /// Geodesic start-to-goal length `s_i`.
    pub shortest_path: f64,
    /// Forward moves actually taken `d_i`; turns and collisions add nothing.
    pub path_length: f64,
    pub final_distance: f64,
    pub stopped: bool,
    pub collisions: usize,
}

pub fn episode_success(r: &EpisodeResult, cfg: &SuccessConfig) -> bool {
    r.stopped && r.steps < cfg.max_steps && r.final_distance < cfg.goal_radius
}

/// Per-episode SPL term `1{success} · s / max(d, s)`.
pub fn spl_term(r: &EpisodeResult) -> Result<f64> {
    if !(r.shortest_path > 0.0) {
        return Err(EvalError::Contract(format!("shortest path must be positive, got {}", r.shortest_path)));
    }
    Ok(if r.success { r.shortest_path / r.path_length.max(r.shortest_path) } else { 0.0 })
}

/// Mean SPL term; 0 for an empty list.
pub fn spl(results: &[EpisodeResult]) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in results {
        total += spl_term(r)?;
    }
    Ok(total / results.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub label: String,
    pub map_label: String,
    pub episodes: usize,
    /// Percent.
    pub success_rate: f64,
    /// Percent; never above `success_rate`.
    pub spl: f64,
    pub mean_steps: f64,
}

impl Report {
    pub fn from_results(label: &str, map_label: &str, results: &[EpisodeResult]) -> Result<Self> {
        let n = results.len();
        let (succ, steps) = if n == 0 {
            (0.0, 0.0)
        } else {
            let s = results.iter().filter(|r| r.success).count() as f64 / n as f64;
            let m = results.iter().map(|r| r.steps as f64).sum::<f64>() / n as f64;
            (s, m)
        };
        Ok(Self {
            label: label.to_string(),
            map_label: map_label.to_string(),
            episodes: n,
            success_rate: 100.0 * succ,
            spl: 100.0 * spl(results)?,
            mean_steps: steps,
        })
    }
}

pub const REPORT_CSV_HEADER: &str = "method,map,episodes,spl,success,mean_steps";

pub fn report_csv(reports: &[Report]) -> String {
    let mut out = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4}",
            r.label, r.map_label, r.episodes, r.spl, r.success_rate, r.mean_steps
        );
    }
    out
}

/// Aligned text table with columns Method, Map, SPL(%), Succ(%).
pub fn report_table(reports: &[Report]) -> String {
    let rows: Vec<[String; 4]> = reports
        .iter()
        .map(|r| [r.label.clone(), r.map_label.clone(), format!("{:.1}", r.spl), format!("{:.1}", r.success_rate)])
        .collect();
    let header = ["Method", "Map", "SPL(%)", "Succ(%)"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &rows {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String; 4]| {
        format!(
            "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}\n",
            cells[0],
            cells[1],
            cells[2],
            cells[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        )
    };
    let mut out = line(&header);
    out.push_str(&format!("{}\n", "-".repeat(widths.iter().sum::<usize>() + 6)));
    for row in &rows {
        out.push_str(&line(row));
    }
    out
}

/// A policy episode with everything needed for scoring and replay.
#[derive(Clone, Debug)]
pub struct EpisodeTrace {
    pub result: EpisodeResult,
    /// Start pose followed by the pose after every step.
    pub poses: Vec<Pose>,
    pub actions: Vec<Action>,
    pub map: WorldSemanticMap,
    /// Egocentric crop observed before the last action.
    pub last_ego: EgoMap,
}

/// Reject checkpoints whose sensor geometry or class count the worlds cannot feed.
pub fn check_compatible(net: &PolicyNet, sensor: &SensorConfig, world: &World) -> Result<()> {
    let c = &net.cfg;
    if c.image_width != sensor.n_rays || c.image_height != sensor.image_height {
        return Err(EvalError::Compatibility(format!(
            "policy expects {}x{} images, sensor renders {}x{}",
            c.image_height, c.image_width, sensor.image_height, sensor.n_rays
        )));
    }
    if world.n_classes() > c.n_classes {
        return Err(EvalError::Compatibility(format!(
            "world has {} classes, policy was built for {}",
            world.n_classes(),
            c.n_classes
        )));
    }
    Ok(())
}

pub fn run_episode<R: Rng + ?Sized>(
    net: &PolicyNet,
    store: &ParamStore,
    world: Arc<World>,
    episode: Episode,
    sensor: &SensorConfig,
    success: &SuccessConfig,
    mode: ActMode,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    check_compatible(net, sensor, &world)?;
    let shortest_path = episode.shortest_path;
    let mut sim = Simulator::new(world.clone(), sensor.clone(), episode)?;
    let mut map = WorldSemanticMap::new(world.width(), world.height(), world.n_classes());
    let mut state = [PolicyState::new(net.cfg.hidden)];
    let mut obs = sim.observe();
    let mut poses = vec![sim.pose()];
    let mut actions = Vec::new();
    let (mut path, mut collisions) = (0.0, 0);
    let mut last_ego;
    loop {
        integrate(&mut map, &sim.pose(), &obs.rays, sensor);
        let ego = egocentric_crop(&map, &sim.pose(), net.cfg.radius);
        let mut inputs = StepInputs::default();
        net.push_inputs(&mut inputs, &obs.image, &ego, &sim.goal_vector(), state[0].prev_action)?;
        last_ego = ego;
        let action = net.act(store, &inputs, &mut state, mode, rng)?[0].action;
        let before = sim.pose();
        let (next, info) = sim.step(action)?;
        if action == Action::MoveForward && info.pose != before {
            path += 1.0;
        }
        collisions += info.collided as usize;
        poses.push(info.pose);
        actions.push(action);
        obs = next;
        if info.done {
            let mut result = EpisodeResult {
                success: false,
                steps: info.steps,
                shortest_path,
                path_length: path,
                final_distance: info.geodesic,
                stopped: info.stopped,
                collisions,
            };
            result.success = episode_success(&result, success);
            return Ok(EpisodeTrace { result, poses, actions, map, last_ego });
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    pub greedy: bool,
    pub min_geo: f64,
    pub max_geo: f64,
    pub success: SuccessConfig,
}

/// Episode `i` draws its world and episode from a generator seeded by
/// `(seed, i)`, so results are independent of evaluation order.
pub fn run_eval(
    net: &PolicyNet,
    store: &ParamStore,
    worlds: &[Arc<World>],
    sensor: &SensorConfig,
    cfg: &EvalConfig,
) -> Result<(Report, Vec<EpisodeResult>)> {
    if worlds.is_empty() {
        return Err(EvalError::Contract("evaluation needs at least one world".into()));
    }
    let mode = if cfg.greedy { ActMode::Greedy } else { ActMode::Sample };
    let mut results = Vec::with_capacity(cfg.episodes);
    for i in 0..cfg.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64 + 1);
        let world = worlds[rng.random_range(0..worlds.len())].clone();
        let ep = sample_episode(&world, &mut rng, cfg.min_geo, cfg.max_geo)?;
        results.push(run_episode(net, store, world, ep, sensor, &cfg.success, mode, &mut rng)?.result);
    }
    let variant = Variant::of(&net.cfg);
    let label = variant.map(|v| v.name()).unwrap_or("custom");
    let map_label = variant.map(|v| v.map_label()).unwrap_or(net.cfg.map_variant.name());
    Ok((Report::from_results(label, map_label, &results)?, results))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const MANIFEST_HEADER: &str = "file,split";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<(String, Split)>,
}

impl Manifest {
    /// The first `round(count · train_fraction)` files train, the rest validate.
    pub fn with_ratio(files: Vec<String>, train_fraction: f64) -> Self {
        let n_train = (files.len() as f64 * train_fraction).round() as usize;
        let entries = files
            .into_iter()
            .enumerate()
            .map(|(i, f)| (f, if i < n_train { Split::Train } else { Split::Val }))
            .collect();
        Self { entries }
    }

    pub fn files(&self, split: Split) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(move |(_, s)| *s == split).map(|(f, _)| f.as_str())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for (f, s) in &self.entries {
            let _ = writeln!(out, "{f},{}", s.name());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => return Err(EvalError::Manifest { line: 1, msg: format!("expected header {MANIFEST_HEADER:?}") }),
        }
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: String| EvalError::Manifest { line: i + 1, msg };
            let (f, s) = line.split_once(',').ok_or_else(|| err("expected file,split".into()))?;
            let split = match s.trim() {
                "train" => Split::Train,
                "val" => Split::Val,
                other => return Err(err(format!("unknown split {other:?}"))),
            };
            entries.push((f.trim().to_string(), split));
        }
        Ok(Self { entries })
    }

    pub fn load(dir: &Path) -> std::io::Result<Option<Self>> {
        let path = dir.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = std::fs::read_to_string(&path)?;
        Self::parse(&text)
            .map(Some)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {e}", path.display())))
    }
}

/// Refuse evaluation worlds that the manifest assigns to training, or that
/// are cell-for-cell identical to a training world unless `allow_identical`
/// (degenerate layouts such as an empty room are all identical).
pub fn check_split(
    eval: &[(String, Arc<World>)],
    manifest: &Manifest,
    train: &[Arc<World>],
    allow_identical: bool,
) -> Result<()> {
    for (name, w) in eval {
        if manifest.files(Split::Train).any(|f| f == name) {
            return Err(EvalError::Split(format!("{name} is a training world")));
        }
        if !allow_identical && train.iter().any(|t| **t == **w) {
            return Err(EvalError::Split(format!("{name} duplicates a training world")));
        }
    }
    Ok(())
}
