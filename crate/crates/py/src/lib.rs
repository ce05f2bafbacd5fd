//! Python bindings: worlds, the simulator, policies, training, evaluation
//! and the episode metrics.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mast::config::RunConfig;
use mast::eval::{self, EpisodeResult, EvalConfig, Report, SuccessConfig};
use mast::policy::{load_policy, save_checkpoint, ActMode, PolicyConfig, PolicyNet, Variant};
use mast::ppo::{train as ppo_train, PpoError};
use mast::sim::{
    generate_world, geodesic_distance, is_connected, load_world, sample_episode, save_world, Action, Cell,
    SensorConfig, Simulator, StepInfo, World, WorldParams,
};
use mast::tensor::ParamStore;
use mast::transformer::build_position_indices;
use mast::worldset;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_action(a: &Bound<'_, PyAny>) -> PyResult<Action> {
    if let Ok(i) = a.extract::<usize>() {
        return Action::from_index(i).ok_or_else(|| value_err(format!("action index {i} out of range 0..4")));
    }
    let s: String = a.extract()?;
    match s.to_ascii_lowercase().as_str() {
        "forward" | "move_forward" => Ok(Action::MoveForward),
        "left" | "turn_left" => Ok(Action::TurnLeft),
        "right" | "turn_right" => Ok(Action::TurnRight),
        "stop" => Ok(Action::Stop),
        other => Err(value_err(format!("unknown action {other:?}; use forward, left, right or stop"))),
    }
}

fn sensor_for(cfg: &PolicyConfig) -> SensorConfig {
    SensorConfig { n_rays: cfg.image_width, image_height: cfg.image_height, ..SensorConfig::default() }
}

/// Grid world of free cells and class-labelled obstacles.
#[pyclass(name = "World", module = "mast_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyWorld {
    inner: Arc<World>,
}

#[pymethods]
impl PyWorld {
    #[staticmethod]
    #[pyo3(signature = (seed=0, width=15, height=15, rooms=3, classes=8, furniture=0.08))]
    fn generate(seed: u64, width: usize, height: usize, rooms: usize, classes: usize, furniture: f64) -> PyResult<Self> {
        let p = WorldParams { width, height, n_rooms: rooms, n_classes: classes, furniture_density: furniture };
        let w = generate_world(&p, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(value_err)?;
        Ok(Self { inner: Arc::new(w) })
    }

    /// Parse SEMWORLD text.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(load_world(text).map_err(value_err)?) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let w = worldset::load_world_file(&path).map_err(io_err)?;
        Ok(Self { inner: Arc::new(w) })
    }

    fn to_text(&self) -> String {
        save_world(&self.inner)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::write(&path, save_world(&self.inner)).map_err(io_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    /// -1 for a free cell, otherwise the obstacle class.
    fn cell(&self, x: usize, y: usize) -> PyResult<i64> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(value_err(format!("({x}, {y}) is outside the world")));
        }
        Ok(match self.inner.cell(x, y) {
            Cell::Free => -1,
            Cell::Obstacle(k) => k as i64,
        })
    }

    fn free_cells(&self) -> Vec<(usize, usize)> {
        self.inner.free_cells().collect()
    }

    fn is_connected(&self) -> bool {
        is_connected(&self.inner)
    }

    /// Shortest 4-connected path length between two free cells.
    fn geodesic(&self, a: (usize, usize), b: (usize, usize)) -> PyResult<f64> {
        geodesic_distance(&self.inner, a, b).map_err(value_err)
    }

    fn __eq__(&self, other: &PyWorld) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("World({}x{}, {} classes)", self.inner.width(), self.inner.height(), self.inner.n_classes())
    }
}

fn info_dict<'py>(py: Python<'py>, info: &StepInfo) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("collided", info.collided)?;
    d.set_item("done", info.done)?;
    d.set_item("stopped", info.stopped)?;
    d.set_item("steps", info.steps)?;
    d.set_item("geodesic", info.geodesic)?;
    d.set_item("pose", (info.pose.x, info.pose.y, info.pose.heading.index()))?;
    Ok(d)
}

/// One navigation episode with a seeded start and goal.
#[pyclass(name = "Simulator", module = "mast_py")]
pub struct PySimulator {
    sim: Simulator,
}

#[pymethods]
impl PySimulator {
    #[new]
    #[pyo3(signature = (world, seed=0, min_geo=2.0, max_geo=20.0, rays=36, image_height=36))]
    fn new(world: &PyWorld, seed: u64, min_geo: f64, max_geo: f64, rays: usize, image_height: usize) -> PyResult<Self> {
        let ep = sample_episode(&world.inner, &mut ChaCha8Rng::seed_from_u64(seed), min_geo, max_geo).map_err(value_err)?;
        let sensor = SensorConfig { n_rays: rays, image_height, ..SensorConfig::default() };
        Ok(Self { sim: Simulator::new(world.inner.clone(), sensor, ep).map_err(value_err)? })
    }

    /// `(x, y, heading)` with heading in quarter turns clockwise from north.
    fn pose(&self) -> (usize, usize, usize) {
        let p = self.sim.pose();
        (p.x, p.y, p.heading.index())
    }

    fn goal(&self) -> (usize, usize) {
        self.sim.episode().goal
    }

    fn shortest_path(&self) -> f64 {
        self.sim.episode().shortest_path
    }

    fn geodesic_to_goal(&self) -> f64 {
        self.sim.geodesic_to_goal()
    }

    /// `(distance, bearing)` to the goal; bearing in radians relative to the heading.
    fn goal_vector(&self) -> (f64, f64) {
        let g = self.sim.goal_vector();
        (g.distance, g.bearing)
    }

    /// `(dims, data)` of the current `[H, W, 4]` RGB-D image.
    fn image(&self) -> (Vec<usize>, Vec<f64>) {
        let img = self.sim.observe().image;
        (img.dims().to_vec(), img.data().to_vec())
    }

    /// Apply an action (index 0-3 or forward/left/right/stop).
    fn step<'py>(&mut self, py: Python<'py>, action: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyDict>> {
        let (_, info) = self.sim.step(parse_action(action)?).map_err(value_err)?;
        info_dict(py, &info)
    }
}

fn report_dict<'py>(py: Python<'py>, r: &Report) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("method", &r.label)?;
    d.set_item("map", &r.map_label)?;
    d.set_item("episodes", r.episodes)?;
    d.set_item("success", r.success_rate)?;
    d.set_item("spl", r.spl)?;
    d.set_item("mean_steps", r.mean_steps)?;
    Ok(d)
}

fn result_dict<'py>(py: Python<'py>, r: &EpisodeResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("success", r.success)?;
    d.set_item("steps", r.steps)?;
    d.set_item("shortest_path", r.shortest_path)?;
    d.set_item("path_length", r.path_length)?;
    d.set_item("final_distance", r.final_distance)?;
    d.set_item("stopped", r.stopped)?;
    d.set_item("collisions", r.collisions)?;
    Ok(d)
}

/// Recurrent actor-critic for one ablation variant.
#[pyclass(name = "Policy", module = "mast_py")]
pub struct PyPolicy {
    net: PolicyNet,
    store: ParamStore,
}

#[pymethods]
impl PyPolicy {
    #[new]
    #[pyo3(signature = (
        variant="MaAST", seed=0, hidden=64, action_embedding=16, image_size=36, radius=3, classes=8, map_dim=16,
        heads=2, layers=2
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        variant: &str,
        seed: u64,
        hidden: usize,
        action_embedding: usize,
        image_size: usize,
        radius: usize,
        classes: usize,
        map_dim: usize,
        heads: usize,
        layers: usize,
    ) -> PyResult<Self> {
        let v: Variant = variant.parse().map_err(value_err)?;
        let cfg = PolicyConfig {
            hidden,
            action_embedding,
            image_height: image_size,
            image_width: image_size,
            radius,
            n_classes: classes,
            map_dim,
            map_heads: heads,
            map_layers: layers,
            seed,
            ..PolicyConfig::default()
        }
        .with_variant(v);
        let (net, store) = PolicyNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(value_err)?;
        Ok(Self { net, store })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (net, store) = load_policy(&path).map_err(io_err)?;
        Ok(Self { net, store })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.net.cfg, &self.store).map_err(io_err)
    }

    #[getter]
    fn variant(&self) -> String {
        Variant::of(&self.net.cfg).map(|v| v.name().to_string()).unwrap_or_else(|| "custom".into())
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.store.ids().map(|id| self.store.get(id).len()).sum()
    }

    /// Run one episode in `world` and return its result and the visited poses.
    #[pyo3(signature = (world, episode_seed=0, greedy=true, min_geo=2.0, max_geo=20.0))]
    fn run_episode<'py>(
        &self,
        py: Python<'py>,
        world: &PyWorld,
        episode_seed: u64,
        greedy: bool,
        min_geo: f64,
        max_geo: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
        let ep = sample_episode(&world.inner, &mut rng, min_geo, max_geo).map_err(value_err)?;
        let mode = if greedy { ActMode::Greedy } else { ActMode::Sample };
        let sensor = sensor_for(&self.net.cfg);
        let trace = eval::run_episode(
            &self.net,
            &self.store,
            world.inner.clone(),
            ep,
            &sensor,
            &SuccessConfig::default(),
            mode,
            &mut rng,
        )
        .map_err(value_err)?;
        let d = result_dict(py, &trace.result)?;
        let poses: Vec<(usize, usize, usize)> = trace.poses.iter().map(|p| (p.x, p.y, p.heading.index())).collect();
        d.set_item("poses", poses)?;
        d.set_item("actions", trace.actions.iter().map(|a| a.index()).collect::<Vec<_>>())?;
        Ok(d)
    }

    /// Aggregate SPL and success (percent) over seeded episodes.
    #[pyo3(signature = (worlds, episodes=100, seed=0, greedy=false, min_geo=2.0, max_geo=20.0))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        worlds: Vec<PyRef<'py, PyWorld>>,
        episodes: usize,
        seed: u64,
        greedy: bool,
        min_geo: f64,
        max_geo: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let ws: Vec<Arc<World>> = worlds.iter().map(|w| w.inner.clone()).collect();
        let cfg = EvalConfig { episodes, seed, greedy, min_geo, max_geo, success: SuccessConfig::default() };
        let sensor = sensor_for(&self.net.cfg);
        let (rep, _) = py
            .detach(|| eval::run_eval(&self.net, &self.store, &ws, &sensor, &cfg))
            .map_err(value_err)?;
        report_dict(py, &rep)
    }

    fn __repr__(&self) -> String {
        format!("Policy({}, {} parameters)", self.variant(), self.n_params())
    }
}

/// Variant names accepted by `Policy` and the `run.variant` config key.
#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

/// Mean of `1{success} * s / max(d, s)` over `(success, s, d)` triples.
#[pyfunction]
fn spl(results: Vec<(bool, f64, f64)>) -> PyResult<f64> {
    let rs: Vec<EpisodeResult> = results
        .into_iter()
        .map(|(success, s, d)| EpisodeResult {
            success,
            steps: 0,
            shortest_path: s,
            path_length: d,
            final_distance: 0.0,
            stopped: success,
            collisions: 0,
        })
        .collect();
    eval::spl(&rs).map_err(value_err)
}

/// Stopped, fewer than `max_steps` steps, and strictly inside the goal radius.
#[pyfunction]
#[pyo3(signature = (stopped, steps, final_distance, goal_radius=1.0, max_steps=500))]
fn episode_success(stopped: bool, steps: usize, final_distance: f64, goal_radius: f64, max_steps: usize) -> bool {
    let r = EpisodeResult {
        success: false,
        steps,
        shortest_path: 1.0,
        path_length: 0.0,
        final_distance,
        stopped,
        collisions: 0,
    };
    eval::episode_success(&r, &SuccessConfig { goal_radius, max_steps })
}

/// Row-major position bucket of each cell of the `(2r+1)^2` window; 0 is the centre.
#[pyfunction]
fn position_indices(r: usize) -> Vec<usize> {
    build_position_indices(r).indices
}

/// Every configuration key with its default value, as config-file text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_text()
}

/// Generate `count` worlds plus a train/val manifest into `out`.
#[pyfunction]
#[pyo3(signature = (out, seed=0, count=10, train_fraction=0.8, config=""))]
fn make_worlds(out: PathBuf, seed: u64, count: usize, train_fraction: f64, config: &str) -> PyResult<Vec<String>> {
    let cfg = RunConfig::parse(config).map_err(value_err)?;
    let m = worldset::make_worlds(&out, &cfg.world, seed, count, train_fraction).map_err(io_err)?;
    Ok(m.entries.into_iter().map(|(f, _)| f).collect())
}

/// Train from config text into `out`; returns the final checkpoint path and last mini-eval.
#[pyfunction]
#[pyo3(signature = (config, out, steps=None))]
fn train<'py>(py: Python<'py>, config: &str, out: PathBuf, steps: Option<usize>) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = RunConfig::parse(config).map_err(value_err)?;
    if let Some(s) = steps {
        cfg.train.total_steps = s;
    }
    cfg.validate().map_err(value_err)?;
    std::fs::create_dir_all(&out).map_err(io_err)?;
    std::fs::write(out.join("config.txt"), cfg.to_text()).map_err(io_err)?;
    let outcome = py
        .detach(|| -> Result<_, String> {
            let (tw, ew) = cfg.resolve_worlds().map_err(|e| e.to_string())?;
            let setup = cfg.train_setup(tw, ew);
            ppo_train(&setup, &mut ChaCha8Rng::seed_from_u64(cfg.seed), &out).map_err(|e| match e {
                PpoError::Config(m) => format!("config: {m}"),
                other => other.to_string(),
            })
        })
        .map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("checkpoint", outcome.final_checkpoint)?;
    d.set_item("steps", outcome.steps)?;
    match &outcome.last_eval {
        Some(r) => d.set_item("last_eval", report_dict(py, r)?)?,
        None => d.set_item("last_eval", py.None())?,
    }
    Ok(d)
}

#[pymodule]
pub mod mast_py {
    #[pymodule_export]
    use super::{
        default_config, episode_success, make_worlds, position_indices, spl, train, variants, PyPolicy, PySimulator,
        PyWorld,
    };
}
