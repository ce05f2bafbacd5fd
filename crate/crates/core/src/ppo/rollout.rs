use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{step_reward, PpoError, RewardConfig};
use crate::eval::{episode_success, EpisodeResult, SuccessConfig};
use crate::mapper::{coverage, egocentric_crop, integrate, WorldSemanticMap};
use crate::policy::{ActMode, PolicyNet, PolicyState, StepInputs};
use crate::sim::{sample_episode, Action, Observation, SensorConfig, Simulator, World};
use crate::tensor::ParamStore;

/// How episodes are drawn for one environment.
#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub worlds: Arc<Vec<Arc<World>>>,
    pub sensor: SensorConfig,
    pub min_geo: f64,
    pub max_geo: f64,
    pub success: SuccessConfig,
    pub reward: RewardConfig,
}

/// A finished episode with the pieces of its return.
#[derive(Clone, Debug, PartialEq)]
pub struct CompletedEpisode {
    pub result: EpisodeResult,
    pub ret: f64,
    pub start_geo: f64,
    pub final_coverage: f64,
}

impl CompletedEpisode {
    /// Closed form of the summed per-step rewards.
    pub fn telescoped_return(&self, cfg: &RewardConfig) -> f64 {
        let r = &self.result;
        let mut v = (self.start_geo - r.final_distance) + r.steps as f64 * cfg.time_penalty;
        if r.success {
            v += cfg.success_bonus;
        }
        v += r.collisions as f64 * cfg.collision_penalty;
        if cfg.exploration {
            v += cfg.exploration_weight * self.final_coverage;
        }
        v
    }
}

/// One auto-resetting navigation environment with its own generator and map.
#[derive(Clone, Debug)]
pub struct NavEnv {
    spec: EnvSpec,
    rng: ChaCha8Rng,
    sim: Simulator,
    map: WorldSemanticMap,
    obs: Observation,
    /// Coverage already paid for; 0 at episode start so the initial view is
    /// rewarded on the first step.
    prev_cov: f64,
    pub state: PolicyState,
    /// The next step is the first of an episode.
    pub fresh: bool,
    ret: f64,
    path: f64,
    collisions: usize,
    start_geo: f64,
}

pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub completed: Option<CompletedEpisode>,
}

impl NavEnv {
    pub fn new(spec: EnvSpec, seed: u64, hidden: usize) -> Result<Self, PpoError> {
        if spec.worlds.is_empty() {
            return Err(PpoError::Config("no worlds to train on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (sim, map, obs) = Self::fresh_episode(&spec, &mut rng)?;
        let start_geo = sim.geodesic_to_goal();
        Ok(Self {
            spec,
            rng,
            sim,
            map,
            obs,
            prev_cov: 0.0,
            state: PolicyState::new(hidden),
            fresh: true,
            ret: 0.0,
            path: 0.0,
            collisions: 0,
            start_geo,
        })
    }

    fn fresh_episode(
        spec: &EnvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Simulator, WorldSemanticMap, Observation), PpoError> {
        let world = spec.worlds[rng.random_range(0..spec.worlds.len())].clone();
        let ep = sample_episode(&world, rng, spec.min_geo, spec.max_geo)?;
        let sim = Simulator::new(world.clone(), spec.sensor.clone(), ep)?;
        let mut map = WorldSemanticMap::new(world.width(), world.height(), world.n_classes());
        let obs = sim.observe();
        integrate(&mut map, &sim.pose(), &obs.rays, &spec.sensor);
        Ok((sim, map, obs))
    }

    fn reset(&mut self) -> Result<(), PpoError> {
        let (sim, map, obs) = Self::fresh_episode(&self.spec, &mut self.rng)?;
        self.start_geo = sim.geodesic_to_goal();
        self.sim = sim;
        self.map = map;
        self.obs = obs;
        self.prev_cov = 0.0;
        self.state.reset();
        self.fresh = true;
        self.ret = 0.0;
        self.path = 0.0;
        self.collisions = 0;
        Ok(())
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn map(&self) -> &WorldSemanticMap {
        &self.map
    }

    /// Append this env's current observation as one input row.
    pub fn push_inputs(&self, net: &PolicyNet, inputs: &mut StepInputs) -> Result<(), PpoError> {
        let ego = egocentric_crop(&self.map, &self.sim.pose(), net.cfg.radius);
        net.push_inputs(inputs, &self.obs.image, &ego, &self.sim.goal_vector(), self.state.prev_action)?;
        Ok(())
    }

    /// Apply `action`; on episode end the env resets itself.
    pub fn step(&mut self, action: Action) -> Result<StepOutcome, PpoError> {
        let prev_geo = self.sim.geodesic_to_goal();
        let before = self.sim.pose();
        let (obs, info) = self.sim.step(action)?;
        integrate(&mut self.map, &info.pose, &obs.rays, &self.spec.sensor);
        self.obs = obs;
        self.fresh = false;
        let cov = coverage(&self.map);
        let cov_delta = cov - self.prev_cov;
        self.prev_cov = cov;
        if action == Action::MoveForward && info.pose != before {
            self.path += 1.0;
        }
        self.collisions += info.collided as usize;
        let mut result = EpisodeResult {
            success: false,
            steps: info.steps,
            shortest_path: self.sim.episode().shortest_path,
            path_length: self.path,
            final_distance: info.geodesic,
            stopped: info.stopped,
            collisions: self.collisions,
        };
        result.success = info.done && episode_success(&result, &self.spec.success);
        let reward = step_reward(prev_geo, info.geodesic, result.success, info.collided, cov_delta, &self.spec.reward);
        self.ret += reward;
        let completed = if info.done {
            let c = CompletedEpisode { result, ret: self.ret, start_geo: self.start_geo, final_coverage: cov };
            self.reset()?;
            Some(c)
        } else {
            None
        };
        Ok(StepOutcome { reward, done: info.done, completed })
    }
}

/// One env's slice of a rollout; all per-step vectors have length `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvRollout {
    pub inputs: StepInputs,
    /// Step `t` starts a new episode (hidden state zeroed before it).
    pub resets: Vec<bool>,
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// GRU hidden state at the segment start.
    pub h0: Vec<f64>,
    /// Value of the observation following the last step.
    pub bootstrap: f64,
}

impl EnvRollout {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub envs: Vec<EnvRollout>,
    pub completed: Vec<CompletedEpisode>,
}

impl RolloutBuffer {
    pub fn transitions(&self) -> usize {
        self.envs.iter().map(|e| e.len()).sum()
    }
}

/// Worker count from `MAST_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("MAST_THREADS").ok().and_then(|v| v.parse().ok()).filter(|&n| n >= 1).unwrap_or(1)
}

fn step_all(envs: &mut [NavEnv], actions: &[Action]) -> Result<Vec<StepOutcome>, PpoError> {
    let threads = worker_threads().min(envs.len()).max(1);
    if threads == 1 {
        return envs.iter_mut().zip(actions).map(|(e, &a)| e.step(a)).collect();
    }
    let chunk = envs.len().div_ceil(threads);
    let parts: Vec<Result<Vec<StepOutcome>, PpoError>> = std::thread::scope(|s| {
        let handles: Vec<_> = envs
            .chunks_mut(chunk)
            .zip(actions.chunks(chunk))
            .map(|(es, acts)| s.spawn(move || es.iter_mut().zip(acts).map(|(e, &a)| e.step(a)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("env worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(envs.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Collect `t` steps from every env with sampled actions under frozen
/// parameters. Envs auto-reset on episode end.
pub fn collect_rollouts<R: Rng + ?Sized>(
    net: &PolicyNet,
    store: &ParamStore,
    envs: &mut [NavEnv],
    t: usize,
    rng: &mut R,
) -> Result<RolloutBuffer, PpoError> {
    let mut out: Vec<EnvRollout> = envs
        .iter()
        .map(|e| EnvRollout {
            inputs: StepInputs::default(),
            resets: Vec::with_capacity(t),
            actions: Vec::with_capacity(t),
            log_probs: Vec::with_capacity(t),
            values: Vec::with_capacity(t),
            rewards: Vec::with_capacity(t),
            dones: Vec::with_capacity(t),
            h0: e.state.hidden.clone(),
            bootstrap: 0.0,
        })
        .collect();
    let mut completed = Vec::new();
    for _ in 0..t {
        let mut batch = StepInputs::default();
        for (e, buf) in envs.iter().zip(out.iter_mut()) {
            let mut row = StepInputs::default();
            e.push_inputs(net, &mut row)?;
            batch.extend(&row);
            buf.inputs.extend(&row);
            buf.resets.push(e.fresh);
        }
        let mut states: Vec<PolicyState> = envs.iter().map(|e| e.state.clone()).collect();
        let acts = net.act(store, &batch, &mut states, ActMode::Sample, rng)?;
        for (e, s) in envs.iter_mut().zip(states) {
            e.state = s;
        }
        let actions: Vec<Action> = acts.iter().map(|a| a.action).collect();
        let outcomes = step_all(envs, &actions)?;
        for ((buf, a), o) in out.iter_mut().zip(&acts).zip(outcomes) {
            buf.actions.push(a.action.index());
            buf.log_probs.push(a.log_prob);
            buf.values.push(a.value);
            buf.rewards.push(o.reward);
            buf.dones.push(o.done);
            completed.extend(o.completed);
        }
    }
    let mut batch = StepInputs::default();
    for e in envs.iter() {
        e.push_inputs(net, &mut batch)?;
    }
    let mut states: Vec<PolicyState> = envs.iter().map(|e| e.state.clone()).collect();
    let boot = net.act(store, &batch, &mut states, ActMode::Greedy, rng)?;
    for (buf, b) in out.iter_mut().zip(boot) {
        buf.bootstrap = b.value;
    }
    Ok(RolloutBuffer { envs: out, completed })
}
