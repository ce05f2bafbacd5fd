//! Flat `section.key=value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default, unknown keys are rejected, and `parse(&cfg.to_text())` gives
//! back `cfg` exactly.

use std::sync::Arc;

use thiserror::Error;

use crate::eval::{Split, SuccessConfig};
use crate::policy::{PolicyConfig, Variant};
use crate::ppo::{RewardConfig, TrainConfig, TrainSetup};
use crate::sim::{SensorConfig, World, WorldParams};
use crate::transformer::Pooling;
use crate::worldset::{generate_pool, load_manifest, load_split, WorldSetError};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub variant: Variant,
    pub world: WorldParams,
    /// Directory written by `make-worlds`; empty means generate pools.
    pub world_dir: String,
    pub train_pool: usize,
    pub eval_pool: usize,
    pub min_geo: f64,
    pub max_geo: f64,
    pub goal_radius: f64,
    pub sensor: SensorConfig,
    pub hidden: usize,
    pub action_embedding: usize,
    pub radius: usize,
    pub map_dim: usize,
    pub map_heads: usize,
    pub map_layers: usize,
    pub pooling: Pooling,
    pub train: TrainConfig,
    pub reward: RewardConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PolicyConfig::default();
        Self {
            seed: 0,
            variant: Variant::Mast,
            world: WorldParams::default(),
            world_dir: String::new(),
            train_pool: 64,
            eval_pool: 16,
            min_geo: 2.0,
            max_geo: 20.0,
            goal_radius: SuccessConfig::default().goal_radius,
            sensor: SensorConfig::default(),
            hidden: p.hidden,
            action_embedding: p.action_embedding,
            radius: p.radius,
            map_dim: p.map_dim,
            map_heads: p.map_heads,
            map_layers: p.map_layers,
            pooling: p.pooling,
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
        }
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<(), String>;

macro_rules! fields {
    ($($key:literal => $($field:ident).+),* $(,)?) => {
        &[$((
            $key,
            (|c: &RunConfig| c.$($field).+.to_string()) as Getter,
            (|c: &mut RunConfig, v: &str| {
                c.$($field).+ = v.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            }) as Setter,
        )),*]
    };
}

const FIELDS: &[(&str, Getter, Setter)] = fields! {
    "run.seed" => seed,
    "run.variant" => variant,
    "world.width" => world.width,
    "world.height" => world.height,
    "world.rooms" => world.n_rooms,
    "world.classes" => world.n_classes,
    "world.furniture" => world.furniture_density,
    "world.dir" => world_dir,
    "world.train_pool" => train_pool,
    "world.eval_pool" => eval_pool,
    "episode.min_geo" => min_geo,
    "episode.max_geo" => max_geo,
    "episode.goal_radius" => goal_radius,
    "sensor.rays" => sensor.n_rays,
    "sensor.fov" => sensor.fov_degrees,
    "sensor.range" => sensor.max_range,
    "sensor.height" => sensor.image_height,
    "policy.hidden" => hidden,
    "policy.action_embedding" => action_embedding,
    "map.r" => radius,
    "map.dim" => map_dim,
    "map.heads" => map_heads,
    "map.layers" => map_layers,
    "map.pooling" => pooling,
    "ppo.rollout" => train.rollout,
    "ppo.envs" => train.n_envs,
    "ppo.lr" => train.lr,
    "ppo.lr_anneal" => train.lr_anneal,
    "ppo.gamma" => train.gamma,
    "ppo.gae_lambda" => train.gae_lambda,
    "ppo.clip" => train.clip,
    "ppo.epochs" => train.epochs,
    "ppo.minibatches" => train.minibatches,
    "ppo.value_coef" => train.value_coef,
    "ppo.entropy_coef" => train.entropy_coef,
    "ppo.max_grad_norm" => train.max_grad_norm,
    "ppo.steps" => train.total_steps,
    "ppo.bptt" => train.bptt,
    "ppo.eval_episodes" => train.eval_episodes,
    "ppo.eval_greedy" => train.eval_greedy,
    "ppo.log_every" => train.log_every,
    "ppo.checkpoint_every" => train.checkpoint_every,
    "reward.success" => reward.success_bonus,
    "reward.time" => reward.time_penalty,
    "reward.collision" => reward.collision_penalty,
    "reward.exploration_weight" => reward.exploration_weight,
};

impl RunConfig {
    pub fn keys() -> impl Iterator<Item = &'static str> {
        FIELDS.iter().map(|f| f.0)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        FIELDS.iter().find(|f| f.0 == key).map(|f| (f.1)(self))
    }

    /// Set one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let f = FIELDS.iter().find(|f| f.0 == key).ok_or_else(|| format!("unknown key {key:?}"))?;
        (f.2)(self, value).map_err(|e| format!("{key}={value}: {e}"))
    }

    /// Apply `key=value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| ConfigError::Line { line: i + 1, msg };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            self.set(k.trim(), v.trim()).map_err(err)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Every key, in a fixed order.
    pub fn to_text(&self) -> String {
        FIELDS.iter().map(|f| format!("{}={}\n", f.0, (f.1)(self))).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.train.validate().map_err(ConfigError::Invalid)?;
        self.reward.validate().map_err(ConfigError::Invalid)?;
        if self.min_geo > self.max_geo {
            return bad(format!("episode.min_geo {} > episode.max_geo {}", self.min_geo, self.max_geo));
        }
        if self.world.n_classes < 2 {
            return bad("world.classes must be at least 2".into());
        }
        if self.sensor.image_height < 4 || self.sensor.n_rays < 1 {
            return bad("sensor.height must be >= 4 and sensor.rays >= 1".into());
        }
        if self.train_pool == 0 && self.world_dir.is_empty() {
            return bad("world.train_pool must be positive without world.dir".into());
        }
        Ok(())
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            hidden: self.hidden,
            action_embedding: self.action_embedding,
            image_height: self.sensor.image_height,
            image_width: self.sensor.n_rays,
            radius: self.radius,
            n_classes: self.world.n_classes,
            map_dim: self.map_dim,
            map_heads: self.map_heads,
            map_layers: self.map_layers,
            pooling: self.pooling,
            seed: self.seed,
            ..PolicyConfig::default()
        }
        .with_variant(self.variant)
    }

    pub fn reward_config(&self) -> RewardConfig {
        RewardConfig { exploration: self.variant.exploration(), ..self.reward.clone() }
    }

    pub fn success_config(&self) -> SuccessConfig {
        SuccessConfig { goal_radius: self.goal_radius, ..SuccessConfig::default() }
    }

    pub fn train_setup(&self, train_worlds: Vec<Arc<World>>, eval_worlds: Vec<Arc<World>>) -> TrainSetup {
        TrainSetup {
            train: self.train.clone(),
            reward: self.reward_config(),
            policy: self.policy_config(),
            sensor: self.sensor.clone(),
            min_geo: self.min_geo,
            max_geo: self.max_geo,
            success: self.success_config(),
            train_worlds,
            eval_worlds,
            eval_seed: self.seed ^ 0x5eed_e7a1,
            verbose: false,
        }
    }

    /// Training and held-out worlds: the manifest splits of `world.dir`, or
    /// two disjoint generator streams seeded by `run.seed`.
    pub fn resolve_worlds(&self) -> Result<(Vec<Arc<World>>, Vec<Arc<World>>), WorldSetError> {
        if self.world_dir.is_empty() {
            let train = generate_pool(&self.world, self.seed, 1, self.train_pool)?;
            let eval = generate_pool(&self.world, self.seed, 2, self.eval_pool)?;
            return Ok((train, eval));
        }
        let dir = std::path::Path::new(&self.world_dir);
        let m = load_manifest(dir)?;
        let strip = |v: Vec<(String, Arc<World>)>| v.into_iter().map(|(_, w)| w).collect();
        Ok((strip(load_split(dir, &m, Split::Train)?), strip(load_split(dir, &m, Split::Val)?)))
    }
}
