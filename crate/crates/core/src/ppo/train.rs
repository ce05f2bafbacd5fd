use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{collect_rollouts, compute_targets, ppo_update, Adam, EnvSpec, NavEnv, PpoError, RewardConfig, TrainConfig};
use crate::eval::{check_compatible, run_eval, spl_term, EvalConfig, Report, SuccessConfig};
use crate::policy::{save_checkpoint, PolicyConfig, PolicyNet};
use crate::sim::{SensorConfig, World};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "steps,episodes,mean_return,success,spl,policy_loss,value_loss,entropy,clip_frac";

/// Everything a training run needs besides its generator and output dir.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub policy: PolicyConfig,
    pub sensor: SensorConfig,
    pub min_geo: f64,
    pub max_geo: f64,
    pub success: SuccessConfig,
    pub train_worlds: Vec<Arc<World>>,
    /// Held-out worlds for the periodic mini-eval.
    pub eval_worlds: Vec<Arc<World>>,
    pub eval_seed: u64,
    /// Echo metrics rows to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub steps: usize,
    pub episodes: usize,
    pub mean_return: f64,
    /// Fraction in `[0, 1]`.
    pub success: f64,
    /// Fraction in `[0, success]`.
    pub spl: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
}

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.steps,
            self.episodes,
            self.mean_return,
            self.success,
            self.spl,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.clip_frac
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: usize,
    pub rows: Vec<MetricsRow>,
    pub last_eval: Option<Report>,
}

pub fn checkpoint_name(steps: usize) -> String {
    format!("ckpt_{steps}.mast")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PpoError + '_ {
    move |source| PpoError::Io { path: path.to_path_buf(), source }
}

/// Linear decay from `lr` at step 0 to 0 at `total`, for an update that
/// starts after `done` steps.
pub fn annealed_lr(lr: f64, done: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * (1.0 - done as f64 / total as f64).max(0.0)
}

/// Alternate rollout collection and updates until `total_steps` transitions
/// have been gathered. Writes `ckpt_<steps>.mast` files and a metrics CSV.
pub fn train<R: Rng + ?Sized>(setup: &TrainSetup, rng: &mut R, out_dir: &Path) -> Result<TrainOutcome, PpoError> {
    let cfg = &setup.train;
    cfg.validate().map_err(PpoError::Config)?;
    setup.reward.validate().map_err(PpoError::Config)?;
    if setup.train_worlds.is_empty() {
        return Err(PpoError::Config("no training worlds".into()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (net, mut store) = PolicyNet::new(setup.policy.clone(), &mut ChaCha8Rng::seed_from_u64(setup.policy.seed))?;
    for w in setup.train_worlds.iter().chain(&setup.eval_worlds) {
        check_compatible(&net, &setup.sensor, w)?;
    }
    let save = |steps: usize, store: &_| -> Result<PathBuf, PpoError> {
        let p = out_dir.join(checkpoint_name(steps));
        save_checkpoint(&p, &setup.policy, store)?;
        Ok(p)
    };
    let mut last_ckpt = save(0, &store)?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let mut metrics = fs::File::create(&metrics_path).map_err(io_err(&metrics_path))?;
    writeln!(metrics, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;

    let spec = EnvSpec {
        worlds: Arc::new(setup.train_worlds.clone()),
        sensor: setup.sensor.clone(),
        min_geo: setup.min_geo,
        max_geo: setup.max_geo,
        success: setup.success,
        reward: setup.reward.clone(),
    };
    let mut envs = Vec::with_capacity(cfg.n_envs);
    for _ in 0..cfg.n_envs {
        envs.push(NavEnv::new(spec.clone(), rng.random(), net.cfg.hidden)?);
    }
    let mut opt = Adam::new(&store, cfg.lr);
    let eval_cfg = EvalConfig {
        episodes: cfg.eval_episodes,
        seed: setup.eval_seed,
        greedy: cfg.eval_greedy,
        min_geo: setup.min_geo,
        max_geo: setup.max_geo,
        success: setup.success,
    };
    let eval_worlds = if setup.eval_worlds.is_empty() { &setup.train_worlds } else { &setup.eval_worlds };

    let mut steps = 0;
    let mut updates = 0;
    let mut episodes = 0;
    let mut window = Vec::new();
    let mut rows = Vec::new();
    let mut last_eval = None;
    while steps < cfg.total_steps {
        let buf = collect_rollouts(&net, &store, &mut envs, cfg.rollout, rng)?;
        steps += buf.transitions();
        episodes += buf.completed.len();
        window.extend(buf.completed.iter().cloned());
        let targets = compute_targets(&buf, cfg);
        if cfg.lr_anneal {
            opt.lr = annealed_lr(cfg.lr, steps - buf.transitions(), cfg.total_steps);
        }
        let stats = ppo_update(&net, &mut store, &mut opt, &buf, &targets, cfg, rng)?;
        updates += 1;
        let last = steps >= cfg.total_steps;
        if updates % cfg.log_every == 0 || last {
            let (success, spl) = if cfg.eval_episodes > 0 {
                let (report, _) = run_eval(&net, &store, eval_worlds, &setup.sensor, &eval_cfg)?;
                let s = (report.success_rate / 100.0, report.spl / 100.0);
                last_eval = Some(report);
                s
            } else if window.is_empty() {
                (0.0, 0.0)
            } else {
                let n = window.len() as f64;
                let succ = window.iter().filter(|c| c.result.success).count() as f64 / n;
                let mut spl = 0.0;
                for c in &window {
                    spl += spl_term(&c.result)?;
                }
                (succ, spl / n)
            };
            let mean_return = if window.is_empty() {
                f64::NAN
            } else {
                window.iter().map(|c| c.ret).sum::<f64>() / window.len() as f64
            };
            let row = MetricsRow {
                steps,
                episodes,
                mean_return,
                success,
                spl,
                policy_loss: stats.policy_loss,
                value_loss: stats.value_loss,
                entropy: stats.entropy,
                clip_frac: stats.clip_frac,
            };
            writeln!(metrics, "{}", row.csv()).map_err(io_err(&metrics_path))?;
            if setup.verbose {
                eprintln!("{}", row.csv());
            }
            rows.push(row);
            window.clear();
        }
        if updates % cfg.checkpoint_every == 0 || last {
            last_ckpt = save(steps, &store)?;
        }
    }
    metrics.flush().map_err(io_err(&metrics_path))?;
    Ok(TrainOutcome { final_checkpoint: last_ckpt, steps, rows, last_eval })
}
