use rand::seq::SliceRandom;
use rand::Rng;

use super::{clip_grad_norm, Adam, EnvRollout, PpoError, RolloutBuffer};
use crate::policy::PolicyNet;
use crate::tensor::{Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Steps per env per rollout `T`.
    pub rollout: usize,
    pub n_envs: usize,
    pub lr: f64,
    /// Decay the learning rate linearly to 0 over `total_steps`.
    pub lr_anneal: bool,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    /// Whole env sequences per minibatch: `n_envs / minibatches`.
    pub minibatches: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    /// Truncated backprop window inside a rollout; 0 means the whole rollout.
    pub bptt: usize,
    /// Mini-eval episodes per metrics row; 0 disables the mini-eval.
    pub eval_episodes: usize,
    /// Mini-eval with argmax actions instead of sampled ones.
    pub eval_greedy: bool,
    /// Updates between metrics rows.
    pub log_every: usize,
    /// Updates between checkpoints; the final one is always written.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rollout: 256,
            n_envs: 8,
            lr: 1e-4,
            lr_anneal: false,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatches: 4,
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            total_steps: 100_000,
            bptt: 0,
            eval_episodes: 10,
            eval_greedy: false,
            log_every: 1,
            checkpoint_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.rollout == 0 || self.n_envs == 0 || self.epochs == 0 || self.minibatches == 0 {
            return Err("rollout, n_envs, epochs and minibatches must be positive".into());
        }
        if self.n_envs % self.minibatches != 0 {
            return Err(format!(
                "n_envs ({}) must be divisible by minibatches ({}): minibatches hold whole env sequences",
                self.n_envs, self.minibatches
            ));
        }
        if !(self.clip >= 0.0) || !(self.lr > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err("clip must be >= 0; lr and max_grad_norm must be > 0".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err("gamma and gae_lambda must lie in [0, 1]".into());
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err("log_every and checkpoint_every must be positive".into());
        }
        Ok(())
    }

    pub fn steps_per_update(&self) -> usize {
        self.rollout * self.n_envs
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    /// Pre-clip gradient norm of the last minibatch.
    pub grad_norm: f64,
    /// Largest `|ρ − 1|` seen in the first minibatch of the first epoch.
    pub first_ratio_dev: f64,
}

/// Surrogate terms for a contiguous block of one env's steps.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossParts {
    /// `−Σ min(ρA, clip(ρ)A) / n_total`.
    pub policy: f64,
    /// `Σ (V − R)² / n_total`, unweighted.
    pub value: f64,
    /// `Σ entropy / n_total`.
    pub entropy: f64,
    pub clipped: usize,
    pub ratios: Vec<f64>,
}

/// Build the weighted loss for steps `range` of `roll`, starting from
/// hidden state `h0`, and return it with the graph. Every sum is divided by
/// `n_total` so blocks of a minibatch add up to its mean.
#[allow(clippy::too_many_arguments)]
pub fn block_loss(
    net: &PolicyNet,
    store: &ParamStore,
    roll: &EnvRollout,
    range: std::ops::Range<usize>,
    h0: &[f64],
    adv: &[f64],
    returns: &[f64],
    cfg: &TrainConfig,
    n_total: usize,
) -> Result<(Graph, crate::tensor::Var, Vec<f64>, LossParts), PpoError> {
    let n = range.len();
    let inv = 1.0 / n_total as f64;
    let mut g = Graph::new();
    let inputs = roll.inputs.rows(range.clone());
    let h0 = Tensor::new(&[1, net.cfg.hidden], h0.to_vec())?;
    let out = net.unroll(&mut g, store, &inputs, &h0, &roll.resets[range.clone()])?;
    let nll = g.cross_entropy(out.logits, roll.actions[range.clone()].to_vec())?;
    let old = g.constant(Tensor::vector(&roll.log_probs[range.clone()]));
    let logp = g.scale(nll, -1.0)?;
    let diff = g.sub(logp, old)?;
    let ratio = g.exp(diff)?;
    let a = g.constant(Tensor::vector(&adv[range.clone()]));
    let s1 = g.mul(ratio, a)?;
    let rc = g.clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip)?;
    let s2 = g.mul(rc, a)?;
    let m = g.minimum(s1, s2)?;
    let pl = g.sum_all(m)?;
    let pl = g.scale(pl, -inv)?;

    let v = g.reshape(out.values, &[n])?;
    let r = g.constant(Tensor::vector(&returns[range]));
    let d = g.sub(v, r)?;
    let d2 = g.mul(d, d)?;
    let vs = g.sum_all(d2)?;

    let p = g.softmax(out.logits, 1)?;
    let lp = g.log_softmax(out.logits, 1)?;
    let plp = g.mul(p, lp)?;
    let neg_ent = g.sum_all(plp)?;

    let vl = g.scale(vs, cfg.value_coef * inv)?;
    let el = g.scale(neg_ent, cfg.entropy_coef * inv)?;
    let loss = g.add(pl, vl)?;
    let loss = g.add(loss, el)?;

    let ratios = g.value(ratio).data().to_vec();
    let clipped = ratios.iter().filter(|q| (**q - 1.0).abs() > cfg.clip).count();
    let parts = LossParts {
        policy: g.value(pl).item(),
        value: g.value(vs).item() * inv,
        entropy: -g.value(neg_ent).item() * inv,
        clipped,
        ratios,
    };
    let last_h = g.value(out.last_hidden).data().to_vec();
    Ok((g, loss, last_h, parts))
}

/// Per-env advantages and returns, already normalised.
pub struct Targets {
    pub adv: Vec<Vec<f64>>,
    pub returns: Vec<Vec<f64>>,
}

pub fn compute_targets(buf: &RolloutBuffer, cfg: &TrainConfig) -> Targets {
    let mut adv = Vec::with_capacity(buf.envs.len());
    let mut returns = Vec::with_capacity(buf.envs.len());
    for e in &buf.envs {
        let (a, r) = super::compute_gae(&e.rewards, &e.values, &e.dones, e.bootstrap, cfg.gamma, cfg.gae_lambda);
        adv.push(a);
        returns.push(r);
    }
    let mut flat: Vec<f64> = adv.iter().flatten().copied().collect();
    super::normalize_advantages(&mut flat);
    let mut it = flat.into_iter();
    for a in adv.iter_mut() {
        a.iter_mut().for_each(|x| *x = it.next().expect("same length"));
    }
    Targets { adv, returns }
}

/// Clipped-surrogate epochs over whole-env minibatches. Gradients of each
/// env (and each truncation window) are accumulated before one optimiser
/// step per minibatch.
pub fn ppo_update<R: Rng + ?Sized>(
    net: &PolicyNet,
    store: &mut ParamStore,
    opt: &mut Adam,
    buf: &RolloutBuffer,
    targets: &Targets,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<UpdateStats, PpoError> {
    let n_envs = buf.envs.len();
    let per_mb = n_envs / cfg.minibatches;
    let mut stats = UpdateStats::default();
    let mut count = 0usize;
    let mut order: Vec<usize> = (0..n_envs).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for (mb, envs) in order.chunks(per_mb).enumerate() {
            let n_total: usize = envs.iter().map(|&e| buf.envs[e].len()).sum();
            let mut grads: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).dims())).collect();
            let mut parts = LossParts::default();
            for &e in envs {
                let roll = &buf.envs[e];
                let t = roll.len();
                let window = if cfg.bptt == 0 { t } else { cfg.bptt };
                let mut h = roll.h0.clone();
                let mut start = 0;
                while start < t {
                    let end = (start + window).min(t);
                    let (g, loss, last_h, p) = block_loss(
                        net,
                        store,
                        roll,
                        start..end,
                        &h,
                        &targets.adv[e],
                        &targets.returns[e],
                        cfg,
                        n_total,
                    )?;
                    let lv = g.value(loss).item();
                    if !lv.is_finite() {
                        return Err(PpoError::NonFinite(format!(
                            "loss {lv} at epoch {epoch} minibatch {mb}; last stats {stats:?}"
                        )));
                    }
                    let gr = g.backward(loss)?.for_params(store);
                    for (acc, d) in grads.iter_mut().zip(&gr) {
                        acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
                    }
                    parts.policy += p.policy;
                    parts.value += p.value;
                    parts.entropy += p.entropy;
                    parts.clipped += p.clipped;
                    parts.ratios.extend(p.ratios);
                    h = last_h;
                    start = end;
                }
            }
            let norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
            if !norm.is_finite() {
                return Err(PpoError::NonFinite(format!(
                    "gradient norm {norm} at epoch {epoch} minibatch {mb}; last stats {stats:?}"
                )));
            }
            if epoch == 0 && mb == 0 {
                stats.first_ratio_dev = parts.ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
            }
            opt.step(store, &grads);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.clip_frac += parts.clipped as f64 / n_total as f64;
            stats.grad_norm = norm;
            count += 1;
        }
    }
    let c = count as f64;
    stats.policy_loss /= c;
    stats.value_loss /= c;
    stats.entropy /= c;
    stats.clip_frac /= c;
    Ok(stats)
}
