/// Per-step reward shaping.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardConfig {
    /// Paid once when the episode ends in success.
    pub success_bonus: f64,
    /// Added every step; `≤ 0`.
    pub time_penalty: f64,
    /// Added on steps that bump an obstacle; `≤ 0`.
    pub collision_penalty: f64,
    /// Weight of the coverage increase; `≥ 0`.
    pub exploration_weight: f64,
    pub exploration: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            success_bonus: 10.0,
            time_penalty: -0.01,
            collision_penalty: -0.01,
            exploration_weight: 0.25,
            exploration: false,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.time_penalty <= 0.0) {
            return Err(format!("time penalty must be <= 0, got {}", self.time_penalty));
        }
        if !(self.collision_penalty <= 0.0) {
            return Err(format!("collision penalty must be <= 0, got {}", self.collision_penalty));
        }
        if !(self.exploration_weight >= 0.0) {
            return Err(format!("exploration weight must be >= 0, got {}", self.exploration_weight));
        }
        if !self.success_bonus.is_finite() {
            return Err("success bonus must be finite".into());
        }
        Ok(())
    }
}

/// `(prev − new) + λ + s·1{reached} + c·1{collided} + β·Δcov` (last term only
/// with exploration enabled).
pub fn step_reward(
    prev_geo: f64,
    new_geo: f64,
    reached_goal: bool,
    collided: bool,
    cov_delta: f64,
    cfg: &RewardConfig,
) -> f64 {
    let mut r = (prev_geo - new_geo) + cfg.time_penalty;
    if reached_goal {
        r += cfg.success_bonus;
    }
    if collided {
        r += cfg.collision_penalty;
    }
    if cfg.exploration {
        r += cfg.exploration_weight * cov_delta;
    }
    r
}
