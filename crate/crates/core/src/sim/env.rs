use std::sync::Arc;

use crate::tensor::Tensor;

use super::{
    distance_field, goal_vector, render_image, render_rays, Action, Episode, GoalVector, Pose, Rays, Result,
    SensorConfig, SimError, World, UNREACHABLE,
};

/// Episodes end after this many actions.
pub const MAX_EPISODE_STEPS: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `[H, W, 4]`: RGB from the class palette plus normalised depth.
    pub image: Tensor,
    pub rays: Rays,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub collided: bool,
    pub done: bool,
    pub stopped: bool,
    pub pose: Pose,
    pub steps: usize,
    /// Geodesic distance from the new pose to the goal.
    pub geodesic: f64,
}

/// One running episode in one world.
#[derive(Clone, Debug)]
pub struct Simulator {
    world: Arc<World>,
    sensor: SensorConfig,
    episode: Episode,
    pose: Pose,
    steps: usize,
    done: bool,
    stopped: bool,
    goal_field: Vec<u32>,
}

impl Simulator {
    pub fn new(world: Arc<World>, sensor: SensorConfig, episode: Episode) -> Result<Self> {
        let s = episode.start;
        if !world.is_free(s.x, s.y) || !world.is_free(episode.goal.0, episode.goal.1) {
            return Err(SimError::Contract(format!(
                "episode start {:?} / goal {:?} must be free cells",
                (s.x, s.y),
                episode.goal
            )));
        }
        let goal_field = distance_field(&world, episode.goal);
        Ok(Self {
            world,
            sensor,
            pose: s,
            episode,
            steps: 0,
            done: false,
            stopped: false,
            goal_field,
        })
    }

    pub fn world(&self) -> &Arc<World> {
        &self.world
    }
    pub fn sensor(&self) -> &SensorConfig {
        &self.sensor
    }
    pub fn episode(&self) -> &Episode {
        &self.episode
    }
    pub fn pose(&self) -> Pose {
        self.pose
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn is_done(&self) -> bool {
        self.done
    }
    pub fn stopped(&self) -> bool {
        self.stopped
    }

    pub fn goal_vector(&self) -> GoalVector {
        goal_vector(&self.pose, self.episode.goal)
    }

    pub fn geodesic_to_goal(&self) -> f64 {
        match self.goal_field[self.world.idx(self.pose.x, self.pose.y)] {
            UNREACHABLE => f64::INFINITY,
            d => d as f64,
        }
    }

    pub fn observe(&self) -> Observation {
        let rays = render_rays(&self.world, &self.pose, &self.sensor);
        let image = render_image(&rays, self.sensor.image_height, self.sensor.max_range);
        Observation { image, rays }
    }

    pub fn step(&mut self, action: Action) -> Result<(Observation, StepInfo)> {
        if self.done {
            return Err(SimError::Contract("step called on a finished episode".into()));
        }
        let mut collided = false;
        match action {
            Action::MoveForward => {
                let (dx, dy) = self.pose.heading.delta();
                let nx = self.pose.x as i64 + dx;
                let ny = self.pose.y as i64 + dy;
                if self.world.cell_or_wall(nx, ny).is_free() {
                    self.pose.x = nx as usize;
                    self.pose.y = ny as usize;
                } else {
                    collided = true;
                }
            }
            Action::TurnLeft => self.pose.heading = self.pose.heading.left(),
            Action::TurnRight => self.pose.heading = self.pose.heading.right(),
            Action::Stop => self.stopped = true,
        }
        self.steps += 1;
        self.done = self.stopped || self.steps >= MAX_EPISODE_STEPS;
        let info = StepInfo {
            collided,
            done: self.done,
            stopped: self.stopped,
            pose: self.pose,
            steps: self.steps,
            geodesic: self.geodesic_to_goal(),
        };
        Ok((self.observe(), info))
    }
}
