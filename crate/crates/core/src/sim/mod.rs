//! Procedurally generated semantic gridworlds with a raycast sensor.
//!
//! Coordinates: `x` grows east (columns), `y` grows south (rows). A cell
//! `(x, y)` covers `[x, x+1) × [y, y+1)`; the agent stands at the cell centre.
//! Bearings are compass angles, clockwise from north.

mod env;
mod episode;
mod geodesic;
mod semworld;
mod sensor;
mod world;
mod worldgen;

pub use env::{Observation, Simulator, StepInfo, MAX_EPISODE_STEPS};
pub use episode::{goal_vector, sample_episode, Episode, GoalVector};
pub use geodesic::{distance_field, geodesic_distance, is_connected, UNREACHABLE};
pub use semworld::{load_world, save_world};
pub use sensor::{render_image, render_rays, GridRay, Rays, SensorConfig};
pub use world::{class_color, default_class_char, default_class_name, Cell, ClassDef, World, MAX_CLASSES, WALL_CLASS};
pub use worldgen::{generate_world, WorldParams};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("world generation failed: {0}")]
    Generation(String),
    #[error("episode sampling failed: {0}")]
    Sampling(String),
    #[error("SEMWORLD line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("contract violated: {0}")]
    Contract(String),
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn left(self) -> Self {
        Self::ALL[(self.index() + 3) % 4]
    }

    pub fn right(self) -> Self {
        Self::ALL[(self.index() + 1) % 4]
    }

    /// Quarter turns clockwise from north.
    pub fn index(self) -> usize {
        match self {
            Heading::North => 0,
            Heading::East => 1,
            Heading::South => 2,
            Heading::West => 3,
        }
    }

    /// Unit step `(dx, dy)` in grid coordinates.
    pub fn delta(self) -> (i64, i64) {
        match self {
            Heading::North => (0, -1),
            Heading::East => (1, 0),
            Heading::South => (0, 1),
            Heading::West => (-1, 0),
        }
    }

    pub fn degrees(self) -> f64 {
        90.0 * self.index() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    MoveForward,
    TurnLeft,
    TurnRight,
    Stop,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::MoveForward, Action::TurnLeft, Action::TurnRight, Action::Stop];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        match self {
            Action::MoveForward => 0,
            Action::TurnLeft => 1,
            Action::TurnRight => 2,
            Action::Stop => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}
