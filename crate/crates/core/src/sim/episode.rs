use rand::Rng;

use super::{distance_field, Heading, Pose, Result, SimError, World, UNREACHABLE};

const MAX_START_TRIES: usize = 200;

/// A PointGoal episode: start pose, goal cell and the geodesic length of the
/// shortest path between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub start: Pose,
    pub goal: (usize, usize),
    pub shortest_path: f64,
}

/// Goal as seen by an ideal GPS + compass: Euclidean distance (cells) and
/// bearing relative to the agent's heading (radians, clockwise positive, in
/// `(-π, π]`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoalVector {
    pub distance: f64,
    pub bearing: f64,
}

pub fn goal_vector(pose: &Pose, goal: (usize, usize)) -> GoalVector {
    let dx = goal.0 as f64 - pose.x as f64;
    let dy = goal.1 as f64 - pose.y as f64;
    let distance = dx.hypot(dy);
    if distance == 0.0 {
        return GoalVector { distance, bearing: 0.0 };
    }
    // compass bearing of the goal: atan2(east, north)
    let absolute = dx.atan2(-dy);
    let mut rel = absolute - pose.heading.degrees().to_radians();
    while rel <= -std::f64::consts::PI {
        rel += std::f64::consts::TAU;
    }
    while rel > std::f64::consts::PI {
        rel -= std::f64::consts::TAU;
    }
    GoalVector { distance, bearing: rel }
}

/// Sample a start pose and goal whose geodesic distance lies in
/// `[min_geo, max_geo]`. The goal is uniform over qualifying cells for a
/// uniformly drawn start; the heading is uniform.
pub fn sample_episode<R: Rng + ?Sized>(world: &World, rng: &mut R, min_geo: f64, max_geo: f64) -> Result<Episode> {
    if min_geo > max_geo {
        return Err(SimError::Sampling(format!("min_geo {min_geo} > max_geo {max_geo}")));
    }
    let free: Vec<(usize, usize)> = world.free_cells().collect();
    if free.len() < 2 {
        return Err(SimError::Sampling("world needs at least two free cells".into()));
    }
    for _ in 0..MAX_START_TRIES {
        let start = free[rng.random_range(0..free.len())];
        let dist = distance_field(world, start);
        let goals: Vec<(usize, usize)> = free
            .iter()
            .copied()
            .filter(|&(x, y)| {
                let d = dist[world.idx(x, y)];
                d != UNREACHABLE && (d as f64) >= min_geo && (d as f64) <= max_geo
            })
            .collect();
        if goals.is_empty() {
            continue;
        }
        let goal = goals[rng.random_range(0..goals.len())];
        let heading = Heading::ALL[rng.random_range(0..4)];
        return Ok(Episode {
            start: Pose { x: start.0, y: start.1, heading },
            goal,
            shortest_path: dist[world.idx(goal.0, goal.1)] as f64,
        });
    }
    Err(SimError::Sampling(format!(
        "no start/goal pair with geodesic distance in [{min_geo}, {max_geo}] after {MAX_START_TRIES} tries"
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn goal_vector_relative_bearing() {
        let pose = Pose { x: 5, y: 5, heading: Heading::North };
        let g = goal_vector(&pose, (5, 2));
        assert_eq!(g.distance, 3.0);
        assert!(g.bearing.abs() < 1e-12);
        let g = goal_vector(&pose, (7, 5));
        assert!((g.bearing - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let east = Pose { heading: Heading::East, ..pose };
        let g = goal_vector(&east, (5, 2));
        assert!((g.bearing + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        let g = goal_vector(&east, (2, 5));
        assert!((g.bearing - std::f64::consts::PI).abs() < 1e-12);
    }
}
