use std::collections::VecDeque;

use super::{Result, SimError, World};

/// Marker for cells a breadth-first search did not reach.
pub const UNREACHABLE: u32 = u32::MAX;

/// Breadth-first 4-connected distances (in cells) from `from` to every cell.
/// Obstacles and unreachable cells hold [`UNREACHABLE`].
pub fn distance_field(world: &World, from: (usize, usize)) -> Vec<u32> {
    let (w, h) = (world.width(), world.height());
    let mut dist = vec![UNREACHABLE; w * h];
    if !world.is_free(from.0, from.1) {
        return dist;
    }
    let mut queue = VecDeque::new();
    dist[world.idx(from.0, from.1)] = 0;
    queue.push_back(from);
    while let Some((x, y)) = queue.pop_front() {
        let d = dist[world.idx(x, y)];
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if world.is_free(nx, ny) && dist[world.idx(nx, ny)] == UNREACHABLE {
                dist[world.idx(nx, ny)] = d + 1;
                queue.push_back((nx, ny));
            }
        }
    }
    dist
}

/// Shortest 4-connected free path length between two free cells, or
/// `f64::INFINITY` when none exists.
pub fn geodesic_distance(world: &World, a: (usize, usize), b: (usize, usize)) -> Result<f64> {
    for (name, c) in [("a", a), ("b", b)] {
        if !world.is_free(c.0, c.1) {
            return Err(SimError::Contract(format!("geodesic endpoint {name} = {c:?} is not a free cell")));
        }
    }
    let d = distance_field(world, a)[world.idx(b.0, b.1)];
    Ok(if d == UNREACHABLE { f64::INFINITY } else { d as f64 })
}

/// True when all free cells form one 4-connected component.
pub fn is_connected(world: &World) -> bool {
    let Some(start) = world.free_cells().next() else {
        return true;
    };
    let dist = distance_field(world, start);
    world
        .cells()
        .iter()
        .zip(&dist)
        .all(|(c, d)| !c.is_free() || *d != UNREACHABLE)
}
