use rand::seq::SliceRandom;
use rand::Rng;

use super::world::MAX_CLASSES;
use super::{is_connected, Cell, Result, SimError, World, WALL_CLASS};

const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct WorldParams {
    pub width: usize,
    pub height: usize,
    pub n_rooms: usize,
    pub n_classes: usize,
    /// Fraction of free interior cells turned into furniture.
    pub furniture_density: f64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            width: 15,
            height: 15,
            n_rooms: 3,
            n_classes: 8,
            furniture_density: 0.08,
        }
    }
}

/// Inclusive interior rectangle of a room.
#[derive(Clone, Copy, Debug)]
struct Room {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Room {
    fn w(&self) -> usize {
        self.x1 - self.x0 + 1
    }
    fn h(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// Generate a walled world: the interior is recursively divided into
/// `n_rooms` rooms by 1-cell walls, each with a 1-cell door gap, then
/// furniture of classes `2..=n_classes` is scattered without ever
/// disconnecting the free space.
pub fn generate_world<R: Rng + ?Sized>(params: &WorldParams, rng: &mut R) -> Result<World> {
    let p = params;
    if p.width < 7 || p.height < 7 {
        return Err(SimError::Generation(format!("world must be at least 7x7, got {}x{}", p.width, p.height)));
    }
    if p.n_rooms == 0 {
        return Err(SimError::Generation("need at least one room".into()));
    }
    if p.n_classes < 2 || p.n_classes > MAX_CLASSES {
        return Err(SimError::Generation(format!("n_classes must be in 2..={MAX_CLASSES}, got {}", p.n_classes)));
    }
    if !(0.0..1.0).contains(&p.furniture_density) {
        return Err(SimError::Generation(format!("furniture density {} outside [0, 1)", p.furniture_density)));
    }
    let mut last = String::new();
    for _ in 0..MAX_ATTEMPTS {
        match attempt(p, rng) {
            Ok(w) => return Ok(w),
            Err(why) => last = why,
        }
    }
    Err(SimError::Generation(format!("gave up after {MAX_ATTEMPTS} attempts: {last}")))
}

fn attempt<R: Rng + ?Sized>(p: &WorldParams, rng: &mut R) -> std::result::Result<World, String> {
    let (w, h) = (p.width, p.height);
    let mut cells = vec![Cell::Free; w * h];
    for y in 0..h {
        for x in 0..w {
            if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
                cells[y * w + x] = Cell::Obstacle(WALL_CLASS);
            }
        }
    }
    let mut world = World::new(w, h, cells, World::default_classes(p.n_classes)).map_err(|e| e.to_string())?;

    let mut rooms = vec![Room { x0: 1, y0: 1, x1: w - 2, y1: h - 2 }];
    while rooms.len() < p.n_rooms {
        let mut order: Vec<usize> = (0..rooms.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(rooms[i].w() * rooms[i].h()));
        let split = order.into_iter().find_map(|i| split_room(&mut world, rooms[i], rng).map(|pair| (i, pair)));
        let Some((i, (a, b))) = split else {
            return Err(format!("cannot fit {} rooms in {w}x{h}", p.n_rooms));
        };
        rooms[i] = a;
        rooms.push(b);
    }

    let interior_free = world.free_count();
    let target = (p.furniture_density * interior_free as f64).round() as usize;
    if target > 0 {
        let mut candidates: Vec<(usize, usize)> = world.free_cells().collect();
        candidates.shuffle(rng);
        let mut placed = 0;
        for (x, y) in candidates {
            if placed == target {
                break;
            }
            if world.free_count() <= 2 {
                break;
            }
            let class = rng.random_range(2..=p.n_classes as u8);
            world.set(x, y, Cell::Obstacle(class));
            if is_connected(&world) {
                placed += 1;
            } else {
                world.set(x, y, Cell::Free);
            }
        }
        if placed < target {
            return Err(format!("placed only {placed} of {target} furniture cells"));
        }
    }
    Ok(world)
}

/// Split `room` with a wall that leaves at least two cells on each side and
/// does not seal an existing door. Returns the two halves.
fn split_room<R: Rng + ?Sized>(world: &mut World, room: Room, rng: &mut R) -> Option<(Room, Room)> {
    let mut axes = Vec::new();
    if room.w() >= 5 {
        axes.push(true);
    }
    if room.h() >= 5 {
        axes.push(false);
    }
    // prefer cutting the longer side
    axes.sort_by_key(|&vertical| std::cmp::Reverse(if vertical { room.w() } else { room.h() }));
    for vertical in axes {
        let (lo, hi) = if vertical { (room.x0 + 2, room.x1 - 2) } else { (room.y0 + 2, room.y1 - 2) };
        let mut positions: Vec<usize> = (lo..=hi)
            .filter(|&c| {
                // a free cell in the bounding wall next to the new wall's ends is a door
                if vertical {
                    !world.is_free(c, room.y0 - 1) && !world.is_free(c, room.y1 + 1)
                } else {
                    !world.is_free(room.x0 - 1, c) && !world.is_free(room.x1 + 1, c)
                }
            })
            .collect();
        if positions.is_empty() {
            continue;
        }
        positions.shuffle(rng);
        let c = positions[0];
        if vertical {
            for y in room.y0..=room.y1 {
                world.set(c, y, Cell::Obstacle(WALL_CLASS));
            }
            let door = rng.random_range(room.y0..=room.y1);
            world.set(c, door, Cell::Free);
            return Some((Room { x1: c - 1, ..room }, Room { x0: c + 1, ..room }));
        } else {
            for x in room.x0..=room.x1 {
                world.set(x, c, Cell::Obstacle(WALL_CLASS));
            }
            let door = rng.random_range(room.x0..=room.x1);
            world.set(door, c, Cell::Free);
            return Some((Room { y1: c - 1, ..room }, Room { y0: c + 1, ..room }));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::distance_field;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_single_room() {
        let p = WorldParams { width: 9, height: 9, n_rooms: 1, n_classes: 8, furniture_density: 0.0 };
        let w = generate_world(&p, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(w.free_count(), 49);
        w.validate().unwrap();
    }

    #[test]
    fn three_rooms_are_connected() {
        for seed in 0..50 {
            let p = WorldParams { width: 15, height: 15, n_rooms: 3, ..Default::default() };
            let w = generate_world(&p, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let start = w.free_cells().next().unwrap();
            let d = distance_field(&w, start);
            for (x, y) in w.free_cells() {
                assert_ne!(d[w.idx(x, y)], crate::sim::UNREACHABLE, "seed {seed}: ({x},{y}) unreachable");
            }
            w.validate().unwrap();
            // interior walls present: fewer free cells than the bare interior
            assert!(w.free_count() < 13 * 13);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let p = WorldParams::default();
        let a = generate_world(&p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = generate_world(&p, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn impossible_parameters_fail() {
        let p = WorldParams { width: 7, height: 7, n_rooms: 9, ..Default::default() };
        assert!(matches!(generate_world(&p, &mut ChaCha8Rng::seed_from_u64(0)), Err(SimError::Generation(_))));
        let p = WorldParams { width: 6, ..Default::default() };
        assert!(generate_world(&p, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let p = WorldParams { n_classes: 1, ..Default::default() };
        assert!(generate_world(&p, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn furniture_uses_furniture_classes() {
        let p = WorldParams { furniture_density: 0.15, ..Default::default() };
        let w = generate_world(&p, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let furniture = w.cells().iter().filter(|c| matches!(c, Cell::Obstacle(k) if *k >= 2)).count();
        assert!(furniture > 0);
        assert!(w.cells().iter().all(|c| !matches!(c, Cell::Obstacle(k) if *k as usize > p.n_classes)));
    }
}
