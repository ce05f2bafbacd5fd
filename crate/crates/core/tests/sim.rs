use std::collections::VecDeque;
use std::sync::Arc;

use mast::sim::{
    generate_world, geodesic_distance, render_rays, sample_episode, Action, Cell, Episode, Heading, Pose,
    SensorConfig, Simulator, World, WorldParams, WALL_CLASS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent BFS (plain queue over a boolean grid).
fn bfs_oracle(world: &World, from: (usize, usize)) -> Vec<Option<usize>> {
    let (w, h) = (world.width(), world.height());
    let mut seen = vec![None; w * h];
    let mut q = VecDeque::from([(from, 0usize)]);
    seen[from.1 * w + from.0] = Some(0);
    while let Some(((x, y), d)) = q.pop_front() {
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            if world.cells()[ny * w + nx] == Cell::Free && seen[ny * w + nx].is_none() {
                seen[ny * w + nx] = Some(d + 1);
                q.push_back(((nx, ny), d + 1));
            }
        }
    }
    seen
}

fn grid(rows: &[&str]) -> World {
    let h = rows.len();
    let w = rows[0].len();
    let cells = rows
        .iter()
        .flat_map(|r| r.chars())
        .map(|c| match c {
            '.' => Cell::Free,
            '#' => Cell::Obstacle(WALL_CLASS),
            d => Cell::Obstacle(d.to_digit(10).unwrap() as u8),
        })
        .collect();
    World::new(w, h, cells, World::default_classes(8)).unwrap()
}

#[test]
fn generated_worlds_are_connected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..60 {
        let p = WorldParams {
            width: rng.random_range(9..=21),
            height: rng.random_range(9..=21),
            n_rooms: rng.random_range(1..=4),
            n_classes: 8,
            furniture_density: rng.random_range(0.0..0.2),
        };
        let w = generate_world(&p, &mut rng).unwrap_or_else(|e| panic!("world {i} {p:?}: {e}"));
        let start = w.free_cells().next().unwrap();
        let reach = bfs_oracle(&w, start);
        for (x, y) in w.free_cells() {
            assert!(reach[y * w.width() + x].is_some(), "world {i}: ({x},{y}) cut off");
        }
        for x in 0..w.width() {
            assert!(!w.cell(x, 0).is_free() && !w.cell(x, w.height() - 1).is_free());
        }
    }
}

#[test]
fn geodesic_examples() {
    let w = grid(&["#######", "#.....#", "#####.#", "#####.#", "#####.#", "#######"]);
    assert_eq!(geodesic_distance(&w, (1, 1), (2, 1)).unwrap(), 1.0);
    // 4 east then 3 south
    assert_eq!(geodesic_distance(&w, (1, 1), (5, 4)).unwrap(), 7.0);
    let split = grid(&["#####", "#.#.#", "#####"]);
    assert_eq!(geodesic_distance(&split, (1, 1), (3, 1)).unwrap(), f64::INFINITY);
    assert!(geodesic_distance(&split, (1, 1), (2, 1)).is_err());
}

#[test]
fn episode_band_and_determinism() {
    let world = generate_world(&WorldParams::default(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..1000 {
        let ep = sample_episode(&world, &mut rng, 4.0, 12.0).unwrap();
        let s = ep.start;
        let d = bfs_oracle(&world, (s.x, s.y))[ep.goal.1 * world.width() + ep.goal.0].unwrap();
        assert_eq!(d as f64, ep.shortest_path);
        assert!((4.0..=12.0).contains(&ep.shortest_path));
    }
    let ep = sample_episode(&world, &mut rng, 1.0, 1.0).unwrap();
    let (dx, dy) = (ep.goal.0.abs_diff(ep.start.x), ep.goal.1.abs_diff(ep.start.y));
    assert_eq!(dx + dy, 1);
    let a = sample_episode(&world, &mut ChaCha8Rng::seed_from_u64(3), 2.0, 9.0).unwrap();
    let b = sample_episode(&world, &mut ChaCha8Rng::seed_from_u64(3), 2.0, 9.0).unwrap();
    assert_eq!(a, b);
    assert!(sample_episode(&world, &mut rng, 500.0, 600.0).is_err());
    assert!(sample_episode(&world, &mut rng, 5.0, 4.0).is_err());
}

#[test]
fn turn_left_then_right_restores_pose() {
    let world = Arc::new(generate_world(&WorldParams::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let ep = sample_episode(&world, &mut rng, 1.0, 20.0).unwrap();
        let mut sim = Simulator::new(world.clone(), SensorConfig::default(), ep.clone()).unwrap();
        for (first, second) in [(Action::TurnLeft, Action::TurnRight), (Action::TurnRight, Action::TurnLeft)] {
            let before = sim.pose();
            sim.step(first).unwrap();
            let (_, info) = sim.step(second).unwrap();
            assert_eq!(info.pose, before);
        }
    }
}

/// Sampling-based ray marcher with step `delta`; crossings are refined by
/// bisection on the point's cell membership.
fn march(world: &World, pose: &Pose, bearing_deg: f64, max_range: f64, delta: f64) -> f64 {
    let th = bearing_deg.to_radians();
    let (dx, dy) = (th.sin(), -th.cos());
    let (ox, oy) = (pose.x as f64 + 0.5, pose.y as f64 + 0.5);
    let cell_at = |t: f64| ((ox + t * dx).floor() as i64, (oy + t * dy).floor() as i64);
    let blocked = |c: (i64, i64)| !world.cell_or_wall(c.0, c.1).is_free();
    // first t in (lo, hi] where `pred` flips to true
    let bisect = |mut lo: f64, mut hi: f64, pred: &dyn Fn(f64) -> bool| {
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if pred(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };
    let mut prev_t = 0.0;
    let mut prev = cell_at(0.0);
    let mut t = delta;
    while prev_t < max_range {
        let cur = cell_at(t);
        if cur != prev {
            if cur.0 != prev.0 && cur.1 != prev.1 {
                let tx = bisect(prev_t, t, &|s| cell_at(s).0 != prev.0);
                let ty = bisect(prev_t, t, &|s| cell_at(s).1 != prev.1);
                if (tx - ty).abs() > 1e-9 {
                    let (side, ts) = if tx < ty { ((cur.0, prev.1), tx) } else { ((prev.0, cur.1), ty) };
                    if blocked(side) {
                        return ts.min(max_range);
                    }
                }
            }
            if blocked(cur) {
                let hit = bisect(prev_t, t, &|s| blocked(cell_at(s)));
                return hit.min(max_range);
            }
        }
        prev = cur;
        prev_t = t;
        t += delta;
    }
    max_range
}

#[test]
fn rays_match_fine_step_marcher() {
    let sensor = SensorConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worlds = Vec::new();
    for _ in 0..10 {
        let p = WorldParams { furniture_density: 0.15, ..Default::default() };
        worlds.push(generate_world(&p, &mut rng).unwrap());
    }
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let w = &worlds[rng.random_range(0..worlds.len())];
        let free: Vec<_> = w.free_cells().collect();
        let (x, y) = free[rng.random_range(0..free.len())];
        let pose = Pose { x, y, heading: Heading::ALL[rng.random_range(0..4)] };
        let rays = render_rays(w, &pose, &sensor);
        for i in (0..sensor.n_rays).step_by(7) {
            let want = march(w, &pose, sensor.ray_bearing(pose.heading.degrees(), i), sensor.max_range, 1e-3);
            worst = worst.max((rays.depth[i] - want).abs());
        }
    }
    assert!(worst < 1e-6, "max depth discrepancy {worst:e}");
}

#[test]
fn diagonal_ray_to_corner_obstacle() {
    let w = grid(&["########", "#....3.#", "#......#", "#......#", "#......#", "########"]);
    let pose = Pose { x: 3, y: 3, heading: Heading::North };
    let sensor = SensorConfig { n_rays: 3, fov_degrees: 90.0, max_range: 10.0, image_height: 8 };
    let rays = render_rays(&w, &pose, &sensor);
    // bearing 45°: corners (4,3), (5,2) -> enters (5,1) at distance 1.5·√2
    let want = 1.5 * 2f64.sqrt();
    assert!((rays.depth[2] - want).abs() < 1e-12, "{}", rays.depth[2]);
    assert_eq!(rays.class[2], 3);
    let marched = march(&w, &pose, 45.0, 10.0, 1e-3);
    assert!((marched - rays.depth[2]).abs() < 1e-9);
}

#[test]
fn simulator_rejects_obstacle_start() {
    let w = Arc::new(grid(&["###", "#.#", "###"]));
    let ep = Episode { start: Pose { x: 0, y: 0, heading: Heading::North }, goal: (1, 1), shortest_path: 1.0 };
    assert!(Simulator::new(w, SensorConfig::default(), ep).is_err());
}
