//! One greedy episode rendered to PPM: the trajectory over the world, the
//! final egocentric map and the centre-cell attention of every layer/head.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::eval::{run_episode, EpisodeTrace, Result, SuccessConfig};
use crate::policy::{ActMode, MapEncoder, PolicyNet};
use crate::ppm::{grayscale, Image};
use crate::sim::{class_color, sample_episode, Cell, Pose, SensorConfig, World};
use crate::tensor::ParamStore;

/// Pixels per world cell in the trajectory image.
pub const CELL_PX: usize = 12;
/// Pixels per map cell in egomap and attention images.
pub const MAP_PX: usize = 16;
pub const START_RGB: [u8; 3] = [0, 0, 255];
pub const GOAL_RGB: [u8; 3] = [255, 0, 0];
const FREE_RGB: [u8; 3] = [255, 255, 255];

fn fill(img: &mut Image, cx: usize, cy: usize, half: usize, rgb: [u8; 3]) {
    for y in cy - half..cy + half {
        for x in cx - half..cx + half {
            img.set(x, y, rgb);
        }
    }
}

/// Colour of step `i` of `n`: green early, orange late.
pub fn gradient(i: usize, n: usize) -> [u8; 3] {
    let t = if n <= 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
    [(255.0 * t).round() as u8, (200.0 - 60.0 * t).round() as u8, 0]
}

/// World cells with the visited cell centres coloured by time; the start
/// and goal centres are drawn last in blue and red.
pub fn trajectory_image(world: &World, poses: &[Pose], goal: (usize, usize)) -> Image {
    let mut img = Image::new(world.width() * CELL_PX, world.height() * CELL_PX);
    for y in 0..world.height() {
        for x in 0..world.width() {
            let rgb = match world.cell(x, y) {
                Cell::Free => FREE_RGB,
                Cell::Obstacle(k) => class_color(k),
            };
            for py in 0..CELL_PX {
                for px in 0..CELL_PX {
                    img.set(x * CELL_PX + px, y * CELL_PX + py, rgb);
                }
            }
        }
    }
    let centre = |c: usize| c * CELL_PX + CELL_PX / 2;
    for (i, p) in poses.iter().enumerate() {
        fill(&mut img, centre(p.x), centre(p.y), CELL_PX / 6, gradient(i, poses.len()));
    }
    if let Some(s) = poses.first() {
        fill(&mut img, centre(s.x), centre(s.y), CELL_PX / 4, START_RGB);
    }
    fill(&mut img, centre(goal.0), centre(goal.1), CELL_PX / 4, GOAL_RGB);
    img
}

pub struct ReplayExport {
    pub trace: EpisodeTrace,
    pub goal: (usize, usize),
    pub trajectory: Image,
    pub egomap: Image,
    /// `((layer, head), image)` for attention-based map encoders.
    pub attention: Vec<((usize, usize), Image)>,
}

/// Greedy episode on `world` with start and goal drawn from `episode_seed`.
#[allow(clippy::too_many_arguments)]
pub fn replay(
    net: &PolicyNet,
    store: &ParamStore,
    world: Arc<World>,
    episode_seed: u64,
    sensor: &SensorConfig,
    min_geo: f64,
    max_geo: f64,
    success: &SuccessConfig,
) -> Result<ReplayExport> {
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let ep = sample_episode(&world, &mut rng, min_geo, max_geo)?;
    let goal = ep.goal;
    let trace = run_episode(net, store, world.clone(), ep, sensor, success, ActMode::Greedy, &mut rng)?;
    let trajectory = trajectory_image(&world, &trace.poses, goal);
    let egomap = trace.last_ego.to_image().scaled(MAP_PX);
    let mut attention = Vec::new();
    if let (MapEncoder::Attention(t), Some(masks)) = (&net.map, net.map_input(&trace.last_ego)) {
        let side = t.cfg.radius * 2 + 1;
        for (l, heads) in t.centre_attention(store, &masks)?.into_iter().enumerate() {
            for (h, grid) in heads.into_iter().enumerate() {
                attention.push(((l, h), grayscale(side, side, &grid).scaled(MAP_PX)));
            }
        }
    }
    Ok(ReplayExport { trace, goal, trajectory, egomap, attention })
}

/// Write `trajectory.ppm`, `egomap.ppm` and `attention_l<l>_h<h>.ppm`.
pub fn write_export(export: &ReplayExport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut save = |name: String, img: &Image| -> std::io::Result<()> {
        let p = dir.join(name);
        img.save(&p)?;
        written.push(p);
        Ok(())
    };
    save("trajectory.ppm".into(), &export.trajectory)?;
    save("egomap.ppm".into(), &export.egomap)?;
    for ((l, h), img) in &export.attention {
        save(format!("attention_l{l}_h{h}.ppm"), img)?;
    }
    Ok(written)
}
