use crate::tensor::Tensor;

use super::{class_color, Cell, Pose, World};

/// Ties between axis crossings closer than this are treated as passing
/// exactly through a grid corner.
const CORNER_TIE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct SensorConfig {
    pub n_rays: usize,
    pub fov_degrees: f64,
    pub max_range: f64,
    pub image_height: usize,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            n_rays: 64,
            fov_degrees: 90.0,
            max_range: 10.0,
            image_height: 64,
        }
    }
}

impl SensorConfig {
    /// Compass bearing (degrees) of ray `i` for an agent facing `heading_deg`.
    pub fn ray_bearing(&self, heading_deg: f64, i: usize) -> f64 {
        if self.n_rays <= 1 {
            return heading_deg;
        }
        heading_deg + self.fov_degrees * (i as f64 / (self.n_rays - 1) as f64 - 0.5)
    }
}

/// One range scan: per-ray hit distance (cells) and hit class (0 = nothing
/// within range).
#[derive(Clone, Debug, PartialEq)]
pub struct Rays {
    pub depth: Vec<f64>,
    pub class: Vec<u8>,
}

/// Exact grid traversal of a ray from a cell centre (Amanatides-Woo).
///
/// Yields every cell the ray enters after its starting cell, with the ray
/// parameter (distance) at entry. A ray passing exactly through a corner
/// steps diagonally.
#[derive(Clone, Debug)]
pub struct GridRay {
    cell: (i64, i64),
    step: (i64, i64),
    t_max: (f64, f64),
    t_delta: (f64, f64),
}

impl GridRay {
    pub fn new(x: usize, y: usize, bearing_deg: f64) -> Self {
        let theta = bearing_deg.to_radians();
        let (dx, dy) = (theta.sin(), -theta.cos());
        let axis = |d: f64| -> (i64, f64, f64) {
            if d.abs() < 1e-15 {
                (0, f64::INFINITY, f64::INFINITY)
            } else {
                // start at a cell centre: half a cell to either boundary
                (d.signum() as i64, 0.5 / d.abs(), 1.0 / d.abs())
            }
        };
        let (sx, tx, ddx) = axis(dx);
        let (sy, ty, ddy) = axis(dy);
        Self {
            cell: (x as i64, y as i64),
            step: (sx, sy),
            t_max: (tx, ty),
            t_delta: (ddx, ddy),
        }
    }
}

impl Iterator for GridRay {
    type Item = ((i64, i64), f64);

    fn next(&mut self) -> Option<Self::Item> {
        let (tx, ty) = self.t_max;
        let t;
        if tx < ty - CORNER_TIE {
            t = tx;
            self.cell.0 += self.step.0;
            self.t_max.0 += self.t_delta.0;
        } else if ty < tx - CORNER_TIE {
            t = ty;
            self.cell.1 += self.step.1;
            self.t_max.1 += self.t_delta.1;
        } else {
            t = tx.min(ty);
            self.cell.0 += self.step.0;
            self.cell.1 += self.step.1;
            self.t_max.0 += self.t_delta.0;
            self.t_max.1 += self.t_delta.1;
        }
        t.is_finite().then_some((self.cell, t))
    }
}

/// Cast `n_rays` rays across the field of view. Depth is the distance from
/// the agent's cell centre to the boundary of the first obstacle cell,
/// clamped to `max_range`.
pub fn render_rays(world: &World, pose: &Pose, sensor: &SensorConfig) -> Rays {
    let mut depth = Vec::with_capacity(sensor.n_rays);
    let mut class = Vec::with_capacity(sensor.n_rays);
    for i in 0..sensor.n_rays {
        let bearing = sensor.ray_bearing(pose.heading.degrees(), i);
        let mut hit = (sensor.max_range, 0u8);
        for ((cx, cy), t) in GridRay::new(pose.x, pose.y, bearing) {
            if t > sensor.max_range {
                break;
            }
            if let Cell::Obstacle(k) = world.cell_or_wall(cx, cy) {
                hit = (t, k);
                break;
            }
        }
        depth.push(hit.0);
        class.push(hit.1);
    }
    Rays { depth, class }
}

/// Column renderer: ray `i` becomes image column `i`, a centred bar of
/// height `min(H, round(H / depth))` in the hit class colour over black, plus
/// a depth channel `depth / max_range`. Output dims `[H, W, 4]`, values in
/// `[0, 1]`.
pub fn render_image(rays: &Rays, height: usize, max_range: f64) -> Tensor {
    let w = rays.depth.len();
    let mut data = vec![0.0; height * w * 4];
    for i in 0..w {
        let d = rays.depth[i];
        let bar = ((height as f64 / d).round() as usize).min(height);
        let top = (height - bar) / 2;
        let rgb = class_color(rays.class[i]);
        let depth_px = (d / max_range).clamp(0.0, 1.0);
        for row in 0..height {
            let px = &mut data[(row * w + i) * 4..(row * w + i + 1) * 4];
            if row >= top && row < top + bar {
                for c in 0..3 {
                    px[c] = rgb[c] as f64 / 255.0;
                }
            }
            px[3] = depth_px;
        }
    }
    Tensor::new(&[height, w, 4], data).expect("dims match data")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Heading, WALL_CLASS};

    fn open_world(size: usize) -> World {
        let mut cells = vec![Cell::Free; size * size];
        for y in 0..size {
            for x in 0..size {
                if x == 0 || y == 0 || x == size - 1 || y == size - 1 {
                    cells[y * size + x] = Cell::Obstacle(WALL_CLASS);
                }
            }
        }
        World::new(size, size, cells, World::default_classes(8)).unwrap()
    }

    #[test]
    fn centre_ray_two_cells_from_wall() {
        let w = open_world(9);
        // agent at y=3 facing north: free rows 2 and 1, wall at row 0
        let pose = Pose { x: 4, y: 3, heading: Heading::North };
        let sensor = SensorConfig { n_rays: 3, ..Default::default() };
        let rays = render_rays(&w, &pose, &sensor);
        assert_eq!(rays.depth[1], 2.5);
        assert_eq!(rays.class[1], WALL_CLASS);
    }

    #[test]
    fn open_space_hits_nothing() {
        let w = open_world(41);
        let pose = Pose { x: 20, y: 20, heading: Heading::East };
        let rays = render_rays(&w, &pose, &SensorConfig::default());
        assert!(rays.depth.iter().all(|&d| d == 10.0));
        assert!(rays.class.iter().all(|&c| c == 0));
    }

    #[test]
    fn blank_scan_renders_black_with_full_depth() {
        let rays = Rays { depth: vec![10.0; 8], class: vec![0; 8] };
        let img = render_image(&rays, 6, 10.0);
        for px in img.data().chunks(4) {
            assert_eq!(px, &[0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn unit_depth_fills_column() {
        let rays = Rays { depth: vec![1.0, 10.0], class: vec![3, 0] };
        let img = render_image(&rays, 8, 10.0);
        let rgb = class_color(3);
        for row in 0..8 {
            let px = &img.data()[(row * 2) * 4..(row * 2 + 1) * 4];
            assert_eq!(px[0], rgb[0] as f64 / 255.0);
            assert_eq!(px[3], 0.1);
        }
    }

    #[test]
    fn single_ray_points_along_heading() {
        let sensor = SensorConfig { n_rays: 1, ..Default::default() };
        assert_eq!(sensor.ray_bearing(90.0, 0), 90.0);
    }
}
