//! Allocentric bag-of-classes map built from range scans, plus the
//! egocentric heading-up crop fed to the policy.
//!
//! Each cell holds a bit mask over `n_classes + 1` channels: bit 0 is
//! "traversable", bit `k` is "class `k` seen here". A zero mask means
//! unexplored.

use thiserror::Error;

use crate::ppm::Image;
use crate::sim::{class_color, GridRay, Heading, Pose, Rays, SensorConfig};

#[derive(Debug, Error)]
pub enum MapError {
    #[error("contract violated: {0}")]
    Contract(String),
}

pub const TRAVERSABLE: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldSemanticMap {
    width: usize,
    height: usize,
    n_classes: usize,
    masks: Vec<u32>,
}

impl WorldSemanticMap {
    pub fn new(width: usize, height: usize, n_classes: usize) -> Self {
        assert!(n_classes < 32, "at most 31 classes fit a u32 mask");
        Self { width, height, n_classes, masks: vec![0; width * height] }
    }

    /// Rebuild a map from raw masks; every bit must lie within `n_classes + 1` channels.
    pub fn from_masks(width: usize, height: usize, n_classes: usize, masks: Vec<u32>) -> Result<Self, MapError> {
        if n_classes >= 32 || masks.len() != width * height {
            return Err(MapError::Contract(format!("{} masks for a {width}x{height} map", masks.len())));
        }
        if masks.iter().any(|&m| m >> (n_classes + 1) != 0) {
            return Err(MapError::Contract(format!("mask bit beyond channel {n_classes}")));
        }
        Ok(Self { width, height, n_classes, masks })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_channels(&self) -> usize {
        self.n_classes + 1
    }

    pub fn masks(&self) -> &[u32] {
        &self.masks
    }

    pub fn mask(&self, x: usize, y: usize) -> u32 {
        self.masks[y * self.width + x]
    }

    /// Mask at signed coordinates; zero outside the world.
    pub fn mask_or_zero(&self, x: i64, y: i64) -> u32 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0
        } else {
            self.masks[y as usize * self.width + x as usize]
        }
    }

    pub fn revealed(&self, x: usize, y: usize) -> bool {
        self.mask(x, y) != 0
    }

    pub fn revealed_count(&self) -> usize {
        self.masks.iter().filter(|&&m| m != 0).count()
    }

    fn or_bits(&mut self, x: i64, y: i64, bits: u32) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            self.masks[y as usize * self.width + x as usize] |= bits;
        }
    }
}

/// OR one scan into the map. Cells a ray passes through before its hit (or
/// before `max_range` when it hits nothing) become traversable; the hit cell
/// gains its class bit. The agent's own cell is not written.
pub fn integrate(map: &mut WorldSemanticMap, pose: &Pose, rays: &Rays, sensor: &SensorConfig) {
    for (i, (&depth, &class)) in rays.depth.iter().zip(&rays.class).enumerate() {
        let bearing = sensor.ray_bearing(pose.heading.degrees(), i);
        for ((cx, cy), t) in GridRay::new(pose.x, pose.y, bearing) {
            if class != 0 && t == depth {
                map.or_bits(cx, cy, 1 << class);
                break;
            }
            if t >= depth {
                break;
            }
            map.or_bits(cx, cy, TRAVERSABLE);
        }
    }
}

/// Square heading-up crop of side `2r + 1` centred on the agent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EgoMap {
    pub radius: usize,
    pub n_channels: usize,
    /// Row-major masks; row 0 is the farthest row ahead of the agent.
    pub masks: Vec<u32>,
}

impl EgoMap {
    pub fn side(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn mask(&self, row: usize, col: usize) -> u32 {
        self.masks[row * self.side() + col]
    }

    /// Rotate the crop 90° clockwise.
    pub fn rot90(&self) -> EgoMap {
        let n = self.side();
        let mut masks = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                masks[i * n + j] = self.masks[(n - 1 - j) * n + i];
            }
        }
        EgoMap { masks, ..self.clone() }
    }

    /// Debug image: lowest set class colour, gray for traversable-only, black
    /// for unexplored.
    pub fn to_image(&self) -> Image {
        let n = self.side();
        let mut img = Image::new(n, n);
        for r in 0..n {
            for c in 0..n {
                let m = self.mask(r, c);
                let classes = m & !TRAVERSABLE;
                let rgb = if classes != 0 {
                    class_color(classes.trailing_zeros() as u8)
                } else if m != 0 {
                    [128, 128, 128]
                } else {
                    [0, 0, 0]
                };
                img.set(c, r, rgb);
            }
        }
        img
    }
}

/// World-grid offsets of the crop's "forward" and "right" unit vectors.
fn frame(h: Heading) -> ((i64, i64), (i64, i64)) {
    let f = h.delta();
    let rt = h.right().delta();
    (f, rt)
}

/// Crop cell `(row, col)` sits at world `pos + f·(r − row) + rt·(col − r)`.
pub fn egocentric_crop(map: &WorldSemanticMap, pose: &Pose, r: usize) -> EgoMap {
    let n = 2 * r + 1;
    let (f, rt) = frame(pose.heading);
    let (px, py) = (pose.x as i64, pose.y as i64);
    let ri = r as i64;
    let mut masks = vec![0; n * n];
    for row in 0..n {
        for col in 0..n {
            let (a, b) = (ri - row as i64, col as i64 - ri);
            let wx = px + f.0 * a + rt.0 * b;
            let wy = py + f.1 * a + rt.1 * b;
            masks[row * n + col] = map.mask_or_zero(wx, wy);
        }
    }
    masks[r * n + r] |= TRAVERSABLE;
    EgoMap { radius: r, n_channels: map.n_channels(), masks }
}

/// Fraction of world cells revealed.
pub fn coverage(map: &WorldSemanticMap) -> f64 {
    let total = map.width * map.height;
    if total == 0 {
        return 0.0;
    }
    map.revealed_count() as f64 / total as f64
}

/// `β · (curr − prev)`.
pub fn exploration_reward(prev_cov: f64, curr_cov: f64, beta: f64) -> Result<f64, MapError> {
    if !(0.0..=1.0).contains(&prev_cov) || !(0.0..=1.0).contains(&curr_cov) {
        return Err(MapError::Contract(format!("coverage outside [0, 1]: {prev_cov} -> {curr_cov}")));
    }
    if curr_cov < prev_cov {
        return Err(MapError::Contract(format!("coverage decreased: {prev_cov} -> {curr_cov}")));
    }
    Ok(beta * (curr_cov - prev_cov))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Occupancy {
    Unexplored,
    Traversable,
    Obstacle,
}

impl Occupancy {
    pub fn channel(self) -> usize {
        match self {
            Occupancy::Unexplored => 0,
            Occupancy::Traversable => 1,
            Occupancy::Obstacle => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyView {
    pub radius: usize,
    pub cells: Vec<Occupancy>,
}

impl OccupancyView {
    /// Per-cell one-hot mask over `{Unexplored, Traversable, Obstacle}`
    /// (bits 0..3).
    pub fn masks(&self) -> Vec<u32> {
        self.cells.iter().map(|c| 1 << c.channel()).collect()
    }
}

pub fn occupancy_of(mask: u32) -> Occupancy {
    if mask & !TRAVERSABLE != 0 {
        Occupancy::Obstacle
    } else if mask != 0 {
        Occupancy::Traversable
    } else {
        Occupancy::Unexplored
    }
}

pub fn occupancy_view(ego: &EgoMap) -> OccupancyView {
    OccupancyView { radius: ego.radius, cells: ego.masks.iter().map(|&m| occupancy_of(m)).collect() }
}
