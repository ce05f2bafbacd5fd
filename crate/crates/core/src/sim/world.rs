use super::{Result, SimError};

/// Class id of walls. Furniture uses ids `2..=n_classes`.
pub const WALL_CLASS: u8 = 1;
/// Largest supported class count; per-cell map masks hold `n_classes + 1` bits in a `u32`.
pub const MAX_CLASSES: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Free,
    Obstacle(u8),
}

impl Cell {
    pub fn is_free(self) -> bool {
        matches!(self, Cell::Free)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDef {
    pub ch: char,
    pub name: String,
}

const NAMES: [&str; 16] = [
    "wall", "table", "chair", "sofa", "bed", "cabinet", "plant", "shelf", "counter", "sink", "toilet", "tv", "stool",
    "desk", "lamp", "bathtub",
];

pub fn default_class_name(id: u8) -> String {
    NAMES
        .get(id as usize - 1)
        .map(|s| s.to_string())
        .unwrap_or_else(|| format!("class{id}"))
}

pub fn default_class_char(id: u8) -> char {
    if id == WALL_CLASS {
        '#'
    } else {
        (b'A' + (id - 2)) as char
    }
}

const PALETTE: [[u8; 3]; 32] = [
    [0, 0, 0],
    [170, 160, 150],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [100, 60, 20],
    [20, 100, 60],
    [60, 20, 100],
    [200, 100, 100],
    [100, 200, 100],
    [100, 100, 200],
    [200, 200, 100],
    [100, 200, 200],
    [200, 100, 200],
];

/// RGB colour of a class; class 0 ("nothing") is black.
pub fn class_color(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

/// A rectangular gridworld. Class ids run `1..=classes.len()`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct World {
    width: usize,
    height: usize,
    cells: Vec<Cell>,
    classes: Vec<ClassDef>,
}

impl World {
    pub fn new(width: usize, height: usize, cells: Vec<Cell>, classes: Vec<ClassDef>) -> Result<Self> {
        if cells.len() != width * height {
            return Err(SimError::Contract(format!(
                "{width}x{height} world needs {} cells, got {}",
                width * height,
                cells.len()
            )));
        }
        if classes.is_empty() || classes.len() > MAX_CLASSES {
            return Err(SimError::Contract(format!("class count {} outside 1..={MAX_CLASSES}", classes.len())));
        }
        if let Some(Cell::Obstacle(c)) = cells
            .iter()
            .find(|c| matches!(c, Cell::Obstacle(k) if *k == 0 || *k as usize > classes.len()))
        {
            return Err(SimError::Contract(format!("obstacle class {c} not declared")));
        }
        Ok(Self {
            width,
            height,
            cells,
            classes,
        })
    }

    /// Default class table for `n_classes` classes.
    pub fn default_classes(n_classes: usize) -> Vec<ClassDef> {
        (1..=n_classes as u8)
            .map(|id| ClassDef {
                ch: default_class_char(id),
                name: default_class_name(id),
            })
            .collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassDef] {
        &self.classes
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn idx(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn cell(&self, x: usize, y: usize) -> Cell {
        self.cells[self.idx(x, y)]
    }

    /// Cell at signed coordinates; everything outside the grid is wall.
    pub fn cell_or_wall(&self, x: i64, y: i64) -> Cell {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            Cell::Obstacle(WALL_CLASS)
        } else {
            self.cell(x as usize, y as usize)
        }
    }

    pub fn set(&mut self, x: usize, y: usize, c: Cell) {
        let i = self.idx(x, y);
        self.cells[i] = c;
    }

    pub fn is_free(&self, x: usize, y: usize) -> bool {
        x < self.width && y < self.height && self.cell(x, y).is_free()
    }

    pub fn free_cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_free())
            .map(|(i, _)| (i % self.width, i / self.width))
    }

    pub fn free_count(&self) -> usize {
        self.cells.iter().filter(|c| c.is_free()).count()
    }

    /// Check the generated-world invariants: walled border, one 4-connected
    /// free component.
    pub fn validate(&self) -> Result<()> {
        for x in 0..self.width {
            for y in [0, self.height - 1] {
                if self.cell(x, y).is_free() {
                    return Err(SimError::Contract(format!("border cell ({x}, {y}) is free")));
                }
            }
        }
        for y in 0..self.height {
            for x in [0, self.width - 1] {
                if self.cell(x, y).is_free() {
                    return Err(SimError::Contract(format!("border cell ({x}, {y}) is free")));
                }
            }
        }
        if !super::is_connected(self) {
            return Err(SimError::Contract("free cells are not 4-connected".into()));
        }
        Ok(())
    }
}
