use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub const GRID: usize = 3;
pub const CELLS: usize = GRID * GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Triangle,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Triangle, Shape::Square];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
            Shape::Square => "square",
        }
    }
}

impl Color {
    pub const ALL: [Color; 3] = [Color::Red, Color::Green, Color::Blue];

    pub fn name(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [f64; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
}

/// 3x3 grid of optional objects, indexed `row * 3 + col` with row 0 at the
/// top and column 0 on the left.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Scene {
    cells: [Option<Object>; CELLS],
}

impl Scene {
    pub fn empty() -> Self {
        Scene {
            cells: [None; CELLS],
        }
    }

    pub fn with(mut self, row: usize, col: usize, shape: Shape, color: Color) -> Self {
        self.cells[row * GRID + col] = Some(Object { shape, color });
        self
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<Object> {
        self.cells[row * GRID + col]
    }

    pub fn cells(&self) -> &[Option<Object>; CELLS] {
        &self.cells
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Scenes are valid when at least one cell holds an object.
    pub fn is_valid(&self) -> bool {
        self.occupied() > 0
    }

    /// Stable 64-bit FNV-1a hash of the cell contents.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for c in &self.cells {
            let code = match c {
                None => 0u8,
                Some(o) => 1 + (o.shape as u8) * 3 + o.color as u8,
            };
            h ^= code as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// `(row, col, shape, color)` for each occupied cell, row-major.
    pub fn to_records(&self) -> Vec<(usize, usize, Shape, Color)> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|o| (i / GRID, i % GRID, o.shape, o.color)))
            .collect()
    }

    pub fn from_records(records: &[(usize, usize, Shape, Color)]) -> Option<Self> {
        let mut s = Scene::empty();
        for &(r, c, shape, color) in records {
            if r >= GRID || c >= GRID {
                return None;
            }
            s.cells[r * GRID + c] = Some(Object { shape, color });
        }
        Some(s)
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in 0..GRID {
            let row: Vec<String> = (0..GRID)
                .map(|c| match self.cell(r, c) {
                    None => ".".to_string(),
                    Some(o) => format!("{}-{}", o.color.name(), o.shape.name()),
                })
                .collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

/// Each cell is filled independently with probability `density`, shape and
/// color uniform; all-empty draws are redrawn.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, density: f64) -> Scene {
    assert!(density > 0.0 && density <= 1.0, "density must lie in (0, 1]");
    loop {
        let mut s = Scene::empty();
        for cell in s.cells.iter_mut() {
            if rng.gen_bool(density) {
                *cell = Some(Object {
                    shape: Shape::ALL[rng.gen_range(0..3)],
                    color: Color::ALL[rng.gen_range(0..3)],
                });
            }
        }
        if s.is_valid() {
            return s;
        }
    }
}
