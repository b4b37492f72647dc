use super::scene::{Scene, Shape, GRID};

pub const CELL_PX: usize = 10;
pub const IMAGE_PX: usize = GRID * CELL_PX;
pub const CHANNELS: usize = 3;

/// `IMAGE_PX x IMAGE_PX x 3` pixels in `[0, 1]`, row-major HWC.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Vec<f64>,
}

impl Image {
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn shape(&self) -> [usize; 3] {
        [IMAGE_PX, IMAGE_PX, CHANNELS]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * IMAGE_PX + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn from_pixels(pixels: Vec<f64>) -> Option<Self> {
        (pixels.len() == IMAGE_PX * IMAGE_PX * CHANNELS).then_some(Image { pixels })
    }
}

/// Whether local pixel `(y, x)` of a cell belongs to the glyph of `shape`.
pub fn glyph(shape: Shape, y: usize, x: usize) -> bool {
    let (fy, fx) = (y as f64, x as f64);
    match shape {
        Shape::Square => (2..8).contains(&y) && (2..8).contains(&x),
        Shape::Circle => (fy - 4.5).powi(2) + (fx - 4.5).powi(2) <= 3.2 * 3.2,
        Shape::Triangle => (2..8).contains(&y) && (fx - 4.5).abs() <= 0.5 * (fy - 1.0),
    }
}

pub fn glyph_area(shape: Shape) -> usize {
    (0..CELL_PX)
        .flat_map(|y| (0..CELL_PX).map(move |x| (y, x)))
        .filter(|&(y, x)| glyph(shape, y, x))
        .count()
}

/// One glyph centred per cell, pure cell color on black.
pub fn render_scene(scene: &Scene) -> Image {
    let mut pixels = vec![0.0; IMAGE_PX * IMAGE_PX * CHANNELS];
    for r in 0..GRID {
        for c in 0..GRID {
            let Some(obj) = scene.cell(r, c) else { continue };
            let rgb = obj.color.rgb();
            for y in 0..CELL_PX {
                for x in 0..CELL_PX {
                    if glyph(obj.shape, y, x) {
                        let i = ((r * CELL_PX + y) * IMAGE_PX + c * CELL_PX + x) * CHANNELS;
                        pixels[i..i + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
    }
    Image { pixels }
}
