//! Binary PPM (P6) images for debug dumps.

use std::io::{self, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triples.
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, pixels: vec![[0; 3]; width * height] }
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    /// Nearest-neighbour upscale by an integer factor.
    pub fn scaled(&self, factor: usize) -> Image {
        let mut out = Image::new(self.width * factor, self.height * factor);
        for y in 0..out.height {
            for x in 0..out.width {
                out.set(x, y, self.get(x / factor, y / factor));
            }
        }
        out
    }

    pub fn write_ppm(&self, w: &mut impl Write) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.pixels.iter().flatten().copied().collect();
        w.write_all(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_ppm(&mut f)?;
        f.flush()
    }
}

/// Grayscale image from values scaled so `max` maps to white.
pub fn grayscale(width: usize, height: usize, values: &[f64]) -> Image {
    let max = values.iter().cloned().fold(0.0f64, f64::max);
    let mut img = Image::new(width, height);
    for (i, &v) in values.iter().enumerate() {
        let g = if max > 0.0 { (255.0 * (v / max).clamp(0.0, 1.0)).round() as u8 } else { 0 };
        img.pixels[i] = [g; 3];
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_bytes() {
        let mut img = Image::new(2, 1);
        img.set(1, 0, [1, 2, 3]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert_eq!(buf, b"P6\n2 1\n255\n\0\0\0\x01\x02\x03");
    }

    #[test]
    fn grayscale_normalises_to_max() {
        let img = grayscale(3, 1, &[0.0, 0.5, 1.0]);
        assert_eq!(img.pixels, vec![[0; 3], [128; 3], [255; 3]]);
    }
}
