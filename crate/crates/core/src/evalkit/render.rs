use std::path::Path;

use super::{GtTrack, PredictedTrack};
use crate::error::Result;

/// RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![[0; 3]; width * height],
        }
    }

    /// Binary PPM (P6).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }
}

fn color(id: u32) -> [u8; 3] {
    let h = id.wrapping_add(1).wrapping_mul(0x9E37_79B1);
    [64 + (h >> 24) as u8 % 192, 64 + (h >> 16) as u8 % 192, 64 + (h >> 8) as u8 % 192]
}

/// Frame `t` side by side: ground truth on the left, predictions on the
/// right, each grid cell drawn as a `scale × scale` block colored by id.
/// Overlapping predicted masks are painted in id order.
pub fn render_frame(gt: &[GtTrack], preds: &[PredictedTrack], grid: usize, t: usize, scale: usize) -> Image {
    let scale = scale.max(1);
    let side = grid * scale;
    let mut img = Image::new(2 * side + scale, side);
    let mut paint = |offset: usize, id: u32, cells: &[u8]| {
        for (i, _) in cells.iter().enumerate().filter(|(_, &on)| on == 1) {
            let (r, c) = (i / grid, i % grid);
            for dy in 0..scale {
                for dx in 0..scale {
                    img.pixels[(r * scale + dy) * (2 * side + scale) + offset + c * scale + dx] = color(id);
                }
            }
        }
    };
    for g in gt {
        if let Some(Some(m)) = g.masks.get(t) {
            paint(0, g.id, m.cells());
        }
    }
    let mut order: Vec<&PredictedTrack> = preds.iter().collect();
    order.sort_by_key(|p| p.id);
    for p in order {
        if let Some(Some(m)) = p.masks.get(t) {
            paint(side + scale, p.id, m.cells());
        }
    }
    img
}

pub fn save_ppm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, image.to_ppm())?;
    Ok(())
}
