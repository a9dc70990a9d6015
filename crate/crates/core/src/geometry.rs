//! Boxes in normalized image coordinates and coarse occupancy masks.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box as center and size, in the unit square.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    /// Shrinks/shifts the box so it lies inside the unit square, keeping a
    /// minimum extent of `min_size`.
    pub fn clamped_to_unit(&self, min_size: f64) -> Self {
        let w = self.w.clamp(min_size, 1.0);
        let h = self.h.clamp(min_size, 1.0);
        let cx = self.cx.clamp(0.5 * w, 1.0 - 0.5 * w);
        let cy = self.cy.clamp(0.5 * h, 1.0 - 0.5 * h);
        Self { cx, cy, w, h }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        x >= x0 && x <= x1 && y >= y0 && y <= y1
    }
}

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    // areas from the same corners, so identical boxes give exactly 1
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// `size × size` occupancy grid stored row-major as bytes 0/1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    size: usize,
    cells: Vec<u8>,
}

impl Mask {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            cells: vec![0; size * size],
        }
    }

    pub fn from_cells(size: usize, cells: Vec<u8>) -> Result<Self> {
        if cells.len() != size * size || cells.iter().any(|&c| c > 1) {
            return Err(Error::invalid(format!(
                "mask of size {size} needs {} cells of 0/1, got {}",
                size * size,
                cells.len()
            )));
        }
        Ok(Self { size, cells })
    }

    /// Cells whose centers fall inside the ellipse inscribed in `bbox`. The
    /// cell under the box center is always set, so the mask is never empty.
    pub fn ellipse(bbox: &BBox, size: usize) -> Self {
        let mut m = Self::empty(size);
        let (rx, ry) = (0.5 * bbox.w, 0.5 * bbox.h);
        for r in 0..size {
            let y = (r as f64 + 0.5) / size as f64;
            for c in 0..size {
                let x = (c as f64 + 0.5) / size as f64;
                let dx = if rx > 0.0 { (x - bbox.cx) / rx } else { f64::INFINITY };
                let dy = if ry > 0.0 { (y - bbox.cy) / ry } else { f64::INFINITY };
                if dx * dx + dy * dy <= 1.0 {
                    m.cells[r * size + c] = 1;
                }
            }
        }
        if size > 0 {
            let c = ((bbox.cx * size as f64) as usize).min(size - 1);
            let r = ((bbox.cy * size as f64) as usize).min(size - 1);
            m.cells[r * size + c] = 1;
        }
        m
    }

    /// Cells whose centers fall inside the box.
    pub fn rectangle(bbox: &BBox, size: usize) -> Self {
        let mut m = Self::empty(size);
        for r in 0..size {
            let y = (r as f64 + 0.5) / size as f64;
            for c in 0..size {
                let x = (c as f64 + 0.5) / size as f64;
                if bbox.contains(x, y) {
                    m.cells[r * size + c] = 1;
                }
            }
        }
        m
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.size + c] == 1
    }

    pub fn set(&mut self, idx: usize, on: bool) {
        self.cells[idx] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.cells.iter().map(|&c| c as usize).sum()
    }

    pub fn intersection(&self, other: &Mask) -> usize {
        self.cells
            .iter()
            .zip(&other.cells)
            .filter(|(a, b)| **a == 1 && **b == 1)
            .count()
    }

    pub fn iou(&self, other: &Mask) -> f64 {
        let inter = self.intersection(other);
        let union = self.count() + other.count() - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn to_base64(&self) -> String {
        STANDARD.encode(&self.cells)
    }

    pub fn from_base64(s: &str) -> Result<Self> {
        let cells = STANDARD
            .decode(s)
            .map_err(|e| Error::invalid(format!("mask base64: {e}")))?;
        let size = (cells.len() as f64).sqrt().round() as usize;
        Self::from_cells(size, cells)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert_eq!(box_iou(&a, &BBox::from_corners(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((box_iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
        assert_eq!(box_iou(&BBox::new(0.5, 0.5, 0.0, 0.0), &BBox::new(0.5, 0.5, 0.0, 0.0)), 0.0);
    }

    /// Rasterizes both boxes on a fine integer grid and counts cells.
    #[test]
    fn iou_matches_raster_count() {
        let scale = 100usize;
        let a = (0usize, 0usize, 2 * scale, 2 * scale);
        let b = (scale, scale, 3 * scale, 3 * scale);
        let inside = |r: (usize, usize, usize, usize), x: usize, y: usize| x >= r.0 && x < r.2 && y >= r.1 && y < r.3;
        let (mut inter, mut union) = (0usize, 0usize);
        for y in 0..3 * scale {
            for x in 0..3 * scale {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                inter += (ia && ib) as usize;
                union += (ia || ib) as usize;
            }
        }
        let oracle = inter as f64 / union as f64;
        let got = box_iou(&BBox::from_corners(0.0, 0.0, 2.0, 2.0), &BBox::from_corners(1.0, 1.0, 3.0, 3.0));
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn ellipse_mask_is_never_empty() {
        let tiny = BBox::new(0.51, 0.49, 0.001, 0.001);
        assert_eq!(Mask::ellipse(&tiny, 8).count(), 1);
        let big = BBox::new(0.5, 0.5, 1.0, 1.0);
        assert!(Mask::ellipse(&big, 8).count() > 40);
    }

    #[test]
    fn base64_round_trip() {
        let m = Mask::ellipse(&BBox::new(0.3, 0.6, 0.4, 0.3), 24);
        assert_eq!(Mask::from_base64(&m.to_base64()).unwrap(), m);
        assert!(Mask::from_base64("AAEC").is_err());
    }
}
