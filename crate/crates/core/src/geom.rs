//! Boxes and search-window geometry in frame pixel coordinates.

use serde::{Deserialize, Serialize};

/// Axis-aligned box, center + extent, in frame pixels.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box extents must be positive");
        Self { cx, cy, w, h }
    }

    pub fn x1(&self) -> f32 {
        self.cx - self.w * 0.5
    }
    pub fn y1(&self) -> f32 {
        self.cy - self.h * 0.5
    }
    pub fn x2(&self) -> f32 {
        self.cx + self.w * 0.5
    }
    pub fn y2(&self) -> f32 {
        self.cy + self.h * 0.5
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// Geometric-mean side length, the crop "scale" of a target.
    pub fn scale(&self) -> f32 {
        (self.w * self.h).sqrt()
    }

    /// Box in a shifted/zoomed coordinate frame (used to map frame boxes
    /// into crop-window pixels).
    pub fn transform(&self, dx: f32, dy: f32, zoom: f32) -> BBox {
        BBox {
            cx: (self.cx + dx) * zoom,
            cy: (self.cy + dy) * zoom,
            w: self.w * zoom,
            h: self.h * zoom,
        }
    }
}

/// A square crop window in frame coordinates, resampled to `out` pixels.
#[derive(Copy, Clone, Debug)]
pub struct Window {
    pub cx: f32,
    pub cy: f32,
    pub side: f32,
    pub out: usize,
}

impl Window {
    /// Pixels of the resampled crop per frame pixel.
    pub fn zoom(&self) -> f32 {
        self.out as f32 / self.side
    }

    pub fn x0(&self) -> f32 {
        self.cx - self.side * 0.5
    }
    pub fn y0(&self) -> f32 {
        self.cy - self.side * 0.5
    }

    /// Map a frame-space box into window pixel coordinates.
    pub fn frame_to_window(&self, b: &BBox) -> BBox {
        b.transform(-self.x0(), -self.y0(), self.zoom())
    }

    /// Map a window-space box back into frame coordinates.
    pub fn window_to_frame(&self, b: &BBox) -> BBox {
        let z = 1.0 / self.zoom();
        BBox {
            cx: b.cx * z + self.x0(),
            cy: b.cy * z + self.y0(),
            w: b.w * z,
            h: b.h * z,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_round_trip() {
        let w = Window { cx: 50.0, cy: 60.0, side: 80.0, out: 160 };
        let b = BBox::new(45.0, 70.0, 16.0, 24.0);
        let wb = w.frame_to_window(&b);
        let back = w.window_to_frame(&wb);
        assert!((back.cx - b.cx).abs() < 1e-4);
        assert!((back.cy - b.cy).abs() < 1e-4);
        assert!((back.w - b.w).abs() < 1e-4);
        assert!((back.h - b.h).abs() < 1e-4);
    }

    #[test]
    fn zoom_of_full_frame_window() {
        let w = Window { cx: 80.0, cy: 80.0, side: 160.0, out: 160 };
        assert_eq!(w.zoom(), 1.0);
        let b = BBox::new(80.0, 80.0, 32.0, 32.0);
        let wb = w.frame_to_window(&b);
        assert_eq!((wb.cx, wb.cy), (80.0, 80.0));
    }
}
