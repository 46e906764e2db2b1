//! Window cropping with nearest-neighbor resampling (no anti-aliasing, so
//! crops are reproducible bit for bit).

use crate::error::Result;
use crate::geom::{BBox, Window};
use crate::tensor::Tensor;

/// Template crops span twice the target scale at 64 px; search windows span
/// 2.5 template crops (five target scales) at 160 px, so both land at the
/// same zoom and the backbone sees the target at one size.
pub const TEMPLATE_CONTEXT: f32 = 2.0;
pub const SEARCH_CONTEXT: f32 = 5.0;

pub fn template_window(target: &BBox, out: usize) -> Window {
    Window {
        cx: target.cx,
        cy: target.cy,
        side: TEMPLATE_CONTEXT * target.scale(),
        out,
    }
}

pub fn search_window(center_x: f32, center_y: f32, target_scale: f32, out: usize) -> Window {
    Window {
        cx: center_x,
        cy: center_y,
        side: SEARCH_CONTEXT * target_scale,
        out,
    }
}

/// Crop `frame` (3,H,W) to the window, nearest-neighbor, zero padding
/// outside the frame.
pub fn crop_resize(frame: &Tensor<f32>, win: &Window) -> Result<Tensor<f32>> {
    let shape = frame.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let out = win.out;
    let mut data = vec![0.0f32; c * out * out];
    let inv_zoom = win.side / out as f32;
    let x0 = win.x0();
    let y0 = win.y0();
    for oy in 0..out {
        let sy = y0 + (oy as f32 + 0.5) * inv_zoom;
        let iy = sy.floor() as isize;
        if iy < 0 || iy as usize >= h {
            continue;
        }
        for ox in 0..out {
            let sx = x0 + (ox as f32 + 0.5) * inv_zoom;
            let ix = sx.floor() as isize;
            if ix < 0 || ix as usize >= w {
                continue;
            }
            for ci in 0..c {
                data[(ci * out + oy) * out + ox] =
                    frame.data()[(ci * h + iy as usize) * w + ix as usize];
            }
        }
    }
    Tensor::new(vec![c, out, out], data)
}

/// Stack (C,H,W) crops into an (N,C,H,W) batch.
pub fn stack_batch(crops: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let shape = crops[0].shape().to_vec();
    let mut data = Vec::with_capacity(crops.len() * crops[0].len());
    for cr in crops {
        data.extend_from_slice(cr.data());
    }
    let mut s = vec![crops.len()];
    s.extend(shape);
    Tensor::new(s, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_zoom_crop_copies_pixels() {
        let frame = Tensor::from_fn(&[3, 8, 8], |i| i as f32);
        let win = Window { cx: 4.0, cy: 4.0, side: 8.0, out: 8 };
        let c = crop_resize(&frame, &win).unwrap();
        assert_eq!(c.data(), frame.data());
    }

    #[test]
    fn out_of_frame_pads_zero() {
        let frame = Tensor::ones(&[1, 4, 4]);
        let win = Window { cx: 0.0, cy: 0.0, side: 8.0, out: 8 };
        let c = crop_resize(&frame, &win).unwrap();
        // window spans [-4,4): left/top half out of frame
        assert_eq!(c.data()[0], 0.0);
        assert_eq!(c.data()[7 * 8 + 7], 1.0);
    }

    #[test]
    fn window_sides_keep_zoom_consistent() {
        let b = BBox::new(50.0, 50.0, 16.0, 16.0);
        let tw = template_window(&b, 64);
        let sw = search_window(b.cx, b.cy, b.scale(), 160);
        assert!((tw.zoom() - sw.zoom()).abs() < 1e-6);
    }
}
