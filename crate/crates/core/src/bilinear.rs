//! Bilinear sampling tables shared by image distortions and the tensor
//! resampling primitive.
//!
//! Pixel centers sit at integer coordinates. Resizing uses the half-pixel
//! convention (`src = (dst + 0.5) * in / out - 0.5`, clamped to the edge).

/// Snap distance for coordinates that land on the pixel grid up to rounding.
const GRID_SNAP: f64 = 1e-9;

/// One output pixel: up to four weighted source pixels, or `None` when the
/// sample point falls outside the source support.
pub type Tap = Option<[(usize, f64); 4]>;

#[derive(Debug, Clone, PartialEq)]
pub struct Taps {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Tap>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < GRID_SNAP {
        r
    } else {
        v
    }
}

fn bilinear_tap(in_h: usize, in_w: usize, sy: f64, sx: f64) -> Tap {
    let (sy, sx) = (snap(sy), snap(sx));
    let max_y = (in_h - 1) as f64;
    let max_x = (in_w - 1) as f64;
    if !(0.0..=max_y).contains(&sy) || !(0.0..=max_x).contains(&sx) {
        return None;
    }
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(in_h - 1);
    let x1 = (x0 + 1).min(in_w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    Some([
        (y0 * in_w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * in_w + x1, (1.0 - fy) * fx),
        (y1 * in_w + x0, fy * (1.0 - fx)),
        (y1 * in_w + x1, fy * fx),
    ])
}

fn resize_coord(dst: usize, in_len: usize, out_len: usize) -> f64 {
    let s = (dst as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5;
    s.clamp(0.0, (in_len - 1) as f64)
}

impl Taps {
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oy in 0..out_h {
            let sy = resize_coord(oy, in_h, out_h);
            for ox in 0..out_w {
                let sx = resize_coord(ox, in_w, out_w);
                taps.push(bilinear_tap(in_h, in_w, sy, sx));
            }
        }
        Taps {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    /// Counter-clockwise rotation by `degrees` about the image center.
    /// Output pixels whose source lies outside the image are `None`.
    pub fn rotation(h: usize, w: usize, degrees: f64) -> Self {
        let theta = degrees.to_radians();
        let (sin, cos) = theta.sin_cos();
        let cy = (h as f64 - 1.0) / 2.0;
        let cx = (w as f64 - 1.0) / 2.0;
        let mut taps = Vec::with_capacity(h * w);
        for oy in 0..h {
            for ox in 0..w {
                // Inverse map: rotate the output coordinate clockwise.
                let dx = ox as f64 - cx;
                let dy = oy as f64 - cy;
                let sx = cx + cos * dx - sin * dy;
                let sy = cy + sin * dx + cos * dy;
                taps.push(bilinear_tap(h, w, sy, sx));
            }
        }
        Taps {
            in_h: h,
            in_w: w,
            out_h: h,
            out_w: w,
            taps,
        }
    }

    /// Sample one plane; out-of-support pixels take `fill`.
    pub fn apply_plane(&self, src: &[f32], fill: f32, dst: &mut [f32]) {
        debug_assert_eq!(src.len(), self.in_h * self.in_w);
        for (d, tap) in dst.iter_mut().zip(&self.taps) {
            *d = match tap {
                Some(t) => t.iter().map(|&(i, w)| src[i] as f64 * w).sum::<f64>() as f32,
                None => fill,
            };
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_size_resize_is_identity() {
        let taps = Taps::resize(5, 7, 5, 7);
        let src: Vec<f32> = (0..35).map(|v| v as f32 * 0.37).collect();
        let mut dst = vec![0.0; 35];
        taps.apply_plane(&src, 0.0, &mut dst);
        assert_eq!(src, dst);
    }

    #[test]
    fn quarter_turn_permutes_pixels() {
        let taps = Taps::rotation(4, 4, 90.0);
        for tap in &taps.taps {
            let t = tap.expect("inside support");
            assert_eq!(t.iter().filter(|&&(_, w)| w == 1.0).count(), 1);
        }
    }

    #[test]
    fn rotation_corners_leave_support() {
        let taps = Taps::rotation(9, 9, 45.0);
        assert!(taps.taps[0].is_none());
        assert!(taps.taps[4 * 9 + 4].is_some());
    }
}
