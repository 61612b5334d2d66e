//! Lossy block-transform round trip: colour conversion, 8x8 DCT,
//! quality-scaled quantization and reconstruction. No entropy coding.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::image::Image;

const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Quantization table for `quality` in `[1, 100]`.
pub fn quant_table(base: &[u16; 64], quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        let v = (b as u32 * scale + 50) / 100;
        *o = v.clamp(1, 255) as f64;
    }
    out
}

/// Orthonormal DCT-II basis, `basis[u][x]`.
fn basis() -> &'static [[f64; 8]; 8] {
    static B: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    B.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let c = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = c * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Quantize and reconstruct one level-shifted plane in place.
fn roundtrip_plane(plane: &mut [f64], h: usize, w: usize, table: &[f64; 64]) {
    let mut block = [0.0; 64];
    for by in (0..h).step_by(8) {
        for bx in (0..w).step_by(8) {
            // Edge replication for partial blocks.
            for y in 0..8 {
                for x in 0..8 {
                    let sy = (by + y).min(h - 1);
                    let sx = (bx + x).min(w - 1);
                    block[y * 8 + x] = plane[sy * w + sx];
                }
            }
            let mut coef = dct8x8(&block);
            for (c, q) in coef.iter_mut().zip(table) {
                *c = (*c / q).round() * q;
            }
            let rec = idct8x8(&coef);
            for y in 0..8.min(h - by) {
                for x in 0..8.min(w - bx) {
                    plane[(by + y) * w + bx + x] = rec[y * 8 + x];
                }
            }
        }
    }
}

pub fn jpeg_compress(img: &Image, quality: u32) -> Result<Image> {
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("jpeg quality must be in [1, 100], got {quality}")));
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let luma = quant_table(&LUMA, quality);
    let chroma = quant_table(&CHROMA, quality);
    let to_byte = |v: f32| (v.clamp(0.0, 1.0) as f64 * 255.0).round();
    let mut out = vec![0.0f32; h * w * c];

    if c == 3 {
        let n = h * w;
        let (mut yp, mut cb, mut cr) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for (i, px) in img.data().chunks(3).enumerate() {
            let (r, g, b) = (to_byte(px[0]), to_byte(px[1]), to_byte(px[2]));
            yp[i] = 0.299 * r + 0.587 * g + 0.114 * b - 128.0;
            cb[i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b;
            cr[i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b;
        }
        roundtrip_plane(&mut yp, h, w, &luma);
        roundtrip_plane(&mut cb, h, w, &chroma);
        roundtrip_plane(&mut cr, h, w, &chroma);
        for i in 0..n {
            let y = yp[i] + 128.0;
            let rgb = [
                y + 1.402 * cr[i],
                y - 0.344_136 * cb[i] - 0.714_136 * cr[i],
                y + 1.772 * cb[i],
            ];
            for (k, v) in rgb.iter().enumerate() {
                out[i * 3 + k] = (v.round().clamp(0.0, 255.0) / 255.0) as f32;
            }
        }
    } else {
        // Each channel coded as an independent luminance plane.
        for (k, plane) in img.to_planes().iter().enumerate() {
            let mut p: Vec<f64> = plane.iter().map(|&v| to_byte(v) - 128.0).collect();
            roundtrip_plane(&mut p, h, w, &luma);
            for (i, v) in p.iter().enumerate() {
                out[i * c + k] = ((v + 128.0).round().clamp(0.0, 255.0) / 255.0) as f32;
            }
        }
    }
    Image::new(h, w, c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quality_scaling_matches_reference_points() {
        assert_eq!(quant_table(&LUMA, 50)[0], 16.0);
        assert!(quant_table(&LUMA, 100).iter().all(|&v| v == 1.0));
        // q = 10 -> scale 500: 16 * 5 = 80, and 121 * 5 saturates.
        let t = quant_table(&LUMA, 10);
        assert_eq!(t[0], 80.0);
        assert_eq!(t[6 * 8 + 5], 255.0);
    }

    #[test]
    fn dct_is_orthonormal() {
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 19) as f64 - 9.0;
        }
        let rec = idct8x8(&dct8x8(&block));
        for (a, b) in block.iter().zip(&rec) {
            assert!((a - b).abs() < 1e-9);
        }
        let flat = dct8x8(&[3.0; 64]);
        assert!((flat[0] - 24.0).abs() < 1e-12);
        assert!(flat[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn rejects_out_of_range_quality() {
        let img = Image::filled(8, 8, 3, 0.5);
        assert!(jpeg_compress(&img, 0).is_err());
        assert!(jpeg_compress(&img, 101).is_err());
    }

    #[test]
    fn flat_gray_survives_any_quality() {
        let img = Image::filled(10, 13, 3, 128.0 / 255.0);
        let out = jpeg_compress(&img, 1).unwrap();
        for v in out.data() {
            assert!((v - 128.0 / 255.0).abs() < 1e-6);
        }
    }
}
