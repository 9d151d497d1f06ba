//! Figure emission: binary PGM/PPM writers, grayscale normalization, and the
//! optical-flow color-wheel encoding for displacement fields.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, DisplacementField, RealGrid};

/// Binary (P5) PGM bytes for a grayscale image already quantized to u8.
pub fn pgm_bytes(h: usize, w: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != h * w {
        return Err(Error::ShapeMismatch(format!(
            "pgm payload: expected {} pixels, found {}",
            h * w,
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(h * w + 32);
    write!(out, "P5\n{} {}\n255\n", w, h)?;
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Binary (P6) PPM bytes for an interleaved RGB image.
pub fn ppm_bytes(h: usize, w: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != 3 * h * w {
        return Err(Error::ShapeMismatch(format!(
            "ppm payload: expected {} bytes, found {}",
            3 * h * w,
            rgb.len()
        )));
    }
    let mut out = Vec::with_capacity(3 * h * w + 32);
    write!(out, "P6\n{} {}\n255\n", w, h)?;
    out.extend_from_slice(rgb);
    Ok(out)
}

/// Quantize a real grid into u8 over the range [lo, hi]; values are clamped.
/// A degenerate range maps everything to 0.
pub fn quantize(grid: &RealGrid, lo: f64, hi: f64) -> Vec<u8> {
    let span = hi - lo;
    grid.data
        .iter()
        .map(|&v| {
            if span > 0.0 && v.is_finite() {
                (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Grayscale PGM of a real grid normalized to its own min/max.
pub fn grid_to_pgm(grid: &RealGrid) -> Result<Vec<u8>> {
    let lo = grid.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = grid.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    pgm_bytes(grid.h, grid.w, &quantize(grid, lo, hi))
}

/// Grayscale PGM of a complex image's magnitude, normalized to [0, max].
pub fn magnitude_to_pgm(img: &ComplexGrid) -> Result<Vec<u8>> {
    let mag = img.magnitude();
    let hi = mag.data.iter().cloned().fold(0.0f64, f64::max);
    pgm_bytes(mag.h, mag.w, &quantize(&mag, 0.0, hi))
}

/// Grayscale PGM of |a - b| normalized to the provided maximum (or the
/// observed maximum when `None`).
pub fn error_map_pgm(a: &ComplexGrid, b: &ComplexGrid, max: Option<f64>) -> Result<Vec<u8>> {
    a.check_same_shape(b, "error map images")?;
    let err = RealGrid::from_fn(a.h, a.w, |y, x| (a.at(y, x) - b.at(y, x)).norm());
    let hi = max.unwrap_or_else(|| err.data.iter().cloned().fold(0.0f64, f64::max));
    pgm_bytes(err.h, err.w, &quantize(&err, 0.0, hi))
}

// Color wheel segment lengths (RY, YG, GC, CB, BM, MR) of the standard
// optical-flow visualization; 55 entries total.
const WHEEL_SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]),
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]),
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for &(len, from, to) in &WHEEL_SEGMENTS {
        for i in 0..len {
            let t = i as f64 / len as f64;
            wheel.push([
                from[0] + t * (to[0] - from[0]),
                from[1] + t * (to[1] - from[1]),
                from[2] + t * (to[2] - from[2]),
            ]);
        }
    }
    wheel
}

/// Color-wheel encoding of a displacement field: hue encodes direction,
/// saturation encodes magnitude relative to `max_norm` (the field's own
/// maximum when `None`). Zero motion renders white. Returns interleaved RGB.
pub fn flow_to_rgb(field: &DisplacementField, max_norm: Option<f64>) -> Vec<u8> {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let scale = match max_norm {
        Some(m) if m > 0.0 => m,
        _ => field.max_norm().max(1e-12),
    };
    let (h, w) = (field.h(), field.w());
    let mut rgb = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        let fx = field.ux.data[i] / scale;
        let fy = field.uy.data[i] / scale;
        let rad = (fx * fx + fy * fy).sqrt().min(1.0);
        let angle = (-fy).atan2(-fx) / std::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols as f64 - 1.0);
        let k0 = (fk.floor() as usize).min(ncols - 1);
        let k1 = (k0 + 1) % ncols;
        let f = fk - k0 as f64;
        for ch in 0..3 {
            let col = (1.0 - f) * wheel[k0][ch] + f * wheel[k1][ch];
            // Fade towards white at zero magnitude.
            let v = 1.0 - rad * (1.0 - col);
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    rgb
}

/// PPM bytes of the color-wheel flow rendering.
pub fn flow_to_ppm(field: &DisplacementField, max_norm: Option<f64>) -> Result<Vec<u8>> {
    ppm_bytes(field.h(), field.w(), &flow_to_rgb(field, max_norm))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}
