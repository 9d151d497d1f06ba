//! Displacement-field utilities: bilinear warping, field resampling and
//! synthetic smooth-field generation.
//!
//! Field convention throughout the crate: `u` maps moving onto fixed sampling
//! positions, `I_fix(x) = I_mov(x − u(x))`. Out-of-bounds reads clamp to the
//! border.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, ComplexImage, DisplacementField, LabelGrid, RealGrid};

#[inline]
fn clampi(v: isize, max: usize) -> usize {
    v.clamp(0, max as isize - 1) as usize
}

/// Bilinear sample of a complex grid at a real-valued position, border
/// clamped; real and imaginary parts interpolate independently.
#[inline]
pub fn sample_bilinear(img: &ComplexGrid, y: f64, x: f64) -> Complex64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let y0i = y0 as isize;
    let x0i = x0 as isize;
    let (ya, yb) = (clampi(y0i, img.h), clampi(y0i + 1, img.h));
    let (xa, xb) = (clampi(x0i, img.w), clampi(x0i + 1, img.w));
    let v00 = img.at(ya, xa);
    let v01 = img.at(ya, xb);
    let v10 = img.at(yb, xa);
    let v11 = img.at(yb, xb);
    v00 * ((1.0 - dy) * (1.0 - dx))
        + v01 * ((1.0 - dy) * dx)
        + v10 * (dy * (1.0 - dx))
        + v11 * (dy * dx)
}

/// Warp: `out(x) = img(x − u(x))` with bilinear interpolation.
pub fn warp_bilinear(img: &ComplexImage, u: &DisplacementField) -> Result<ComplexImage> {
    if img.h != u.h() || img.w != u.w() {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs field {}x{}",
            img.h,
            img.w,
            u.h(),
            u.w()
        )));
    }
    Ok(ComplexGrid::from_fn(img.h, img.w, |y, x| {
        let sy = y as f64 - u.uy.at(y, x);
        let sx = x as f64 - u.ux.at(y, x);
        sample_bilinear(img, sy, sx)
    }))
}

/// Warp an integer label grid with nearest-neighbor lookup (labels must not
/// blend); same field convention as [`warp_bilinear`].
pub fn warp_mask(mask: &LabelGrid, u: &DisplacementField) -> Result<LabelGrid> {
    if mask.h != u.h() || mask.w != u.w() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs field {}x{}",
            mask.h,
            mask.w,
            u.h(),
            u.w()
        )));
    }
    let mut out = LabelGrid::zeros(mask.h, mask.w);
    for y in 0..mask.h {
        for x in 0..mask.w {
            let sy = clampi((y as f64 - u.uy.at(y, x)).round() as isize, mask.h);
            let sx = clampi((x as f64 - u.ux.at(y, x)).round() as isize, mask.w);
            out.data[y * mask.w + x] = mask.at(sy, sx);
        }
    }
    Ok(out)
}

fn sample_bilinear_real(g: &RealGrid, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let y0i = y0 as isize;
    let x0i = x0 as isize;
    let (ya, yb) = (clampi(y0i, g.h), clampi(y0i + 1, g.h));
    let (xa, xb) = (clampi(x0i, g.w), clampi(x0i + 1, g.w));
    g.at(ya, xa) * (1.0 - dy) * (1.0 - dx)
        + g.at(ya, xb) * (1.0 - dy) * dx
        + g.at(yb, xa) * dy * (1.0 - dx)
        + g.at(yb, xb) * dy * dx
}

fn resample_real(g: &RealGrid, h: usize, w: usize) -> RealGrid {
    let sy = g.h as f64 / h as f64;
    let sx = g.w as f64 / w as f64;
    RealGrid::from_fn(h, w, |y, x| {
        // Half-pixel-centered sampling keeps constants exact.
        let py = (y as f64 + 0.5) * sy - 0.5;
        let px = (x as f64 + 0.5) * sx - 0.5;
        sample_bilinear_real(g, py, px)
    })
}

/// Double a field's resolution and its displacement values (pixel units
/// change with resolution): bilinear spatial upsampling by 2, values × 2.
pub fn upscale_field(u: &DisplacementField) -> DisplacementField {
    let (h, w) = (u.h() * 2, u.w() * 2);
    let mut ux = resample_real(&u.ux, h, w);
    let mut uy = resample_real(&u.uy, h, w);
    for v in ux.data.iter_mut().chain(uy.data.iter_mut()) {
        *v *= 2.0;
    }
    DisplacementField { ux, uy }
}

/// Halve a field's resolution (2×2 block mean) and its displacement values;
/// approximate inverse of [`upscale_field`] for smooth fields.
pub fn downscale_field(u: &DisplacementField) -> DisplacementField {
    let (h, w) = (u.h() / 2, u.w() / 2);
    let block = |g: &RealGrid| {
        RealGrid::from_fn(h, w, |y, x| {
            0.5 * 0.25
                * (g.at(2 * y, 2 * x)
                    + g.at(2 * y, 2 * x + 1)
                    + g.at(2 * y + 1, 2 * x)
                    + g.at(2 * y + 1, 2 * x + 1))
        })
    };
    DisplacementField { ux: block(&u.ux), uy: block(&u.uy) }
}

/// Compose displacement updates under the warping convention: if `inner`
/// warps M onto an intermediate image and `update` warps that intermediate
/// onto F, the combined field warping M onto F is
/// `u(x) = update(x) + inner(x − update(x))`.
pub fn compose_fields(inner: &DisplacementField, update: &DisplacementField) -> DisplacementField {
    let (h, w) = (inner.h(), inner.w());
    let mut out = DisplacementField::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            let dy = update.uy.at(y, x);
            let dx = update.ux.at(y, x);
            let sy = y as f64 - dy;
            let sx = x as f64 - dx;
            *out.uy.at_mut(y, x) = dy + sample_bilinear_real(&inner.uy, sy, sx);
            *out.ux.at_mut(y, x) = dx + sample_bilinear_real(&inner.ux, sy, sx);
        }
    }
    out
}

/// Sum of Gaussian-enveloped displacement bumps. Each bump `i` contributes
/// `amplitudes[i] · exp(−‖p − centers[i]‖² / (2·widths[i]²))`; the summed
/// field is rescaled so its peak magnitude equals the largest requested
/// amplitude magnitude exactly.
pub fn synth_gaussian_field(
    centers: &[(f64, f64)],
    amplitudes: &[(f64, f64)],
    widths: &[f64],
    h: usize,
    w: usize,
) -> Result<DisplacementField> {
    if centers.len() != amplitudes.len() || centers.len() != widths.len() {
        return Err(Error::InvalidInput(format!(
            "bump lists disagree: {} centers, {} amplitudes, {} widths",
            centers.len(),
            amplitudes.len(),
            widths.len()
        )));
    }
    if widths.iter().any(|&s| s <= 0.0) {
        return Err(Error::InvalidInput("bump widths must be positive".into()));
    }
    let mut field = DisplacementField::zeros(h, w);
    if centers.is_empty() {
        return Ok(field);
    }
    for y in 0..h {
        for x in 0..w {
            let (mut ax, mut ay) = (0.0, 0.0);
            for (((cy, cx), (aux, auy)), sig) in
                centers.iter().zip(amplitudes).zip(widths)
            {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let g = (-(dy * dy + dx * dx) / (2.0 * sig * sig)).exp();
                ax += aux * g;
                ay += auy * g;
            }
            *field.ux.at_mut(y, x) = ax;
            *field.uy.at_mut(y, x) = ay;
        }
    }
    let peak = field.max_norm();
    let want = amplitudes
        .iter()
        .map(|&(ax, ay)| (ax * ax + ay * ay).sqrt())
        .fold(0.0f64, f64::max);
    if peak > 0.0 && want > 0.0 {
        let s = want / peak;
        for v in field.ux.data.iter_mut().chain(field.uy.data.iter_mut()) {
            *v *= s;
        }
    }
    Ok(field)
}

/// Jacobian determinant of the map `x ↦ x + u(x)` at every interior pixel,
/// by central differences. Positive everywhere means locally invertible.
pub fn jacobian_determinants(u: &DisplacementField) -> RealGrid {
    let (h, w) = (u.h(), u.w());
    RealGrid::from_fn(h, w, |y, x| {
        if y == 0 || x == 0 || y == h - 1 || x == w - 1 {
            return 1.0;
        }
        let dux_dx = (u.ux.at(y, x + 1) - u.ux.at(y, x - 1)) / 2.0;
        let dux_dy = (u.ux.at(y + 1, x) - u.ux.at(y - 1, x)) / 2.0;
        let duy_dx = (u.uy.at(y, x + 1) - u.uy.at(y, x - 1)) / 2.0;
        let duy_dy = (u.uy.at(y + 1, x) - u.uy.at(y - 1, x)) / 2.0;
        (1.0 + dux_dx) * (1.0 + duy_dy) - dux_dy * duy_dx
    })
}
