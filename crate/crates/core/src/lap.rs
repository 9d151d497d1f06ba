//! Classical Local All-Pass registration.
//!
//! The displacement between two images is modeled, window by window, as an
//! all-pass filtering relation: a small real FIR stencil `p` satisfying
//! `p ∗ I_mov = p̄ ∗ I_fix` (with `p̄` the spatially reversed stencil). The
//! stencil is found by weighted least squares with the center tap fixed to 1,
//! and converts to a local translation via `u = 2·(first moment)/(sum)`.
//! A coarse-to-fine window pyramid accumulates a dense field.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, DisplacementField, RealGrid};
use crate::kspace::{fft2_centered, ifft2_centered};
use crate::motion::{compose_fields, warp_bilinear};

/// A local all-pass FIR stencil of odd size `(2r+1) × (2r+1)`.
#[derive(Debug, Clone)]
pub struct AllPassFilter {
    pub r: usize,
    pub coeffs: RealGrid,
    /// Relative least-squares residual of the forward–backward relation.
    pub residual: f64,
}

/// 1D raised-cosine taper of length `width` placed at offset `start` in a
/// grid of length `n`; all ones when the window spans the whole axis.
fn taper_1d(n: usize, start: usize, width: usize) -> Vec<f64> {
    let mut w = vec![0.0; n];
    if width >= n {
        w.fill(1.0);
        return w;
    }
    for i in 0..width {
        let t = (i as f64 + 0.5) / width as f64;
        w[start + i] = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * t).cos());
    }
    w
}

/// Multiply the image behind `k_full` by a smooth raised-cosine window
/// centered at `center = (y, x)` with square support `width`, returning the
/// k-space of the windowed image. (Windowing in image space is exactly the
/// stated k-space convolution with the window's spectrum.)
pub fn taper_window(k_full: &ComplexGrid, center: (usize, usize), width: usize) -> Result<ComplexGrid> {
    if width < 4 {
        return Err(Error::InvalidInput("taper width must be ≥ 4".into()));
    }
    let (cy, cx) = center;
    let half = width / 2;
    if cy < half || cx < half || cy + half > k_full.h || cx + half > k_full.w {
        return Err(Error::InvalidInput(format!(
            "window (center ({cy},{cx}), width {width}) outside {}x{} bounds",
            k_full.h, k_full.w
        )));
    }
    let wy = taper_1d(k_full.h, cy - half, width);
    let wx = taper_1d(k_full.w, cx - half, width);
    let img = ifft2_centered(k_full)?;
    let windowed = ComplexGrid::from_fn(img.h, img.w, |y, x| img.at(y, x) * (wy[y] * wx[x]));
    fft2_centered(&windowed)
}

/// Solve a symmetric positive-definite system by Cholesky with a small ridge;
/// a non-positive pivot flags rank deficiency.
fn cholesky_solve(mut m: Vec<Vec<f64>>, mut rhs: Vec<f64>) -> Result<Vec<f64>> {
    let n = rhs.len();
    let ridge = 1e-9 * (0..n).map(|i| m[i][i]).sum::<f64>().max(1e-300) / n as f64;
    for (i, row) in m.iter_mut().enumerate() {
        row[i] += ridge;
    }
    // In-place LLᵀ.
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i][j];
            for k in 0..j {
                s -= m[i][k] * m[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::InsufficientSignal(
                        "rank-deficient normal equations".into(),
                    ));
                }
                m[i][i] = s.sqrt();
            } else {
                m[i][j] = s / m[j][j];
            }
        }
    }
    // Forward then backward substitution.
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= m[i][k] * rhs[k];
        }
        rhs[i] = s / m[i][i];
    }
    for i in (0..n).rev() {
        let mut s = rhs[i];
        for k in i + 1..n {
            s -= m[k][i] * rhs[k];
        }
        rhs[i] = s / m[i][i];
    }
    Ok(rhs)
}

/// Estimate the local all-pass stencil relating two image windows: weighted
/// least squares on `p ∗ mov_win = p̄ ∗ fix_win` over the window interior,
/// raised-cosine equation weights, center tap fixed to 1.
pub fn estimate_local_allpass(
    fix_win: &ComplexGrid,
    mov_win: &ComplexGrid,
    r: usize,
) -> Result<AllPassFilter> {
    fix_win.check_same_shape(mov_win, "window pair")?;
    if !(1..=3).contains(&r) {
        return Err(Error::InvalidInput(format!("stencil radius {r} outside 1..=3")));
    }
    let (h, w) = (fix_win.h, fix_win.w);
    let side = 2 * r + 1;
    if h < side + 3 || w < side + 3 {
        return Err(Error::InvalidInput(format!(
            "window {h}x{w} too small for radius {r}"
        )));
    }
    // Stencil offsets, center excluded (its coefficient is the fixed gauge).
    let offsets: Vec<(isize, isize)> = (-(r as isize)..=r as isize)
        .flat_map(|sy| (-(r as isize)..=r as isize).map(move |sx| (sy, sx)))
        .filter(|&(sy, sx)| !(sy == 0 && sx == 0))
        .collect();
    let nk = offsets.len();
    let wy = taper_1d(h, 0, h);
    let wx = taper_1d(w, 0, w);
    let mut normal = vec![vec![0.0f64; nk]; nk];
    let mut rhs = vec![0.0f64; nk];
    let mut b_energy = 0.0f64;
    let mut a_row = vec![Complex64::default(); nk];
    for y in r..h - r {
        for x in r..w - r {
            let weight = wy[y] * wx[x];
            if weight <= 0.0 {
                continue;
            }
            for (j, &(sy, sx)) in offsets.iter().enumerate() {
                let my = (y as isize - sy) as usize;
                let mx = (x as isize - sx) as usize;
                let fy = (y as isize + sy) as usize;
                let fx = (x as isize + sx) as usize;
                a_row[j] = mov_win.at(my, mx) - fix_win.at(fy, fx);
            }
            let b = fix_win.at(y, x) - mov_win.at(y, x);
            b_energy += weight * b.norm_sqr();
            for i in 0..nk {
                let ai = a_row[i];
                rhs[i] += weight * (ai.conj() * b).re;
                for j in i..nk {
                    normal[i][j] += weight * (ai.conj() * a_row[j]).re;
                }
            }
        }
    }
    for i in 0..nk {
        for j in 0..i {
            normal[i][j] = normal[j][i];
        }
    }
    let c = cholesky_solve(normal, rhs)?;
    // Residual of the weighted relation, relative to the zero-stencil error.
    let mut r_energy = 0.0f64;
    for y in r..h - r {
        for x in r..w - r {
            let weight = wy[y] * wx[x];
            if weight <= 0.0 {
                continue;
            }
            let mut res = mov_win.at(y, x) - fix_win.at(y, x);
            for (j, &(sy, sx)) in offsets.iter().enumerate() {
                let my = (y as isize - sy) as usize;
                let mx = (x as isize - sx) as usize;
                let fy = (y as isize + sy) as usize;
                let fx = (x as isize + sx) as usize;
                res += (mov_win.at(my, mx) - fix_win.at(fy, fx)) * c[j];
            }
            r_energy += weight * res.norm_sqr();
        }
    }
    let residual = (r_energy.sqrt()) / (b_energy.sqrt() + 1e-30);
    let mut coeffs = RealGrid::zeros(side, side);
    *coeffs.at_mut(r, r) = 1.0;
    for (j, &(sy, sx)) in offsets.iter().enumerate() {
        *coeffs.at_mut((sy + r as isize) as usize, (sx + r as isize) as usize) = c[j];
    }
    Ok(AllPassFilter { r, coeffs, residual })
}

/// Convert a stencil to its equivalent local translation:
/// `u = 2 · (first moment of coeffs) / (sum of coeffs)` per axis.
pub fn filter_to_displacement(f: &AllPassFilter) -> Result<(f64, f64)> {
    let side = 2 * f.r + 1;
    let mut sum = 0.0;
    let mut mx = 0.0;
    let mut my = 0.0;
    let mut abs_sum = 0.0;
    for y in 0..side {
        for x in 0..side {
            let v = f.coeffs.at(y, x);
            sum += v;
            abs_sum += v.abs();
            mx += (x as f64 - f.r as f64) * v;
            my += (y as f64 - f.r as f64) * v;
        }
    }
    if sum.abs() < 1e-12 * abs_sum.max(1e-300) {
        return Err(Error::InsufficientSignal("zero coefficient sum".into()));
    }
    Ok((2.0 * mx / sum, 2.0 * my / sum))
}

/// One window's accepted local estimate.
struct WindowEstimate {
    cy: f64,
    cx: f64,
    ux: f64,
    uy: f64,
    residual: f64,
}

/// Window centers tiling one axis with stride `width/2`, windows fully inside.
fn window_centers(n: usize, width: usize) -> Vec<usize> {
    let half = width / 2;
    let mut out = Vec::new();
    let mut c = half;
    while c + half <= n {
        out.push(c);
        c += half;
    }
    let last = n - half;
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

fn extract_patch(img: &ComplexGrid, cy: usize, cx: usize, width: usize) -> ComplexGrid {
    let half = width / 2;
    ComplexGrid::from_fn(width, width, |y, x| img.at(cy - half + y, cx - half + x))
}

/// Normalized Gaussian radial-basis interpolation of scattered window
/// estimates to a dense field.
fn scatter_to_dense(
    estimates: &[WindowEstimate],
    h: usize,
    w: usize,
    sigma: f64,
) -> DisplacementField {
    let mut out = DisplacementField::zeros(h, w);
    let inv = 1.0 / (2.0 * sigma * sigma);
    for y in 0..h {
        for x in 0..w {
            let mut sw = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for e in estimates {
                let dy = y as f64 - e.cy;
                let dx = x as f64 - e.cx;
                let g = (-(dy * dy + dx * dx) * inv).exp();
                sw += g;
                sx += g * e.ux;
                sy += g * e.uy;
            }
            if sw > 1e-300 {
                *out.ux.at_mut(y, x) = sx / sw;
                *out.uy.at_mut(y, x) = sy / sw;
            }
        }
    }
    out
}

fn photometric_residual(fix: &ComplexGrid, mov: &ComplexGrid, u: &DisplacementField) -> f64 {
    let warped = warp_bilinear(mov, u).expect("shapes agree");
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, t) in fix.data.iter().zip(&warped.data) {
        num += (f - t).norm_sqr();
        den += f.norm_sqr();
    }
    (num / den.max(1e-300)).sqrt()
}

/// Default coarse-to-fine window widths: full field of view, then halves
/// down to 1/8 (clamped to a sane minimum).
pub fn default_window_schedule(h: usize, w: usize, levels: usize) -> Vec<usize> {
    let base = h.min(w);
    (0..levels).map(|l| (base >> l).max(8)).collect()
}

/// Coarse-to-fine Local All-Pass registration of two single-coil k-spaces.
/// Per level: tile windows (stride = width/2), estimate local stencils,
/// convert to displacements, reject outliers (> 3× median residual or
/// non-physical magnitude), interpolate to a dense increment, re-warp. A
/// level that worsens the photometric residual by more than 1% is rolled
/// back, so refinement is monotone.
pub fn lap_register_multiscale(
    k_fix: &ComplexGrid,
    k_mov: &ComplexGrid,
    levels: usize,
    window_schedule: &[usize],
) -> Result<DisplacementField> {
    k_fix.check_same_shape(k_mov, "k-space pair")?;
    if levels < 1 {
        return Err(Error::InvalidInput("need at least one level".into()));
    }
    if window_schedule.len() != levels {
        return Err(Error::InvalidInput(format!(
            "window schedule has {} entries for {levels} levels",
            window_schedule.len()
        )));
    }
    if k_fix.h % 2 != 0 || k_fix.w % 2 != 0 {
        return Err(Error::InvalidInput("multiscale registration needs even sizes".into()));
    }
    let (h, w) = (k_fix.h, k_fix.w);
    let fix = ifft2_centered(k_fix)?;
    let mov = ifft2_centered(k_mov)?;
    let mut total = DisplacementField::zeros(h, w);
    let mut best_residual = photometric_residual(&fix, &mov, &total);
    for (level, &width) in window_schedule.iter().enumerate() {
        let width = width.min(h.min(w));
        let r = (3usize.saturating_sub(level)).max(1);
        let warped = warp_bilinear(&mov, &total)?;
        let mut raw: Vec<WindowEstimate> = Vec::new();
        for &cy in &window_centers(h, width) {
            for &cx in &window_centers(w, width) {
                let fw = extract_patch(&fix, cy, cx, width);
                let mw = extract_patch(&warped, cy, cx, width);
                let Ok(filt) = estimate_local_allpass(&fw, &mw, r) else {
                    continue;
                };
                let Ok((ux, uy)) = filter_to_displacement(&filt) else {
                    continue;
                };
                if !(ux.is_finite() && uy.is_finite()) {
                    continue;
                }
                if ux.hypot(uy) > width as f64 / 2.0 {
                    continue;
                }
                raw.push(WindowEstimate {
                    cy: cy as f64,
                    cx: cx as f64,
                    ux,
                    uy,
                    residual: filt.residual,
                });
            }
        }
        let mut residuals: Vec<f64> = raw.iter().map(|e| e.residual).collect();
        residuals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let survivors: Vec<WindowEstimate> = if residuals.is_empty() {
            Vec::new()
        } else {
            let median = residuals[residuals.len() / 2];
            raw.into_iter().filter(|e| e.residual <= 3.0 * median).collect()
        };
        if survivors.is_empty() {
            if level == 0 {
                return Err(Error::InsufficientSignal(
                    "no usable window at the coarsest level".into(),
                ));
            }
            continue;
        }
        let du = scatter_to_dense(&survivors, h, w, width as f64 / 2.0);
        let candidate = compose_fields(&total, &du);
        let candidate_residual = photometric_residual(&fix, &mov, &candidate);
        if candidate_residual <= best_residual * 1.01 {
            total = candidate;
            best_residual = best_residual.min(candidate_residual);
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::apply_phase_ramp;
    use crate::phantom::{phantom_cine, PhantomConfig};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn phantom_frame() -> ComplexGrid {
        phantom_cine(&PhantomConfig::default(), 2).unwrap().frames[0].clone()
    }

    /// Moving image observing `I_fix(x) = I_mov(x − u)` for a global `u`.
    fn translate(fix: &ComplexGrid, ux: f64, uy: f64) -> ComplexGrid {
        let k = fft2_centered(fix).unwrap();
        ifft2_centered(&apply_phase_ramp(&k, -ux, -uy)).unwrap()
    }

    #[test]
    fn full_width_taper_is_identity() {
        let img = phantom_frame();
        let k = fft2_centered(&img).unwrap();
        let t = taper_window(&k, (32, 32), 64).unwrap();
        for (a, b) in t.data.iter().zip(&k.data) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn taper_reduces_energy_and_matches_direct_windowing() {
        let img = phantom_frame();
        let k = fft2_centered(&img).unwrap();
        let t = taper_window(&k, (24, 40), 16).unwrap();
        assert!(t.energy() <= k.energy() + 1e-12);
        // Inverse transform equals direct image-domain windowing.
        let back = ifft2_centered(&t).unwrap();
        let wy = taper_1d(64, 16, 16);
        let wx = taper_1d(64, 32, 16);
        for y in 0..64 {
            for x in 0..64 {
                let direct = img.at(y, x) * wy[y] * wx[x];
                assert!((back.at(y, x) - direct).norm() < 1e-12);
            }
        }
        // Out-of-bounds window rejected.
        assert!(taper_window(&k, (2, 32), 16).is_err());
        assert!(taper_window(&k, (32, 32), 2).is_err());
    }

    #[test]
    fn identical_windows_give_zero_displacement() {
        let img = phantom_frame();
        let win = extract_patch(&img, 32, 32, 32);
        let f = estimate_local_allpass(&win, &win, 2).unwrap();
        let (ux, uy) = filter_to_displacement(&f).unwrap();
        assert!(ux.abs() < 1e-9 && uy.abs() < 1e-9, "u = ({ux},{uy})");
        assert!(f.residual < 1e-9);
    }

    #[test]
    fn unit_shift_recovered_within_tenth_pixel() {
        let fix = phantom_frame();
        let mov = translate(&fix, 1.0, 0.0);
        let fw = extract_patch(&fix, 32, 32, 32);
        let mw = extract_patch(&mov, 32, 32, 32);
        let f = estimate_local_allpass(&fw, &mw, 2).unwrap();
        let (ux, uy) = filter_to_displacement(&f).unwrap();
        assert!((ux - 1.0).abs() < 0.1, "ux = {ux}");
        assert!(uy.abs() < 0.1, "uy = {uy}");
    }

    #[test]
    fn noise_windows_rejected_by_residual() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        // Residual of a genuinely shifted pair, as the reference point.
        let fix = phantom_frame();
        let mov = translate(&fix, 1.0, 0.0);
        let good = estimate_local_allpass(
            &extract_patch(&fix, 32, 32, 16),
            &extract_patch(&mov, 32, 32, 16),
            2,
        )
        .unwrap()
        .residual;
        let mut exceed = 0usize;
        for _ in 0..1000 {
            let a = ComplexGrid::from_fn(16, 16, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let b = ComplexGrid::from_fn(16, 16, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let f = estimate_local_allpass(&a, &b, 2).unwrap();
            if f.residual > 5.0 * good {
                exceed += 1;
            }
        }
        assert!(exceed == 1000, "only {exceed}/1000 noise trials above threshold");
    }

    #[test]
    fn displacement_extraction_properties() {
        // Symmetric stencil → zero first moment → u = 0.
        let mut sym = AllPassFilter { r: 1, coeffs: RealGrid::zeros(3, 3), residual: 0.0 };
        for (i, v) in [0.1, 0.2, 0.1, 0.2, 1.0, 0.2, 0.1, 0.2, 0.1].iter().enumerate() {
            sym.coeffs.data[i] = *v;
        }
        let (ux, uy) = filter_to_displacement(&sym).unwrap();
        assert!(ux.abs() < 1e-12 && uy.abs() < 1e-12);

        // Stencil realizing shift-by-one along x: center and right tap equal.
        let mut shift = AllPassFilter { r: 1, coeffs: RealGrid::zeros(3, 3), residual: 0.0 };
        *shift.coeffs.at_mut(1, 1) = 1.0;
        *shift.coeffs.at_mut(1, 2) = 1.0;
        let (ux, uy) = filter_to_displacement(&shift).unwrap();
        assert!((ux - 1.0).abs() < 0.05 && uy.abs() < 0.05);

        // Scaling all coefficients leaves u unchanged.
        let mut scaled = shift.clone();
        for v in &mut scaled.coeffs.data {
            *v *= -3.7;
        }
        let (sx, sy) = filter_to_displacement(&scaled).unwrap();
        assert!((sx - ux).abs() < 1e-12 && (sy - uy).abs() < 1e-12);

        // Zero coefficient sum is rejected.
        let mut zero = AllPassFilter { r: 1, coeffs: RealGrid::zeros(3, 3), residual: 0.0 };
        *zero.coeffs.at_mut(1, 0) = 1.0;
        *zero.coeffs.at_mut(1, 2) = -1.0;
        assert!(filter_to_displacement(&zero).is_err());
    }

    #[test]
    fn identical_kspaces_give_zero_field() {
        let img = phantom_frame();
        let k = fft2_centered(&img).unwrap();
        let u = lap_register_multiscale(&k, &k, 3, &[64, 32, 16]).unwrap();
        assert!(u.max_norm() < 0.05, "max |u| = {}", u.max_norm());
    }

    #[test]
    fn global_shift_recovered() {
        let fix = phantom_frame();
        let mov = translate(&fix, 2.0, -1.0);
        let kf = fft2_centered(&fix).unwrap();
        let km = fft2_centered(&mov).unwrap();
        let u = lap_register_multiscale(&kf, &km, 3, &[64, 32, 16]).unwrap();
        let (mx, my) = u.mean();
        assert!((mx - 2.0).abs() < 0.1, "mean ux = {mx}");
        assert!((my + 1.0).abs() < 0.1, "mean uy = {my}");
    }

    #[test]
    fn integer_shifts_up_to_quarter_window_recovered() {
        let fix = phantom_frame();
        for (ux, uy) in [(4.0, 0.0), (0.0, -6.0), (3.0, 3.0)] {
            let mov = translate(&fix, ux, uy);
            let kf = fft2_centered(&fix).unwrap();
            let km = fft2_centered(&mov).unwrap();
            let u = lap_register_multiscale(&kf, &km, 2, &[64, 32]).unwrap();
            let (mx, my) = u.mean();
            assert!(
                (mx - ux).abs() < 0.1 && (my - uy).abs() < 0.1,
                "shift ({ux},{uy}) recovered as ({mx},{my})"
            );
        }
    }

    #[test]
    fn phantom_contraction_registered_below_half_pixel() {
        let scene = phantom_cine(&PhantomConfig::default(), 4).unwrap();
        let fix = &scene.frames[2];
        let mov = &scene.frames[0];
        let truth = scene.field(2, 0).unwrap();
        let kf = fft2_centered(fix).unwrap();
        let km = fft2_centered(mov).unwrap();
        let u = lap_register_multiscale(&kf, &km, 4, &[64, 32, 16, 8]).unwrap();
        let mut epe = 0.0;
        for i in 0..u.ux.data.len() {
            let dx = u.ux.data[i] - truth.ux.data[i];
            let dy = u.uy.data[i] - truth.uy.data[i];
            epe += dx.hypot(dy);
        }
        epe /= u.ux.data.len() as f64;
        assert!(epe < 0.5, "mean endpoint error {epe}");
    }

    #[test]
    fn refinement_is_monotone_on_phantom() {
        // The multiscale driver rolls back any level that worsens the
        // photometric residual by > 1%; check the end-to-end outcome beats
        // the zero-field baseline by a clear margin.
        let scene = phantom_cine(&PhantomConfig::default(), 4).unwrap();
        let fix = &scene.frames[2];
        let mov = &scene.frames[0];
        let kf = fft2_centered(fix).unwrap();
        let km = fft2_centered(mov).unwrap();
        let zero = photometric_residual(fix, mov, &DisplacementField::zeros(64, 64));
        let mut prev = f64::INFINITY;
        for levels in 1..=4 {
            let schedule = default_window_schedule(64, 64, levels);
            let u = lap_register_multiscale(&kf, &km, levels, &schedule).unwrap();
            let res = photometric_residual(fix, mov, &u);
            assert!(res <= prev * 1.01, "level {levels} residual {res} vs {prev}");
            prev = res;
        }
        assert!(prev < 0.5 * zero, "final {prev} vs baseline {zero}");
    }
}
