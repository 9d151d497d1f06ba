//! Centered unitary Fourier transforms, the shift/all-pass identity,
//! multi-coil forward/adjoint sampling operators, coil compression and
//! intensity normalization.
//!
//! Conventions: the DFT is unitary (1/√(HW) in both directions) and centered,
//! `fft2_centered = shift ∘ DFT ∘ inverse_shift`, so the zero-frequency sample
//! sits at `(⌊H/2⌋, ⌊W/2⌋)`. The angular-frequency grid along an axis of
//! length `n` is `k_p = 2π(p − ⌊n/2⌋)/n ∈ [−π, π)`.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::grid::{CoilSensitivityMap, ComplexGrid, ComplexImage, MultiCoilKSpace};
use crate::sampling::{self, SamplingPattern, Trajectory};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

/// Centered angular-frequency grid: `k_p = 2π(p − ⌊n/2⌋)/n`.
pub fn centered_freq_grid(n: usize) -> Vec<f64> {
    let c = (n / 2) as f64;
    (0..n)
        .map(|p| 2.0 * std::f64::consts::PI * (p as f64 - c) / n as f64)
        .collect()
}

/// Circularly roll a grid by `(dy, dx)`: output(y, x) = input(y − dy, x − dx).
fn roll(g: &ComplexGrid, dy: isize, dx: isize) -> ComplexGrid {
    let (h, w) = (g.h as isize, g.w as isize);
    ComplexGrid::from_fn(g.h, g.w, |y, x| {
        let sy = (y as isize - dy).rem_euclid(h) as usize;
        let sx = (x as isize - dx).rem_euclid(w) as usize;
        g.at(sy, sx)
    })
}

/// Move the zero-frequency sample from the grid origin to the grid center
/// (`fftshift`): roll by `+⌊n/2⌋` along both axes.
pub fn zero_frequency_shift(g: &ComplexGrid) -> ComplexGrid {
    roll(g, (g.h / 2) as isize, (g.w / 2) as isize)
}

/// Move the zero-frequency sample from the grid center back to the origin
/// (`ifftshift`): roll by `−⌊n/2⌋` along both axes. Inverse of
/// [`zero_frequency_shift`]; an involution on even-sized grids.
pub fn inverse_zero_frequency_shift(g: &ComplexGrid) -> ComplexGrid {
    roll(g, -((g.h / 2) as isize), -((g.w / 2) as isize))
}

/// [`inverse_zero_frequency_shift`] applied to every coil.
pub fn inverse_zero_frequency_shift_multicoil(k: &MultiCoilKSpace) -> MultiCoilKSpace {
    MultiCoilKSpace { coils: k.coils.iter().map(inverse_zero_frequency_shift).collect() }
}

/// Unnormalized in-place 2D FFT over rows then columns.
fn fft2_raw(g: &mut ComplexGrid, inverse: bool) {
    let (h, w) = (g.h, g.w);
    let fft_w = plan(w, inverse);
    let mut scratch = vec![Complex64::default(); fft_w.get_inplace_scratch_len()];
    for row in g.data.chunks_exact_mut(w) {
        fft_w.process_with_scratch(row, &mut scratch);
    }
    // Columns: transpose, run rows, transpose back.
    let mut t = vec![Complex64::default(); h * w];
    for y in 0..h {
        for x in 0..w {
            t[x * h + y] = g.data[y * w + x];
        }
    }
    let fft_h = plan(h, inverse);
    scratch.resize(fft_h.get_inplace_scratch_len(), Complex64::default());
    for col in t.chunks_exact_mut(h) {
        fft_h.process_with_scratch(col, &mut scratch);
    }
    for x in 0..w {
        for y in 0..h {
            g.data[y * w + x] = t[x * h + y];
        }
    }
}

fn check_finite(g: &ComplexGrid, what: &str) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

/// Centered unitary 2D DFT.
pub fn fft2_centered(img: &ComplexImage) -> Result<ComplexGrid> {
    check_finite(img, "fft2_centered input")?;
    let mut g = inverse_zero_frequency_shift(img);
    fft2_raw(&mut g, false);
    let scale = 1.0 / ((img.h * img.w) as f64).sqrt();
    for v in &mut g.data {
        *v *= scale;
    }
    Ok(zero_frequency_shift(&g))
}

/// Centered unitary inverse 2D DFT; exact inverse of [`fft2_centered`].
pub fn ifft2_centered(k: &ComplexGrid) -> Result<ComplexGrid> {
    check_finite(k, "ifft2_centered input")?;
    let mut g = inverse_zero_frequency_shift(k);
    fft2_raw(&mut g, true);
    let scale = 1.0 / ((k.h * k.w) as f64).sqrt();
    for v in &mut g.data {
        *v *= scale;
    }
    Ok(zero_frequency_shift(&g))
}

/// Multiply a centered k-space grid by the phase ramp `exp(−j uᵀ𝐤)` for a
/// global translation `u = (ux, uy)` in pixels. For integer `u` this is
/// exactly a circular shift in image space: the inverse transform satisfies
/// `out(y, x) = in(y − uy, x − ux)`.
pub fn apply_phase_ramp(k: &ComplexGrid, ux: f64, uy: f64) -> ComplexGrid {
    let kx = centered_freq_grid(k.w);
    let ky = centered_freq_grid(k.h);
    let px: Vec<Complex64> =
        kx.iter().map(|&f| Complex64::from_polar(1.0, -ux * f)).collect();
    let py: Vec<Complex64> =
        ky.iter().map(|&f| Complex64::from_polar(1.0, -uy * f)).collect();
    ComplexGrid::from_fn(k.h, k.w, |y, x| k.at(y, x) * py[y] * px[x])
}

/// All-pass filter frequency response `H(𝐤) = exp(−j uᵀ𝐤)` on the centered
/// grid; `|H| = 1` everywhere.
pub fn all_pass_filter_response(ux: f64, uy: f64, h: usize, w: usize) -> ComplexGrid {
    let kx = centered_freq_grid(w);
    let ky = centered_freq_grid(h);
    ComplexGrid::from_fn(h, w, |y, x| Complex64::from_polar(1.0, -(ux * kx[x] + uy * ky[y])))
}

fn check_coils(img: &ComplexImage, coils: &CoilSensitivityMap) -> Result<()> {
    if coils.maps.is_empty() {
        return Err(Error::InvalidInput("need at least one coil map".into()));
    }
    for m in &coils.maps {
        img.check_same_shape(m, "coil map vs image")?;
    }
    Ok(())
}

/// Multi-coil forward operator `A`: per coil, Fourier-transform the
/// coil-weighted image and sample it with the given pattern. Cartesian
/// patterns return masked H×W grids (unsampled entries exactly zero); radial
/// patterns return one `n_spokes × n_readout` grid of direct-DFT spoke
/// samples per coil.
pub fn multicoil_forward(
    img: &ComplexImage,
    coils: &CoilSensitivityMap,
    pattern: &SamplingPattern,
) -> Result<MultiCoilKSpace> {
    check_coils(img, coils)?;
    let mut out = Vec::with_capacity(coils.n_coils());
    for m in &coils.maps {
        let weighted = ComplexGrid {
            h: img.h,
            w: img.w,
            data: img.data.iter().zip(&m.data).map(|(&a, &b)| a * b).collect(),
        };
        let sampled = match &pattern.traj {
            Trajectory::CartesianLines { .. } => {
                sampling::apply_line_mask(&fft2_centered(&weighted)?, pattern)?
            }
            Trajectory::RadialSpokes { .. } => sampling::radial_sample(&weighted, pattern)?,
        };
        out.push(sampled);
    }
    MultiCoilKSpace::new(out)
}

/// Multi-coil backward operation on gridded k-space:
/// `Σ_c conj(coil_c) ⊙ ifft2_centered(k_c)`. With normalized coil maps and
/// full sampling this reconstructs the image exactly.
pub fn multicoil_adjoint(k: &MultiCoilKSpace, coils: &CoilSensitivityMap) -> Result<ComplexImage> {
    if k.n_coils() != coils.n_coils() {
        return Err(Error::ShapeMismatch(format!(
            "{} k-space coils vs {} maps",
            k.n_coils(),
            coils.n_coils()
        )));
    }
    let mut out = ComplexGrid::zeros(k.h(), k.w());
    for (kc, m) in k.coils.iter().zip(&coils.maps) {
        kc.check_same_shape(m, "k-space coil vs map")?;
        let img = ifft2_centered(kc)?;
        for ((o, &v), &s) in out.data.iter_mut().zip(&img.data).zip(&m.data) {
            *o += s.conj() * v;
        }
    }
    Ok(out)
}

/// Exact adjoint `Aᴴ` of [`multicoil_forward`] for arbitrary probe data:
/// re-applies the sampling projection (Cartesian) or runs the spoke-domain
/// adjoint DFT (radial) before the coil-weighted combination.
pub fn multicoil_adjoint_sampled(
    k: &MultiCoilKSpace,
    coils: &CoilSensitivityMap,
    pattern: &SamplingPattern,
) -> Result<ComplexImage> {
    if k.n_coils() != coils.n_coils() {
        return Err(Error::ShapeMismatch(format!(
            "{} k-space coils vs {} maps",
            k.n_coils(),
            coils.n_coils()
        )));
    }
    match &pattern.traj {
        Trajectory::CartesianLines { .. } => {
            let masked = MultiCoilKSpace::new(
                k.coils
                    .iter()
                    .map(|c| sampling::apply_line_mask(c, pattern))
                    .collect::<Result<_>>()?,
            )?;
            multicoil_adjoint(&masked, coils)
        }
        Trajectory::RadialSpokes { .. } => {
            let (h, w) = (coils.h(), coils.w());
            let mut out = ComplexGrid::zeros(h, w);
            for (kc, m) in k.coils.iter().zip(&coils.maps) {
                let img = sampling::radial_sample_adjoint(kc, pattern, h, w)?;
                for ((o, &v), &s) in out.data.iter_mut().zip(&img.data).zip(&m.data) {
                    *o += s.conj() * v;
                }
            }
            Ok(out)
        }
    }
}

/// Scale so the maximum magnitude equals 1; phase is preserved.
pub fn normalize_max(img: &ComplexImage) -> Result<ComplexImage> {
    check_finite(img, "normalize_max input")?;
    let m = img.max_abs();
    if m <= 0.0 {
        return Err(Error::InsufficientSignal("normalize_max on all-zero image".into()));
    }
    let s = 1.0 / m;
    Ok(ComplexGrid { h: img.h, w: img.w, data: img.data.iter().map(|&c| c * s).collect() })
}

/// Eigendecomposition of a Hermitian matrix by cyclic complex Jacobi
/// rotations. Returns eigenvalues (descending) and the matching orthonormal
/// eigenvectors as columns.
fn hermitian_eig(a: &[Vec<Complex64>]) -> (Vec<f64>, Vec<Vec<Complex64>>) {
    let n = a.len();
    let mut m: Vec<Vec<Complex64>> = a.to_vec();
    // q starts as identity; columns accumulate the eigenvectors.
    let mut q: Vec<Vec<Complex64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0))
                .collect()
        })
        .collect();
    let norm: f64 = m
        .iter()
        .flat_map(|r| r.iter())
        .map(|c| c.norm_sqr())
        .sum::<f64>()
        .sqrt();
    let tol = 1e-14 * norm.max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            break;
        }
        for p in 0..n {
            for r in (p + 1)..n {
                let apq = m[p][r];
                if apq.norm() <= tol / (n as f64) {
                    continue;
                }
                // Phase factor makes the pivot real, then a real Jacobi
                // rotation annihilates it: V = diag(1, e^{−jφ}) · R(θ).
                let phi = apq.arg();
                let rmag = apq.norm();
                let alpha = m[p][p].re;
                let gamma = m[r][r].re;
                let tau = (gamma - alpha) / (2.0 * rmag);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                // V = D·R with D = diag(1, e^{−jφ}), R = [[c, s], [−s, c]],
                // i.e. V = [[c, s], [−s·e^{−jφ}, c·e^{−jφ}]].
                let e = Complex64::from_polar(1.0, -phi);
                let vpp = Complex64::new(c, 0.0);
                let vpr = Complex64::new(s, 0.0);
                let vrp = -Complex64::new(s, 0.0) * e;
                let vrr = Complex64::new(c, 0.0) * e;
                // M ← Vᴴ M V ; Q ← Q V, touching only rows/cols p and r.
                for i in 0..n {
                    let mip = m[i][p];
                    let mir = m[i][r];
                    m[i][p] = mip * vpp + mir * vrp;
                    m[i][r] = mip * vpr + mir * vrr;
                }
                for j in 0..n {
                    let mpj = m[p][j];
                    let mrj = m[r][j];
                    m[p][j] = vpp.conj() * mpj + vrp.conj() * mrj;
                    m[r][j] = vpr.conj() * mpj + vrr.conj() * mrj;
                }
                for i in 0..n {
                    let qip = q[i][p];
                    let qir = q[i][r];
                    q[i][p] = qip * vpp + qir * vrp;
                    q[i][r] = qip * vpr + qir * vrr;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m[i][i].re).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let sorted_vecs: Vec<Vec<Complex64>> =
        order.iter().map(|&c| (0..n).map(|i| q[i][c]).collect()).collect();
    (sorted_vals, sorted_vecs)
}

/// Compress the coil dimension onto the `n_out` leading left singular vectors
/// of the coil-by-sample matrix; retained energy is maximal among rank-`n_out`
/// coil projections. Output coil `i` is `u_iᴴ · data`.
pub fn coil_compress_svd(k: &MultiCoilKSpace, n_out: usize) -> Result<MultiCoilKSpace> {
    let n_c = k.n_coils();
    if n_out < 1 {
        return Err(Error::InvalidInput("coil compression needs n_out ≥ 1".into()));
    }
    if n_out > n_c {
        return Err(Error::InvalidInput(format!(
            "n_out {n_out} exceeds coil count {n_c}"
        )));
    }
    // Gram matrix G = C Cᴴ over the coil dimension.
    let mut g = vec![vec![Complex64::default(); n_c]; n_c];
    for i in 0..n_c {
        for j in i..n_c {
            let mut acc = Complex64::default();
            for (a, b) in k.coils[i].data.iter().zip(&k.coils[j].data) {
                acc += a * b.conj();
            }
            g[i][j] = acc;
            g[j][i] = acc.conj();
        }
    }
    let (_vals, vecs) = hermitian_eig(&g);
    let (h, w) = (k.h(), k.w());
    let mut out = Vec::with_capacity(n_out);
    for u in vecs.iter().take(n_out) {
        let mut grid = ComplexGrid::zeros(h, w);
        for (ci, coil) in k.coils.iter().enumerate() {
            let coef = u[ci].conj();
            for (o, &v) in grid.data.iter_mut().zip(&coil.data) {
                *o += coef * v;
            }
        }
        out.push(grid);
    }
    MultiCoilKSpace::new(out)
}

/// Smooth synthetic receive-coil sensitivities: Gaussian magnitude profiles
/// centered on a ring of virtual coil positions with a mild linear phase,
/// normalized pixelwise so `Σ_c |map_c|² = 1` exactly everywhere.
pub fn synthetic_coil_maps(h: usize, w: usize, n_c: usize) -> CoilSensitivityMap {
    assert!(n_c >= 1, "need at least one coil");
    let (hc, wc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let radius = 0.55 * (h.min(w) as f64);
    let sigma = 0.6 * (h.max(w) as f64);
    let mut maps = Vec::with_capacity(n_c);
    for c in 0..n_c {
        let ang = 2.0 * std::f64::consts::PI * c as f64 / n_c as f64;
        let (cy, cx) = (hc + radius * ang.sin(), wc + radius * ang.cos());
        // Gentle coil-specific linear phase; zero for a single coil so the
        // trivial map is purely real.
        let (py, px) = if n_c == 1 {
            (0.0, 0.0)
        } else {
            (0.7 * ang.sin() / h as f64, 0.7 * ang.cos() / w as f64)
        };
        maps.push(ComplexGrid::from_fn(h, w, |y, x| {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            let mag = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            let phase = py * (y as f64 - hc) + px * (x as f64 - wc);
            Complex64::from_polar(mag, phase)
        }));
    }
    // Pixelwise normalization to an exact partition of unity.
    for y in 0..h {
        for x in 0..w {
            let s: f64 = maps.iter().map(|m| m.at(y, x).norm_sqr()).sum();
            let inv = 1.0 / s.sqrt();
            for m in &mut maps {
                *m.at_mut(y, x) *= inv;
            }
        }
    }
    CoilSensitivityMap { maps }
}
