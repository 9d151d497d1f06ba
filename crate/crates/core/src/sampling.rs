//! Sampling trajectories: VISTA-style Cartesian line masks, golden-angle
//! radial spokes, retrospective undersampling and acceleration bookkeeping.
//!
//! Cartesian masks select phase-encode lines (rows of k-space). Radial spokes
//! are sampled by direct evaluation of the continuous 2D DFT at equispaced
//! k-locations along each spoke, and gridded back with density-compensated
//! nearest-neighbor accumulation.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, ComplexImage, LabelGrid, MultiCoilKSpace};
use crate::kspace::centered_freq_grid;

/// Golden-angle increment Θ_G = π·(√5−1)/2 ≈ 111.246°, the standard value
/// from the golden-angle radial sampling literature.
pub const GOLDEN_ANGLE: f64 = PI * 0.6180339887498949;

/// How one frame of k-space is sampled.
#[derive(Debug, Clone, PartialEq)]
pub enum Trajectory {
    /// Boolean mask over phase-encode lines (one entry per k-space row).
    CartesianLines { mask: Vec<bool> },
    /// Radial spokes through the k-space center: one angle per spoke in
    /// [0, π) and a shared readout sample count spanning κ ∈ [−π, π).
    RadialSpokes { angles: Vec<f64>, n_readout: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPattern {
    pub frame_index: usize,
    pub traj: Trajectory,
}

impl SamplingPattern {
    pub fn validate(&self) -> Result<()> {
        match &self.traj {
            Trajectory::CartesianLines { mask } => {
                if !mask.iter().any(|&b| b) {
                    return Err(Error::InvalidInput("cartesian mask has no active line".into()));
                }
            }
            Trajectory::RadialSpokes { angles, n_readout } => {
                if *n_readout < 2 {
                    return Err(Error::InvalidInput("radial readout count must be ≥ 2".into()));
                }
                if angles.iter().any(|&a| !(0.0..PI).contains(&a)) {
                    return Err(Error::InvalidInput("spoke angle outside [0, π)".into()));
                }
            }
        }
        Ok(())
    }

    /// Lines (Cartesian) or spokes (radial) kept in this frame.
    pub fn kept_count(&self) -> usize {
        match &self.traj {
            Trajectory::CartesianLines { mask } => mask.iter().filter(|&&b| b).count(),
            Trajectory::RadialSpokes { angles, .. } => angles.len(),
        }
    }
}

/// Acceleration factor bookkeeping: R = full_count / frame_count.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelerationReport {
    pub full_count: usize,
    pub frame_count: usize,
    pub r: f64,
}

pub fn acceleration(full_count: usize, frame_count: usize) -> Result<AccelerationReport> {
    if frame_count == 0 || full_count == 0 {
        return Err(Error::InvalidInput("counts must be positive".into()));
    }
    if frame_count > full_count {
        return Err(Error::InvalidInput(format!(
            "frame count {frame_count} exceeds full count {full_count} (R < 1)"
        )));
    }
    Ok(AccelerationReport {
        full_count,
        frame_count,
        r: full_count as f64 / frame_count as f64,
    })
}

/// Fully sampled Cartesian pattern over `n_pe` lines.
pub fn cartesian_full(n_pe: usize) -> SamplingPattern {
    SamplingPattern { frame_index: 0, traj: Trajectory::CartesianLines { mask: vec![true; n_pe] } }
}

/// Cartesian pattern keeping the given line indices.
pub fn cartesian_lines(n_pe: usize, lines: &[usize]) -> SamplingPattern {
    let mut mask = vec![false; n_pe];
    for &l in lines {
        mask[l] = true;
    }
    SamplingPattern { frame_index: 0, traj: Trajectory::CartesianLines { mask } }
}

fn frame_rng(seed: u64, frame: u64, attempt: u64) -> ChaCha20Rng {
    let mut s = [0u8; 32];
    s[0..8].copy_from_slice(&seed.to_le_bytes());
    s[8..16].copy_from_slice(&frame.to_le_bytes());
    s[16..24].copy_from_slice(&attempt.to_le_bytes());
    s[24..32].copy_from_slice(b"vistalik");
    ChaCha20Rng::from_seed(s)
}

fn draw_frame_mask(n_pe: usize, lines_per_frame: usize, rng: &mut ChaCha20Rng) -> Vec<bool> {
    let center = n_pe / 2;
    let sigma = n_pe as f64 / 6.0;
    let mut mask = vec![false; n_pe];
    mask[center] = true;
    // Gaussian-shaped density over line offsets, sampled without replacement.
    let mut weights: Vec<f64> = (0..n_pe)
        .map(|l| {
            let d = l as f64 - center as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    weights[center] = 0.0;
    for _ in 1..lines_per_frame {
        let total: f64 = weights.iter().sum();
        let mut t = rng.gen::<f64>() * total;
        let mut pick = n_pe - 1;
        for (l, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if t < w {
                pick = l;
                break;
            }
            t -= w;
        }
        // Walk fell off the end on rounding: take the last weighted line.
        if weights[pick] <= 0.0 {
            pick = weights
                .iter()
                .rposition(|&w| w > 0.0)
                .expect("lines_per_frame ≤ n_pe leaves a candidate");
        }
        mask[pick] = true;
        weights[pick] = 0.0;
    }
    mask
}

/// Variable-density incoherent Cartesian mask sequence: every frame keeps the
/// central line plus `lines_per_frame − 1` lines drawn without replacement
/// from a Gaussian density over line offsets (σ = n_pe/6). Consecutive frames
/// are redrawn (deterministically) if they coincide, unless the draw is
/// forced. This approximates variable-density incoherent spatio-temporal
/// sampling; it is not the published VISTA optimization.
pub fn vista_like_mask(
    n_pe: usize,
    n_frames: usize,
    lines_per_frame: usize,
    seed: u64,
) -> Result<Vec<SamplingPattern>> {
    if lines_per_frame < 1 || lines_per_frame > n_pe {
        return Err(Error::InvalidInput(format!(
            "lines_per_frame {lines_per_frame} outside 1..={n_pe}"
        )));
    }
    // One admissible mask only: every frame is forced to coincide.
    let forced = lines_per_frame == 1 || lines_per_frame == n_pe;
    let mut out: Vec<SamplingPattern> = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut mask = Vec::new();
        for attempt in 0..16u64 {
            let mut rng = frame_rng(seed, f as u64, attempt);
            mask = draw_frame_mask(n_pe, lines_per_frame, &mut rng);
            let same_as_prev = out.last().map_or(false, |p| match &p.traj {
                Trajectory::CartesianLines { mask: prev } => prev == &mask,
                _ => false,
            });
            if forced || !same_as_prev {
                break;
            }
        }
        out.push(SamplingPattern { frame_index: f, traj: Trajectory::CartesianLines { mask } });
    }
    Ok(out)
}

/// Golden-angle spoke set: `angle_i = ((start_index + i)·Θ_G) mod π`.
pub fn golden_angle_spokes(n_spokes: usize, start_index: usize, n_readout: usize) -> SamplingPattern {
    let angles = (0..n_spokes)
        .map(|i| ((start_index + i) as f64 * GOLDEN_ANGLE).rem_euclid(PI))
        .collect();
    SamplingPattern { frame_index: 0, traj: Trajectory::RadialSpokes { angles, n_readout } }
}

/// Zero every non-selected phase-encode line of a single grid.
pub fn apply_line_mask(k: &ComplexGrid, pattern: &SamplingPattern) -> Result<ComplexGrid> {
    let Trajectory::CartesianLines { mask } = &pattern.traj else {
        return Err(Error::InvalidInput("pattern is not cartesian".into()));
    };
    if mask.len() != k.h {
        return Err(Error::ShapeMismatch(format!(
            "mask covers {} lines, grid has {}",
            mask.len(),
            k.h
        )));
    }
    let mut out = k.clone();
    for (y, &keep) in mask.iter().enumerate() {
        if !keep {
            out.data[y * k.w..(y + 1) * k.w].fill(Complex64::new(0.0, 0.0));
        }
    }
    Ok(out)
}

/// Zero every non-selected phase-encode line in every coil.
pub fn apply_cartesian_mask(k: &MultiCoilKSpace, pattern: &SamplingPattern) -> Result<MultiCoilKSpace> {
    MultiCoilKSpace::new(
        k.coils.iter().map(|c| apply_line_mask(c, pattern)).collect::<Result<_>>()?,
    )
}

/// Readout k-radii κ_i = 2π(i − ⌊n_r/2⌋)/n_r spanning [−π, π).
fn readout_radii(n_readout: usize) -> Vec<f64> {
    centered_freq_grid(n_readout)
}

/// Direct-summation DFT of `img` at one k-location (kx, ky), using the same
/// centered unitary convention as `fft2_centered`. The row/column phase
/// factors are returned by `spoke_factors` so forward and adjoint share the
/// exact same arithmetic.
fn spoke_factors(kx: f64, ky: f64, h: usize, w: usize) -> (Vec<Complex64>, Vec<Complex64>) {
    let cy = (h / 2) as f64;
    let cx = (w / 2) as f64;
    let col: Vec<Complex64> =
        (0..h).map(|y| Complex64::from_polar(1.0, -ky * (y as f64 - cy))).collect();
    let row: Vec<Complex64> =
        (0..w).map(|x| Complex64::from_polar(1.0, -kx * (x as f64 - cx))).collect();
    (col, row)
}

/// Evaluate the continuous 2D DFT of `img` at the equispaced radial
/// k-locations of each spoke. Output grid: one row per spoke, one column per
/// readout sample.
pub fn radial_sample(img: &ComplexImage, pattern: &SamplingPattern) -> Result<ComplexGrid> {
    let Trajectory::RadialSpokes { angles, n_readout } = &pattern.traj else {
        return Err(Error::InvalidInput("pattern is not radial".into()));
    };
    let (h, w) = (img.h, img.w);
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let radii = readout_radii(*n_readout);
    let mut out = ComplexGrid::zeros(angles.len(), *n_readout);
    let mut row_acc = vec![Complex64::default(); h];
    for (s, &ang) in angles.iter().enumerate() {
        let (dir_x, dir_y) = (ang.cos(), ang.sin());
        for (i, &kappa) in radii.iter().enumerate() {
            let (col, row) = spoke_factors(kappa * dir_x, kappa * dir_y, h, w);
            for (y, acc) in row_acc.iter_mut().enumerate() {
                let mut a = Complex64::default();
                for (v, f) in img.data[y * w..(y + 1) * w].iter().zip(&row) {
                    a += v * f;
                }
                *acc = a;
            }
            let total: Complex64 = row_acc.iter().zip(&col).map(|(a, f)| a * f).sum();
            *out.at_mut(s, i) = total * scale;
        }
    }
    Ok(out)
}

/// Exact adjoint of [`radial_sample`]: scatter spoke samples back with the
/// conjugate phase factors.
pub fn radial_sample_adjoint(
    spokes: &ComplexGrid,
    pattern: &SamplingPattern,
    h: usize,
    w: usize,
) -> Result<ComplexGrid> {
    let Trajectory::RadialSpokes { angles, n_readout } = &pattern.traj else {
        return Err(Error::InvalidInput("pattern is not radial".into()));
    };
    if spokes.h != angles.len() || spokes.w != *n_readout {
        return Err(Error::ShapeMismatch(format!(
            "spoke grid {}x{} vs pattern {}x{}",
            spokes.h,
            spokes.w,
            angles.len(),
            n_readout
        )));
    }
    let scale = 1.0 / ((h * w) as f64).sqrt();
    let radii = readout_radii(*n_readout);
    let mut out = ComplexGrid::zeros(h, w);
    for (s, &ang) in angles.iter().enumerate() {
        let (dir_x, dir_y) = (ang.cos(), ang.sin());
        for (i, &kappa) in radii.iter().enumerate() {
            let (col, row) = spoke_factors(kappa * dir_x, kappa * dir_y, h, w);
            let v = spokes.at(s, i) * scale;
            for y in 0..h {
                let vy = v * col[y].conj();
                for (o, f) in out.data[y * w..(y + 1) * w].iter_mut().zip(&row) {
                    *o += vy * f.conj();
                }
            }
        }
    }
    Ok(out)
}

/// Nearest Cartesian cell for a k-location, or None when it falls outside.
fn nearest_cell(kx: f64, ky: f64, h: usize, w: usize) -> Option<(usize, usize)> {
    let px = (kx * w as f64 / (2.0 * PI)).round() as isize + (w / 2) as isize;
    let py = (ky * h as f64 / (2.0 * PI)).round() as isize + (h / 2) as isize;
    if px < 0 || py < 0 || px >= w as isize || py >= h as isize {
        None
    } else {
        Some((py as usize, px as usize))
    }
}

/// Density-compensated adjoint gridding of spoke samples onto the Cartesian
/// grid: ramp |κ| weights with nearest-neighbor accumulation and overlap
/// averaging. Cells no spoke touches stay exactly zero; the zero-radius
/// samples (weight 0) fall back to a plain average.
pub fn radial_adjoint_grid(
    spokes: &ComplexGrid,
    pattern: &SamplingPattern,
    h: usize,
    w: usize,
) -> Result<ComplexGrid> {
    let Trajectory::RadialSpokes { angles, n_readout } = &pattern.traj else {
        return Err(Error::InvalidInput("pattern is not radial".into()));
    };
    if spokes.h != angles.len() || spokes.w != *n_readout {
        return Err(Error::ShapeMismatch(format!(
            "spoke grid {}x{} vs pattern {}x{}",
            spokes.h,
            spokes.w,
            angles.len(),
            n_readout
        )));
    }
    let radii = readout_radii(*n_readout);
    let mut num = vec![Complex64::default(); h * w];
    let mut den = vec![0.0f64; h * w];
    let mut plain = vec![Complex64::default(); h * w];
    let mut count = vec![0u32; h * w];
    for (s, &ang) in angles.iter().enumerate() {
        let (dir_x, dir_y) = (ang.cos(), ang.sin());
        for (i, &kappa) in radii.iter().enumerate() {
            let Some((py, px)) = nearest_cell(kappa * dir_x, kappa * dir_y, h, w) else {
                continue;
            };
            let idx = py * w + px;
            let wgt = kappa.abs();
            num[idx] += spokes.at(s, i) * wgt;
            den[idx] += wgt;
            plain[idx] += spokes.at(s, i);
            count[idx] += 1;
        }
    }
    let mut out = ComplexGrid::zeros(h, w);
    for idx in 0..h * w {
        out.data[idx] = if den[idx] > 0.0 {
            num[idx] / den[idx]
        } else if count[idx] > 0 {
            plain[idx] / count[idx] as f64
        } else {
            Complex64::new(0.0, 0.0)
        };
    }
    Ok(out)
}

/// Cells of an H×W grid touched by the pattern: whole rows for Cartesian
/// masks, rasterized spoke samples for radial patterns.
pub fn pattern_support(pattern: &SamplingPattern, h: usize, w: usize) -> Result<LabelGrid> {
    let mut out = LabelGrid::zeros(h, w);
    match &pattern.traj {
        Trajectory::CartesianLines { mask } => {
            if mask.len() != h {
                return Err(Error::ShapeMismatch(format!(
                    "mask covers {} lines, grid has {h}",
                    mask.len()
                )));
            }
            for (y, &keep) in mask.iter().enumerate() {
                if keep {
                    out.data[y * w..(y + 1) * w].fill(1);
                }
            }
        }
        Trajectory::RadialSpokes { angles, n_readout } => {
            let radii = readout_radii(*n_readout);
            for &ang in angles {
                let (dir_x, dir_y) = (ang.cos(), ang.sin());
                for &kappa in &radii {
                    if let Some((py, px)) = nearest_cell(kappa * dir_x, kappa * dir_y, h, w) {
                        out.data[py * w + px] = 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Serialize a homogeneous pattern sequence to CSV: `frame,line` rows for
/// Cartesian masks, `frame,angle` rows for radial spoke sets.
pub fn patterns_to_csv(patterns: &[SamplingPattern]) -> Result<String> {
    let Some(first) = patterns.first() else {
        return Err(Error::InvalidInput("no patterns to serialize".into()));
    };
    let cartesian = matches!(first.traj, Trajectory::CartesianLines { .. });
    let mut out = String::from(if cartesian { "frame,line\n" } else { "frame,angle\n" });
    for p in patterns {
        match (&p.traj, cartesian) {
            (Trajectory::CartesianLines { mask }, true) => {
                for (l, &keep) in mask.iter().enumerate() {
                    if keep {
                        out.push_str(&format!("{},{}\n", p.frame_index, l));
                    }
                }
            }
            (Trajectory::RadialSpokes { angles, .. }, false) => {
                for &a in angles {
                    out.push_str(&format!("{},{}\n", p.frame_index, a));
                }
            }
            _ => {
                return Err(Error::InvalidInput("mixed trajectory kinds in one CSV".into()));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kspace::ifft2_centered;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn acceleration_anchor_points() {
        let cart = acceleration(156, 2).unwrap();
        assert_eq!(cart.r, 78.0);
        let rad = acceleration(312, 3).unwrap();
        assert_eq!(rad.r, 104.0);
        assert!(acceleration(10, 20).is_err());
        assert!(acceleration(0, 1).is_err());
    }

    #[test]
    fn fully_sampled_mask_is_all_ones_r1() {
        let pats = vista_like_mask(32, 3, 32, 7).unwrap();
        for p in &pats {
            assert_eq!(p.kept_count(), 32);
        }
        let rep = acceleration(32, pats[0].kept_count()).unwrap();
        assert_eq!(rep.r, 1.0);
    }

    #[test]
    fn vista_keeps_center_and_exact_line_budget() {
        let n_pe = 156;
        let pats = vista_like_mask(n_pe, 25, 2, 1).unwrap();
        assert_eq!(pats.len(), 25);
        for p in &pats {
            assert_eq!(p.kept_count(), 2);
            let Trajectory::CartesianLines { mask } = &p.traj else { unreachable!() };
            assert!(mask[n_pe / 2], "central line missing in frame {}", p.frame_index);
        }
        let rep = acceleration(n_pe, 2).unwrap();
        assert_eq!(rep.r, 78.0);
    }

    #[test]
    fn vista_is_deterministic_and_incoherent() {
        let a = vista_like_mask(64, 30, 4, 42).unwrap();
        let b = vista_like_mask(64, 30, 4, 42).unwrap();
        assert_eq!(a, b);
        let c = vista_like_mask(64, 30, 4, 43).unwrap();
        assert_ne!(a, c);
        // No two consecutive frames identical (not forced here).
        for pair in a.windows(2) {
            assert_ne!(pair[0].traj, pair[1].traj);
        }
        // Forced case: a single line per frame collapses to the central line.
        let f = vista_like_mask(64, 5, 1, 0).unwrap();
        for p in &f {
            assert_eq!(p.kept_count(), 1);
        }
    }

    #[test]
    fn vista_density_decays_from_center() {
        let n_pe = 96;
        let pats = vista_like_mask(n_pe, 400, 8, 3).unwrap();
        let mut hits = vec![0usize; n_pe];
        for p in &pats {
            let Trajectory::CartesianLines { mask } = &p.traj else { unreachable!() };
            for (l, &k) in mask.iter().enumerate() {
                if k {
                    hits[l] += 1;
                }
            }
        }
        let inner: usize = hits[n_pe / 2 - n_pe / 8..n_pe / 2 + n_pe / 8].iter().sum();
        let outer: usize =
            hits[..n_pe / 8].iter().sum::<usize>() + hits[n_pe - n_pe / 8..].iter().sum::<usize>();
        assert!(
            inner > 3 * outer,
            "expected center-heavy sampling, inner {inner} vs outer {outer}"
        );
    }

    #[test]
    fn vista_rejects_oversized_budget() {
        assert!(vista_like_mask(16, 2, 17, 0).is_err());
    }

    #[test]
    fn golden_angle_progression() {
        let p = golden_angle_spokes(1, 0, 64);
        let Trajectory::RadialSpokes { angles, .. } = &p.traj else { unreachable!() };
        assert_eq!(angles[0], 0.0);

        let p = golden_angle_spokes(200, 5, 64);
        p.validate().unwrap();
        let Trajectory::RadialSpokes { angles, .. } = &p.traj else { unreachable!() };
        assert!((GOLDEN_ANGLE.to_degrees() - 111.246).abs() < 1e-3);
        for w in angles.windows(2) {
            let gap = (w[1] - w[0]).rem_euclid(PI);
            assert!((gap - GOLDEN_ANGLE.rem_euclid(PI)).abs() < 1e-12);
        }
        // Pairwise distinct for moderate counts.
        let mut sorted = angles.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for w in sorted.windows(2) {
            assert!(w[1] - w[0] > 1e-9);
        }
        // Start index shifts the sequence.
        let q = golden_angle_spokes(200, 6, 64);
        let Trajectory::RadialSpokes { angles: qa, .. } = &q.traj else { unreachable!() };
        assert!((qa[0] - angles[1]).abs() < 1e-12);
    }

    #[test]
    fn line_mask_application_is_idempotent_projection() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let grid = ComplexGrid::from_fn(16, 16, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let k = MultiCoilKSpace::new(vec![grid]).unwrap();
        let full = cartesian_full(16);
        assert_eq!(apply_cartesian_mask(&k, &full).unwrap(), k);

        let pat = cartesian_lines(16, &[2, 8]);
        let once = apply_cartesian_mask(&k, &pat).unwrap();
        let twice = apply_cartesian_mask(&once, &pat).unwrap();
        assert_eq!(once, twice);
        let nz = once.coils[0].data.iter().filter(|v| v.norm() > 0.0).count();
        assert_eq!(nz, 2 * 16);
    }

    #[test]
    fn radial_dc_sample_is_image_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(10);
        let img = ComplexGrid::from_fn(12, 12, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let pat = golden_angle_spokes(3, 0, 16);
        let s = radial_sample(&img, &pat).unwrap();
        let dc: Complex64 = img.data.iter().sum::<Complex64>() / 12.0;
        for spoke in 0..3 {
            assert!((s.at(spoke, 8) - dc).norm() < 1e-12);
        }
        // Zero image → zero samples.
        let z = radial_sample(&ComplexGrid::zeros(12, 12), &pat).unwrap();
        assert!(z.max_abs() == 0.0);
    }

    #[test]
    fn axis_spoke_matches_projection_slice_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let img = ComplexGrid::from_fn(16, 16, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let pat = SamplingPattern {
            frame_index: 0,
            traj: Trajectory::RadialSpokes { angles: vec![0.0], n_readout: 16 },
        };
        let s = radial_sample(&img, &pat).unwrap();
        // Projection along y, then a centered 1D DFT over x.
        let proj: Vec<Complex64> =
            (0..16).map(|x| (0..16).map(|y| img.at(y, x)).sum()).collect();
        let radii = centered_freq_grid(16);
        for (i, &kappa) in radii.iter().enumerate() {
            let oracle: Complex64 = proj
                .iter()
                .enumerate()
                .map(|(x, &v)| v * Complex64::from_polar(1.0, -kappa * (x as f64 - 8.0)))
                .sum::<Complex64>()
                / 16.0;
            assert!((s.at(0, i) - oracle).norm() < 1e-8);
        }
    }

    #[test]
    fn radial_forward_adjoint_pair_passes_inner_product_test() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let pat = golden_angle_spokes(5, 2, 20);
        for _ in 0..10 {
            let x = ComplexGrid::from_fn(16, 16, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let y = ComplexGrid::from_fn(5, 20, |_, _| {
                Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let ax = radial_sample(&x, &pat).unwrap();
            let aty = radial_sample_adjoint(&y, &pat, 16, 16).unwrap();
            let lhs: Complex64 =
                ax.data.iter().zip(&y.data).map(|(&a, &b)| a * b.conj()).sum();
            let rhs: Complex64 =
                x.data.iter().zip(&aty.data).map(|(&a, &b)| a * b.conj()).sum();
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn gridding_support_is_rasterized_spokes_and_zero_spokes_give_zero() {
        let pat = golden_angle_spokes(4, 0, 32);
        let spokes = ComplexGrid::from_fn(4, 32, |s, i| {
            Complex64::new((s + 1) as f64, (i as f64) * 0.1)
        });
        let grid = radial_adjoint_grid(&spokes, &pat, 24, 24).unwrap();
        let support = pattern_support(&pat, 24, 24).unwrap();
        for idx in 0..24 * 24 {
            if support.data[idx] == 0 {
                assert_eq!(grid.data[idx], Complex64::new(0.0, 0.0));
            }
        }
        let empty = SamplingPattern {
            frame_index: 0,
            traj: Trajectory::RadialSpokes { angles: vec![], n_readout: 32 },
        };
        let z = radial_adjoint_grid(&ComplexGrid::zeros(0, 32), &empty, 24, 24).unwrap();
        assert!(z.max_abs() == 0.0);
    }

    #[test]
    fn dense_spokes_reconstruct_smooth_phantom() {
        // Gaussian blob, 32×32; ≥ πH/2 ≈ 51 spokes covers the grid densely.
        let img = ComplexGrid::from_fn(32, 32, |y, x| {
            let dy = y as f64 - 16.0;
            let dx = x as f64 - 13.0;
            Complex64::new((-(dy * dy + dx * dx) / 40.0).exp(), 0.0)
        });
        let pat = golden_angle_spokes(51, 0, 64);
        let spokes = radial_sample(&img, &pat).unwrap();
        let grid = radial_adjoint_grid(&spokes, &pat, 32, 32).unwrap();
        let rec = ifft2_centered(&grid).unwrap();
        let mut se = 0.0f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (r, t) in img.data.iter().zip(&rec.data) {
            se += (r - t).norm_sqr();
            lo = lo.min(r.norm());
            hi = hi.max(r.norm());
        }
        let nrmse = (se / (32.0 * 32.0)).sqrt() / (hi - lo);
        assert!(nrmse < 0.15, "dense radial reconstruction NRMSE {nrmse}");
    }

    #[test]
    fn csv_serialization_formats() {
        let pats = vec![cartesian_lines(8, &[1, 4]), {
            let mut p = cartesian_lines(8, &[4, 6]);
            p.frame_index = 1;
            p
        }];
        let csv = patterns_to_csv(&pats).unwrap();
        assert_eq!(csv, "frame,line\n0,1\n0,4\n1,4\n1,6\n");

        let rad = golden_angle_spokes(2, 0, 16);
        let csv = patterns_to_csv(std::slice::from_ref(&rad)).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("frame,angle"));
        assert_eq!(lines.next(), Some("0,0"));
        let second = lines.next().unwrap();
        assert!(second.starts_with("0,1.941611"));

        assert!(patterns_to_csv(&[]).is_err());
    }
}
