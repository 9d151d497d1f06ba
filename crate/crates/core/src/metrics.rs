//! Registration quality metrics: NRMSE on complex images, Dice overlap and
//! Hausdorff distance between label masks, and the bounding-box masks used to
//! restrict photometric losses to the anatomy of interest.

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, LabelGrid, RealGrid};

/// In-plane pixel spacing assumed when reporting Hausdorff distances in mm.
pub const DEFAULT_PIXEL_SPACING_MM: f64 = 1.9;

/// Margin (in pixels) by which segmentation bounding boxes are dilated.
pub const BOX_MARGIN_PX: usize = 10;

/// Axis-aligned rectangular mask: the bounding box of a segmentation dilated
/// by a fixed margin and clipped to the image. Half-open bounds `[y0, y1) x
/// [x0, x1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxMask {
    pub h: usize,
    pub w: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl BoxMask {
    /// Full-image box (used when a segmentation has no foreground).
    pub fn full(h: usize, w: usize) -> Self {
        BoxMask { h, w, y0: 0, y1: h, x0: 0, x1: w }
    }

    /// Bounding box of all non-background (label != 0) pixels across the
    /// given masks, dilated by `margin` pixels and clipped to the image.
    /// Falls back to the full image when no foreground pixel exists.
    pub fn from_labels(masks: &[&LabelGrid], margin: usize) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::InvalidInput("box mask needs at least one label grid".into()))?;
        let (h, w) = (first.h, first.w);
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for m in masks {
            if m.h != h || m.w != w {
                return Err(Error::ShapeMismatch(format!(
                    "box mask label grids: expected {}x{}, found {}x{}",
                    h, w, m.h, m.w
                )));
            }
            for y in 0..h {
                for x in 0..w {
                    if m.at(y, x) != 0 {
                        let b = bounds.get_or_insert((y, y, x, x));
                        b.0 = b.0.min(y);
                        b.1 = b.1.max(y);
                        b.2 = b.2.min(x);
                        b.3 = b.3.max(x);
                    }
                }
            }
        }
        Ok(match bounds {
            None => BoxMask::full(h, w),
            Some((ymin, ymax, xmin, xmax)) => BoxMask {
                h,
                w,
                y0: ymin.saturating_sub(margin),
                y1: (ymax + margin + 1).min(h),
                x0: xmin.saturating_sub(margin),
                x1: (xmax + margin + 1).min(w),
            },
        })
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn area(&self) -> usize {
        (self.y1 - self.y0) * (self.x1 - self.x0)
    }

    /// 0/1 indicator grid.
    pub fn to_real_grid(&self) -> RealGrid {
        RealGrid::from_fn(self.h, self.w, |y, x| if self.contains(y, x) { 1.0 } else { 0.0 })
    }
}

/// Normalized root-mean-square error: RMS of |ref - test| divided by the
/// range (max - min) of |ref|. Errors when the reference magnitude is
/// constant (zero range).
pub fn nrmse(reference: &ComplexGrid, test: &ComplexGrid) -> Result<f64> {
    reference.check_same_shape(test, "nrmse images")?;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut sq = 0.0;
    for (r, t) in reference.data.iter().zip(&test.data) {
        let m = r.norm();
        lo = lo.min(m);
        hi = hi.max(m);
        sq += (r - t).norm_sqr();
    }
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        return Err(Error::InvalidInput(
            "nrmse reference has zero magnitude range".into(),
        ));
    }
    Ok((sq / reference.data.len() as f64).sqrt() / range)
}

/// Dice overlap 2|A∩B| / (|A| + |B|) for one label class; 1 when both
/// selections are empty.
pub fn dice(a: &LabelGrid, b: &LabelGrid, label: u8) -> Result<f64> {
    check_mask_shapes(a, b)?;
    let mut na = 0usize;
    let mut nb = 0usize;
    let mut inter = 0usize;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        let ia = *pa == label;
        let ib = *pb == label;
        na += ia as usize;
        nb += ib as usize;
        inter += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Classical (max-directed) Hausdorff distance between the boundary point
/// sets of one label class in each mask, scaled by the pixel spacing.
/// Errors when either selection is empty.
pub fn hausdorff(a: &LabelGrid, b: &LabelGrid, label: u8, spacing_mm: f64) -> Result<f64> {
    check_mask_shapes(a, b)?;
    let pa = boundary_points(a, label);
    let pb = boundary_points(b, label);
    if pa.is_empty() || pb.is_empty() {
        return Err(Error::InvalidInput(format!(
            "hausdorff: label {} empty in one mask ({} / {} boundary points)",
            label,
            pa.len(),
            pb.len()
        )));
    }
    let d = directed_hausdorff(&pa, &pb).max(directed_hausdorff(&pb, &pa));
    Ok(d * spacing_mm)
}

fn check_mask_shapes(a: &LabelGrid, b: &LabelGrid) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch(format!(
            "metric masks: expected {}x{}, found {}x{}",
            a.h, a.w, b.h, b.w
        )));
    }
    Ok(())
}

/// Pixels of the class that touch a different class through a 4-neighbor (or
/// lie on the image border).
fn boundary_points(mask: &LabelGrid, label: u8) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.at(y, x) != label {
                continue;
            }
            let border = y == 0 || y + 1 == mask.h || x == 0 || x + 1 == mask.w;
            let interior = !border
                && mask.at(y - 1, x) == label
                && mask.at(y + 1, x) == label
                && mask.at(y, x - 1) == label
                && mask.at(y, x + 1) == label;
            if !interior {
                pts.push((y, x));
            }
        }
    }
    pts
}

fn directed_hausdorff(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    let mut worst = 0.0f64;
    for &(ya, xa) in from {
        let mut best = f64::INFINITY;
        for &(yb, xb) in to {
            let dy = ya as f64 - yb as f64;
            let dx = xa as f64 - xb as f64;
            let d2 = dy * dy + dx * dx;
            if d2 < best {
                best = d2;
                if best == 0.0 {
                    break;
                }
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

/// Per-pair evaluation summary: one NRMSE plus per-class overlap metrics.
#[derive(Debug, Clone)]
pub struct EvalResult {
    pub nrmse: f64,
    /// (label, dice) per evaluated class.
    pub dice: Vec<(u8, f64)>,
    /// (label, hausdorff in mm) per evaluated class; NaN when a class was
    /// empty in either mask.
    pub hausdorff_mm: Vec<(u8, f64)>,
}

impl EvalResult {
    /// Compare a registered image/mask pair against the reference. `labels`
    /// selects the classes to score.
    pub fn compute(
        reference: &ComplexGrid,
        registered: &ComplexGrid,
        ref_mask: &LabelGrid,
        reg_mask: &LabelGrid,
        labels: &[u8],
        spacing_mm: f64,
    ) -> Result<Self> {
        let nr = nrmse(reference, registered)?;
        let mut ds = Vec::with_capacity(labels.len());
        let mut hs = Vec::with_capacity(labels.len());
        for &l in labels {
            ds.push((l, dice(ref_mask, reg_mask, l)?));
            let hd = hausdorff(ref_mask, reg_mask, l, spacing_mm).unwrap_or(f64::NAN);
            hs.push((l, hd));
        }
        Ok(EvalResult { nrmse: nr, dice: ds, hausdorff_mm: hs })
    }

    pub fn csv_header(labels: &[u8]) -> String {
        let mut s = String::from("nrmse");
        for l in labels {
            s.push_str(&format!(",dice_{}", l));
        }
        for l in labels {
            s.push_str(&format!(",hdd_mm_{}", l));
        }
        s
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{:.6}", self.nrmse);
        for (_, d) in &self.dice {
            s.push_str(&format!(",{:.6}", d));
        }
        for (_, h) in &self.hausdorff_mm {
            s.push_str(&format!(",{:.6}", h));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_image(rng: &mut ChaCha20Rng, h: usize, w: usize) -> ComplexGrid {
        ComplexGrid::from_fn(h, w, |_, _| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn random_mask(rng: &mut ChaCha20Rng, h: usize, w: usize, fill: f64) -> LabelGrid {
        let mut m = LabelGrid::zeros(h, w);
        for v in m.data.iter_mut() {
            if rng.gen_bool(fill) {
                *v = 1;
            }
        }
        m
    }

    #[test]
    fn nrmse_identity_and_zero_test() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 16, 16);
        assert_eq!(nrmse(&a, &a).unwrap(), 0.0);

        // test = 0 -> RMS(|ref|) / range.
        let zero = ComplexGrid::zeros(16, 16);
        let rms = (a.energy() / 256.0).sqrt();
        let mags: Vec<f64> = a.data.iter().map(|z| z.norm()).collect();
        let range = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - mags.iter().cloned().fold(f64::INFINITY, f64::min);
        let got = nrmse(&a, &zero).unwrap();
        assert!((got - rms / range).abs() < 1e-12, "got {} want {}", got, rms / range);
    }

    #[test]
    fn nrmse_matches_bruteforce_two_pass() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..20 {
            let h = rng.gen_range(2..24);
            let w = rng.gen_range(2..24);
            let a = random_image(&mut rng, h, w);
            let b = random_image(&mut rng, h, w);
            // Brute force: explicit two-pass computation.
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for z in &a.data {
                lo = lo.min(z.norm());
                hi = hi.max(z.norm());
            }
            let mut acc = 0.0;
            for i in 0..a.data.len() {
                acc += (a.data[i] - b.data[i]).norm_sqr();
            }
            let want = (acc / a.data.len() as f64).sqrt() / (hi - lo);
            let got = nrmse(&a, &b).unwrap();
            assert!((got - want).abs() <= 1e-12 * want.max(1.0));
        }
    }

    #[test]
    fn nrmse_rejects_constant_reference() {
        let a = ComplexGrid::from_fn(4, 4, |_, _| Complex64::new(0.0, 1.0));
        let b = ComplexGrid::zeros(4, 4);
        assert!(nrmse(&a, &b).is_err());
        let c = ComplexGrid::zeros(4, 5);
        assert!(nrmse(&b, &c).is_err());
    }

    #[test]
    fn dice_basic_cases() {
        let mut a = LabelGrid::zeros(8, 8);
        let mut b = LabelGrid::zeros(8, 8);
        // Both empty -> 1 by definition.
        assert_eq!(dice(&a, &b, 1).unwrap(), 1.0);

        for y in 2..6 {
            for x in 2..6 {
                *a.data.get_mut(y * 8 + x).unwrap() = 1;
                *b.data.get_mut(y * 8 + x).unwrap() = 1;
            }
        }
        assert_eq!(dice(&a, &b, 1).unwrap(), 1.0);

        // Disjoint.
        let mut c = LabelGrid::zeros(8, 8);
        c.data[0] = 1;
        let mut d = LabelGrid::zeros(8, 8);
        d.data[63] = 1;
        assert_eq!(dice(&c, &d, 1).unwrap(), 0.0);

        // A subset of B with |A| = |B|/2 -> 2*|A| / (3|A|) = 2/3.
        let mut small = LabelGrid::zeros(8, 8);
        for x in 2..6 {
            *small.data.get_mut(2 * 8 + x).unwrap() = 1;
            *small.data.get_mut(3 * 8 + x).unwrap() = 1;
        }
        let got = dice(&small, &a, 1).unwrap();
        assert!((got - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dice_matches_counting_oracle_on_random_masks() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        for _ in 0..100 {
            let h = rng.gen_range(1..32);
            let w = rng.gen_range(1..32);
            let a = random_mask(&mut rng, h, w, 0.3);
            let b = random_mask(&mut rng, h, w, 0.3);
            let mut na = 0;
            let mut nb = 0;
            let mut ni = 0;
            for y in 0..h {
                for x in 0..w {
                    if a.at(y, x) == 1 {
                        na += 1;
                    }
                    if b.at(y, x) == 1 {
                        nb += 1;
                    }
                    if a.at(y, x) == 1 && b.at(y, x) == 1 {
                        ni += 1;
                    }
                }
            }
            let want = if na + nb == 0 { 1.0 } else { 2.0 * ni as f64 / (na + nb) as f64 };
            assert_eq!(dice(&a, &b, 1).unwrap(), want);
        }
    }

    #[test]
    fn hausdorff_identity_shift_and_symmetry() {
        let mut a = LabelGrid::zeros(16, 16);
        *a.data.get_mut(4 * 16 + 4).unwrap() = 1;
        assert_eq!(hausdorff(&a, &a, 1, 1.9).unwrap(), 0.0);

        // Unit (single-pixel) square shifted by 3 px at 1.9 mm/px -> 5.7 mm.
        let mut b = LabelGrid::zeros(16, 16);
        *b.data.get_mut(4 * 16 + 7).unwrap() = 1;
        let d = hausdorff(&a, &b, 1, 1.9).unwrap();
        assert!((d - 5.7).abs() < 1e-12, "got {}", d);
        assert_eq!(hausdorff(&b, &a, 1, 1.9).unwrap(), d);
    }

    #[test]
    fn hausdorff_rectangle_axis_shift_equals_shift_distance() {
        // For an axis-aligned rectangle shifted along one axis by less than
        // its side, both directed boundary distances equal the shift.
        let mut a = LabelGrid::zeros(20, 20);
        let mut b = LabelGrid::zeros(20, 20);
        for y in 5..12 {
            for x in 3..9 {
                *a.data.get_mut(y * 20 + x).unwrap() = 1;
                *b.data.get_mut(y * 20 + x + 4).unwrap() = 1;
            }
        }
        let d = hausdorff(&a, &b, 1, 1.0).unwrap();
        assert!((d - 4.0).abs() < 1e-12, "got {}", d);
    }

    #[test]
    fn hausdorff_matches_exhaustive_oracle_on_sparse_points() {
        // Sparse random point clouds: isolated pixels are all boundary, so
        // the boundary Hausdorff equals the full point-set Hausdorff, which
        // we compute here exhaustively and independently.
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        for _ in 0..80 {
            let h = rng.gen_range(4..32);
            let w = rng.gen_range(4..32);
            let mut a = LabelGrid::zeros(h, w);
            let mut b = LabelGrid::zeros(h, w);
            let mut pa = Vec::new();
            let mut pb = Vec::new();
            for _ in 0..rng.gen_range(1..6) {
                let y = rng.gen_range(0..h);
                let x = rng.gen_range(0..w);
                *a.data.get_mut(y * w + x).unwrap() = 1;
                pa.push((y, x));
            }
            for _ in 0..rng.gen_range(1..6) {
                let y = rng.gen_range(0..h);
                let x = rng.gen_range(0..w);
                *b.data.get_mut(y * w + x).unwrap() = 1;
                pb.push((y, x));
            }
            // Keep only clouds with no adjacent pixels (so every pixel is
            // boundary regardless of neighbors).
            let isolated = |pts: &[(usize, usize)]| {
                pts.iter().all(|&(y, x)| {
                    pts.iter().all(|&(y2, x2)| {
                        (y, x) == (y2, x2)
                            || (y as i64 - y2 as i64).abs() + (x as i64 - x2 as i64).abs() > 1
                    })
                })
            };
            if !isolated(&pa) || !isolated(&pb) {
                continue;
            }
            let dist = |p: &[(usize, usize)], q: &[(usize, usize)]| -> f64 {
                let mut worst = 0.0f64;
                for &(y1, x1) in p {
                    let mut best = f64::INFINITY;
                    for &(y2, x2) in q {
                        let dy = y1 as f64 - y2 as f64;
                        let dx = x1 as f64 - x2 as f64;
                        best = best.min((dy * dy + dx * dx).sqrt());
                    }
                    worst = worst.max(best);
                }
                worst
            };
            let want = dist(&pa, &pb).max(dist(&pb, &pa)) * 1.9;
            let got = hausdorff(&a, &b, 1, 1.9).unwrap();
            assert!((got - want).abs() < 1e-12, "got {} want {}", got, want);
        }
    }

    #[test]
    fn hausdorff_uses_boundary_not_interior() {
        // Same outer boundary, different interior: a filled square vs the
        // same square with a hole of a DIFFERENT label still compares only
        // class-1 boundaries; the hole adds interior boundary points.
        let mut filled = LabelGrid::zeros(12, 12);
        for y in 2..10 {
            for x in 2..10 {
                *filled.data.get_mut(y * 12 + x).unwrap() = 1;
            }
        }
        // Identical masks: zero regardless of interior handling.
        assert_eq!(hausdorff(&filled, &filled, 1, 1.0).unwrap(), 0.0);
        // Empty class errors.
        let empty = LabelGrid::zeros(12, 12);
        assert!(hausdorff(&filled, &empty, 1, 1.0).is_err());
    }

    #[test]
    fn box_mask_margin_and_clipping() {
        let mut m = LabelGrid::zeros(64, 64);
        for y in 20..30 {
            for x in 25..33 {
                *m.data.get_mut(y * 64 + x).unwrap() = 2;
            }
        }
        let b = BoxMask::from_labels(&[&m], BOX_MARGIN_PX).unwrap();
        assert_eq!((b.y0, b.y1, b.x0, b.x1), (10, 40, 15, 43));
        assert_eq!(b.area(), 30 * 28);

        // Foreground near the corner: box clips at the image border.
        let mut c = LabelGrid::zeros(32, 32);
        *c.data.get_mut(2 * 32 + 3).unwrap() = 1;
        let bc = BoxMask::from_labels(&[&c], BOX_MARGIN_PX).unwrap();
        assert_eq!((bc.y0, bc.y1, bc.x0, bc.x1), (0, 13, 0, 14));

        // Union across two masks covers both.
        let mut c64 = LabelGrid::zeros(64, 64);
        *c64.data.get_mut(2 * 64 + 3).unwrap() = 1;
        let b2 = BoxMask::from_labels(&[&m, &c64], BOX_MARGIN_PX).unwrap();
        assert_eq!((b2.y0, b2.y1, b2.x0, b2.x1), (0, 40, 0, 43));

        // Empty segmentation -> full image.
        let e = LabelGrid::zeros(16, 16);
        assert_eq!(BoxMask::from_labels(&[&e], 10).unwrap(), BoxMask::full(16, 16));

        let g = b.to_real_grid();
        let ones: f64 = g.data.iter().sum();
        assert_eq!(ones as usize, b.area());
    }

    #[test]
    fn eval_result_csv_shapes() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let a = random_image(&mut rng, 12, 12);
        let mut b = a.clone();
        b.data[5] += Complex64::new(0.3, 0.0);
        let mut ma = LabelGrid::zeros(12, 12);
        let mut mb = LabelGrid::zeros(12, 12);
        for x in 4..8 {
            *ma.data.get_mut(5 * 12 + x).unwrap() = 1;
            *mb.data.get_mut(6 * 12 + x).unwrap() = 1;
        }
        let r = EvalResult::compute(&a, &b, &ma, &mb, &[1, 2], 1.9).unwrap();
        assert_eq!(r.dice.len(), 2);
        assert_eq!(r.hausdorff_mm.len(), 2);
        // Class 2 empty in both -> dice 1, hausdorff NaN placeholder.
        assert_eq!(r.dice[1].1, 1.0);
        assert!(r.hausdorff_mm[1].1.is_nan());
        let header = EvalResult::csv_header(&[1, 2]);
        assert_eq!(header.split(',').count(), r.csv_row().split(',').count());
    }
}
