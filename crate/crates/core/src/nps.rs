//! Noise-power-spectrum analysis of attribution heatmaps.
//!
//! The attribution maps live on the k-space sampling grid. Their Fourier
//! power spectra, central line profiles along the two encoding axes, and the
//! axis-integrated noise power spectra summarize which spatial frequencies
//! the network draws on. Cartesian profiles can be deconvolved by the
//! sampling pattern's point-spread function to compensate for the varying
//! positions of the acquired phase-encode lines.

use num_complex::Complex64;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, RealGrid};
use crate::kspace::fft2_centered;
use crate::sampling::{SamplingPattern, Trajectory};

/// Per-pixel attribution magnitude of one input frame, summed over coil and
/// re/im channels, rolled so the zero-frequency bin sits at the grid center.
/// `attr` is the integrated-gradients output [1, 4·n_c, h, w]: the first
/// half of the channels belongs to the fixed frame, the second to the
/// moving frame.
pub fn attribution_heatmaps(attr: &Tensor) -> Result<(RealGrid, RealGrid)> {
    if attr.n != 1 || attr.c % 4 != 0 || attr.c == 0 {
        return Err(Error::ShapeMismatch(format!(
            "attribution tensor must be [1, 4·n_c, h, w], got {:?}",
            attr.shape()
        )));
    }
    let (h, w) = (attr.h, attr.w);
    let half = attr.c / 2;
    let sum_half = |start: usize| -> RealGrid {
        let mut g = RealGrid::zeros(h, w);
        for c in start..start + half {
            let base = c * h * w;
            for i in 0..h * w {
                g.data[i] += attr.data[base + i].abs();
            }
        }
        // The network input is inverse-zero-frequency shifted (DC at the
        // origin); roll DC back to the center for analysis.
        RealGrid::from_fn(h, w, |y, x| {
            let sy = (y + h - h / 2) % h;
            let sx = (x + w - w / 2) % w;
            g.at(sy, sx)
        })
    };
    Ok((sum_half(0), sum_half(half)))
}

/// Power spectrum of a real map: squared magnitude of its centered unitary
/// FFT. Unitarity gives Parseval exactly: `Σ map² = Σ power`.
pub fn power_spectrum(map: &RealGrid) -> Result<RealGrid> {
    let g = ComplexGrid {
        h: map.h,
        w: map.w,
        data: map.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
    };
    let spec = fft2_centered(&g)?;
    Ok(RealGrid { h: map.h, w: map.w, data: spec.data.iter().map(|z| z.norm_sqr()).collect() })
}

/// Central line profiles of a spectrum: the row through the center (along
/// the frequency-encode axis, x) and the column through the center (along
/// the phase-encode axis, y).
pub fn central_profiles(ps: &RealGrid) -> (Vec<f64>, Vec<f64>) {
    let row = (0..ps.w).map(|x| ps.at(ps.h / 2, x)).collect();
    let col = (0..ps.h).map(|y| ps.at(y, ps.w / 2)).collect();
    (row, col)
}

/// Axis-integrated noise power spectra: for each frequency index along one
/// axis, the spectrum integrated across the perpendicular axis (the sum of
/// all line profiles).
pub fn axis_nps(ps: &RealGrid) -> (Vec<f64>, Vec<f64>) {
    let mut along_x = vec![0.0; ps.w];
    let mut along_y = vec![0.0; ps.h];
    for y in 0..ps.h {
        for x in 0..ps.w {
            let v = ps.at(y, x);
            along_x[x] += v;
            along_y[y] += v;
        }
    }
    (along_x, along_y)
}

/// Radially averaged profile: bin `i` is the mean over pixels whose rounded
/// distance from the grid center equals `i`. Length `max_radius + 1`.
pub fn radial_average(ps: &RealGrid) -> Vec<f64> {
    let (cy, cx) = ((ps.h / 2) as f64, (ps.w / 2) as f64);
    let max_r = ((cy.max(ps.h as f64 - 1.0 - cy)).powi(2)
        + (cx.max(ps.w as f64 - 1.0 - cx)).powi(2))
    .sqrt()
    .round() as usize;
    let mut sums = vec![0.0; max_r + 1];
    let mut counts = vec![0usize; max_r + 1];
    for y in 0..ps.h {
        for x in 0..ps.w {
            let r = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt().round() as usize;
            sums[r] += ps.at(y, x);
            counts[r] += 1;
        }
    }
    sums.iter().zip(&counts).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Power profile of the Cartesian sampling pattern's point-spread function
/// along the phase-encode axis: `|FFT(mask)|²`, centered, length `n_pe`.
/// Radial patterns have no line comb to compensate and are rejected.
pub fn sampling_psf_profile(pattern: &SamplingPattern) -> Result<Vec<f64>> {
    let Trajectory::CartesianLines { mask } = &pattern.traj else {
        return Err(Error::InvalidInput(
            "PSF profile is defined for Cartesian line patterns only".into(),
        ));
    };
    let n = mask.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty sampling mask".into()));
    }
    let g = ComplexGrid {
        h: 1,
        w: n,
        data: mask.iter().map(|&k| Complex64::new(if k { 1.0 } else { 0.0 }, 0.0)).collect(),
    };
    let spec = fft2_centered(&g)?;
    Ok(spec.data.iter().map(|z| z.norm_sqr()).collect())
}

/// Wiener-style regularized deconvolution of a line profile by a PSF
/// profile: pointwise division with the PSF floored at `1e-3 · max|PSF|`.
pub fn wiener_deconvolve(profile: &[f64], psf: &[f64]) -> Result<Vec<f64>> {
    if profile.len() != psf.len() {
        return Err(Error::ShapeMismatch(format!(
            "profile length {} vs PSF length {}",
            profile.len(),
            psf.len()
        )));
    }
    let peak = psf.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    if peak <= 0.0 {
        return Err(Error::InsufficientSignal("PSF is identically zero".into()));
    }
    let floor = 1e-3 * peak;
    Ok(profile.iter().zip(psf).map(|(&p, &k)| p / k.abs().max(floor)).collect())
}

/// Fraction of a profile's total mass inside the central quarter band
/// (indices within `len/8` of the center). Returns 0 for an all-zero
/// profile.
pub fn low_frequency_fraction(profile: &[f64]) -> f64 {
    let n = profile.len();
    if n == 0 {
        return 0.0;
    }
    let c = n / 2;
    let band = n / 8;
    let total: f64 = profile.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let lo = c.saturating_sub(band);
    let hi = (c + band).min(n - 1);
    profile[lo..=hi].iter().sum::<f64>() / total
}

/// Full spectral analysis of one attribution heatmap.
pub struct NpsAnalysis {
    pub power: RealGrid,
    /// Central profile along the frequency-encode axis (x).
    pub profile_fe: Vec<f64>,
    /// Central profile along the phase-encode axis (y).
    pub profile_pe: Vec<f64>,
    /// Phase-encode profile deconvolved by the sampling PSF (Cartesian
    /// patterns only).
    pub profile_pe_deconv: Option<Vec<f64>>,
    pub nps_fe: Vec<f64>,
    pub nps_pe: Vec<f64>,
    pub radial: Vec<f64>,
    pub low_freq_fraction_fe: f64,
    pub low_freq_fraction_pe: f64,
}

/// Analyze one heatmap: power spectrum, central profiles, axis-integrated
/// NPS, radial average, and central-band fractions. A Cartesian `pattern`
/// additionally yields the PSF-deconvolved phase-encode profile.
pub fn nps_analysis(map: &RealGrid, pattern: Option<&SamplingPattern>) -> Result<NpsAnalysis> {
    let power = power_spectrum(map)?;
    let (profile_fe, profile_pe) = central_profiles(&power);
    let profile_pe_deconv = match pattern {
        Some(p) if matches!(p.traj, Trajectory::CartesianLines { .. }) => {
            Some(wiener_deconvolve(&profile_pe, &sampling_psf_profile(p)?)?)
        }
        _ => None,
    };
    let (nps_fe, nps_pe) = axis_nps(&power);
    let radial = radial_average(&power);
    let low_freq_fraction_fe = low_frequency_fraction(&profile_fe);
    let low_freq_fraction_pe = low_frequency_fraction(&profile_pe);
    Ok(NpsAnalysis {
        power,
        profile_fe,
        profile_pe,
        profile_pe_deconv,
        nps_fe,
        nps_pe,
        radial,
        low_freq_fraction_fe,
        low_freq_fraction_pe,
    })
}

impl NpsAnalysis {
    /// One row per frequency index: profiles, NPS curves, and the radial
    /// average (blank once exhausted). Ragged columns stay empty.
    pub fn to_csv(&self) -> String {
        let n = self.profile_fe.len().max(self.profile_pe.len()).max(self.radial.len());
        let mut s = String::from("index,profile_fe,profile_pe,profile_pe_deconv,nps_fe,nps_pe,radial\n");
        let cell = |v: Option<&f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        for i in 0..n {
            s.push_str(&format!(
                "{i},{},{},{},{},{},{}\n",
                cell(self.profile_fe.get(i)),
                cell(self.profile_pe.get(i)),
                cell(self.profile_pe_deconv.as_ref().and_then(|p| p.get(i))),
                cell(self.nps_fe.get(i)),
                cell(self.nps_pe.get(i)),
                cell(self.radial.get(i)),
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{cartesian_full, vista_like_mask};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn gaussian_blob(n: usize, sigma: f64) -> RealGrid {
        let c = (n / 2) as f64;
        RealGrid::from_fn(n, n, |y, x| {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn parseval_holds_for_the_power_spectrum() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let map = RealGrid::from_fn(24, 24, |_, _| rng.gen_range(-1.0..1.0));
        let ps = power_spectrum(&map).unwrap();
        let energy: f64 = map.data.iter().map(|v| v * v).sum();
        let integrated: f64 = ps.data.iter().sum();
        assert!((energy - integrated).abs() < 1e-8 * energy.max(1.0));
    }

    #[test]
    fn white_noise_has_a_flat_mean_profile() {
        // 1000 zero-mean white maps: every bin of the mean central profile
        // carries the same expected power; Monte-Carlo scatter shrinks as
        // 1/sqrt(trials).
        let n = 32;
        let trials = 1000;
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let mut mean_profile = vec![0.0; n];
        for _ in 0..trials {
            let map = RealGrid::from_fn(n, n, |_, _| rng.gen_range(-1.0f64..1.0));
            let ps = power_spectrum(&map).unwrap();
            let (row, _) = central_profiles(&ps);
            for (m, v) in mean_profile.iter_mut().zip(&row) {
                *m += v / trials as f64;
            }
        }
        let avg: f64 = mean_profile.iter().sum::<f64>() / n as f64;
        for (i, &v) in mean_profile.iter().enumerate() {
            assert!(
                (v - avg).abs() < 0.2 * avg,
                "bin {i} deviates from flatness: {v} vs mean {avg}"
            );
        }
        // Expected per-bin power of uniform[-1,1] noise is its variance 1/3.
        assert!((avg - 1.0 / 3.0).abs() < 0.05);
    }

    #[test]
    fn central_blob_yields_monotonically_decaying_profile() {
        let ps = power_spectrum(&gaussian_blob(64, 3.0)).unwrap();
        let (row, col) = central_profiles(&ps);
        for profile in [row, col] {
            let c = profile.len() / 2;
            for i in c..profile.len() - 1 {
                assert!(
                    profile[i + 1] <= profile[i] * (1.0 + 1e-9) + 1e-18,
                    "profile rises at {i}: {} -> {}",
                    profile[i],
                    profile[i + 1]
                );
            }
        }
        let radial = radial_average(&ps);
        for i in 0..20 {
            assert!(radial[i + 1] <= radial[i] * (1.0 + 1e-9) + 1e-18);
        }
    }

    #[test]
    fn axis_nps_sums_match_total_power() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let map = RealGrid::from_fn(16, 16, |_, _| rng.gen_range(-1.0..1.0));
        let ps = power_spectrum(&map).unwrap();
        let (nx, ny) = axis_nps(&ps);
        let total: f64 = ps.data.iter().sum();
        assert!((nx.iter().sum::<f64>() - total).abs() < 1e-10 * total);
        assert!((ny.iter().sum::<f64>() - total).abs() < 1e-10 * total);
    }

    #[test]
    fn full_mask_psf_is_a_delta_at_the_center() {
        let pat = cartesian_full(32);
        let psf = sampling_psf_profile(&pat).unwrap();
        assert_eq!(psf.len(), 32);
        // A flat mask transforms to a single spike holding all the power.
        assert!((psf[16] - 32.0).abs() < 1e-9);
        for (i, &v) in psf.iter().enumerate() {
            if i != 16 {
                assert!(v < 1e-18, "sidelobe at {i}: {v}");
            }
        }
        // An undersampled mask spreads power into sidelobes.
        let pats = vista_like_mask(32, 1, 8, 5).unwrap();
        let sub = sampling_psf_profile(&pats[0]).unwrap();
        let side: f64 = sub.iter().enumerate().filter(|(i, _)| *i != 16).map(|(_, &v)| v).sum();
        assert!(side > 1e-6);
    }

    #[test]
    fn wiener_deconvolution_divides_with_a_floor() {
        let profile = vec![2.0, 4.0, 1.0, 3.0];
        let psf = vec![2.0, 1.0, 0.5, 1e-9];
        let out = wiener_deconvolve(&profile, &psf).unwrap();
        assert_eq!(out[0], 1.0);
        assert_eq!(out[1], 4.0);
        assert_eq!(out[2], 2.0);
        // The last bin divides by the floor 1e-3·2 instead of 1e-9.
        assert!((out[3] - 3.0 / 2e-3).abs() < 1e-9);
        assert!(wiener_deconvolve(&profile, &psf[..3]).is_err());
        assert!(wiener_deconvolve(&profile, &[0.0; 4]).is_err());
    }

    #[test]
    fn low_frequency_fraction_behaves_at_the_extremes() {
        let n = 64;
        let mut delta = vec![0.0; n];
        delta[n / 2] = 5.0;
        assert_eq!(low_frequency_fraction(&delta), 1.0);
        let uniform = vec![1.0; n];
        let band = 2 * (n / 8) + 1;
        assert!((low_frequency_fraction(&uniform) - band as f64 / n as f64).abs() < 1e-12);
        assert_eq!(low_frequency_fraction(&[]), 0.0);
        assert_eq!(low_frequency_fraction(&vec![0.0; 8]), 0.0);
    }

    #[test]
    fn attribution_heatmaps_split_and_recenter() {
        // One coil per frame: channels (re_fix, im_fix, re_mov, im_mov).
        let (h, w) = (8, 8);
        let mut t = Tensor::zeros(1, 4, h, w);
        // DC bin of the shifted input layout sits at the origin.
        let (i0, i1, i2) = (t.idx(0, 0, 0, 0), t.idx(0, 1, 0, 0), t.idx(0, 2, 1, 2));
        t.data[i0] = 3.0;
        t.data[i1] = -4.0;
        t.data[i2] = 2.0;
        let (fix, mov) = attribution_heatmaps(&t).unwrap();
        // |3| + |−4| lands at the grid center after recentering.
        assert_eq!(fix.at(4, 4), 7.0);
        assert_eq!(fix.data.iter().sum::<f64>(), 7.0);
        assert_eq!(mov.at(5, 6), 2.0);
        assert_eq!(mov.data.iter().sum::<f64>(), 2.0);
        assert!(attribution_heatmaps(&Tensor::zeros(1, 6, 4, 4)).is_err());
        assert!(attribution_heatmaps(&Tensor::zeros(2, 4, 4, 4)).is_err());
    }

    #[test]
    fn nps_analysis_assembles_a_consistent_csv() {
        let map = gaussian_blob(32, 4.0);
        let pats = vista_like_mask(32, 1, 8, 11).unwrap();
        let a = nps_analysis(&map, Some(&pats[0])).unwrap();
        assert!(a.profile_pe_deconv.is_some());
        assert!(a.low_freq_fraction_fe > 0.5);
        assert!(a.low_freq_fraction_pe > 0.5);
        let csv = a.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(a.profile_fe.len(), 32);
        assert_eq!(a.radial.len(), 24); // round(sqrt(16² + 16²)) + 1
        assert_eq!(lines.len(), 1 + a.profile_fe.len().max(a.radial.len()));
        assert_eq!(lines[0].split(',').count(), 7);
        // Deterministic re-evaluation.
        let b = nps_analysis(&map, Some(&pats[0])).unwrap();
        assert_eq!(csv, b.to_csv());
        // Without a pattern the deconvolved column stays empty.
        let c = nps_analysis(&map, None).unwrap();
        assert!(c.profile_pe_deconv.is_none());
        assert!(c.to_csv().lines().nth(1).unwrap().split(',').nth(3).unwrap().is_empty());
    }
}
