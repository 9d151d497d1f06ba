//! Built-in oracle suites: the shift theorem, operator adjointness,
//! acceleration bookkeeping, metric brute-force comparisons and gradient
//! finite-difference spot checks. Every suite prints one pass/fail line and
//! draws all randomness from the global seed, so reruns are byte-identical.

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use kmotion::autodiff::{finite_difference_probe, Tensor};
use kmotion::grid::{ComplexImage, LabelGrid, MultiCoilKSpace};
use kmotion::kspace::{
    apply_phase_ramp, fft2_centered, ifft2_centered, multicoil_adjoint_sampled, multicoil_forward,
    synthetic_coil_maps,
};
use kmotion::metrics;
use kmotion::phantom::phantom_cine;
use kmotion::sampling::{acceleration, golden_angle_spokes, vista_like_mask, SamplingPattern};

use crate::config::ExperimentConfig;

struct Suite {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(s: &Suite) {
    println!(
        "{:<18} {}  {}",
        s.name,
        if s.pass { "pass" } else { "FAIL" },
        s.detail
    );
}

/// Runs every suite and returns whether all of them passed.
pub fn run(seed: u64) -> bool {
    let suites = [
        shift_theorem(seed),
        adjointness(seed),
        acceleration_anchors(),
        metric_oracles(seed),
        gradient_checks(seed),
    ];
    let passed = suites.iter().filter(|s| s.pass).count();
    for s in &suites {
        report(s);
    }
    println!("selftest: {passed}/{} suites passed", suites.len());
    passed == suites.len()
}

// ---------------------------------------------------------------------------
// Shift theorem
// ---------------------------------------------------------------------------

fn circular_shift(img: &ComplexImage, ux: i64, uy: i64) -> ComplexImage {
    let (h, w) = (img.h as i64, img.w as i64);
    ComplexImage::from_fn(img.h, img.w, |y, x| {
        let sy = (y as i64 - uy).rem_euclid(h) as usize;
        let sx = (x as i64 - ux).rem_euclid(w) as usize;
        img.at(sy, sx)
    })
}

fn shift_theorem(seed: u64) -> Suite {
    let cfg = ExperimentConfig::default();
    let img = phantom_cine(&cfg.phantom_config(), 2).expect("phantom").frames[0].clone();
    let k = fft2_centered(&img).expect("fft");
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5348_4946);
    let mut worst = 0.0f64;
    let n = 100;
    for _ in 0..n {
        let ux = rng.gen_range(-16i64..=16);
        let uy = rng.gen_range(-16i64..=16);
        let spectral = ifft2_centered(&apply_phase_ramp(&k, ux as f64, uy as f64)).expect("ifft");
        let direct = circular_shift(&img, ux, uy);
        for (a, b) in spectral.data.iter().zip(&direct.data) {
            worst = worst.max((a - b).norm());
        }
    }
    Suite {
        name: "shift-theorem",
        pass: worst < 1e-10,
        detail: format!("max abs err {worst:.3e} (tol 1e-10, n={n})"),
    }
}

// ---------------------------------------------------------------------------
// Adjointness
// ---------------------------------------------------------------------------

fn random_image(rng: &mut ChaCha20Rng, h: usize, w: usize) -> ComplexImage {
    ComplexImage::from_fn(h, w, |_, _| {
        Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

fn inner_grid(a: &ComplexImage, b: &ComplexImage) -> Complex64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y.conj()).sum()
}

fn inner_mc(a: &MultiCoilKSpace, b: &MultiCoilKSpace) -> Complex64 {
    a.coils.iter().zip(&b.coils).map(|(x, y)| inner_grid(x, y)).sum()
}

fn adjointness(seed: u64) -> Suite {
    let (h, w) = (64, 64);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x414a_4f49);
    let patterns: Vec<SamplingPattern> = vec![
        vista_like_mask(h, 1, 16, rng.gen()).expect("mask").remove(0),
        golden_angle_spokes(32, 0, w),
    ];
    let mut worst = 0.0f64;
    for pattern in &patterns {
        for &nc in &[1usize, 4, 16] {
            let maps = synthetic_coil_maps(h, w, nc);
            for _ in 0..5 {
                let x = random_image(&mut rng, h, w);
                let ax = multicoil_forward(&x, &maps, pattern).expect("forward");
                let y = MultiCoilKSpace::new(
                    (0..nc)
                        .map(|_| random_image(&mut rng, ax.h(), ax.w()))
                        .collect(),
                )
                .expect("probe");
                let aty = multicoil_adjoint_sampled(&y, &maps, pattern).expect("adjoint");
                let lhs = inner_mc(&ax, &y);
                let rhs = inner_grid(&x, &aty);
                worst = worst.max((lhs - rhs).norm() / lhs.norm().max(1.0));
            }
        }
    }
    Suite {
        name: "adjoint",
        pass: worst < 1e-10,
        detail: format!("max rel err {worst:.3e} (tol 1e-10, cartesian+radial, coils 1/4/16)"),
    }
}

// ---------------------------------------------------------------------------
// Acceleration bookkeeping
// ---------------------------------------------------------------------------

fn acceleration_anchors() -> Suite {
    let cart = acceleration(156, 2).map(|r| r.r);
    let rad = acceleration(312, 3).map(|r| r.r);
    let pass = cart.as_ref().map_or(false, |&r| r == 78.0)
        && rad.as_ref().map_or(false, |&r| r == 104.0);
    Suite {
        name: "acceleration",
        pass,
        detail: format!(
            "R(156 lines, 2/frame) = {:?}, R(312 spokes, 3/frame) = {:?}",
            cart.unwrap_or(f64::NAN),
            rad.unwrap_or(f64::NAN)
        ),
    }
}

// ---------------------------------------------------------------------------
// Metric oracles
// ---------------------------------------------------------------------------

fn brute_dice(a: &LabelGrid, b: &LabelGrid, label: u8) -> f64 {
    let na = a.data.iter().filter(|&&v| v == label).count();
    let nb = b.data.iter().filter(|&&v| v == label).count();
    let inter = a
        .data
        .iter()
        .zip(&b.data)
        .filter(|(&x, &y)| x == label && y == label)
        .count();
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Boundary pixels of a class: any pixel whose 4-neighborhood leaves the
/// class or the image.
fn brute_boundary(mask: &LabelGrid, label: u8) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    for y in 0..mask.h {
        for x in 0..mask.w {
            if mask.at(y, x) != label {
                continue;
            }
            let mut interior = y > 0 && y + 1 < mask.h && x > 0 && x + 1 < mask.w;
            if interior {
                let neighbors =
                    [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
                interior = neighbors.iter().all(|&(ny, nx)| mask.at(ny, nx) == label);
            }
            if !interior {
                pts.push((y as f64, x as f64));
            }
        }
    }
    pts
}

fn brute_hausdorff(a: &LabelGrid, b: &LabelGrid, label: u8, spacing: f64) -> Option<f64> {
    let pa = brute_boundary(a, label);
    let pb = brute_boundary(b, label);
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |from: &[(f64, f64)], to: &[(f64, f64)]| -> f64 {
        from.iter()
            .map(|&(ya, xa)| {
                to.iter()
                    .map(|&(yb, xb)| (ya - yb) * (ya - yb) + (xa - xb) * (xa - xb))
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)).sqrt() * spacing)
}

fn brute_nrmse(reference: &ComplexImage, test: &ComplexImage) -> f64 {
    let mags: Vec<f64> = reference.data.iter().map(|c| c.norm()).collect();
    let hi = mags.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lo = mags.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    let mse = reference
        .data
        .iter()
        .zip(&test.data)
        .map(|(r, t)| (r - t).norm_sqr())
        .sum::<f64>()
        / reference.data.len() as f64;
    mse.sqrt() / (hi - lo)
}

fn random_mask(rng: &mut ChaCha20Rng, h: usize, w: usize) -> LabelGrid {
    // A random blob per class keeps every label non-empty.
    let mut m = LabelGrid::zeros(h, w);
    for label in 1..=3u8 {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let r = rng.gen_range(1.5..0.35 * h.min(w) as f64);
        for y in 0..h {
            for x in 0..w {
                let d = (y as f64 - cy).hypot(x as f64 - cx);
                if d < r {
                    m.data[y * w + x] = label;
                }
            }
        }
        // Guarantee at least one pixel even if the blob fell outside.
        let py = (cy as usize).min(h - 1);
        let px = (cx as usize).min(w - 1);
        m.data[py * w + px] = label;
    }
    m
}

fn metric_oracles(seed: u64) -> Suite {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x4d45_5452);
    let mut worst = 0.0f64;
    let mut checks = 0usize;
    let n = 50;
    for _ in 0..n {
        let h = rng.gen_range(8..=32);
        let w = rng.gen_range(8..=32);
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        for label in 1..=3u8 {
            let d = metrics::dice(&a, &b, label).expect("dice");
            worst = worst.max((d - brute_dice(&a, &b, label)).abs());
            checks += 1;
            if let Some(expect) = brute_hausdorff(&a, &b, label, 1.9) {
                let got = metrics::hausdorff(&a, &b, label, 1.9).expect("hausdorff");
                worst = worst.max((got - expect).abs());
                checks += 1;
            }
        }
        let x = random_image(&mut rng, h, w);
        let y = random_image(&mut rng, h, w);
        let got = metrics::nrmse(&x, &y).expect("nrmse");
        worst = worst.max((got - brute_nrmse(&x, &y)).abs());
        checks += 1;
    }
    Suite {
        name: "metric-oracles",
        pass: worst < 1e-12,
        detail: format!("max abs dev {worst:.3e} (tol 1e-12, {checks} comparisons)"),
    }
}

// ---------------------------------------------------------------------------
// Gradient spot checks
// ---------------------------------------------------------------------------

fn random_tensor(rng: &mut ChaCha20Rng, n: usize, c: usize, h: usize, w: usize) -> Tensor {
    let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, c, h, w, data).expect("tensor shape")
}

fn gradient_checks(seed: u64) -> Suite {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x4752_4144);
    let mut worst = 0.0f64;
    let mut run = |name: &str,
                   inputs: Vec<Tensor>,
                   f: &dyn Fn(&mut kmotion::autodiff::Tape, &[kmotion::autodiff::NodeId]) -> kmotion::autodiff::NodeId| {
        let err = finite_difference_probe(&inputs, f, 1e-5);
        if err > worst {
            worst = err;
        }
        let _ = name;
    };

    let x = random_tensor(&mut rng, 1, 2, 6, 6);
    let w = random_tensor(&mut rng, 3, 2, 3, 3);
    run("conv2d", vec![x, w], &|t, ids| {
        t.conv2d(ids[0], ids[1], 1, 1, 1).expect("conv2d")
    });

    let img = random_tensor(&mut rng, 1, 2, 6, 6);
    let mut field = random_tensor(&mut rng, 1, 2, 6, 6);
    for v in &mut field.data {
        *v *= 0.6;
    }
    run("warp", vec![img, field], &|t, ids| {
        t.warp_bilinear(ids[0], ids[1]).expect("warp")
    });

    let spec = random_tensor(&mut rng, 1, 2, 6, 6);
    run("fft-magnitude", vec![spec], &|t, ids| {
        t.fft2c_magnitude(ids[0], 1e-3).expect("fft magnitude")
    });

    let up = random_tensor(&mut rng, 1, 2, 5, 5);
    run("upsample", vec![up], &|t, ids| t.upsample_bilinear2(ids[0]));

    let sm = random_tensor(&mut rng, 1, 2, 4, 6);
    run("softmax", vec![sm], &|t, ids| t.softmax_w(ids[0]));

    Suite {
        name: "gradient-checks",
        pass: worst < 1e-4,
        detail: format!("max rel err {worst:.3e} (tol 1e-4, 5 primitives)"),
    }
}
