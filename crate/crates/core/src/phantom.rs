//! Analytic cardiac-like cine phantom: a contracting/relaxing bright annulus
//! ("myocardium") around a dimmer pool ("cavity"), a translating ellipse
//! ("RV pool"), and a band-limited random texture, all defined as smooth
//! closed-form functions of material coordinates.
//!
//! Every frame is a point sample of `S(Φ_t⁻¹(x))` where `S` is the static
//! reference scene and `Φ_t` the material motion at frame `t`, so
//! ground-truth displacement fields between any ordered frame pair follow in
//! closed form: `u(x) = x − Φ_mov(Φ_fix⁻¹(x))` under the convention
//! `I_fix(x) = I_mov(x − u(x))`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::grid::{ComplexGrid, ComplexImage, DisplacementField, LabelGrid, RealGrid};

/// Mask labels used by [`PhantomScene::masks`].
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_MYOCARDIUM: u8 = 1;
pub const LABEL_CAVITY: u8 = 2;
pub const LABEL_RV_POOL: u8 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomConfig {
    pub h: usize,
    pub w: usize,
    /// Cavity radius in the reference frame, pixels.
    pub r_inner: f64,
    /// Outer myocardium radius in the reference frame, pixels.
    pub r_outer: f64,
    /// Peak contraction as a fraction of the mid-annulus radius: the largest
    /// ground-truth displacement over a full cycle is `contraction · ρ_m`
    /// with `ρ_m = (r_inner + r_outer)/2`. Zero freezes the whole scene.
    pub contraction: f64,
    /// Peak RV-pool translation (ux, uy), pixels.
    pub rv_shift: (f64, f64),
    /// Amplitude of the band-limited texture added to the magnitude image.
    pub texture_amp: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            h: 64,
            w: 64,
            r_inner: 9.0,
            r_outer: 15.0,
            contraction: 0.1,
            rv_shift: (1.5, 0.8),
            texture_amp: 0.1,
            seed: 7,
        }
    }
}

impl PhantomConfig {
    fn validate(&self) -> Result<()> {
        if self.h < 8 || self.w < 8 {
            return Err(Error::InvalidInput("phantom grid must be at least 8×8".into()));
        }
        if self.r_inner <= 0.0 || self.r_inner >= self.r_outer {
            return Err(Error::InvalidInput(format!(
                "degenerate geometry: inner radius {} vs outer {}",
                self.r_inner, self.r_outer
            )));
        }
        if !(0.0..0.5).contains(&self.contraction) {
            return Err(Error::InvalidInput("contraction fraction outside [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Band-limited random texture: a fixed sum of sinusoids with |ω| ≤ 0.6π,
/// squashed through tanh so it stays in (−1, 1). Smooth and evaluable at any
/// real position, so the moving scene needs no interpolation.
struct Texture {
    freqs: Vec<(f64, f64)>,
    phases: Vec<f64>,
    amps: Vec<f64>,
}

impl Texture {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7e35_71a2_90c4_11d7);
        let k = 32;
        let cutoff = 0.6 * PI;
        let mut freqs = Vec::with_capacity(k);
        let mut phases = Vec::with_capacity(k);
        let mut amps = Vec::with_capacity(k);
        for _ in 0..k {
            let r = cutoff * rng.gen::<f64>().sqrt();
            let th = rng.gen::<f64>() * 2.0 * PI;
            freqs.push((r * th.sin(), r * th.cos()));
            phases.push(rng.gen::<f64>() * 2.0 * PI);
            amps.push(rng.gen_range(0.5..1.5) / (k as f64).sqrt());
        }
        Self { freqs, phases, amps }
    }

    fn eval(&self, py: f64, px: f64) -> f64 {
        let mut s = 0.0;
        for (((wy, wx), ph), a) in self.freqs.iter().zip(&self.phases).zip(&self.amps) {
            s += a * (wy * py + wx * px + ph).cos();
        }
        s.tanh()
    }
}

/// Static geometry derived from the config.
struct Geometry {
    cy: f64,
    cx: f64,
    rho_m: f64,
    sigma_c: f64,
    /// Normalizer so the peak radial displacement is exactly contraction·ρ_m.
    radial_norm: f64,
    rv_cy: f64,
    rv_cx: f64,
    rv_sy: f64,
    rv_sx: f64,
}

impl Geometry {
    fn new(cfg: &PhantomConfig) -> Self {
        let cy = (cfg.h as f64 - 1.0) / 2.0;
        let cx = (cfg.w as f64 - 1.0) / 2.0;
        let rho_m = 0.5 * (cfg.r_inner + cfg.r_outer);
        let sigma_c = 0.5 * rho_m;
        // max_ρ ρ·exp(−(ρ−ρ_m)²/2σ²) sits at the positive root of
        // ρ² − ρ·ρ_m − σ² = 0.
        let rho_star = 0.5 * (rho_m + (rho_m * rho_m + 4.0 * sigma_c * sigma_c).sqrt());
        let w = |rho: f64| (-(rho - rho_m).powi(2) / (2.0 * sigma_c * sigma_c)).exp();
        let radial_norm = rho_star * w(rho_star);
        let rv_sx = 0.5 * cfg.r_outer;
        let rv_sy = 0.8 * cfg.r_outer;
        Self {
            cy,
            cx,
            rho_m,
            sigma_c,
            radial_norm,
            rv_cy: cy,
            rv_cx: cx - 1.6 * cfg.r_outer,
            rv_sy,
            rv_sx,
        }
    }

    /// Material displacement δ(p) = Φ_t(p) − p at cycle amplitude `amp`.
    fn delta(&self, cfg: &PhantomConfig, amp: f64, py: f64, px: f64) -> (f64, f64) {
        let dy = py - self.cy;
        let dx = px - self.cx;
        let rho = (dy * dy + dx * dx).sqrt();
        let (mut oy, mut ox) = (0.0, 0.0);
        if rho > 1e-12 {
            let w = (-(rho - self.rho_m).powi(2) / (2.0 * self.sigma_c * self.sigma_c)).exp();
            // Inward radial contraction, peak magnitude contraction·ρ_m.
            let mag = amp * cfg.contraction * self.rho_m * (rho * w) / self.radial_norm;
            oy -= mag * dy / rho;
            ox -= mag * dx / rho;
        }
        let ey = (py - self.rv_cy) / (1.2 * self.rv_sy);
        let ex = (px - self.rv_cx) / (1.2 * self.rv_sx);
        let bump = (-(ey * ey + ex * ex) / 2.0).exp();
        oy += amp * cfg.rv_shift.1 * bump;
        ox += amp * cfg.rv_shift.0 * bump;
        (oy, ox)
    }

    /// Solve Φ_t(p) = x for p by fixed-point iteration (the displacement
    /// gradients are well below 1 in the supported config range).
    fn inverse(&self, cfg: &PhantomConfig, amp: f64, xy: f64, xx: f64) -> (f64, f64) {
        let (mut py, mut px) = (xy, xx);
        for _ in 0..60 {
            let (dy, dx) = self.delta(cfg, amp, py, px);
            let (ny, nx) = (xy - dy, xx - dx);
            let step = (ny - py).abs().max((nx - px).abs());
            py = ny;
            px = nx;
            if step < 1e-13 {
                break;
            }
        }
        (py, px)
    }

    fn forward(&self, cfg: &PhantomConfig, amp: f64, py: f64, px: f64) -> (f64, f64) {
        let (dy, dx) = self.delta(cfg, amp, py, px);
        (py + dy, px + dx)
    }

    fn label(&self, cfg: &PhantomConfig, py: f64, px: f64) -> u8 {
        let ey = (py - self.rv_cy) / self.rv_sy;
        let ex = (px - self.rv_cx) / self.rv_sx;
        if ey * ey + ex * ex <= 1.0 {
            return LABEL_RV_POOL;
        }
        let rho = ((py - self.cy).powi(2) + (px - self.cx).powi(2)).sqrt();
        if rho < cfg.r_inner {
            LABEL_CAVITY
        } else if rho <= cfg.r_outer {
            LABEL_MYOCARDIUM
        } else {
            LABEL_BACKGROUND
        }
    }

    /// Complex scene value at material position p.
    fn scene(&self, cfg: &PhantomConfig, tex: &Texture, py: f64, px: f64) -> Complex64 {
        let smooth = |d: f64| {
            // Smoothstep over a ±1.2 px band around the boundary (d is a
            // signed distance, positive inside).
            let z = ((d / 1.2 + 1.0) / 2.0).clamp(0.0, 1.0);
            z * z * (3.0 - 2.0 * z)
        };
        let rho = ((py - self.cy).powi(2) + (px - self.cx).powi(2)).sqrt();
        let inside_outer = smooth(cfg.r_outer - rho);
        let inside_inner = smooth(cfg.r_inner - rho);
        let ey = (py - self.rv_cy) / self.rv_sy;
        let ex = (px - self.rv_cx) / self.rv_sx;
        let e = (ey * ey + ex * ex).sqrt();
        let inside_rv = smooth((1.0 - e) * self.rv_sx.min(self.rv_sy));
        let mut m = 0.15;
        m += (1.0 - m) * inside_outer;
        m += (0.35 - m) * inside_inner;
        m += (0.55 - m) * inside_rv;
        m += cfg.texture_amp * tex.eval(py, px);
        let phase = 0.4 * (2.0 * PI * py / cfg.h as f64).sin() * (2.0 * PI * px / cfg.w as f64).cos();
        Complex64::from_polar(m.max(0.02), phase)
    }
}

/// A rendered cine scene with analytic ground truth.
pub struct PhantomScene {
    pub frames: Vec<ComplexImage>,
    pub masks: Vec<LabelGrid>,
    cfg: PhantomConfig,
    geom: Geometry,
    n_frames: usize,
}

/// Cycle amplitude of frame `t`: 0 at frame 0, peak mid-sequence.
fn cycle_amp(t: usize, n_frames: usize) -> f64 {
    (PI * t as f64 / n_frames as f64).sin().powi(2)
}

/// Render an `n_frames`-frame cine phantom with per-frame masks.
pub fn phantom_cine(cfg: &PhantomConfig, n_frames: usize) -> Result<PhantomScene> {
    cfg.validate()?;
    if n_frames < 2 {
        return Err(Error::InvalidInput("a cine scene needs at least 2 frames".into()));
    }
    let geom = Geometry::new(cfg);
    let tex = Texture::new(cfg.seed);
    let mut frames = Vec::with_capacity(n_frames);
    let mut masks = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let amp = cycle_amp(t, n_frames);
        let mut img = ComplexGrid::zeros(cfg.h, cfg.w);
        let mut mask = LabelGrid::zeros(cfg.h, cfg.w);
        for y in 0..cfg.h {
            for x in 0..cfg.w {
                let (py, px) = geom.inverse(cfg, amp, y as f64, x as f64);
                *img.at_mut(y, x) = geom.scene(cfg, &tex, py, px);
                mask.data[y * cfg.w + x] = geom.label(cfg, py, px);
            }
        }
        frames.push(img);
        masks.push(mask);
    }
    Ok(PhantomScene { frames, masks, cfg: cfg.clone(), geom, n_frames })
}

impl PhantomScene {
    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn config(&self) -> &PhantomConfig {
        &self.cfg
    }

    /// Ground-truth displacement between an ordered frame pair:
    /// `warp_bilinear(frames[mov], field(fix, mov)) ≈ frames[fix]`.
    /// Available for every ordered pair; computed in closed form as
    /// `u(x) = x − Φ_mov(Φ_fix⁻¹(x))`.
    pub fn field(&self, fix: usize, mov: usize) -> Result<DisplacementField> {
        if fix >= self.n_frames || mov >= self.n_frames {
            return Err(Error::InvalidInput(format!(
                "frame pair ({fix}, {mov}) outside 0..{}",
                self.n_frames
            )));
        }
        let amp_fix = cycle_amp(fix, self.n_frames);
        let amp_mov = cycle_amp(mov, self.n_frames);
        let (h, w) = (self.cfg.h, self.cfg.w);
        let mut ux = RealGrid::zeros(h, w);
        let mut uy = RealGrid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (py, px) = self.geom.inverse(&self.cfg, amp_fix, y as f64, x as f64);
                let (my, mx) = self.geom.forward(&self.cfg, amp_mov, py, px);
                *uy.at_mut(y, x) = y as f64 - my;
                *ux.at_mut(y, x) = x as f64 - mx;
            }
        }
        Ok(DisplacementField { ux, uy })
    }

    /// Fields between consecutive frames: entry `t` warps frame `t` onto
    /// frame `t+1`.
    pub fn consecutive_fields(&self) -> Result<Vec<DisplacementField>> {
        (0..self.n_frames - 1).map(|t| self.field(t + 1, t)).collect()
    }
}

/// Run-length encode non-background mask runs as CSV rows
/// `frame,label,start,length` over the row-major flattened grid.
pub fn masks_rle_csv(masks: &[LabelGrid]) -> String {
    let mut out = String::from("frame,label,start,length\n");
    for (f, m) in masks.iter().enumerate() {
        let mut i = 0usize;
        while i < m.data.len() {
            let label = m.data[i];
            let start = i;
            while i < m.data.len() && m.data[i] == label {
                i += 1;
            }
            if label != LABEL_BACKGROUND {
                out.push_str(&format!("{f},{label},{start},{}\n", i - start));
            }
        }
    }
    out
}
