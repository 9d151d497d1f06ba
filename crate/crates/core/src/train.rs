//! Self-supervised losses, synthetic training scenes, and the AdamW loop.
//!
//! The network never sees ground-truth motion during training: every loss
//! term compares the fixed image against the moving image warped by the
//! estimated fields, either directly (photometric, box-weighted), in k-space
//! amplitude (data consistency), or through the field's own roughness
//! (smoothness). Scenes are generated on the fly from the analytic phantom
//! with a staged curriculum: rigid translations first, then smooth Gaussian
//! deformation fields, then full phantom cine pairs.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{
    CoilSensitivityMap, ComplexImage, DisplacementField, LabelGrid, MultiCoilKSpace, RealGrid,
};
use crate::kspace::{
    apply_phase_ramp, fft2_centered, ifft2_centered, multicoil_forward, normalize_max,
    synthetic_coil_maps,
};
use crate::metrics::{BoxMask, BOX_MARGIN_PX};
use crate::model::{LapaNet, ParameterStore};
use crate::motion::{synth_gaussian_field, warp_bilinear, warp_mask};
use crate::phantom::{phantom_cine, PhantomConfig};
use crate::sampling::{acceleration, golden_angle_spokes, radial_adjoint_grid, vista_like_mask};

/// Guard added inside the k-space magnitude so its gradient stays bounded
/// near spectral zeros.
pub const KDC_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Loss terms
// ---------------------------------------------------------------------------

/// Weights of the composite training objective
/// `α·L_T + Σ_i (L_photo,i + β·L_KDC,i + γ·L_smooth,i)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.05, gamma: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-term values of one composite loss evaluation, unweighted. `total` is
/// the weighted sum actually optimized.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub photo: Vec<f64>,
    pub kdc: Vec<f64>,
    pub smooth: Vec<f64>,
    pub t_photo: f64,
    pub total: f64,
}

/// Upscale a field node [n,2,h,h] to `target`×`target` by repeated bilinear
/// doubling, multiplying the values by 2 per octave so displacements stay in
/// pixels of the finer grid. `target` must be `h · 2^k` for some `k ≥ 0`.
pub fn upscale_field_node(tape: &mut Tape, u: NodeId, target: usize) -> Result<NodeId> {
    let (_, c, h, w) = tape.value(u).shape();
    if c != 2 {
        return Err(Error::ShapeMismatch(format!("field must have 2 channels, got {c}")));
    }
    if h != w {
        return Err(Error::ShapeMismatch(format!("field must be square, got {h}x{w}")));
    }
    let mut cur = u;
    let mut side = h;
    while side < target {
        let up = tape.upsample_bilinear2(cur);
        cur = tape.scale(up, 2.0);
        side *= 2;
    }
    if side != target {
        return Err(Error::ShapeMismatch(format!(
            "field side {h} does not reach {target} by doubling"
        )));
    }
    Ok(cur)
}

/// Box-weighted photometric L1: `Σ box ⊙ |I_fix − W(I_mov, u)|` where the
/// images are interleaved complex channel pairs [n,2m,h,w], `u` is a full
/// resolution field [n,2,h,w], and `box` is [n,m,h,w].
pub fn photometric_loss(
    tape: &mut Tape,
    i_fix: NodeId,
    i_mov: NodeId,
    u: NodeId,
    box_w: NodeId,
) -> Result<NodeId> {
    let fs = tape.value(i_fix).shape();
    let ms = tape.value(i_mov).shape();
    if fs != ms {
        return Err(Error::ShapeMismatch(format!("image shapes differ: {fs:?} vs {ms:?}")));
    }
    if fs.1 % 2 != 0 {
        return Err(Error::ShapeMismatch(format!(
            "images need interleaved re/im channel pairs, got {} channels",
            fs.1
        )));
    }
    let bs = tape.value(box_w).shape();
    if bs != (fs.0, fs.1 / 2, fs.2, fs.3) {
        return Err(Error::ShapeMismatch(format!(
            "box weight shape {:?} does not match images {:?}",
            bs, fs
        )));
    }
    let warped = tape.warp_bilinear(i_mov, u)?;
    let diff = tape.sub(i_fix, warped)?;
    let mag = tape.complex_magnitude(diff, 0.0)?;
    let weighted = tape.mul(mag, box_w)?;
    Ok(tape.sum_all(weighted))
}

/// K-space data-consistency L1 on spectral amplitudes, unmasked:
/// `Σ | |F(I_fix)| − |F(W(I_mov, u))| |` over the full grid. Comparing
/// amplitudes only keeps the term insensitive to global phase.
pub fn kdc_loss(tape: &mut Tape, i_fix: NodeId, i_mov: NodeId, u: NodeId) -> Result<NodeId> {
    let fs = tape.value(i_fix).shape();
    let ms = tape.value(i_mov).shape();
    if fs != ms {
        return Err(Error::ShapeMismatch(format!("image shapes differ: {fs:?} vs {ms:?}")));
    }
    let warped = tape.warp_bilinear(i_mov, u)?;
    let mag_fix = tape.fft2c_magnitude(i_fix, KDC_EPS)?;
    let mag_mov = tape.fft2c_magnitude(warped, KDC_EPS)?;
    let diff = tape.sub(mag_fix, mag_mov)?;
    let a = tape.abs(diff);
    Ok(tape.sum_all(a))
}

/// First-order smoothness: L1 norm of the forward-difference Jacobian of the
/// field at its native resolution, `Σ |∂u/∂y| + Σ |∂u/∂x|`.
pub fn smoothness_loss(tape: &mut Tape, u: NodeId) -> Result<NodeId> {
    let dh = tape.diff_h(u)?;
    let dw = tape.diff_w(u)?;
    let ah = tape.abs(dh);
    let aw = tape.abs(dw);
    let sh = tape.sum_all(ah);
    let sw = tape.sum_all(aw);
    tape.add(sh, sw)
}

/// Photometric loss of the translation head: the per-batch 2-vector `u_t`
/// [n,2,1,1] is broadcast over the grid and scored like any other field.
pub fn translational_loss(
    tape: &mut Tape,
    i_fix: NodeId,
    i_mov: NodeId,
    u_t: NodeId,
    box_w: NodeId,
) -> Result<NodeId> {
    let (_, _, h, w) = tape.value(i_fix).shape();
    let full = tape.broadcast_hw(u_t, h, w)?;
    photometric_loss(tape, i_fix, i_mov, full, box_w)
}

/// Composite objective over all pyramid levels:
/// `α·L_T + Σ_i (L_photo,i + β·L_KDC,i + γ·L_smooth,i)`, with each level's
/// field upscaled to full resolution for the photometric and KDC terms and
/// kept at native resolution for smoothness. `expected_levels` guards against
/// a level-count mismatch between network and objective.
pub fn total_loss(
    tape: &mut Tape,
    u_levels: &[NodeId],
    u_t: NodeId,
    i_fix: NodeId,
    i_mov: NodeId,
    box_w: NodeId,
    weights: &LossWeights,
    expected_levels: usize,
) -> Result<(NodeId, LossTerms)> {
    weights.validate()?;
    if u_levels.len() != expected_levels {
        return Err(Error::InvalidInput(format!(
            "objective expects {} field levels, network produced {}",
            expected_levels,
            u_levels.len()
        )));
    }
    let (_, _, h, _) = tape.value(i_fix).shape();
    let t = translational_loss(tape, i_fix, i_mov, u_t, box_w)?;
    let mut acc = tape.scale(t, weights.alpha);
    let mut terms = LossTerms {
        photo: Vec::with_capacity(expected_levels),
        kdc: Vec::with_capacity(expected_levels),
        smooth: Vec::with_capacity(expected_levels),
        t_photo: tape.value(t).item(),
        total: 0.0,
    };
    for &u in u_levels {
        let full = upscale_field_node(tape, u, h)?;
        let p = photometric_loss(tape, i_fix, i_mov, full, box_w)?;
        let k = kdc_loss(tape, i_fix, i_mov, full)?;
        let s = smoothness_loss(tape, u)?;
        terms.photo.push(tape.value(p).item());
        terms.kdc.push(tape.value(k).item());
        terms.smooth.push(tape.value(s).item());
        acc = tape.add(acc, p)?;
        let kw = tape.scale(k, weights.beta);
        acc = tape.add(acc, kw)?;
        let sw = tape.scale(s, weights.gamma);
        acc = tape.add(acc, sw)?;
    }
    terms.total = tape.value(acc).item();
    Ok((acc, terms))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW with decoupled weight decay:
/// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of update steps taken so far.
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update to every parameter in the store. `grads` must hold a
    /// gradient of matching shape for each parameter.
    pub fn step(
        &mut self,
        store: &mut ParameterStore,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::InvalidInput(format!("learning rate must be >= 0, got {lr}")));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in store.params_mut() {
            let g = grads.get(name).ok_or_else(|| {
                Error::InvalidInput(format!("missing gradient for parameter {name}"))
            })?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -=
                    lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.data[i]);
            }
        }
        Ok(())
    }
}

/// Cosine decay without restarts: `η_t = ½·η_0·(1 + cos(π·t/T))`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (PI * frac).cos())
}

/// Gather the backward-pass gradients for every named parameter node.
/// Parameters that did not receive a gradient (not on a path to the loss)
/// get an explicit zero tensor of the parameter's shape.
pub fn collect_param_grads(
    grads: &[Option<Tensor>],
    param_nodes: &BTreeMap<String, NodeId>,
    store: &ParameterStore,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (name, &id) in param_nodes {
        let g = match grads.get(id).and_then(|o| o.as_ref()) {
            Some(g) => g.clone(),
            None => {
                let p = store.param(name)?;
                Tensor::zeros(p.n, p.c, p.h, p.w)
            }
        };
        out.insert(name.clone(), g);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Scene synthesis
// ---------------------------------------------------------------------------

/// Sampling trajectory for a training scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Cartesian { lines: usize },
    Radial { spokes: usize },
}

/// Motion model used to synthesize the moving frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SceneMotion {
    /// Rigid translation by (ux, uy) pixels, synthesized spectrally.
    Translation { ux: f64, uy: f64 },
    /// Smooth random field: `bumps` Gaussian bumps rescaled to peak
    /// magnitude `amp` pixels.
    Gaussian { amp: f64, bumps: usize },
    /// A phantom cine pair: register frame `mov` onto frame `fix`.
    Cine { n_frames: usize, fix: usize, mov: usize },
}

/// One self-supervised training example.
pub struct TrainScene {
    /// Undersampled multi-coil k-space of the fixed frame (radial scenes are
    /// gridded onto the Cartesian grid), ready for `LapaNet::prepare_input`.
    pub k_fix: MultiCoilKSpace,
    pub k_mov: MultiCoilKSpace,
    /// Fully sampled coil images [1, 2·n_c, h, w] the losses compare against.
    pub i_fix: Tensor,
    pub i_mov: Tensor,
    /// Box weight [1, n_c, h, w] covering both frames' anatomy.
    pub box_w: Tensor,
    /// Acceleration factor of the sampling pattern.
    pub r: f64,
    pub kind: &'static str,
    /// Ground-truth rigid shift, if the scene is a pure translation.
    pub gt_translation: Option<(f64, f64)>,
    /// Full ground-truth field warping the moving frame onto the fixed one.
    pub gt_field: Option<DisplacementField>,
}

/// Coil-resolved image stack as an autodiff tensor: channel 2c is the real
/// part and channel 2c+1 the imaginary part of `maps[c] ⊙ img`.
pub fn coil_images_tensor(img: &ComplexImage, maps: &CoilSensitivityMap) -> Result<Tensor> {
    let n_c = maps.n_coils();
    let (h, w) = (img.h, img.w);
    for m in &maps.maps {
        if m.h != h || m.w != w {
            return Err(Error::ShapeMismatch(format!(
                "coil map {}x{} vs image {}x{}",
                m.h, m.w, h, w
            )));
        }
    }
    let mut data = Vec::with_capacity(2 * n_c * h * w);
    for m in &maps.maps {
        let weighted: Vec<Complex64> =
            img.data.iter().zip(&m.data).map(|(&z, &s)| z * s).collect();
        data.extend(weighted.iter().map(|z| z.re));
        data.extend(weighted.iter().map(|z| z.im));
    }
    Tensor::from_vec(1, 2 * n_c, h, w, data)
}

/// Binary box weight replicated over coil channels: [1, n_c, h, w].
pub fn box_weight_tensor(bm: &BoxMask, n_coils: usize) -> Tensor {
    let grid = bm.to_real_grid();
    let mut data = Vec::with_capacity(n_coils * grid.data.len());
    for _ in 0..n_coils {
        data.extend_from_slice(&grid.data);
    }
    Tensor::from_vec(1, n_coils, grid.h, grid.w, data)
        .expect("box weight dimensions are consistent by construction")
}

/// Concatenate per-scene tensors along the batch dimension.
pub fn stack_batch(ts: &[Tensor]) -> Result<Tensor> {
    let first = ts
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot stack an empty batch".into()))?;
    let (c, h, w) = (first.c, first.h, first.w);
    let mut n = 0;
    let mut data = Vec::new();
    for t in ts {
        if t.c != c || t.h != h || t.w != w {
            return Err(Error::ShapeMismatch(format!(
                "batch member {:?} does not match {:?}",
                t.shape(),
                first.shape()
            )));
        }
        n += t.n;
        data.extend_from_slice(&t.data);
    }
    Tensor::from_vec(n, c, h, w, data)
}

fn sample_grid_clamped(g: &RealGrid, y: f64, x: f64) -> f64 {
    let yc = y.clamp(0.0, (g.h - 1) as f64);
    let xc = x.clamp(0.0, (g.w - 1) as f64);
    let y0 = yc.floor() as usize;
    let x0 = xc.floor() as usize;
    let y1 = (y0 + 1).min(g.h - 1);
    let x1 = (x0 + 1).min(g.w - 1);
    let fy = yc - y0 as f64;
    let fx = xc - x0 as f64;
    let a = g.at(y0, x0) * (1.0 - fx) + g.at(y0, x1) * fx;
    let b = g.at(y1, x0) * (1.0 - fx) + g.at(y1, x1) * fx;
    a * (1.0 - fy) + b * fy
}

/// Fixed-point inverse displacement: returns `w` with `w(q) = u(q + w(q))`,
/// so that a point displaced by `u` lands where `w` says it came from. Used
/// to synthesize a moving frame whose ground-truth forward field is exactly
/// `u`: `I_mov(q) = I_fix(q + w(q))`.
pub fn invert_field(u: &DisplacementField, iters: usize) -> DisplacementField {
    let (h, w) = (u.h(), u.w());
    let mut inv = DisplacementField::zeros(h, w);
    for _ in 0..iters {
        let mut next = DisplacementField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let wy = inv.uy.at(y, x);
                let wx = inv.ux.at(y, x);
                *next.ux.at_mut(y, x) = sample_grid_clamped(&u.ux, y as f64 + wy, x as f64 + wx);
                *next.uy.at_mut(y, x) = sample_grid_clamped(&u.uy, y as f64 + wy, x as f64 + wx);
            }
        }
        inv = next;
    }
    inv
}

fn negated(u: &DisplacementField) -> DisplacementField {
    DisplacementField {
        ux: RealGrid { h: u.h(), w: u.w(), data: u.ux.data.iter().map(|v| -v).collect() },
        uy: RealGrid { h: u.h(), w: u.w(), data: u.uy.data.iter().map(|v| -v).collect() },
    }
}

/// Synthesize one training scene: fixed/moving object frames under the
/// requested motion model, coil-weighted fully sampled images for the
/// losses, and undersampled k-space inputs for the network. Deterministic in
/// `seed`.
pub fn make_scene(
    pcfg: &PhantomConfig,
    n_coils: usize,
    motion: &SceneMotion,
    kind: &SceneKind,
    seed: u64,
) -> Result<TrainScene> {
    if pcfg.h != pcfg.w {
        return Err(Error::InvalidInput(format!(
            "training scenes must be square, got {}x{}",
            pcfg.h, pcfg.w
        )));
    }
    let (h, w) = (pcfg.h, pcfg.w);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    struct Frames {
        i_fix: ComplexImage,
        i_mov: ComplexImage,
        mask_fix: LabelGrid,
        mask_mov: LabelGrid,
        gt_translation: Option<(f64, f64)>,
        gt_field: Option<DisplacementField>,
    }

    let frames = match *motion {
        SceneMotion::Translation { ux, uy } => {
            let scene = phantom_cine(pcfg, 2)?;
            let i_fix = scene.frames[0].clone();
            let k = fft2_centered(&i_fix)?;
            // Content moves by −u from fixed to moving, so that warping the
            // moving frame by the constant field +u restores the fixed one.
            let km = apply_phase_ramp(&k, -ux, -uy);
            let i_mov = ifft2_centered(&km)?;
            let gt = DisplacementField::constant(h, w, ux, uy);
            let mask_mov = warp_mask(&scene.masks[0], &negated(&gt))?;
            Frames {
                i_fix,
                i_mov,
                mask_fix: scene.masks[0].clone(),
                mask_mov,
                gt_translation: Some((ux, uy)),
                gt_field: Some(gt),
            }
        }
        SceneMotion::Gaussian { amp, bumps } => {
            if !(amp > 0.0) || bumps == 0 {
                return Err(Error::InvalidInput(format!(
                    "gaussian motion needs positive amplitude and at least one bump, got amp {amp}, bumps {bumps}"
                )));
            }
            let scene = phantom_cine(pcfg, 2)?;
            let i_fix = scene.frames[0].clone();
            let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
            let mut centers = Vec::with_capacity(bumps);
            let mut amps = Vec::with_capacity(bumps);
            let mut widths = Vec::with_capacity(bumps);
            for _ in 0..bumps {
                let rho = rng.gen_range(0.2..1.3) * pcfg.r_outer;
                let th = rng.gen_range(0.0..2.0 * PI);
                centers.push((cy + rho * th.sin(), cx + rho * th.cos()));
                let mag = rng.gen_range(0.3..1.0) * amp;
                let phi = rng.gen_range(0.0..2.0 * PI);
                amps.push((mag * phi.cos(), mag * phi.sin()));
                widths.push(rng.gen_range(0.09..0.18) * h as f64);
            }
            let u = synth_gaussian_field(&centers, &amps, &widths, h, w)?;
            let inv = invert_field(&u, 20);
            let neg_inv = negated(&inv);
            let i_mov = warp_bilinear(&i_fix, &neg_inv)?;
            let mask_mov = warp_mask(&scene.masks[0], &neg_inv)?;
            Frames {
                i_fix,
                i_mov,
                mask_fix: scene.masks[0].clone(),
                mask_mov,
                gt_translation: None,
                gt_field: Some(u),
            }
        }
        SceneMotion::Cine { n_frames, fix, mov } => {
            if fix >= n_frames || mov >= n_frames {
                return Err(Error::InvalidInput(format!(
                    "cine pair ({fix}, {mov}) outside 0..{n_frames}"
                )));
            }
            let scene = phantom_cine(pcfg, n_frames)?;
            let gt = scene.field(fix, mov)?;
            Frames {
                i_fix: scene.frames[fix].clone(),
                i_mov: scene.frames[mov].clone(),
                mask_fix: scene.masks[fix].clone(),
                mask_mov: scene.masks[mov].clone(),
                gt_translation: None,
                gt_field: Some(gt),
            }
        }
    };

    // Each frame is scaled by its own peak magnitude before any transform, so
    // the k-space the network sees is that of a unit-peak image.
    let frames = Frames {
        i_fix: normalize_max(&frames.i_fix)?,
        i_mov: normalize_max(&frames.i_mov)?,
        ..frames
    };

    let maps = synthetic_coil_maps(h, w, n_coils);
    let i_fix_t = coil_images_tensor(&frames.i_fix, &maps)?;
    let i_mov_t = coil_images_tensor(&frames.i_mov, &maps)?;
    let bm = BoxMask::from_labels(&[&frames.mask_fix, &frames.mask_mov], BOX_MARGIN_PX)?;
    let box_w = box_weight_tensor(&bm, n_coils);

    let (k_fix, k_mov, r, kind_name) = match *kind {
        SceneKind::Cartesian { lines } => {
            let pats = vista_like_mask(h, 2, lines, rng.gen())?;
            let kf = multicoil_forward(&frames.i_fix, &maps, &pats[0])?;
            let km = multicoil_forward(&frames.i_mov, &maps, &pats[1])?;
            (kf, km, acceleration(h, lines)?.r, "cartesian")
        }
        SceneKind::Radial { spokes } => {
            // Consecutive golden-angle shots: the moving frame continues the
            // spoke sequence where the fixed frame stopped.
            let pat_f = golden_angle_spokes(spokes, 0, w);
            let pat_m = golden_angle_spokes(spokes, spokes, w);
            let sf = multicoil_forward(&frames.i_fix, &maps, &pat_f)?;
            let sm = multicoil_forward(&frames.i_mov, &maps, &pat_m)?;
            let gf: Vec<_> = sf
                .coils
                .iter()
                .map(|s| radial_adjoint_grid(s, &pat_f, h, w))
                .collect::<Result<_>>()?;
            let gm: Vec<_> = sm
                .coils
                .iter()
                .map(|s| radial_adjoint_grid(s, &pat_m, h, w))
                .collect::<Result<_>>()?;
            (
                MultiCoilKSpace::new(gf)?,
                MultiCoilKSpace::new(gm)?,
                acceleration(2 * h, spokes)?.r,
                "radial",
            )
        }
    };

    Ok(TrainScene {
        k_fix,
        k_mov,
        i_fix: i_fix_t,
        i_mov: i_mov_t,
        box_w,
        r,
        kind: kind_name,
        gt_translation: frames.gt_translation,
        gt_field: frames.gt_field,
    })
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Curriculum stage in effect at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Translation,
    Gaussian,
    Cine,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Translation => "translation",
            Stage::Gaussian => "gaussian",
            Stage::Cine => "cine",
        }
    }
}

/// Training hyperparameters. Every step draws a fresh batch of synthetic
/// scenes; the trajectory kind and acceleration are sampled per step from
/// the configured grids, so all batch members share one sampling regime.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// First step of the Gaussian-field stage.
    pub stage2_start: usize,
    /// First step of the cine stage (`usize::MAX` disables it).
    pub stage3_start: usize,
    /// Cartesian grid: phase-encode lines kept per frame.
    pub cartesian_lines: Vec<usize>,
    /// Radial grid: golden-angle spokes per frame.
    pub radial_spokes: Vec<usize>,
    /// Largest |component| of stage-1 translations, pixels.
    pub max_shift: f64,
    /// Peak magnitude of stage-2 Gaussian fields, pixels.
    pub gaussian_amp: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// A compact curriculum sized for a single CPU core: rigid translations
    /// for the first 1200 steps, then Gaussian fields, Cartesian sampling
    /// from fully sampled down to 8 lines.
    pub fn desk_probe(seed: u64) -> Self {
        Self {
            steps: 2000,
            batch: 8,
            base_lr: 1e-3,
            weight_decay: 1e-3,
            weights: LossWeights::default(),
            stage2_start: 1200,
            stage3_start: usize::MAX,
            cartesian_lines: vec![64, 16, 8],
            radial_spokes: Vec::new(),
            max_shift: 4.0,
            gaussian_amp: 2.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.steps == 0 || self.batch == 0 {
            return Err(Error::InvalidInput("steps and batch must be positive".into()));
        }
        if !self.base_lr.is_finite() || self.base_lr <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "base learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::InvalidInput(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.cartesian_lines.is_empty() && self.radial_spokes.is_empty() {
            return Err(Error::InvalidInput(
                "at least one sampling grid (cartesian or radial) must be non-empty".into(),
            ));
        }
        if !(self.max_shift >= 0.0) || !(self.gaussian_amp > 0.0) {
            return Err(Error::InvalidInput(format!(
                "max_shift must be >= 0 and gaussian_amp > 0, got {} and {}",
                self.max_shift, self.gaussian_amp
            )));
        }
        Ok(())
    }
}

/// Outcome of a training run: the full per-step CSV log plus the mean total
/// loss over the first and last windows for a quick convergence read.
pub struct TrainReport {
    pub csv: String,
    pub first_window_mean: f64,
    pub last_window_mean: f64,
    pub steps: usize,
}

fn sample_phantom_cfg(rng: &mut ChaCha20Rng, size: usize) -> PhantomConfig {
    let s = size as f64;
    let r_inner = rng.gen_range(0.11..0.16) * s;
    let r_outer = r_inner + rng.gen_range(0.07..0.11) * s;
    PhantomConfig {
        h: size,
        w: size,
        r_inner,
        r_outer,
        contraction: rng.gen_range(0.05..0.15),
        rv_shift: (rng.gen_range(-2.0..2.0), rng.gen_range(-1.5..1.5)),
        texture_amp: 0.1,
        seed: rng.gen(),
    }
}

fn sample_kind(rng: &mut ChaCha20Rng, tc: &TrainConfig) -> SceneKind {
    let use_radial = if tc.cartesian_lines.is_empty() {
        true
    } else if tc.radial_spokes.is_empty() {
        false
    } else {
        rng.gen_bool(0.5)
    };
    if use_radial {
        SceneKind::Radial { spokes: tc.radial_spokes[rng.gen_range(0..tc.radial_spokes.len())] }
    } else {
        SceneKind::Cartesian {
            lines: tc.cartesian_lines[rng.gen_range(0..tc.cartesian_lines.len())],
        }
    }
}

fn csv_header(levels: usize) -> String {
    let mut s = String::from("step,stage,kind,r,lr,t_photo");
    for i in 1..=levels {
        s.push_str(&format!(",photo{i}"));
    }
    for i in 1..=levels {
        s.push_str(&format!(",kdc{i}"));
    }
    for i in 1..=levels {
        s.push_str(&format!(",smooth{i}"));
    }
    s.push_str(",total\n");
    s
}

/// Run the staged self-supervised training loop. Each step reseeds its RNG
/// from `(seed, step)`, so runs are reproducible and restartable; a
/// non-finite loss aborts with the offending step index.
pub fn train(net: &mut LapaNet, tc: &TrainConfig) -> Result<TrainReport> {
    tc.validate()?;
    let size = net.cfg.input_size;
    let n_c = net.cfg.n_coils;
    let levels = net.cfg.levels;
    let mut opt = AdamW::new(tc.weight_decay);
    let mut csv = csv_header(levels);
    let mut totals = Vec::with_capacity(tc.steps);

    for step in 0..tc.steps {
        let mut rng = ChaCha20Rng::seed_from_u64(tc.seed);
        rng.set_stream(step as u64 + 1);
        let stage = if step >= tc.stage3_start {
            Stage::Cine
        } else if step >= tc.stage2_start {
            Stage::Gaussian
        } else {
            Stage::Translation
        };
        let kind = sample_kind(&mut rng, tc);

        let mut inputs = Vec::with_capacity(tc.batch);
        let mut fixes = Vec::with_capacity(tc.batch);
        let mut movs = Vec::with_capacity(tc.batch);
        let mut boxes = Vec::with_capacity(tc.batch);
        let mut r_val = 0.0;
        for _ in 0..tc.batch {
            let pcfg = sample_phantom_cfg(&mut rng, size);
            let motion = match stage {
                Stage::Translation => SceneMotion::Translation {
                    ux: rng.gen_range(-tc.max_shift..=tc.max_shift),
                    uy: rng.gen_range(-tc.max_shift..=tc.max_shift),
                },
                Stage::Gaussian => SceneMotion::Gaussian {
                    amp: rng.gen_range(0.4..1.0) * tc.gaussian_amp,
                    bumps: rng.gen_range(2..=4),
                },
                Stage::Cine => {
                    let t = rng.gen_range(0..4);
                    SceneMotion::Cine { n_frames: 5, fix: t, mov: t + 1 }
                }
            };
            let scene = make_scene(&pcfg, n_c, &motion, &kind, rng.gen())?;
            inputs.push(net.prepare_input(&scene.k_fix, &scene.k_mov)?);
            fixes.push(scene.i_fix);
            movs.push(scene.i_mov);
            boxes.push(scene.box_w);
            r_val = scene.r;
        }

        let input_t = stack_batch(&inputs)?;
        let fix_t = stack_batch(&fixes)?;
        let mov_t = stack_batch(&movs)?;
        let box_t = stack_batch(&boxes)?;

        let mut tape = Tape::new();
        let input = tape.leaf(input_t, false);
        let i_fix = tape.leaf(fix_t, false);
        let i_mov = tape.leaf(mov_t, false);
        let box_w = tape.leaf(box_t, false);
        let out = net.forward(&mut tape, input, true)?;
        let (loss, terms) =
            total_loss(&mut tape, &out.u, out.u_t, i_fix, i_mov, box_w, &tc.weights, levels)?;
        if !terms.total.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at step {step}")));
        }
        let grads = tape.backward(loss)?;
        let gmap = collect_param_grads(&grads, &out.param_nodes, &net.store)?;
        let lr = cosine_lr(tc.base_lr, step, tc.steps);
        opt.step(&mut net.store, &gmap, lr)?;

        let kind_name = match kind {
            SceneKind::Cartesian { .. } => "cartesian",
            SceneKind::Radial { .. } => "radial",
        };
        csv.push_str(&format!(
            "{step},{},{kind_name},{:.4},{:.6e},{:.6e}",
            stage.name(),
            r_val,
            lr,
            terms.t_photo
        ));
        for v in terms.photo.iter().chain(&terms.kdc).chain(&terms.smooth) {
            csv.push_str(&format!(",{v:.6e}"));
        }
        csv.push_str(&format!(",{:.6e}\n", terms.total));
        totals.push(terms.total);
    }

    let window = (tc.steps / 40).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Ok(TrainReport {
        first_window_mean: mean(&totals[..window.min(totals.len())]),
        last_window_mean: mean(&totals[totals.len().saturating_sub(window)..]),
        steps: tc.steps,
        csv,
    })
}

/// Translation-recovery readout for a (trained) network: forwards one pure
/// translation scene in eval mode and reports both the translation head and
/// the mean of the finest field.
pub struct TranslationProbe {
    pub u_t: (f64, f64),
    pub u_mean: (f64, f64),
}

pub fn probe_translation(
    net: &mut LapaNet,
    pcfg: &PhantomConfig,
    shift: (f64, f64),
    kind: &SceneKind,
    seed: u64,
) -> Result<TranslationProbe> {
    let motion = SceneMotion::Translation { ux: shift.0, uy: shift.1 };
    let scene = make_scene(pcfg, net.cfg.n_coils, &motion, kind, seed)?;
    let mut tape = Tape::new();
    let out = net.forward_kspace(&mut tape, &scene.k_fix, &scene.k_mov, false)?;
    let ut = tape.value(out.u_t);
    let u = tape.value(*out.u.last().expect("network always produces at least one level"));
    let hw = (u.h * u.w) as f64;
    let mean_c = |t: &Tensor, c: usize| -> f64 {
        let base = c * t.h * t.w;
        t.data[base..base + t.h * t.w].iter().sum::<f64>() / hw
    };
    Ok(TranslationProbe {
        u_t: (ut.at(0, 0, 0, 0), ut.at(0, 1, 0, 0)),
        u_mean: (mean_c(u, 0), mean_c(u, 1)),
    })
}
