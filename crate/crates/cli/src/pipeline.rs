//! Shared plumbing between subcommands: artifact paths, undersampling plans,
//! k-space preparation for both solvers and the register → warp → metrics
//! core that `register` and `sweep` drive.

use std::path::{Path, PathBuf};

use kmotion::autodiff::Tape;
use kmotion::cxa::{self, CxaArray};
use kmotion::error::{Error, Result};
use kmotion::grid::{
    CoilSensitivityMap, ComplexImage, DisplacementField, LabelGrid, MultiCoilKSpace, RealGrid,
};
use kmotion::kspace::{fft2_centered, multicoil_forward, normalize_max, synthetic_coil_maps};
use kmotion::lap::{default_window_schedule, lap_register_multiscale};
use kmotion::metrics::{EvalResult, DEFAULT_PIXEL_SPACING_MM};
use kmotion::model::LapaNet;
use kmotion::motion::{warp_bilinear, warp_mask};
use kmotion::phantom::{LABEL_CAVITY, LABEL_MYOCARDIUM, LABEL_RV_POOL};
use kmotion::sampling::{
    acceleration, apply_line_mask, golden_angle_spokes, radial_adjoint_grid, radial_sample,
    vista_like_mask, SamplingPattern,
};

use crate::config::{ExperimentConfig, Method, TrajKind};

/// Segmentation classes scored by every metrics row.
pub const EVAL_LABELS: [u8; 3] = [LABEL_MYOCARDIUM, LABEL_CAVITY, LABEL_RV_POOL];

// ---------------------------------------------------------------------------
// Artifact paths
// ---------------------------------------------------------------------------

pub fn frame_path(out: &Path, i: usize) -> PathBuf {
    out.join(format!("frame_{i:03}.cxa"))
}

pub fn mask_path(out: &Path, i: usize) -> PathBuf {
    out.join(format!("mask_{i:03}.cxa"))
}

pub fn field_path(out: &Path, fix: usize, mov: usize) -> PathBuf {
    out.join(format!("field_{fix:03}_to_{mov:03}.cxa"))
}

/// Compact acceleration tag for file names: `4`, `31.2`, ...
pub fn format_r(r: f64) -> String {
    format!("{r}")
}

/// `lap_cartesian_r4_000to001` and friends.
pub fn cell_tag(method: Method, traj: TrajKind, r: f64, fix: usize, mov: usize) -> String {
    format!(
        "{}_{}_r{}_{fix:03}to{mov:03}",
        method.name(),
        traj.name(),
        format_r(r)
    )
}

// ---------------------------------------------------------------------------
// CXA conversions
// ---------------------------------------------------------------------------

pub fn image_to_cxa(img: &ComplexImage) -> CxaArray {
    CxaArray::C128 { dims: vec![img.h, img.w], data: img.data.clone() }
}

pub fn mask_to_cxa(mask: &LabelGrid) -> CxaArray {
    CxaArray::U8 { dims: vec![mask.h, mask.w], data: mask.data.clone() }
}

/// Fields are stored as an `[2, h, w]` f64 array: the ux plane then uy.
pub fn field_to_cxa(u: &DisplacementField) -> CxaArray {
    let mut data = u.ux.data.clone();
    data.extend_from_slice(&u.uy.data);
    CxaArray::F64 { dims: vec![2, u.h(), u.w()], data }
}

pub fn cxa_to_field(arr: &CxaArray) -> Result<DisplacementField> {
    let CxaArray::F64 { dims, data } = arr else {
        return Err(Error::Format("displacement field must be an f64 array".into()));
    };
    let [c, h, w] = dims[..] else {
        return Err(Error::Format(format!("field array has dims {dims:?}, expected [2, h, w]")));
    };
    if c != 2 || data.len() != 2 * h * w {
        return Err(Error::Format(format!("field array has dims {dims:?}, expected [2, h, w]")));
    }
    let ux = RealGrid { h, w, data: data[..h * w].to_vec() };
    let uy = RealGrid { h, w, data: data[h * w..].to_vec() };
    Ok(DisplacementField { ux, uy })
}

fn read_image(path: &Path) -> Result<ComplexImage> {
    let arr = cxa::read_file(path)?;
    cxa::to_complex_grid(&arr)
}

fn read_mask(path: &Path) -> Result<LabelGrid> {
    let arr = cxa::read_file(path)?;
    let CxaArray::U8 { dims, data } = arr else {
        return Err(Error::Format(format!("{} is not a label mask", path.display())));
    };
    let [h, w] = dims[..] else {
        return Err(Error::Format(format!("mask {} has dims {dims:?}", path.display())));
    };
    Ok(LabelGrid { h, w, data })
}

// ---------------------------------------------------------------------------
// Frame pairs
// ---------------------------------------------------------------------------

/// A fixed/moving frame pair with segmentation masks.
pub struct FramePair {
    pub i_fix: ComplexImage,
    pub i_mov: ComplexImage,
    pub mask_fix: LabelGrid,
    pub mask_mov: LabelGrid,
}

/// Loads a pair written by `kmotion phantom` from the output directory.
pub fn load_pair(out: &Path, fix: usize, mov: usize) -> Result<FramePair> {
    for idx in [fix, mov] {
        let p = frame_path(out, idx);
        if !p.exists() {
            return Err(Error::InvalidInput(format!(
                "{} does not exist; run `kmotion phantom` first",
                p.display()
            )));
        }
    }
    // Frames are peak-normalized at load, before any transform, so every
    // downstream consumer (gridding, LAP, the network, metrics) sees the same
    // unit-peak scale the training scenes use.
    Ok(FramePair {
        i_fix: normalize_max(&read_image(&frame_path(out, fix))?)?,
        i_mov: normalize_max(&read_image(&frame_path(out, mov))?)?,
        mask_fix: read_mask(&mask_path(out, fix))?,
        mask_mov: read_mask(&mask_path(out, mov))?,
    })
}

// ---------------------------------------------------------------------------
// Undersampling plans
// ---------------------------------------------------------------------------

/// Sampling patterns for every cine frame at one grid cell, plus the exact
/// acceleration they achieve.
pub struct UndersamplePlan {
    pub r_requested: f64,
    /// Achieved factor: full count over per-frame count.
    pub r: f64,
    /// Lines (Cartesian) or spokes (radial) kept per frame.
    pub count: usize,
    pub patterns: Vec<SamplingPattern>,
}

/// Maps a requested acceleration onto per-frame patterns. Cartesian frames
/// keep `round(size / r)` phase-encode lines of a VISTA-like sequence; radial
/// frames continue one golden-angle acquisition with `round(2·size / r)`
/// spokes each, the full count convention being two spokes per line.
pub fn plan_undersampling(
    cfg: &ExperimentConfig,
    traj: TrajKind,
    r_requested: f64,
) -> Result<UndersamplePlan> {
    if !r_requested.is_finite() || r_requested < 1.0 {
        return Err(Error::InvalidInput(format!(
            "acceleration must be finite and >= 1, got {r_requested}"
        )));
    }
    let size = cfg.size;
    let (count, patterns, rep) = match traj {
        TrajKind::Cartesian => {
            let lines = (size as f64 / r_requested).round() as usize;
            if lines == 0 {
                return Err(Error::InvalidInput(format!(
                    "acceleration {r_requested} keeps no line of a {size}-line grid"
                )));
            }
            let lines = lines.min(size);
            let pats = vista_like_mask(size, cfg.n_frames, lines, cfg.seed)?;
            (lines, pats, acceleration(size, lines)?)
        }
        TrajKind::Radial => {
            let spokes = (2.0 * size as f64 / r_requested).round() as usize;
            if spokes == 0 {
                return Err(Error::InvalidInput(format!(
                    "acceleration {r_requested} keeps no spoke of a {}-spoke acquisition",
                    2 * size
                )));
            }
            let pats = (0..cfg.n_frames)
                .map(|i| golden_angle_spokes(spokes, i * spokes, size))
                .collect();
            (spokes, pats, acceleration(2 * size, spokes)?)
        }
    };
    Ok(UndersamplePlan { r_requested, r: rep.r, count, patterns })
}

/// Undersampled single-coil k-space on the Cartesian grid (radial spokes are
/// regridded with the density-compensated adjoint).
pub fn grid_single(img: &ComplexImage, pattern: &SamplingPattern) -> Result<ComplexImage> {
    match pattern.traj {
        kmotion::sampling::Trajectory::CartesianLines { .. } => {
            apply_line_mask(&fft2_centered(img)?, pattern)
        }
        kmotion::sampling::Trajectory::RadialSpokes { .. } => {
            let spokes = radial_sample(img, pattern)?;
            radial_adjoint_grid(&spokes, pattern, img.h, img.w)
        }
    }
}

/// Undersampled multi-coil k-space for the network, one gridded spectrum per
/// coil.
pub fn grid_multicoil(
    img: &ComplexImage,
    maps: &CoilSensitivityMap,
    pattern: &SamplingPattern,
) -> Result<MultiCoilKSpace> {
    let k = multicoil_forward(img, maps, pattern)?;
    match pattern.traj {
        kmotion::sampling::Trajectory::CartesianLines { .. } => Ok(k),
        kmotion::sampling::Trajectory::RadialSpokes { .. } => {
            let gridded: Vec<ComplexImage> = k
                .coils
                .iter()
                .map(|s| radial_adjoint_grid(s, pattern, img.h, img.w))
                .collect::<Result<_>>()?;
            MultiCoilKSpace::new(gridded)
        }
    }
}

// ---------------------------------------------------------------------------
// Registration core
// ---------------------------------------------------------------------------

pub const STATUS_OK: &str = "ok";
pub const STATUS_INSUFFICIENT: &str = "insufficient_signal";

/// One registered grid cell: the estimated field plus metrics of the moving
/// frame warped by it. When the classical solver reports insufficient signal
/// the field falls back to zero and the row keeps the identity-warp metrics
/// under the `insufficient_signal` status.
pub struct RegisterOutcome {
    pub status: &'static str,
    pub field: DisplacementField,
    pub warped: ComplexImage,
    pub eval: EvalResult,
}

pub fn register_pair(
    pair: &FramePair,
    plan: &UndersamplePlan,
    fix: usize,
    mov: usize,
    method: Method,
    net: Option<&mut LapaNet>,
) -> Result<RegisterOutcome> {
    let (h, w) = (pair.i_fix.h, pair.i_fix.w);
    if fix >= plan.patterns.len() || mov >= plan.patterns.len() {
        return Err(Error::InvalidInput(format!(
            "frame pair ({fix}, {mov}) outside the {}-frame plan",
            plan.patterns.len()
        )));
    }
    let mut status = STATUS_OK;
    let field = match method {
        Method::Lap => {
            let kf = grid_single(&pair.i_fix, &plan.patterns[fix])?;
            let km = grid_single(&pair.i_mov, &plan.patterns[mov])?;
            let schedule = default_window_schedule(h, w, 4);
            match lap_register_multiscale(&kf, &km, schedule.len(), &schedule) {
                Ok(u) => u,
                Err(Error::InsufficientSignal(_)) => {
                    status = STATUS_INSUFFICIENT;
                    DisplacementField::zeros(h, w)
                }
                Err(e) => return Err(e),
            }
        }
        Method::Lapanet => {
            let net = net.ok_or_else(|| {
                Error::InvalidInput("method lapanet needs a checkpoint".into())
            })?;
            if net.cfg.input_size != h {
                return Err(Error::InvalidInput(format!(
                    "checkpoint expects {0}x{0} inputs, scene is {h}x{w}",
                    net.cfg.input_size
                )));
            }
            let maps = synthetic_coil_maps(h, w, net.cfg.n_coils);
            let kf = grid_multicoil(&pair.i_fix, &maps, &plan.patterns[fix])?;
            let km = grid_multicoil(&pair.i_mov, &maps, &plan.patterns[mov])?;
            let mut tape = Tape::new();
            let out = net.forward_kspace(&mut tape, &kf, &km, false)?;
            let u = tape.value(*out.u.last().expect("network emits at least one level"));
            let hw = u.h * u.w;
            DisplacementField {
                ux: RealGrid { h: u.h, w: u.w, data: u.data[..hw].to_vec() },
                uy: RealGrid { h: u.h, w: u.w, data: u.data[hw..2 * hw].to_vec() },
            }
        }
    };
    let warped = warp_bilinear(&pair.i_mov, &field)?;
    let warped_mask = warp_mask(&pair.mask_mov, &field)?;
    let eval = EvalResult::compute(
        &pair.i_fix,
        &warped,
        &pair.mask_fix,
        &warped_mask,
        &EVAL_LABELS,
        DEFAULT_PIXEL_SPACING_MM,
    )?;
    Ok(RegisterOutcome { status, field, warped, eval })
}

/// Header of the long-format metrics CSV shared by `register` and `sweep`.
pub fn metrics_csv_header() -> String {
    format!(
        "method,trajectory,r_requested,r,fix,mov,status,{}",
        EvalResult::csv_header(&EVAL_LABELS)
    )
}

pub fn metrics_csv_row(
    method: Method,
    traj: TrajKind,
    plan_r_requested: f64,
    plan_r: f64,
    fix: usize,
    mov: usize,
    outcome: &RegisterOutcome,
) -> String {
    format!(
        "{},{},{},{:.6},{},{},{},{}",
        method.name(),
        traj.name(),
        plan_r_requested,
        plan_r,
        fix,
        mov,
        outcome.status,
        outcome.eval.csv_row()
    )
}
