//! Implementations of the seven subcommands.

use std::path::{Path, PathBuf};

use kmotion::cxa;
use kmotion::error::{Error, Result};
use kmotion::kspace::{ifft2_centered, normalize_max, synthetic_coil_maps};
use kmotion::model::{LapaNet, ModelConfig};
use kmotion::nps::{attribution_heatmaps, nps_analysis};
use kmotion::phantom::phantom_cine;
use kmotion::sampling::{patterns_to_csv, Trajectory};
use kmotion::train::{train, TrainConfig};
use kmotion::viz::{error_map_pgm, flow_to_ppm, grid_to_pgm, magnitude_to_pgm, write_bytes};

use crate::config::{ExperimentConfig, Method, TrajKind};
use crate::pipeline::{
    cell_tag, cxa_to_field, field_path, field_to_cxa, format_r, frame_path, grid_multicoil,
    grid_single, image_to_cxa, load_pair, mask_path, mask_to_cxa, metrics_csv_header,
    metrics_csv_row, plan_undersampling, register_pair, FramePair, RegisterOutcome, STATUS_OK,
};

fn ensure_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn resolve_traj(cfg: &ExperimentConfig, flag: Option<TrajKind>) -> TrajKind {
    flag.unwrap_or(cfg.trajectories[0])
}

fn resolve_r(cfg: &ExperimentConfig, flag: Option<f64>) -> f64 {
    flag.unwrap_or(cfg.accelerations[0])
}

fn load_checkpoint(path: Option<&Path>) -> Result<LapaNet> {
    let Some(dir) = path else {
        return Err(Error::InvalidInput(
            "this method needs --checkpoint pointing at a trained model".into(),
        ));
    };
    if !dir.join("config.txt").exists() {
        return Err(Error::InvalidInput(format!(
            "checkpoint {} does not exist (no config.txt)",
            dir.display()
        )));
    }
    LapaNet::load(dir)
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

/// Writes the cine phantom: one CXA frame/mask plus a PGM preview per time
/// point, and the ground-truth displacement field for every ordered pair.
pub fn cmd_phantom(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out(cfg)?;
    let scene = phantom_cine(&cfg.phantom_config(), cfg.n_frames)?;
    for i in 0..cfg.n_frames {
        cxa::write_file(frame_path(&cfg.out, i), &image_to_cxa(&scene.frames[i]))?;
        cxa::write_file(mask_path(&cfg.out, i), &mask_to_cxa(&scene.masks[i]))?;
        let pgm = magnitude_to_pgm(&scene.frames[i])?;
        write_bytes(&cfg.out.join(format!("frame_{i:03}.pgm")), &pgm)?;
    }
    let mut n_fields = 0;
    for i in 0..cfg.n_frames {
        for j in 0..cfg.n_frames {
            if i == j {
                continue;
            }
            let u = scene.field(i, j)?;
            cxa::write_file(field_path(&cfg.out, i, j), &field_to_cxa(&u))?;
            n_fields += 1;
        }
    }
    println!(
        "phantom: wrote {} frames, {} masks, {n_fields} fields to {}",
        cfg.n_frames,
        cfg.n_frames,
        cfg.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// undersample
// ---------------------------------------------------------------------------

/// Undersamples one stored frame and writes the gridded k-space, a
/// zero-filled reconstruction preview and the sampling pattern.
pub fn cmd_undersample(
    cfg: &ExperimentConfig,
    frame: usize,
    traj: Option<TrajKind>,
    r: Option<f64>,
) -> Result<()> {
    ensure_out(cfg)?;
    if frame >= cfg.n_frames {
        return Err(Error::InvalidInput(format!(
            "frame {frame} outside the {}-frame cine",
            cfg.n_frames
        )));
    }
    let traj = resolve_traj(cfg, traj);
    let plan = plan_undersampling(cfg, traj, resolve_r(cfg, r))?;
    let path = frame_path(&cfg.out, frame);
    if !path.exists() {
        return Err(Error::InvalidInput(format!(
            "{} does not exist; run `kmotion phantom` first",
            path.display()
        )));
    }
    let img = normalize_max(&cxa::to_complex_grid(&cxa::read_file(&path)?)?)?;
    let pattern = &plan.patterns[frame];
    let k = grid_single(&img, pattern)?;
    let tag = format!("f{frame:03}_{}_r{}", traj.name(), format_r(plan.r_requested));
    cxa::write_file(cfg.out.join(format!("kspace_{tag}.cxa")), &image_to_cxa(&k))?;
    let recon = ifft2_centered(&k)?;
    write_bytes(
        &cfg.out.join(format!("recon_{tag}.pgm")),
        &magnitude_to_pgm(&recon)?,
    )?;
    std::fs::write(
        cfg.out.join(format!("pattern_{tag}.csv")),
        patterns_to_csv(std::slice::from_ref(pattern))?,
    )?;
    let unit = match pattern.traj {
        Trajectory::CartesianLines { .. } => "lines",
        Trajectory::RadialSpokes { .. } => "spokes",
    };
    println!(
        "undersample: frame {frame}, {} {unit}/frame, achieved R = {:.4}",
        plan.count, plan.r
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// register
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_register(
    cfg: &ExperimentConfig,
    method: Method,
    fix: usize,
    mov: usize,
    traj: Option<TrajKind>,
    r: f64,
    checkpoint: Option<&Path>,
) -> Result<()> {
    ensure_out(cfg)?;
    cfg.check_acceleration(r)?;
    if fix >= cfg.n_frames || mov >= cfg.n_frames {
        return Err(Error::InvalidInput(format!(
            "pair ({fix}, {mov}) outside the {}-frame cine",
            cfg.n_frames
        )));
    }
    let traj = resolve_traj(cfg, traj);
    let mut net = match method {
        Method::Lapanet => Some(load_checkpoint(checkpoint)?),
        Method::Lap => None,
    };
    let pair = load_pair(&cfg.out, fix, mov)?;
    let plan = plan_undersampling(cfg, traj, r)?;
    let outcome = register_pair(&pair, &plan, fix, mov, method, net.as_mut())?;

    let tag = cell_tag(method, traj, plan.r_requested, fix, mov);
    cxa::write_file(
        cfg.out.join(format!("field_{tag}.cxa")),
        &field_to_cxa(&outcome.field),
    )?;
    write_bytes(
        &cfg.out.join(format!("error_{tag}.pgm")),
        &error_map_pgm(&pair.i_fix, &outcome.warped, None)?,
    )?;
    write_bytes(
        &cfg.out.join(format!("flow_{tag}.ppm")),
        &flow_to_ppm(&outcome.field, None)?,
    )?;
    let row = metrics_csv_row(method, traj, plan.r_requested, plan.r, fix, mov, &outcome);
    std::fs::write(
        cfg.out.join(format!("metrics_{tag}.csv")),
        format!("{}\n{row}\n", metrics_csv_header()),
    )?;
    println!("{}", metrics_csv_header());
    println!("{row}");
    Ok(())
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepCell {
    traj: TrajKind,
    r_requested: f64,
    outcome: RegisterOutcome,
}

/// Registers every unordered frame pair at every grid cell and writes the
/// long-format metrics CSV plus a per-cell mean ± std summary.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    method: Option<Method>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let method = method.unwrap_or(cfg.method);
    let pairs: Vec<(usize, usize)> = (0..cfg.n_frames)
        .flat_map(|i| (i + 1..cfg.n_frames).map(move |j| (i, j)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "sweep needs at least two frames to form a pair, got {}",
            cfg.n_frames
        )));
    }
    let sweep_dir = cfg.out.join("sweep");
    std::fs::create_dir_all(&sweep_dir)?;
    let mut net = match method {
        Method::Lapanet => Some(load_checkpoint(checkpoint)?),
        Method::Lap => None,
    };

    let scene = phantom_cine(&cfg.phantom_config(), cfg.n_frames)?;
    let mut rows = String::from(&metrics_csv_header());
    rows.push('\n');
    let mut cells: Vec<SweepCell> = Vec::new();
    for &traj in &cfg.trajectories {
        for &r in &cfg.accelerations {
            let plan = plan_undersampling(cfg, traj, r)?;
            for &(i, j) in &pairs {
                let pair = FramePair {
                    i_fix: normalize_max(&scene.frames[i])?,
                    i_mov: normalize_max(&scene.frames[j])?,
                    mask_fix: scene.masks[i].clone(),
                    mask_mov: scene.masks[j].clone(),
                };
                let outcome = register_pair(&pair, &plan, i, j, method, net.as_mut())?;
                cxa::write_file(
                    sweep_dir.join(format!("field_{}.cxa", cell_tag(method, traj, r, i, j))),
                    &field_to_cxa(&outcome.field),
                )?;
                rows.push_str(&metrics_csv_row(method, traj, r, plan.r, i, j, &outcome));
                rows.push('\n');
                cells.push(SweepCell { traj, r_requested: r, outcome });
            }
        }
    }
    std::fs::write(cfg.out.join("sweep.csv"), &rows)?;

    let summary = summarize(cfg, &cells);
    std::fs::write(cfg.out.join("sweep_summary.csv"), &summary)?;
    println!(
        "sweep: {} rows ({} trajectories x {} accelerations x {} pairs) -> {}",
        cells.len(),
        cfg.trajectories.len(),
        cfg.accelerations.len(),
        pairs.len(),
        cfg.out.join("sweep.csv").display()
    );
    print!("{summary}");
    Ok(())
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per (trajectory, acceleration) cell: mean and population std of every
/// metric column over the rows whose solver status is `ok`.
fn summarize(cfg: &ExperimentConfig, cells: &[SweepCell]) -> String {
    let labels = crate::pipeline::EVAL_LABELS;
    let mut header = String::from("trajectory,r_requested,n_total,n_ok,nrmse_mean,nrmse_std");
    for l in labels {
        header.push_str(&format!(",dice_{l}_mean,dice_{l}_std"));
    }
    for l in labels {
        header.push_str(&format!(",hdd_mm_{l}_mean,hdd_mm_{l}_std"));
    }
    let mut out = header;
    out.push('\n');
    for &traj in &cfg.trajectories {
        for &r in &cfg.accelerations {
            let group: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.traj == traj && (c.r_requested - r).abs() < 1e-12)
                .collect();
            let ok: Vec<&SweepCell> = group
                .iter()
                .copied()
                .filter(|c| c.outcome.status == STATUS_OK)
                .collect();
            let mut row = format!("{},{},{},{}", traj.name(), r, group.len(), ok.len());
            let col = |f: &dyn Fn(&SweepCell) -> f64| -> (f64, f64) {
                let vals: Vec<f64> = ok.iter().map(|c| f(c)).collect();
                mean_std(&vals)
            };
            let (m, s) = col(&|c| c.outcome.eval.nrmse);
            row.push_str(&format!(",{m:.6},{s:.6}"));
            for (idx, _) in labels.iter().enumerate() {
                let (m, s) = col(&|c| c.outcome.eval.dice[idx].1);
                row.push_str(&format!(",{m:.6},{s:.6}"));
            }
            for (idx, _) in labels.iter().enumerate() {
                let (m, s) = col(&|c| c.outcome.eval.hausdorff_mm[idx].1);
                row.push_str(&format!(",{m:.6},{s:.6}"));
            }
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn model_config(cfg: &ExperimentConfig) -> Result<ModelConfig> {
    match &cfg.model_config {
        Some(path) => ModelConfig::from_kv(&std::fs::read_to_string(path)?),
        None => Ok(ModelConfig {
            input_size: cfg.size,
            n_coils: cfg.n_coils,
            ..ModelConfig::desk()
        }),
    }
}

/// Per-frame sample counts implied by the configured acceleration grid.
fn sampling_grids(cfg: &ExperimentConfig) -> (Vec<usize>, Vec<usize>) {
    let mut lines = Vec::new();
    let mut spokes = Vec::new();
    for &traj in &cfg.trajectories {
        for &r in &cfg.accelerations {
            match traj {
                TrajKind::Cartesian => {
                    let n = ((cfg.size as f64 / r).round() as usize).clamp(1, cfg.size);
                    if !lines.contains(&n) {
                        lines.push(n);
                    }
                }
                TrajKind::Radial => {
                    let n = ((2.0 * cfg.size as f64 / r).round() as usize).max(1);
                    if !spokes.contains(&n) {
                        spokes.push(n);
                    }
                }
            }
        }
    }
    (lines, spokes)
}

pub struct TrainFlags {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub stage2_start: Option<usize>,
    pub stage3_start: Option<usize>,
    pub max_shift: f64,
    pub gaussian_amp: f64,
}

/// Trains the network on the staged curriculum and writes the per-step loss
/// log plus a checkpoint directory.
pub fn cmd_train(cfg: &ExperimentConfig, flags: &TrainFlags) -> Result<()> {
    ensure_out(cfg)?;
    let mcfg = model_config(cfg)?;
    if mcfg.input_size != cfg.size {
        return Err(Error::InvalidInput(format!(
            "model input size {} does not match scene size {}",
            mcfg.input_size, cfg.size
        )));
    }
    let (cartesian_lines, radial_spokes) = sampling_grids(cfg);
    let tc = TrainConfig {
        steps: flags.steps,
        batch: flags.batch,
        base_lr: flags.lr,
        weight_decay: flags.weight_decay,
        weights: cfg.weights,
        stage2_start: flags.stage2_start.unwrap_or(flags.steps * 3 / 5),
        stage3_start: flags.stage3_start.unwrap_or(usize::MAX),
        cartesian_lines,
        radial_spokes,
        max_shift: flags.max_shift,
        gaussian_amp: flags.gaussian_amp,
        seed: cfg.seed,
    };
    let mut net = LapaNet::build(&mcfg, cfg.seed)?;
    let report = train(&mut net, &tc)?;
    std::fs::write(cfg.out.join("train_log.csv"), &report.csv)?;
    let ckpt = cfg.out.join("checkpoint");
    net.save(&ckpt)?;
    let drop = 100.0 * (1.0 - report.last_window_mean / report.first_window_mean);
    println!(
        "train: {} steps, window loss {:.4} -> {:.4} ({drop:.1}% drop), checkpoint at {}",
        report.steps,
        report.first_window_mean,
        report.last_window_mean,
        ckpt.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// interpret
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cmd_interpret(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    fix: usize,
    mov: usize,
    traj: Option<TrajKind>,
    r: Option<f64>,
    steps: usize,
) -> Result<()> {
    ensure_out(cfg)?;
    let mut net = load_checkpoint(Some(checkpoint))?;
    if fix >= cfg.n_frames || mov >= cfg.n_frames {
        return Err(Error::InvalidInput(format!(
            "pair ({fix}, {mov}) outside the {}-frame cine",
            cfg.n_frames
        )));
    }
    let pair = load_pair(&cfg.out, fix, mov)?;
    if net.cfg.input_size != pair.i_fix.h {
        return Err(Error::InvalidInput(format!(
            "checkpoint expects {0}x{0} inputs, frames are {1}x{2}",
            net.cfg.input_size, pair.i_fix.h, pair.i_fix.w
        )));
    }
    let traj = resolve_traj(cfg, traj);
    let plan = plan_undersampling(cfg, traj, resolve_r(cfg, r))?;
    let maps = synthetic_coil_maps(pair.i_fix.h, pair.i_fix.w, net.cfg.n_coils);
    let k_fix = grid_multicoil(&pair.i_fix, &maps, &plan.patterns[fix])?;
    let k_mov = grid_multicoil(&pair.i_mov, &maps, &plan.patterns[mov])?;

    let ig = net.integrated_gradients(&k_fix, &k_mov, steps)?;
    let (map_fix, map_mov) = attribution_heatmaps(&ig.attributions)?;
    write_bytes(&cfg.out.join("ig_fix.pgm"), &grid_to_pgm(&map_fix)?)?;
    write_bytes(&cfg.out.join("ig_mov.pgm"), &grid_to_pgm(&map_mov)?)?;

    let pattern_of = |idx: usize| match plan.patterns[idx].traj {
        Trajectory::CartesianLines { .. } => Some(&plan.patterns[idx]),
        Trajectory::RadialSpokes { .. } => None,
    };
    let nps_fix = nps_analysis(&map_fix, pattern_of(fix))?;
    let nps_mov = nps_analysis(&map_mov, pattern_of(mov))?;
    std::fs::write(cfg.out.join("nps_fix.csv"), nps_fix.to_csv())?;
    std::fs::write(cfg.out.join("nps_mov.csv"), nps_mov.to_csv())?;

    let header = "steps,completeness_gap,f_input,f_baseline,\
                  low_freq_fraction_fe_fix,low_freq_fraction_pe_fix,\
                  low_freq_fraction_fe_mov,low_freq_fraction_pe_mov";
    let row = format!(
        "{steps},{:.6e},{:.6e},{:.6e},{:.6},{:.6},{:.6},{:.6}",
        ig.completeness_gap,
        ig.f_input,
        ig.f_baseline,
        nps_fix.low_freq_fraction_fe,
        nps_fix.low_freq_fraction_pe,
        nps_mov.low_freq_fraction_fe,
        nps_mov.low_freq_fraction_pe,
    );
    std::fs::write(cfg.out.join("interpret_summary.csv"), format!("{header}\n{row}\n"))?;
    println!(
        "interpret: completeness gap {:.3}% over {steps} steps; central-band energy \
         fix {:.1}%/{:.1}%, mov {:.1}%/{:.1}% (FE/PE)",
        100.0 * ig.completeness_gap,
        100.0 * nps_fix.low_freq_fraction_fe,
        100.0 * nps_fix.low_freq_fraction_pe,
        100.0 * nps_mov.low_freq_fraction_fe,
        100.0 * nps_mov.low_freq_fraction_pe,
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// shared helpers for tests
// ---------------------------------------------------------------------------

#[allow(dead_code)]
pub fn read_field(path: &PathBuf) -> Result<kmotion::grid::DisplacementField> {
    cxa_to_field(&cxa::read_file(path)?)
}
