//! Experiment configuration shared by all subcommands.
//!
//! Configs are plain `key = value` text files (`#` comments allowed); every
//! key has a default so a config file is optional. The global `--seed` and
//! `--out` flags override the corresponding keys.

use std::path::{Path, PathBuf};

use kmotion::error::{Error, Result};
use kmotion::phantom::PhantomConfig;
use kmotion::train::LossWeights;

/// Trajectory kinds the pipeline can sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrajKind {
    Cartesian,
    Radial,
}

impl TrajKind {
    pub fn name(self) -> &'static str {
        match self {
            TrajKind::Cartesian => "cartesian",
            TrajKind::Radial => "radial",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "cartesian" => Ok(TrajKind::Cartesian),
            "radial" => Ok(TrajKind::Radial),
            other => Err(Error::InvalidInput(format!(
                "unknown trajectory {other:?} (expected cartesian or radial)"
            ))),
        }
    }
}

/// Registration method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Classical local all-pass solver.
    Lap,
    /// The trained network (needs `--checkpoint`).
    Lapanet,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lap => "lap",
            Method::Lapanet => "lapanet",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "lap" => Ok(Method::Lap),
            "lapanet" => Ok(Method::Lapanet),
            other => Err(Error::InvalidInput(format!(
                "unknown method {other:?} (expected lap or lapanet)"
            ))),
        }
    }
}

/// Everything an experiment run needs: scene geometry, the sampling grid,
/// loss weights, seed and output directory.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    /// Square grid side in pixels.
    pub size: usize,
    /// Cine frames generated by `phantom` and paired by `sweep`.
    pub n_frames: usize,
    /// Coils synthesized for network inputs.
    pub n_coils: usize,
    /// Trajectories swept / accepted by `register`.
    pub trajectories: Vec<TrajKind>,
    /// Acceleration grid; `register` rejects factors outside this list.
    pub accelerations: Vec<f64>,
    /// Optional model-config file (key = value, see `ModelConfig::from_kv`).
    pub model_config: Option<PathBuf>,
    /// Default registration method for `sweep`.
    pub method: Method,
    pub weights: LossWeights,
    pub seed: u64,
    pub out: PathBuf,
    // Phantom geometry, as fractions of the grid side.
    pub r_inner_frac: f64,
    pub r_outer_frac: f64,
    pub contraction: f64,
    pub rv_shift: (f64, f64),
    pub texture_amp: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_frames: 5,
            n_coils: 4,
            trajectories: vec![TrajKind::Cartesian],
            accelerations: vec![1.0, 4.0, 8.0],
            model_config: None,
            method: Method::Lap,
            weights: LossWeights::default(),
            seed: 0,
            out: PathBuf::from("out"),
            r_inner_frac: 0.12,
            r_outer_frac: 0.22,
            contraction: 0.10,
            rv_shift: (1.0, -0.5),
            texture_amp: 0.1,
        }
    }
}

impl ExperimentConfig {
    /// Parses a `key = value` config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "config file {} does not exist",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        Self::from_kv(&text)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidInput(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::InvalidInput(format!("config line {}: bad {what}: {value:?}", lineno + 1))
            };
            match key {
                "size" => cfg.size = value.parse().map_err(|_| bad("size"))?,
                "n_frames" => cfg.n_frames = value.parse().map_err(|_| bad("n_frames"))?,
                "n_coils" => cfg.n_coils = value.parse().map_err(|_| bad("n_coils"))?,
                "trajectories" => {
                    cfg.trajectories = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(TrajKind::parse)
                        .collect::<Result<_>>()?;
                }
                "accelerations" => {
                    cfg.accelerations = value
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse::<f64>().map_err(|_| bad("acceleration")))
                        .collect::<Result<_>>()?;
                }
                "model_config" => cfg.model_config = Some(PathBuf::from(value)),
                "method" => cfg.method = Method::parse(value)?,
                "alpha" => cfg.weights.alpha = value.parse().map_err(|_| bad("alpha"))?,
                "beta" => cfg.weights.beta = value.parse().map_err(|_| bad("beta"))?,
                "gamma" => cfg.weights.gamma = value.parse().map_err(|_| bad("gamma"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "out" => cfg.out = PathBuf::from(value),
                "r_inner_frac" => cfg.r_inner_frac = value.parse().map_err(|_| bad("fraction"))?,
                "r_outer_frac" => cfg.r_outer_frac = value.parse().map_err(|_| bad("fraction"))?,
                "contraction" => cfg.contraction = value.parse().map_err(|_| bad("contraction"))?,
                "rv_shift_x" => cfg.rv_shift.0 = value.parse().map_err(|_| bad("shift"))?,
                "rv_shift_y" => cfg.rv_shift.1 = value.parse().map_err(|_| bad("shift"))?,
                "texture_amp" => cfg.texture_amp = value.parse().map_err(|_| bad("amplitude"))?,
                other => {
                    return Err(Error::InvalidInput(format!(
                        "config line {}: unknown key {other:?}",
                        lineno + 1
                    )));
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || self.size % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "size must be an even number >= 16, got {}",
                self.size
            )));
        }
        if self.n_frames == 0 {
            return Err(Error::InvalidInput("n_frames must be positive".into()));
        }
        if self.n_coils == 0 {
            return Err(Error::InvalidInput("n_coils must be positive".into()));
        }
        if self.trajectories.is_empty() {
            return Err(Error::InvalidInput("trajectory list is empty".into()));
        }
        if self.accelerations.is_empty() {
            return Err(Error::InvalidInput("acceleration list is empty".into()));
        }
        for &r in &self.accelerations {
            if !r.is_finite() || r < 1.0 {
                return Err(Error::InvalidInput(format!(
                    "acceleration factors must be finite and >= 1, got {r}"
                )));
            }
        }
        if let Some(p) = &self.model_config {
            if !p.exists() {
                return Err(Error::InvalidInput(format!(
                    "model_config {} does not exist",
                    p.display()
                )));
            }
        }
        self.weights.validate()?;
        if !(self.r_inner_frac > 0.0 && self.r_inner_frac < self.r_outer_frac) {
            return Err(Error::InvalidInput(format!(
                "need 0 < r_inner_frac < r_outer_frac, got {} and {}",
                self.r_inner_frac, self.r_outer_frac
            )));
        }
        if self.r_outer_frac > 0.45 {
            return Err(Error::InvalidInput(format!(
                "r_outer_frac {} leaves no margin inside the grid",
                self.r_outer_frac
            )));
        }
        if !(self.texture_amp >= 0.0) || !self.contraction.is_finite() {
            return Err(Error::InvalidInput(
                "texture_amp must be >= 0 and contraction finite".into(),
            ));
        }
        Ok(())
    }

    /// `register` accepts only acceleration factors from the configured grid.
    pub fn check_acceleration(&self, r: f64) -> Result<()> {
        if self.accelerations.iter().any(|&a| (a - r).abs() < 1e-9) {
            Ok(())
        } else {
            let grid: Vec<String> = self.accelerations.iter().map(|a| a.to_string()).collect();
            Err(Error::InvalidInput(format!(
                "acceleration {r} outside the configured grid [{}]",
                grid.join(", ")
            )))
        }
    }

    pub fn phantom_config(&self) -> PhantomConfig {
        let s = self.size as f64;
        PhantomConfig {
            h: self.size,
            w: self.size,
            r_inner: self.r_inner_frac * s,
            r_outer: self.r_outer_frac * s,
            contraction: self.contraction,
            rv_shift: self.rv_shift,
            texture_amp: self.texture_amp,
            seed: self.seed,
        }
    }
}
