//! Core 2D grid types shared across the toolkit: real grids, complex grids,
//! multi-coil k-space stacks, coil sensitivity maps and displacement fields.
//!
//! All grids are row-major with `idx = y * w + x`; `y` runs along the
//! phase-encode (height) axis and `x` along the frequency-encode (width) axis.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Real-valued 2D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RealGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0.0; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut f64 {
        &mut self.data[y * self.w + x]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Complex-valued 2D grid; used both for image-space and k-space data.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<Complex64>,
}

/// A complex grid interpreted as an image-space sample.
pub type ComplexImage = ComplexGrid;

impl ComplexGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![Complex64::new(0.0, 0.0); h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        Self { h, w, data }
    }

    pub fn from_real(r: &RealGrid) -> Self {
        Self {
            h: r.h,
            w: r.w,
            data: r.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize) -> &mut Complex64 {
        &mut self.data[y * self.w + x]
    }

    pub fn magnitude(&self) -> RealGrid {
        RealGrid {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, c| m.max(c.norm()))
    }

    /// Squared L2 norm, summed over all samples.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.energy().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch(format!(
                "{what}: {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )))
        }
    }
}

/// Per-coil complex k-space grids sharing one grid size.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiCoilKSpace {
    pub coils: Vec<ComplexGrid>,
}

impl MultiCoilKSpace {
    pub fn new(coils: Vec<ComplexGrid>) -> Result<Self> {
        if coils.is_empty() {
            return Err(Error::InvalidInput("k-space needs at least one coil".into()));
        }
        let (h, w) = (coils[0].h, coils[0].w);
        for c in &coils {
            if c.h != h || c.w != w {
                return Err(Error::ShapeMismatch("coil grids differ in size".into()));
            }
        }
        Ok(Self { coils })
    }

    pub fn n_coils(&self) -> usize {
        self.coils.len()
    }

    pub fn h(&self) -> usize {
        self.coils[0].h
    }

    pub fn w(&self) -> usize {
        self.coils[0].w
    }

    pub fn energy(&self) -> f64 {
        self.coils.iter().map(|c| c.energy()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.energy().sqrt()
    }
}

/// Complex coil sensitivity maps, one grid per receive coil.
///
/// Normalized maps satisfy `sum_c |map_c|^2 = 1` at every pixel of the
/// support region.
#[derive(Debug, Clone)]
pub struct CoilSensitivityMap {
    pub maps: Vec<ComplexGrid>,
}

impl CoilSensitivityMap {
    pub fn n_coils(&self) -> usize {
        self.maps.len()
    }

    pub fn h(&self) -> usize {
        self.maps[0].h
    }

    pub fn w(&self) -> usize {
        self.maps[0].w
    }
}

/// Dense per-pixel displacement, in pixels. `ux` displaces along the width
/// axis, `uy` along the height axis; `u` maps moving onto fixed sampling
/// positions, i.e. `I_fix(x) = I_mov(x - u(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub ux: RealGrid,
    pub uy: RealGrid,
}

impl DisplacementField {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { ux: RealGrid::zeros(h, w), uy: RealGrid::zeros(h, w) }
    }

    pub fn constant(h: usize, w: usize, ux: f64, uy: f64) -> Self {
        Self {
            ux: RealGrid { h, w, data: vec![ux; h * w] },
            uy: RealGrid { h, w, data: vec![uy; h * w] },
        }
    }

    pub fn h(&self) -> usize {
        self.ux.h
    }

    pub fn w(&self) -> usize {
        self.ux.w
    }

    /// Largest displacement magnitude over the grid.
    pub fn max_norm(&self) -> f64 {
        self.ux
            .data
            .iter()
            .zip(&self.uy.data)
            .fold(0.0f64, |m, (&x, &y)| m.max((x * x + y * y).sqrt()))
    }

    /// Mean displacement vector over the grid.
    pub fn mean(&self) -> (f64, f64) {
        let n = self.ux.data.len() as f64;
        let sx: f64 = self.ux.data.iter().sum();
        let sy: f64 = self.uy.data.iter().sum();
        (sx / n, sy / n)
    }
}

/// Integer label grid (segmentation masks and the like).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelGrid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self { h, w, data: vec![0; h * w] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.w + x]
    }

    /// Binary mask selecting one label.
    pub fn select(&self, label: u8) -> Vec<bool> {
        self.data.iter().map(|&v| v == label).collect()
    }
}
