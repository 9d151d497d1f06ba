//! Multi-resolution attention network for k-space motion estimation.
//!
//! The network maps a pair of undersampled multi-coil k-space frames
//! (stacked as real/imaginary channel pairs) to a coarse-to-fine pyramid of
//! dense displacement fields plus one aggregated global translation. Four
//! block families make up the architecture: global reference modules (GRM)
//! that run channel attention over the full-resolution k-space stack and
//! feed every encoder level, convolutional inception modules (CIM) with an
//! attention-pooled squeeze-excitation unit, dilated fusion modules (DFM),
//! and motion aggregation modules (MAM) that gate each level's raw field
//! against the upscaled coarser estimate. Everything runs on the
//! [`crate::autodiff`] tape, so the same graph serves training, gradient
//! checking, and integrated-gradients attribution.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::cxa::{self, CxaArray};
use crate::error::{Error, Result};
use crate::grid::MultiCoilKSpace;
use crate::kspace::inverse_zero_frequency_shift;

/// Full-scale channel widths of the per-level attention (GRM) branches.
const GRM_FULL: [usize; 4] = [4, 16, 32, 128];
/// Full-scale encoder output widths per level.
const ENC_FULL: [usize; 4] = [16, 32, 64, 192];
/// Momentum of the batch-norm running-statistics update.
const BN_MOMENTUM: f64 = 0.1;
/// Epsilon used by both normalization layers.
const NORM_EPS: f64 = 1e-5;

/// Architecture hyperparameters. `input_size` is the nominal (square) image
/// side the model is trained at; the forward pass itself accepts any square
/// input divisible by `2^(levels+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub levels: usize,
    pub n_coils: usize,
    pub width_multiplier: f64,
    /// Fuse encoder input and GRM branch by projected addition instead of
    /// the default concatenation + 1x1 reduction.
    pub combine_add: bool,
}

impl ModelConfig {
    /// Reference configuration: 160x160 inputs, 16 coils, 4 levels.
    pub fn full() -> Self {
        Self {
            input_size: 160,
            levels: 4,
            n_coils: 16,
            width_multiplier: 1.0,
            combine_add: false,
        }
    }

    /// Small configuration for laptop-class experiments: 64x64 inputs,
    /// 4 coils, quarter-width channels.
    pub fn desk() -> Self {
        Self {
            input_size: 64,
            levels: 4,
            n_coils: 4,
            width_multiplier: 0.25,
            combine_add: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=4).contains(&self.levels) {
            return Err(Error::InvalidInput(format!(
                "levels must be 2..=4, got {}",
                self.levels
            )));
        }
        let div = 1usize << (self.levels + 1);
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::InvalidInput(format!(
                "input size {} must be a positive multiple of {} for {} levels",
                self.input_size, div, self.levels
            )));
        }
        if self.n_coils == 0 {
            return Err(Error::InvalidInput("n_coils must be at least 1".into()));
        }
        if !self.width_multiplier.is_finite()
            || self.width_multiplier <= 0.0
            || self.width_multiplier > 1.0
        {
            return Err(Error::InvalidInput(format!(
                "width multiplier {} outside (0, 1]",
                self.width_multiplier
            )));
        }
        Ok(())
    }

    /// Channels of the stacked network input: (re, im) pairs for each coil
    /// of the fixed frame, then the same for the moving frame.
    pub fn in_channels(&self) -> usize {
        4 * self.n_coils
    }

    fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    pub fn grm_channels(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.scaled(GRM_FULL[i])).collect()
    }

    pub fn enc_channels(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.scaled(ENC_FULL[i])).collect()
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.scaled(2 * ENC_FULL[self.levels - 1])
    }

    /// Side length of the bottleneck feature map at the nominal input size.
    pub fn bottleneck_spatial(&self) -> usize {
        self.input_size >> (self.levels + 1)
    }

    /// Serializes as `key=value` lines (used inside checkpoints).
    pub fn to_kv(&self) -> String {
        format!(
            "input_size={}\nlevels={}\nn_coils={}\nwidth_multiplier={}\ncombine_add={}\n",
            self.input_size, self.levels, self.n_coils, self.width_multiplier, self.combine_add
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::full();
        let mut seen = BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line without '=': {line:?}")))?;
            fn bad(key: &str, value: &str) -> Error {
                Error::Format(format!("bad config value for {key}: {value:?}"))
            }
            match key {
                "input_size" => cfg.input_size = value.parse().map_err(|_| bad(key, value))?,
                "levels" => cfg.levels = value.parse().map_err(|_| bad(key, value))?,
                "n_coils" => cfg.n_coils = value.parse().map_err(|_| bad(key, value))?,
                "width_multiplier" => {
                    cfg.width_multiplier = value.parse().map_err(|_| bad(key, value))?
                }
                "combine_add" => cfg.combine_add = value.parse().map_err(|_| bad(key, value))?,
                _ => return Err(Error::Format(format!("unknown config key {key:?}"))),
            }
            seen.insert(key.to_string());
        }
        if seen.len() != 5 {
            return Err(Error::Format(format!(
                "config must set all 5 keys, got {:?}",
                seen
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter and buffer tensors. Parameters receive gradients; buffers
/// (batch-norm running statistics) are updated in place during training.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: BTreeMap<String, Tensor>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParameterStore {
    fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown parameter {name:?}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown buffer {name:?}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown buffer {name:?}")))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    /// Parameters in name order (deterministic).
    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.buffers.iter()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    /// Total number of trainable scalars.
    pub fn total_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    fn insert_param(&mut self, name: String, t: Tensor) {
        let dup = self.params.insert(name.clone(), t);
        assert!(dup.is_none(), "duplicate parameter {name:?}");
    }

    fn insert_buffer(&mut self, name: String, t: Tensor) {
        let dup = self.buffers.insert(name.clone(), t);
        assert!(dup.is_none(), "duplicate buffer {name:?}");
    }
}

/// Registers parameters in architecture order and initializes convolution
/// weights from a fan-in uniform distribution, consuming the RNG in exactly
/// the registration order (so a seed pins every weight).
struct Builder<'r> {
    store: ParameterStore,
    order: Vec<String>,
    rng: &'r mut ChaCha20Rng,
}

impl<'r> Builder<'r> {
    fn new(rng: &'r mut ChaCha20Rng) -> Self {
        Self {
            store: ParameterStore::new(),
            order: Vec::new(),
            rng,
        }
    }

    fn conv(&mut self, name: &str, c_out: usize, c_in_g: usize, k: usize, bias: bool) {
        let bound = 1.0 / ((c_in_g * k * k) as f64).sqrt();
        let data = (0..c_out * c_in_g * k * k)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let w = Tensor::from_vec(c_out, c_in_g, k, k, data).expect("conv weight shape");
        self.store.insert_param(format!("{name}.w"), w);
        self.order.push(format!("{name}.w"));
        if bias {
            self.store
                .insert_param(format!("{name}.b"), Tensor::zeros(1, c_out, 1, 1));
            self.order.push(format!("{name}.b"));
        }
    }

    fn affine(&mut self, name: &str, c: usize) {
        let ones = Tensor::from_vec(1, c, 1, 1, vec![1.0; c]).expect("gamma shape");
        self.store.insert_param(format!("{name}.g"), ones);
        self.order.push(format!("{name}.g"));
        self.store
            .insert_param(format!("{name}.b"), Tensor::zeros(1, c, 1, 1));
        self.order.push(format!("{name}.b"));
    }

    fn bn(&mut self, name: &str, c: usize) {
        self.affine(name, c);
        self.store
            .insert_buffer(format!("{name}.mean"), Tensor::zeros(1, c, 1, 1));
        let ones = Tensor::from_vec(1, c, 1, 1, vec![1.0; c]).expect("var shape");
        self.store.insert_buffer(format!("{name}.var"), ones);
    }

    fn se(&mut self, name: &str, c: usize) {
        let hidden = (c / 4).max(1);
        self.conv(&format!("{name}.proj"), 1, c, 3, true);
        self.conv(&format!("{name}.fc1"), hidden, c, 1, true);
        self.conv(&format!("{name}.fc2"), c, hidden, 1, true);
    }

    fn attn(&mut self, name: &str, c: usize) {
        // Depthwise 3x3 query/key/value projections, no bias.
        self.conv(&format!("{name}.q"), c, 1, 3, false);
        self.conv(&format!("{name}.k"), c, 1, 3, false);
        self.conv(&format!("{name}.v"), c, 1, 3, false);
    }

    fn cim(&mut self, name: &str, c_in: usize, c: usize) {
        self.conv(&format!("{name}.c1"), c, c_in, 3, true);
        self.conv(&format!("{name}.c2"), c, c, 3, true);
        self.conv(&format!("{name}.c3"), c, c, 3, true);
        self.se(&format!("{name}.se"), c);
    }

    fn dfm(&mut self, name: &str, c: usize) {
        self.conv(&format!("{name}.b1"), c, c, 3, true);
        self.conv(&format!("{name}.b2"), c, c, 3, true);
        self.conv(&format!("{name}.b4"), c, c, 3, true);
        self.conv(&format!("{name}.fuse"), c, 3 * c, 1, true);
    }

    fn grm(&mut self, name: &str, in_ch: usize, g: usize) {
        self.conv(&format!("{name}.cross"), g, in_ch, 1, true);
        self.conv(&format!("{name}.c1"), g, in_ch, 3, true);
        self.bn(&format!("{name}.bn1"), g);
        self.attn(&format!("{name}.attn"), g);
        self.conv(&format!("{name}.c2"), g, g, 3, true);
        self.bn(&format!("{name}.bn2"), g);
        self.se(&format!("{name}.se"), g);
    }

    fn encoder(&mut self, name: &str, x_ch: usize, g_ch: usize, e: usize, combine_add: bool) {
        self.affine(&format!("{name}.gn"), x_ch);
        if combine_add {
            self.conv(&format!("{name}.xproj"), e, x_ch, 1, true);
            self.conv(&format!("{name}.gproj"), e, g_ch, 1, true);
        } else {
            self.conv(&format!("{name}.reduce"), e, x_ch + g_ch, 1, true);
        }
        self.cim(&format!("{name}.cim"), e, e);
        self.dfm(&format!("{name}.dfm"), e);
    }

    fn bottleneck(&mut self, e_in: usize, b: usize) {
        self.conv("bott.c1", b, e_in, 3, true);
        self.conv("bott.c2", b, b, 3, true);
        self.dfm("bott.dfm", b);
        self.conv("bott.c3", b, b, 3, true);
    }

    fn decoder(&mut self, name: &str, d_in: usize, d_out: usize) {
        self.conv(&format!("{name}.up"), d_out, d_in, 3, true);
        self.conv(&format!("{name}.res"), d_out, d_out, 3, true);
        self.cim(&format!("{name}.cim"), 2 * d_out, d_out);
        self.dfm(&format!("{name}.dfm"), d_out);
    }

    fn mam(&mut self, name: &str, d: usize) {
        let mid = (d / 2).max(4);
        self.conv(&format!("{name}.e1"), d, d, 3, true);
        self.conv(&format!("{name}.e2"), mid, d, 3, true);
        self.conv(&format!("{name}.e3"), 2, mid, 3, true);
        self.conv(&format!("{name}.m1"), 8, 4, 3, true);
        self.conv(&format!("{name}.m2"), 2, 8, 3, true);
    }
}

fn register_parameters(cfg: &ModelConfig, rng: &mut ChaCha20Rng) -> (ParameterStore, Vec<String>) {
    let mut b = Builder::new(rng);
    let in_ch = cfg.in_channels();
    let grm_ch = cfg.grm_channels();
    let enc_ch = cfg.enc_channels();
    let bott_ch = cfg.bottleneck_channels();
    let levels = cfg.levels;
    for i in 1..=levels {
        b.grm(&format!("grm{i}"), in_ch, grm_ch[i - 1]);
    }
    for i in 1..=levels {
        let x_ch = if i == 1 { in_ch } else { enc_ch[i - 2] };
        b.encoder(
            &format!("enc{i}"),
            x_ch,
            grm_ch[i - 1],
            enc_ch[i - 1],
            cfg.combine_add,
        );
    }
    b.bottleneck(enc_ch[levels - 1], bott_ch);
    b.conv("head.proj", 2, bott_ch, 1, true);
    for i in 1..=levels {
        let d_in = if i == 1 { bott_ch } else { enc_ch[levels - i + 1] };
        b.decoder(&format!("dec{i}"), d_in, enc_ch[levels - i]);
    }
    for i in 1..=levels {
        b.mam(&format!("mam{i}"), enc_ch[levels - i]);
    }
    (b.store, b.order)
}

/// Result of a forward pass: per-level displacement fields (coarsest first,
/// field `i` at `1/2^(levels-i)` of the input resolution, the last at full
/// resolution) plus the `[n,2,1,1]` global-translation estimate. The node
/// ids of all parameter leaves are returned so an optimizer can map
/// gradients back to the store.
pub struct ForwardOut {
    pub u: Vec<NodeId>,
    pub u_t: NodeId,
    pub param_nodes: BTreeMap<String, NodeId>,
}

/// Integrated-gradients attribution of the field-magnitude objective with
/// respect to the stacked k-space input.
pub struct IgResult {
    /// Same shape as the network input.
    pub attributions: Tensor,
    /// |sum(attributions) - (F(x) - F(0))| relative to |F(x) - F(0)|.
    pub completeness_gap: f64,
    pub f_input: f64,
    pub f_baseline: f64,
}

/// The registration network: a configuration plus its parameter store.
pub struct LapaNet {
    pub cfg: ModelConfig,
    pub store: ParameterStore,
}

impl LapaNet {
    /// Builds a freshly initialized network. The same `(cfg, seed)` pair
    /// always yields bit-identical parameters.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (store, _order) = register_parameters(cfg, &mut rng);
        Ok(Self {
            cfg: cfg.clone(),
            store,
        })
    }

    /// Stacks two multi-coil k-space frames into the network input tensor
    /// `[1, 4*n_coils, h, w]`: per coil the DC-at-origin spectrum is split
    /// into (re, im) channel pairs, fixed frame first, moving frame second.
    pub fn prepare_input(&self, k_fix: &MultiCoilKSpace, k_mov: &MultiCoilKSpace) -> Result<Tensor> {
        let n_c = k_fix.n_coils();
        if n_c != self.cfg.n_coils || k_mov.n_coils() != n_c {
            return Err(Error::ShapeMismatch(format!(
                "expected {} coils, got fixed {} / moving {}",
                self.cfg.n_coils,
                n_c,
                k_mov.n_coils()
            )));
        }
        let (h, w) = (k_fix.h(), k_fix.w());
        if k_mov.h() != h || k_mov.w() != w {
            return Err(Error::ShapeMismatch(format!(
                "frame shapes differ: {}x{} vs {}x{}",
                h,
                w,
                k_mov.h(),
                k_mov.w()
            )));
        }
        let mut data = vec![0.0; 4 * n_c * h * w];
        let hw = h * w;
        for (half, frame) in [(0, k_fix), (1, k_mov)] {
            for (c, coil) in frame.coils.iter().enumerate() {
                let g = inverse_zero_frequency_shift(coil);
                let re0 = (half * 2 * n_c + 2 * c) * hw;
                let im0 = re0 + hw;
                for (i, z) in g.data.iter().enumerate() {
                    data[re0 + i] = z.re;
                    data[im0 + i] = z.im;
                }
            }
        }
        Tensor::from_vec(1, 4 * n_c, h, w, data)
    }

    /// Runs the network on a stacked input node. In training mode the
    /// parameter leaves require gradients and the batch-norm running
    /// statistics are updated in place after the pass.
    pub fn forward(&mut self, tape: &mut Tape, input: NodeId, training: bool) -> Result<ForwardOut> {
        let (_, c, h, w) = tape.value(input).shape();
        if c != self.cfg.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} channels, config expects {}",
                c,
                self.cfg.in_channels()
            )));
        }
        let div = 1usize << (self.cfg.levels + 1);
        if h != w || h == 0 || h % div != 0 {
            return Err(Error::ShapeMismatch(format!(
                "input must be square with side a multiple of {div}, got {h}x{w}"
            )));
        }
        let levels = self.cfg.levels;
        let (out, stats) = {
            let mut ctx = Ctx {
                tape,
                store: &self.store,
                training,
                param_grads: training,
                nodes: BTreeMap::new(),
                new_stats: Vec::new(),
            };
            let mut grms = Vec::with_capacity(levels);
            for i in 1..=levels {
                grms.push(ctx.grm(&format!("grm{i}"), input, 1usize << (i - 1))?);
            }
            let mut x = input;
            let mut enc_outs = Vec::with_capacity(levels);
            for i in 1..=levels {
                x = ctx.encoder(&format!("enc{i}"), x, grms[i - 1], self.cfg.combine_add)?;
                enc_outs.push(x);
            }
            let bott = ctx.bottleneck(x)?;
            let u_t = ctx.translation_head(bott)?;
            let mut d = bott;
            let mut prev = None;
            let mut u = Vec::with_capacity(levels);
            for i in 1..=levels {
                d = ctx.decoder(&format!("dec{i}"), d, enc_outs[levels - i])?;
                let ui = ctx.mam(&format!("mam{i}"), d, prev)?;
                prev = Some(ui);
                u.push(ui);
            }
            let param_nodes = std::mem::take(&mut ctx.nodes);
            let new_stats = std::mem::take(&mut ctx.new_stats);
            (ForwardOut { u, u_t, param_nodes }, new_stats)
        };
        if training {
            for (name, mean, var) in stats {
                let m = self.store.buffer_mut(&format!("{name}.mean"))?;
                for (r, b) in m.data.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                let v = self.store.buffer_mut(&format!("{name}.var"))?;
                for (r, b) in v.data.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(out)
    }

    /// Convenience wrapper: prepares the input from two k-space frames and
    /// runs the forward pass (batch of one).
    pub fn forward_kspace(
        &mut self,
        tape: &mut Tape,
        k_fix: &MultiCoilKSpace,
        k_mov: &MultiCoilKSpace,
        training: bool,
    ) -> Result<ForwardOut> {
        let x = self.prepare_input(k_fix, k_mov)?;
        let input = tape.leaf(x, false);
        self.forward(tape, input, training)
    }

    fn ig_objective(&mut self, x: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), want_grad);
        let out = self.forward(&mut tape, input, false)?;
        let last = *out.u.last().expect("at least two levels");
        let sq = tape.square(last);
        let f = tape.mean_all(sq);
        let fv = tape.value(f).item();
        if !fv.is_finite() {
            return Err(Error::NonFinite("attribution objective".into()));
        }
        if want_grad {
            let grads = tape.backward(f)?;
            Ok((fv, grads[input].clone()))
        } else {
            Ok((fv, None))
        }
    }

    /// Integrated gradients of the mean squared full-resolution field
    /// against the stacked k-space input, with a zero baseline and a
    /// midpoint Riemann sum over `steps` points along the straight path.
    pub fn integrated_gradients(
        &mut self,
        k_fix: &MultiCoilKSpace,
        k_mov: &MultiCoilKSpace,
        steps: usize,
    ) -> Result<IgResult> {
        if steps == 0 {
            return Err(Error::InvalidInput(
                "integrated gradients needs at least one step".into(),
            ));
        }
        let x = self.prepare_input(k_fix, k_mov)?;
        let baseline = Tensor::zeros(x.n, x.c, x.h, x.w);
        let (f_input, _) = self.ig_objective(&x, false)?;
        let (f_baseline, _) = self.ig_objective(&baseline, false)?;
        let mut acc = vec![0.0; x.len()];
        for k in 0..steps {
            let alpha = (k as f64 + 0.5) / steps as f64;
            let mut xa = x.clone();
            for v in &mut xa.data {
                *v *= alpha;
            }
            let (_, g) = self.ig_objective(&xa, true)?;
            let g = g.expect("input gradient");
            for (a, gv) in acc.iter_mut().zip(&g.data) {
                *a += gv;
            }
        }
        let data: Vec<f64> = x
            .data
            .iter()
            .zip(&acc)
            .map(|(xv, s)| xv * s / steps as f64)
            .collect();
        let attributions = Tensor::from_vec(x.n, x.c, x.h, x.w, data)?;
        let total: f64 = attributions.data.iter().sum();
        let delta = f_input - f_baseline;
        let completeness_gap = (total - delta).abs() / delta.abs().max(1e-12);
        Ok(IgResult {
            attributions,
            completeness_gap,
            f_input,
            f_baseline,
        })
    }

    /// Writes the config, a manifest, and one CXA file per tensor.
    pub fn save<P: AsRef<Path>>(&self, dir: P) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.txt"), self.cfg.to_kv())?;
        let mut manifest = String::from("kind,name,file,n,c,h,w\n");
        let dump = |kind: &str, idx: usize, name: &str, t: &Tensor| -> Result<String> {
            let file = format!("{}{idx:05}.cxa", &kind[..1]);
            let arr = CxaArray::F64 {
                dims: vec![t.n, t.c, t.h, t.w],
                data: t.data.clone(),
            };
            cxa::write_file(dir.join(&file), &arr)?;
            Ok(format!(
                "{kind},{name},{file},{},{},{},{}\n",
                t.n, t.c, t.h, t.w
            ))
        };
        for (i, (name, t)) in self.store.params().enumerate() {
            manifest += &dump("param", i, name, t)?;
        }
        for (i, (name, t)) in self.store.buffers().enumerate() {
            manifest += &dump("buffer", i, name, t)?;
        }
        std::fs::write(dir.join("manifest.csv"), manifest)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`LapaNet::save`], validating that its
    /// tensor names and shapes exactly match a fresh build of the config.
    pub fn load<P: AsRef<Path>>(dir: P) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = ModelConfig::from_kv(&std::fs::read_to_string(dir.join("config.txt"))?)?;
        let mut net = Self::build(&cfg, 0)?;
        let manifest = std::fs::read_to_string(dir.join("manifest.csv"))?;
        let mut seen: BTreeSet<(bool, String)> = BTreeSet::new();
        for (ln, line) in manifest.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(Error::Format(format!(
                    "manifest line {} has {} fields, expected 7",
                    ln + 1,
                    fields.len()
                )));
            }
            let (kind, name, file) = (fields[0], fields[1], fields[2]);
            let is_param = match kind {
                "param" => true,
                "buffer" => false,
                _ => return Err(Error::Format(format!("unknown manifest kind {kind:?}"))),
            };
            let arr = cxa::read_file(dir.join(file))?;
            let (dims, data) = match arr {
                CxaArray::F64 { dims, data } => (dims, data),
                _ => {
                    return Err(Error::Format(format!(
                        "checkpoint tensor {name:?} is not an f64 array"
                    )))
                }
            };
            let target = if is_param {
                net.store.param_mut(name)?
            } else {
                net.store.buffer_mut(name)?
            };
            if dims != [target.n, target.c, target.h, target.w] {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {name:?} has dims {dims:?}, model expects {:?}",
                    [target.n, target.c, target.h, target.w]
                )));
            }
            target.data = data;
            if !seen.insert((is_param, name.to_string())) {
                return Err(Error::Format(format!(
                    "duplicate manifest entry for {name:?}"
                )));
            }
        }
        let n_expected = net.store.params.len() + net.store.buffers.len();
        if seen.len() != n_expected {
            return Err(Error::Format(format!(
                "checkpoint covers {} tensors, model has {}",
                seen.len(),
                n_expected
            )));
        }
        Ok(net)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn norm_groups(c: usize) -> usize {
    gcd(c, 8)
}

/// Forward-pass context: binds a tape to a parameter store and caches the
/// tape leaf of each parameter (or accepts pre-made leaves, which is how the
/// standalone block gradient checks drive individual blocks).
struct Ctx<'a> {
    tape: &'a mut Tape,
    store: &'a ParameterStore,
    training: bool,
    param_grads: bool,
    nodes: BTreeMap<String, NodeId>,
    new_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl Ctx<'_> {
    fn p(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.nodes.get(name) {
            return Ok(id);
        }
        let t = self.store.param(name)?.clone();
        let id = self.tape.leaf(t, self.param_grads);
        self.nodes.insert(name.to_string(), id);
        Ok(id)
    }

    fn conv(&mut self, name: &str, x: NodeId, groups: usize, dilation: usize, pad: usize) -> Result<NodeId> {
        let w = self.p(&format!("{name}.w"))?;
        let y = self.tape.conv2d(x, w, groups, dilation, pad)?;
        if self.store.has_param(&format!("{name}.b")) {
            let b = self.p(&format!("{name}.b"))?;
            return self.tape.add_bias(y, b);
        }
        Ok(y)
    }

    fn bn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.p(&format!("{name}.g"))?;
        let beta = self.p(&format!("{name}.b"))?;
        let mean = self.store.buffer(&format!("{name}.mean"))?.data.clone();
        let var = self.store.buffer(&format!("{name}.var"))?.data.clone();
        let (y, stats) =
            self.tape
                .batch_norm(x, gamma, beta, &mean, &var, self.training, NORM_EPS)?;
        if let Some((m, v)) = stats {
            self.new_stats.push((name.to_string(), m, v));
        }
        Ok(y)
    }

    fn gn(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.tape.value(x).c;
        let gamma = self.p(&format!("{name}.g"))?;
        let beta = self.p(&format!("{name}.b"))?;
        self.tape.group_norm(x, gamma, beta, norm_groups(c), NORM_EPS)
    }

    /// Channel attention with depthwise q/k/v projections: scores are the
    /// `CxC` Gram matrix of flattened responses, tempered by `1/sqrt(HW)`,
    /// and the softmax-mixed values are added back to the input.
    fn attention(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.tape.value(x).shape();
        let q = self.conv(&format!("{name}.q"), x, c, 1, 1)?;
        let k = self.conv(&format!("{name}.k"), x, c, 1, 1)?;
        let v = self.conv(&format!("{name}.v"), x, c, 1, 1)?;
        let hw = h * w;
        let qr = self.tape.reshape(q, n, 1, c, hw)?;
        let kr = self.tape.reshape(k, n, 1, c, hw)?;
        let vr = self.tape.reshape(v, n, 1, c, hw)?;
        let scores = self.tape.matmul(qr, kr, true)?;
        let scores = self.tape.scale(scores, 1.0 / (hw as f64).sqrt());
        let weights = self.tape.softmax_w(scores);
        let mixed = self.tape.matmul(weights, vr, false)?;
        let back = self.tape.reshape(mixed, n, c, h, w)?;
        self.tape.add(back, x)
    }

    /// Squeeze-excitation with attention pooling: a 3x3 projection scored
    /// softmax over positions pools the features, a two-layer bottleneck
    /// produces per-channel sigmoid gates.
    fn se(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.tape.value(x).shape();
        let a = self.conv(&format!("{name}.proj"), x, 1, 1, 1)?;
        let ar = self.tape.reshape(a, n, 1, 1, h * w)?;
        let aw = self.tape.softmax_w(ar);
        let xr = self.tape.reshape(x, n, 1, c, h * w)?;
        let pooled = self.tape.matmul(xr, aw, true)?;
        let pooled = self.tape.reshape(pooled, n, c, 1, 1)?;
        let hid = self.conv(&format!("{name}.fc1"), pooled, 1, 1, 0)?;
        let hid = self.tape.silu(hid);
        let gate = self.conv(&format!("{name}.fc2"), hid, 1, 1, 0)?;
        let gate = self.tape.sigmoid(gate);
        self.tape.mul_channel(x, gate)
    }

    fn se_residual(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let s = self.se(name, x)?;
        self.tape.add(x, s)
    }

    /// Global reference module: reads the full-resolution stacked k-space
    /// input, applies channel attention between two conv+BN stages, and
    /// max-pools down to its level's working resolution at the very end.
    fn grm(&mut self, name: &str, x: NodeId, pool_k: usize) -> Result<NodeId> {
        let shortcut = self.conv(&format!("{name}.cross"), x, 1, 1, 0)?;
        let y = self.conv(&format!("{name}.c1"), x, 1, 1, 1)?;
        let y = self.bn(&format!("{name}.bn1"), y)?;
        let y = self.tape.silu(y);
        let y = self.attention(&format!("{name}.attn"), y)?;
        let y = self.conv(&format!("{name}.c2"), y, 1, 1, 1)?;
        let y = self.bn(&format!("{name}.bn2"), y)?;
        let y = self.tape.silu(y);
        let y = self.se(&format!("{name}.se"), y)?;
        let y = self.tape.add(y, shortcut)?;
        if pool_k > 1 {
            self.tape.max_pool(y, pool_k)
        } else {
            Ok(y)
        }
    }

    /// Convolutional inception module: two plain 3x3 stages, one dilated
    /// stage, an optional 2x max-pool (encoder only), and a residual
    /// squeeze-excitation unit.
    fn cim(&mut self, name: &str, x: NodeId, pool: bool) -> Result<NodeId> {
        let y = self.conv(&format!("{name}.c1"), x, 1, 1, 1)?;
        let y = self.tape.silu(y);
        let y = self.conv(&format!("{name}.c2"), y, 1, 1, 1)?;
        let y = self.tape.silu(y);
        let y = self.conv(&format!("{name}.c3"), y, 1, 2, 2)?;
        let y = self.tape.silu(y);
        let y = if pool { self.tape.max_pool(y, 2)? } else { y };
        self.se_residual(&format!("{name}.se"), y)
    }

    /// Dilated fusion module: parallel 3x3 branches at dilations 1/2/4,
    /// fused by a 1x1 convolution and added back to the input.
    fn dfm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let b1 = self.conv(&format!("{name}.b1"), x, 1, 1, 1)?;
        let b1 = self.tape.silu(b1);
        let b2 = self.conv(&format!("{name}.b2"), x, 1, 2, 2)?;
        let b2 = self.tape.silu(b2);
        let b4 = self.conv(&format!("{name}.b4"), x, 1, 4, 4)?;
        let b4 = self.tape.silu(b4);
        let cat = self.tape.concat_all(&[b1, b2, b4])?;
        let fused = self.conv(&format!("{name}.fuse"), cat, 1, 1, 0)?;
        self.tape.add(x, fused)
    }

    /// Encoder level: group-normalizes the incoming features, fuses them
    /// with the level's GRM branch, then CIM (with pooling) and DFM.
    fn encoder(&mut self, name: &str, x: NodeId, g: NodeId, combine_add: bool) -> Result<NodeId> {
        let xn = self.gn(&format!("{name}.gn"), x)?;
        let m = if combine_add {
            let xp = self.conv(&format!("{name}.xproj"), xn, 1, 1, 0)?;
            let gp = self.conv(&format!("{name}.gproj"), g, 1, 1, 0)?;
            self.tape.add(xp, gp)?
        } else {
            let cat = self.tape.concat(xn, g)?;
            self.conv(&format!("{name}.reduce"), cat, 1, 1, 0)?
        };
        let m = self.tape.silu(m);
        let y = self.cim(&format!("{name}.cim"), m, true)?;
        self.dfm(&format!("{name}.dfm"), y)
    }

    fn bottleneck(&mut self, x: NodeId) -> Result<NodeId> {
        let y = self.conv("bott.c1", x, 1, 1, 1)?;
        let y = self.tape.silu(y);
        let y = self.tape.max_pool(y, 2)?;
        let y = self.conv("bott.c2", y, 1, 1, 1)?;
        let y = self.tape.silu(y);
        let y = self.dfm("bott.dfm", y)?;
        let y = self.conv("bott.c3", y, 1, 1, 1)?;
        Ok(self.tape.silu(y))
    }

    /// Decoder level: nearest-neighbor upsampling, a channel-matching conv,
    /// one residual conv, skip concatenation, then CIM (no pooling) + DFM.
    fn decoder(&mut self, name: &str, x: NodeId, skip: NodeId) -> Result<NodeId> {
        let up = self.tape.upsample_nearest2(x);
        let up = self.conv(&format!("{name}.up"), up, 1, 1, 1)?;
        let up = self.tape.silu(up);
        let r = self.conv(&format!("{name}.res"), up, 1, 1, 1)?;
        let r = self.tape.silu(r);
        let r = self.tape.add(up, r)?;
        let cat = self.tape.concat(r, skip)?;
        let y = self.cim(&format!("{name}.cim"), cat, false)?;
        self.dfm(&format!("{name}.dfm"), y)
    }

    /// Motion aggregation module: estimates a raw field at twice the
    /// decoder resolution, and gates it per pixel against the upsampled
    /// (and value-doubled) previous-level field. The coarsest level has no
    /// previous field and gates against zero.
    fn mam(&mut self, name: &str, dec: NodeId, prev: Option<NodeId>) -> Result<NodeId> {
        let up = self.tape.upsample_bilinear2(dec);
        let r = self.conv(&format!("{name}.e1"), up, 1, 1, 1)?;
        let r = self.tape.silu(r);
        let r = self.conv(&format!("{name}.e2"), r, 1, 1, 1)?;
        let r = self.tape.silu(r);
        let raw = self.conv(&format!("{name}.e3"), r, 1, 1, 1)?;
        let (n, _, h, w) = self.tape.value(raw).shape();
        let prev_up = match prev {
            Some(p) => {
                let pu = self.tape.upsample_bilinear2(p);
                self.tape.scale(pu, 2.0)
            }
            None => self.tape.leaf(Tensor::zeros(n, 2, h, w), false),
        };
        let cat = self.tape.concat(raw, prev_up)?;
        let m = self.conv(&format!("{name}.m1"), cat, 1, 1, 1)?;
        let m = self.tape.silu(m);
        let m = self.conv(&format!("{name}.m2"), m, 1, 1, 1)?;
        let masks = self.tape.sigmoid(m);
        let gated = self.tape.mul(masks, raw)?;
        self.tape.add(gated, prev_up)
    }

    /// Global-translation head: 1x1 projection to two channels followed by
    /// max-pooling over the whole (square) bottleneck map.
    fn translation_head(&mut self, x: NodeId) -> Result<NodeId> {
        let t = self.conv("head.proj", x, 1, 1, 0)?;
        let (_, _, h, w) = self.tape.value(t).shape();
        if h != w {
            return Err(Error::ShapeMismatch(format!(
                "translation head needs a square map, got {h}x{w}"
            )));
        }
        self.tape.max_pool(t, h)
    }
}

/// Runs central finite-difference gradient checks through every composite
/// block at a tiny standalone configuration, returning `(block, worst
/// relative error)` pairs. Inputs and parameters are all perturbed.
pub fn composite_block_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    use crate::autodiff::finite_difference_probe;

    let mut results = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let rand_tensor = |n: usize, c: usize, h: usize, w: usize, rng: &mut ChaCha20Rng| {
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).expect("probe tensor")
    };

    // (name, training mode, finite-difference step, data inputs,
    // registration, forward). Blocks whose chains are smooth (conv, silu,
    // sigmoid, softmax, upsampling) take a 1e-4 step: their subtraction
    // noise at 1e-5 reaches ~2e-4 relative on the smallest gradient entries
    // (it scales as 1/eps) while truncation stays negligible. Blocks with a
    // max-pool kink keep 1e-5, where a perturbation is 10x less likely to
    // cross an argmax change.
    type Runner = Box<dyn Fn(&mut Ctx, &[NodeId]) -> Result<NodeId>>;
    let blocks: Vec<(&str, bool, f64, Vec<Tensor>, Registrar, Runner)> = {
        let mut v: Vec<(&str, bool, f64, Vec<Tensor>, Registrar, Runner)> = Vec::new();
        v.push((
            "attention",
            false,
            1e-4,
            vec![rand_tensor(1, 3, 5, 5, &mut rng)],
            Box::new(|b: &mut Builder| b.attn("blk", 3)),
            Box::new(|ctx, d| ctx.attention("blk", d[0])),
        ));
        v.push((
            "se",
            false,
            1e-4,
            vec![rand_tensor(1, 4, 4, 4, &mut rng)],
            Box::new(|b: &mut Builder| b.se("blk", 4)),
            Box::new(|ctx, d| ctx.se("blk", d[0])),
        ));
        v.push((
            "grm",
            true,
            1e-5,
            vec![rand_tensor(2, 4, 6, 6, &mut rng)],
            Box::new(|b: &mut Builder| b.grm("blk", 4, 3)),
            Box::new(|ctx, d| ctx.grm("blk", d[0], 2)),
        ));
        v.push((
            "encoder",
            false,
            1e-5,
            vec![
                rand_tensor(1, 3, 6, 6, &mut rng),
                rand_tensor(1, 2, 6, 6, &mut rng),
            ],
            Box::new(|b: &mut Builder| b.encoder("blk", 3, 2, 4, false)),
            Box::new(|ctx, d| ctx.encoder("blk", d[0], d[1], false)),
        ));
        v.push((
            "encoder_add",
            false,
            1e-5,
            vec![
                rand_tensor(1, 3, 6, 6, &mut rng),
                rand_tensor(1, 2, 6, 6, &mut rng),
            ],
            Box::new(|b: &mut Builder| b.encoder("blk", 3, 2, 4, true)),
            Box::new(|ctx, d| ctx.encoder("blk", d[0], d[1], true)),
        ));
        v.push((
            "bottleneck",
            false,
            1e-5,
            vec![rand_tensor(1, 3, 6, 6, &mut rng)],
            Box::new(|b: &mut Builder| b.bottleneck(3, 4)),
            Box::new(|ctx, d| ctx.bottleneck(d[0])),
        ));
        v.push((
            "decoder",
            false,
            1e-4,
            vec![
                rand_tensor(1, 4, 3, 3, &mut rng),
                rand_tensor(1, 3, 6, 6, &mut rng),
            ],
            Box::new(|b: &mut Builder| b.decoder("blk", 4, 3)),
            Box::new(|ctx, d| ctx.decoder("blk", d[0], d[1])),
        ));
        v.push((
            "mam",
            false,
            1e-4,
            vec![
                rand_tensor(1, 4, 3, 3, &mut rng),
                rand_tensor(1, 2, 3, 3, &mut rng),
            ],
            Box::new(|b: &mut Builder| b.mam("blk", 4)),
            Box::new(|ctx, d| ctx.mam("blk", d[0], Some(d[1]))),
        ));
        v.push((
            "translation_head",
            false,
            1e-5,
            vec![rand_tensor(1, 4, 4, 4, &mut rng)],
            Box::new(|b: &mut Builder| b.conv("head.proj", 2, 4, 1, true)),
            Box::new(|ctx, d| ctx.translation_head(d[0])),
        ));
        v
    };

    for (name, training, eps, data, build, run) in blocks {
        let mut brng = ChaCha20Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
        let mut builder = Builder::new(&mut brng);
        build(&mut builder);
        let Builder { store, order, .. } = builder;
        let mut inputs = data.clone();
        for pname in &order {
            inputs.push(store.param(pname)?.clone());
        }
        let nd = data.len();
        let f = |tape: &mut Tape, ids: &[NodeId]| -> NodeId {
            let mut nodes = BTreeMap::new();
            for (j, pname) in order.iter().enumerate() {
                nodes.insert(pname.clone(), ids[nd + j]);
            }
            let mut ctx = Ctx {
                tape,
                store: &store,
                training,
                param_grads: true,
                nodes,
                new_stats: Vec::new(),
            };
            run(&mut ctx, &ids[..nd]).expect("block forward")
        };
        let worst = finite_difference_probe(&inputs, &f, eps);
        results.push((name.to_string(), worst));
    }
    Ok(results)
}

/// Registration closure used by the block gradient-check table.
type Registrar = Box<dyn Fn(&mut Builder)>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ComplexGrid;
    use num_complex::Complex64;

    #[test]
    #[ignore]
    fn mam_gradcheck_worst_entry() {
        use crate::autodiff::finite_difference_probe;
        let seed = 1u64;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // Mirror the composite table's RNG stream up to the mam block: the
        // seven blocks before it draw these tensors in order.
        let mut draw = |n: usize, c: usize, h: usize, w: usize| -> Tensor {
            let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor::from_vec(n, c, h, w, data).unwrap()
        };
        let _ = draw(1, 3, 5, 5);
        let _ = draw(1, 4, 4, 4);
        let _ = draw(2, 4, 6, 6);
        let _ = draw(1, 3, 6, 6);
        let _ = draw(1, 2, 6, 6);
        let _ = draw(1, 3, 6, 6);
        let _ = draw(1, 2, 6, 6);
        let _ = draw(1, 3, 6, 6);
        let _ = draw(1, 4, 3, 3);
        let _ = draw(1, 3, 6, 6);
        let dec = draw(1, 4, 3, 3);
        let prev = draw(1, 2, 3, 3);

        let mut brng = ChaCha20Rng::seed_from_u64(seed ^ 0x5851_f42d_4c95_7f2d);
        let mut builder = Builder::new(&mut brng);
        builder.mam("blk", 4);
        let Builder { store, order, .. } = builder;
        let mut inputs = vec![dec, prev];
        for pname in &order {
            inputs.push(store.param(pname).unwrap().clone());
        }
        let nd = 2;
        let f = |tape: &mut Tape, ids: &[NodeId]| -> NodeId {
            let mut nodes = BTreeMap::new();
            for (j, pname) in order.iter().enumerate() {
                nodes.insert(pname.clone(), ids[nd + j]);
            }
            let mut ctx = Ctx {
                tape,
                store: &store,
                training: false,
                param_grads: true,
                nodes,
                new_stats: Vec::new(),
            };
            ctx.mam("blk", ids[0], Some(ids[1])).unwrap()
        };
        for eps in [1e-3, 1e-4, 1e-5, 1e-6] {
            let worst = finite_difference_probe(&inputs, &f, eps);
            println!("eps {eps:.0e}: worst rel err {worst:.3e}");
        }
    }

    fn rand_tensor(seed: u64, n: usize, c: usize, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(n, c, h, w, data).unwrap()
    }

    fn rand_kspace(seed: u64, n_c: usize, h: usize, w: usize) -> MultiCoilKSpace {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let coils = (0..n_c)
            .map(|_| {
                let mut g = ComplexGrid::zeros(h, w);
                for z in &mut g.data {
                    *z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                }
                g
            })
            .collect();
        MultiCoilKSpace::new(coils).unwrap()
    }

    /// Closed-form parameter count derived independently from the layer
    /// arithmetic (conv = c_out*c_in_g*k^2 + c_out bias, norms = 2c).
    fn expected_param_count(cfg: &ModelConfig) -> usize {
        let conv = |c_out: usize, c_in: usize, k: usize| c_out * c_in * k * k + c_out;
        let conv_nb = |c_out: usize, c_in_g: usize, k: usize| c_out * c_in_g * k * k;
        let se = |c: usize| {
            let hid = (c / 4).max(1);
            conv(1, c, 3) + conv(hid, c, 1) + conv(c, hid, 1)
        };
        let cim = |c_in: usize, c: usize| conv(c, c_in, 3) + 2 * conv(c, c, 3) + se(c);
        let dfm = |c: usize| 3 * conv(c, c, 3) + conv(c, 3 * c, 1);
        let in_ch = cfg.in_channels();
        let grm_ch = cfg.grm_channels();
        let enc_ch = cfg.enc_channels();
        let b = cfg.bottleneck_channels();
        let l = cfg.levels;
        let mut total = 0;
        for &g in &grm_ch {
            total += conv(g, in_ch, 1) + conv(g, in_ch, 3) + 2 * 2 * g; // cross, c1, both BN affines
            total += 3 * conv_nb(g, 1, 3); // depthwise q/k/v
            total += conv(g, g, 3) + se(g);
        }
        for i in 0..l {
            let x_ch = if i == 0 { in_ch } else { enc_ch[i - 1] };
            total += 2 * x_ch; // group norm affine
            total += if cfg.combine_add {
                conv(enc_ch[i], x_ch, 1) + conv(enc_ch[i], grm_ch[i], 1)
            } else {
                conv(enc_ch[i], x_ch + grm_ch[i], 1)
            };
            total += cim(enc_ch[i], enc_ch[i]) + dfm(enc_ch[i]);
        }
        total += conv(b, enc_ch[l - 1], 3) + 2 * conv(b, b, 3) + dfm(b);
        total += conv(2, b, 1); // translation head
        for i in 1..=l {
            let d_out = enc_ch[l - i];
            let d_in = if i == 1 { b } else { enc_ch[l - i + 1] };
            total += conv(d_out, d_in, 3) + conv(d_out, d_out, 3);
            total += cim(2 * d_out, d_out) + dfm(d_out);
            let mid = (d_out / 2).max(4);
            total += conv(d_out, d_out, 3) + conv(mid, d_out, 3) + conv(2, mid, 3);
            total += conv(8, 4, 3) + conv(2, 8, 3);
        }
        total
    }

    #[test]
    fn full_scale_parameter_count_in_budget() {
        let cfg = ModelConfig::full();
        let net = LapaNet::build(&cfg, 0).unwrap();
        let count = net.store.total_count();
        assert_eq!(count, expected_param_count(&cfg));
        assert!(
            (14_620_000..=19_780_000).contains(&count),
            "full-scale parameter count {count} outside budget"
        );
    }

    #[test]
    fn quarter_width_cuts_parameters_by_more_than_8x() {
        let full = LapaNet::build(&ModelConfig::full(), 0).unwrap();
        let mut cfg = ModelConfig::full();
        cfg.width_multiplier = 0.25;
        let quarter = LapaNet::build(&cfg, 0).unwrap();
        let ratio = quarter.store.total_count() as f64 / full.store.total_count() as f64;
        assert!(ratio < 1.0 / 8.0, "quarter-width ratio {ratio}");
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::full().validate().is_ok());
        assert!(ModelConfig::desk().validate().is_ok());
        let mut c = ModelConfig::full();
        c.input_size = 150; // not a multiple of 32
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full();
        c.levels = 1;
        assert!(c.validate().is_err());
        c.levels = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full();
        c.width_multiplier = 0.0;
        assert!(c.validate().is_err());
        c.width_multiplier = 1.5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::full();
        c.n_coils = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_kv_roundtrip() {
        for cfg in [
            ModelConfig::full(),
            ModelConfig::desk(),
            ModelConfig {
                input_size: 96,
                levels: 2,
                n_coils: 3,
                width_multiplier: 0.3,
                combine_add: true,
            },
        ] {
            let back = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
            assert_eq!(back, cfg);
        }
        assert!(ModelConfig::from_kv("input_size=64\n").is_err());
        assert!(ModelConfig::from_kv("nonsense=1\n").is_err());
    }

    #[test]
    fn channel_schedules() {
        let full = ModelConfig::full();
        assert_eq!(full.grm_channels(), vec![4, 16, 32, 128]);
        assert_eq!(full.enc_channels(), vec![16, 32, 64, 192]);
        assert_eq!(full.bottleneck_channels(), 384);
        assert_eq!(full.bottleneck_spatial(), 5);
        let desk = ModelConfig::desk();
        assert_eq!(desk.grm_channels(), vec![1, 4, 8, 32]);
        assert_eq!(desk.enc_channels(), vec![4, 8, 16, 48]);
        assert_eq!(desk.bottleneck_channels(), 96);
        assert_eq!(desk.bottleneck_spatial(), 2);
        assert_eq!(desk.in_channels(), 16);
    }

    #[test]
    fn build_is_seed_deterministic() {
        let cfg = ModelConfig::desk();
        let a = LapaNet::build(&cfg, 42).unwrap();
        let b = LapaNet::build(&cfg, 42).unwrap();
        for ((na, ta), (nb, tb)) in a.store.params().zip(b.store.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data, "parameter {na} differs across builds");
        }
        let c = LapaNet::build(&cfg, 43).unwrap();
        let differs = a
            .store
            .params()
            .zip(c.store.params())
            .any(|((_, ta), (_, tc))| ta.data != tc.data);
        assert!(differs, "different seeds should give different weights");
    }

    #[test]
    fn prepare_input_layout_and_dc_placement() {
        let mut cfg = ModelConfig::desk();
        cfg.levels = 2;
        cfg.n_coils = 2;
        cfg.input_size = 8;
        let net = LapaNet::build(&cfg, 0).unwrap();

        // Identical frames: the moving half must equal the fixed half.
        let k = rand_kspace(5, 2, 8, 8);
        let x = net.prepare_input(&k, &k).unwrap();
        assert_eq!(x.shape(), (1, 8, 8, 8));
        let half = x.len() / 2;
        assert_eq!(x.data[..half], x.data[half..]);

        // A single DC bin (grid center) must land at index (0,0) after the
        // inverse zero-frequency shift.
        let mut g = ComplexGrid::zeros(8, 8);
        g.data[4 * 8 + 4] = Complex64::new(3.0, -4.0);
        let k1 = MultiCoilKSpace::new(vec![g, ComplexGrid::zeros(8, 8)]).unwrap();
        let x = net.prepare_input(&k1, &k1).unwrap();
        assert_eq!(x.at(0, 0, 0, 0), 3.0);
        assert_eq!(x.at(0, 1, 0, 0), -4.0);
        let ch0: f64 = (0..8)
            .flat_map(|y| (0..8).map(move |x2| (y, x2)))
            .filter(|&(y, x2)| (y, x2) != (0, 0))
            .map(|(y, x2)| x.at(0, 0, y, x2).abs() + x.at(0, 1, y, x2).abs())
            .sum();
        assert_eq!(ch0, 0.0);

        // Mismatched shapes and coil counts are rejected.
        let k_bad = rand_kspace(6, 2, 8, 4);
        assert!(net.prepare_input(&k, &k_bad).is_err());
        let k_one = rand_kspace(7, 1, 8, 8);
        assert!(net.prepare_input(&k_one, &k_one).is_err());
    }

    /// Forward-pass shape ledger across widths, sizes, and level counts.
    #[test]
    fn forward_shape_ledger() {
        let cases = [
            (1.0, 64, 4, 1),
            (0.25, 64, 4, 4),
            (0.25, 160, 4, 4),
            (1.0, 32, 2, 1),
            (0.25, 64, 3, 2),
        ];
        for (mult, size, levels, n_coils) in cases {
            let cfg = ModelConfig {
                input_size: size,
                levels,
                n_coils,
                width_multiplier: mult,
                combine_add: false,
            };
            let mut net = LapaNet::build(&cfg, 9).unwrap();
            let mut tape = Tape::new();
            let x = rand_tensor(11, 1, cfg.in_channels(), size, size);
            let input = tape.leaf(x, false);
            let out = net.forward(&mut tape, input, false).unwrap();
            assert_eq!(out.u.len(), levels);
            for (i, &ui) in out.u.iter().enumerate() {
                let s = size >> (levels - 1 - i);
                assert_eq!(
                    tape.value(ui).shape(),
                    (1, 2, s, s),
                    "level {} field at mult {mult} size {size}",
                    i + 1
                );
                assert!(tape.value(ui).is_finite());
            }
            assert_eq!(tape.value(out.u_t).shape(), (1, 2, 1, 1));
            assert!(tape.value(out.u_t).is_finite());
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let mut net = LapaNet::build(&ModelConfig::desk(), 0).unwrap();
        let mut tape = Tape::new();
        // Wrong channel count.
        let x = rand_tensor(1, 1, 8, 64, 64);
        let id = tape.leaf(x, false);
        assert!(net.forward(&mut tape, id, false).is_err());
        // Non-square.
        let x = rand_tensor(2, 1, 16, 64, 32);
        let id = tape.leaf(x, false);
        assert!(net.forward(&mut tape, id, false).is_err());
        // Not a multiple of 2^(levels+1).
        let x = rand_tensor(3, 1, 16, 48, 48);
        let id = tape.leaf(x, false);
        assert!(net.forward(&mut tape, id, false).is_err());
    }

    #[test]
    fn eval_batch_matches_single_passes() {
        let cfg = ModelConfig {
            input_size: 32,
            levels: 2,
            n_coils: 1,
            width_multiplier: 0.25,
            combine_add: false,
        };
        let mut net = LapaNet::build(&cfg, 3).unwrap();
        let xb = rand_tensor(21, 2, 4, 32, 32);
        let mut tape = Tape::new();
        let id = tape.leaf(xb.clone(), false);
        let out = net.forward(&mut tape, id, false).unwrap();
        let batched = tape.value(*out.u.last().unwrap()).clone();
        let batched_ut = tape.value(out.u_t).clone();

        for s in 0..2 {
            let per = 4 * 32 * 32;
            let xs = Tensor::from_vec(1, 4, 32, 32, xb.data[s * per..(s + 1) * per].to_vec())
                .unwrap();
            let mut tape_s = Tape::new();
            let id_s = tape_s.leaf(xs, false);
            let out_s = net.forward(&mut tape_s, id_s, false).unwrap();
            let single = tape_s.value(*out_s.u.last().unwrap());
            let n_el = single.len();
            for e in 0..n_el {
                let diff = (batched.data[s * n_el + e] - single.data[e]).abs();
                assert!(diff < 1e-12, "batch/single mismatch {diff} at sample {s}");
            }
            for comp in 0..2 {
                let diff = (batched_ut.at(s, comp, 0, 0) - tape_s.value(out_s.u_t).at(0, comp, 0, 0))
                    .abs();
                assert!(diff < 1e-12);
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_fields() {
        let cfg = ModelConfig {
            input_size: 32,
            levels: 2,
            n_coils: 1,
            width_multiplier: 0.25,
            combine_add: false,
        };
        let mut net = LapaNet::build(&cfg, 1).unwrap();
        for (_, t) in net.store.params_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let id = tape.leaf(rand_tensor(8, 1, 4, 32, 32), false);
        let out = net.forward(&mut tape, id, false).unwrap();
        for &ui in &out.u {
            assert!(tape.value(ui).data.iter().all(|&v| v == 0.0));
        }
        assert!(tape.value(out.u_t).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_is_identity_at_zero_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut builder = Builder::new(&mut rng);
        builder.attn("blk", 3);
        let mut store = builder.store;
        for (_, t) in store.params_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let x = rand_tensor(2, 1, 3, 5, 5);
        let id = tape.leaf(x.clone(), false);
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &store,
            training: false,
            param_grads: false,
            nodes: BTreeMap::new(),
            new_stats: Vec::new(),
        };
        let y = ctx.attention("blk", id).unwrap();
        assert_eq!(tape.value(y).data, x.data);
    }

    #[test]
    fn se_respects_joint_channel_permutation() {
        let c = 3;
        let perm = [2usize, 0, 1]; // output channel p comes from input perm[p]
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let mut builder = Builder::new(&mut rng);
        builder.se("blk", c);
        let store = builder.store;

        // Permuted copy: rewire every weight that indexes channels.
        let mut store_p = store.clone();
        let hid = (c / 4).max(1);
        {
            let src = store.param("blk.proj.w").unwrap().clone();
            let dst = store_p.param_mut("blk.proj.w").unwrap();
            for p in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        dst.data[(p * 9) + ky * 3 + kx] = src.data[(perm[p] * 9) + ky * 3 + kx];
                    }
                }
            }
            let src = store.param("blk.fc1.w").unwrap().clone();
            let dst = store_p.param_mut("blk.fc1.w").unwrap();
            for o in 0..hid {
                for p in 0..c {
                    dst.data[o * c + p] = src.data[o * c + perm[p]];
                }
            }
            let src = store.param("blk.fc2.w").unwrap().clone();
            let dst = store_p.param_mut("blk.fc2.w").unwrap();
            for p in 0..c {
                for i in 0..hid {
                    dst.data[p * hid + i] = src.data[perm[p] * hid + i];
                }
            }
            let src = store.param("blk.fc2.b").unwrap().clone();
            let dst = store_p.param_mut("blk.fc2.b").unwrap();
            for p in 0..c {
                dst.data[p] = src.data[perm[p]];
            }
        }

        let x = rand_tensor(31, 1, c, 4, 4);
        let mut xp = Tensor::zeros(1, c, 4, 4);
        for p in 0..c {
            for e in 0..16 {
                xp.data[p * 16 + e] = x.data[perm[p] * 16 + e];
            }
        }

        let run = |store: &ParameterStore, x: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let id = tape.leaf(x.clone(), false);
            let mut ctx = Ctx {
                tape: &mut tape,
                store,
                training: false,
                param_grads: false,
                nodes: BTreeMap::new(),
                new_stats: Vec::new(),
            };
            let y = ctx.se("blk", id).unwrap();
            tape.value(y).clone()
        };
        let y = run(&store, &x);
        let yp = run(&store_p, &xp);
        for p in 0..c {
            for e in 0..16 {
                let diff = (yp.data[p * 16 + e] - y.data[perm[p] * 16 + e]).abs();
                assert!(diff < 1e-12, "permutation equivariance broken: {diff}");
            }
        }
    }

    #[test]
    fn decoder_and_mam_double_resolution() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut builder = Builder::new(&mut rng);
        builder.decoder("dec", 4, 3);
        builder.mam("mam", 3);
        let store = builder.store;
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(41, 1, 4, 5, 5), false);
        let skip = tape.leaf(rand_tensor(42, 1, 3, 10, 10), false);
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &store,
            training: false,
            param_grads: false,
            nodes: BTreeMap::new(),
            new_stats: Vec::new(),
        };
        let d = ctx.decoder("dec", x, skip).unwrap();
        let u = ctx.mam("mam", d, None).unwrap();
        assert_eq!(tape.value(d).shape(), (1, 3, 10, 10));
        assert_eq!(tape.value(u).shape(), (1, 2, 20, 20));
    }

    #[test]
    fn mam_passes_previous_field_through_zero_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut builder = Builder::new(&mut rng);
        builder.mam("mam", 4);
        let mut store = builder.store;
        for (_, t) in store.params_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let dec = tape.leaf(rand_tensor(51, 1, 4, 3, 3), false);
        let prev_t = rand_tensor(52, 1, 2, 3, 3);
        let prev = tape.leaf(prev_t.clone(), false);
        let expected_node = {
            let pu = tape.upsample_bilinear2(prev);
            tape.scale(pu, 2.0)
        };
        let expected = tape.value(expected_node).clone();
        let mut ctx = Ctx {
            tape: &mut tape,
            store: &store,
            training: false,
            param_grads: false,
            nodes: BTreeMap::new(),
            new_stats: Vec::new(),
        };
        let u = ctx.mam("mam", dec, Some(prev)).unwrap();
        // raw = 0, masks = sigmoid(0), so u = masks*0 + upsampled previous.
        for (a, b) in tape.value(u).data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn translation_head_is_monotone_for_positive_weights() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut builder = Builder::new(&mut rng);
        builder.conv("head.proj", 2, 4, 1, true);
        let mut store = builder.store;
        for v in &mut store.param_mut("head.proj.w").unwrap().data {
            *v = v.abs() + 0.05;
        }
        let x = rand_tensor(61, 1, 4, 4, 4);
        let mut bump = x.clone();
        for v in &mut bump.data {
            *v += 0.5;
        }
        let run = |t: &Tensor, store: &ParameterStore| -> (f64, f64) {
            let mut tape = Tape::new();
            let id = tape.leaf(t.clone(), false);
            let mut ctx = Ctx {
                tape: &mut tape,
                store,
                training: false,
                param_grads: false,
                nodes: BTreeMap::new(),
                new_stats: Vec::new(),
            };
            let ut = ctx.translation_head(id).unwrap();
            let v = tape.value(ut);
            assert_eq!(v.shape(), (1, 2, 1, 1));
            (v.at(0, 0, 0, 0), v.at(0, 1, 0, 0))
        };
        let (a0, a1) = run(&x, &store);
        let (b0, b1) = run(&bump, &store);
        assert!(b0 > a0 && b1 > a1, "head not monotone under positive bump");
    }

    #[test]
    fn composite_blocks_pass_gradient_checks() {
        let results = composite_block_gradchecks(7).unwrap();
        assert_eq!(results.len(), 9);
        for (name, worst) in results {
            assert!(worst < 1e-4, "block {name} gradient check failed: {worst}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ModelConfig {
            input_size: 32,
            levels: 2,
            n_coils: 1,
            width_multiplier: 0.25,
            combine_add: false,
        };
        let mut net = LapaNet::build(&cfg, 77).unwrap();
        // Nudge a buffer so non-default running stats round-trip too.
        net.store
            .buffer_mut("grm1.bn1.mean")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v = 0.25);

        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let mut loaded = LapaNet::load(dir.path()).unwrap();
        assert_eq!(loaded.cfg, cfg);
        for ((na, ta), (nb, tb)) in net.store.params().zip(loaded.store.params()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }
        for ((na, ta), (nb, tb)) in net.store.buffers().zip(loaded.store.buffers()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data, tb.data);
        }

        // Same forward outputs.
        let x = rand_tensor(70, 1, 4, 32, 32);
        let mut t1 = Tape::new();
        let i1 = t1.leaf(x.clone(), false);
        let o1 = net.forward(&mut t1, i1, false).unwrap();
        let mut t2 = Tape::new();
        let i2 = t2.leaf(x, false);
        let o2 = loaded.forward(&mut t2, i2, false).unwrap();
        assert_eq!(
            t1.value(*o1.u.last().unwrap()).data,
            t2.value(*o2.u.last().unwrap()).data
        );

        // A truncated manifest is rejected.
        let manifest = std::fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
        let truncated: Vec<&str> = manifest.lines().collect();
        std::fs::write(
            dir.path().join("manifest.csv"),
            truncated[..truncated.len() - 1].join("\n") + "\n",
        )
        .unwrap();
        assert!(LapaNet::load(dir.path()).is_err());
    }

    #[test]
    fn training_forward_updates_bn_buffers() {
        let cfg = ModelConfig {
            input_size: 32,
            levels: 2,
            n_coils: 1,
            width_multiplier: 0.25,
            combine_add: false,
        };
        let mut net = LapaNet::build(&cfg, 2).unwrap();
        let before = net.store.buffer("grm1.bn1.mean").unwrap().data.clone();
        let mut tape = Tape::new();
        let id = tape.leaf(rand_tensor(81, 2, 4, 32, 32), false);
        net.forward(&mut tape, id, true).unwrap();
        let after = net.store.buffer("grm1.bn1.mean").unwrap().data.clone();
        assert_ne!(before, after, "training pass should move running stats");

        // Eval passes must leave buffers untouched.
        let mut tape2 = Tape::new();
        let id2 = tape2.leaf(rand_tensor(82, 1, 4, 32, 32), false);
        net.forward(&mut tape2, id2, false).unwrap();
        assert_eq!(after, net.store.buffer("grm1.bn1.mean").unwrap().data);
    }

    #[test]
    fn integrated_gradients_is_complete_on_small_model() {
        let cfg = ModelConfig {
            input_size: 16,
            levels: 2,
            n_coils: 1,
            width_multiplier: 0.25,
            combine_add: false,
        };
        let mut net = LapaNet::build(&cfg, 11).unwrap();
        let k_fix = rand_kspace(91, 1, 16, 16);
        let k_mov = rand_kspace(92, 1, 16, 16);
        let ig = net.integrated_gradients(&k_fix, &k_mov, 64).unwrap();
        assert_eq!(ig.attributions.shape(), (1, 4, 16, 16));
        assert!(ig.f_input.is_finite() && ig.f_baseline.is_finite());
        assert!(
            ig.completeness_gap < 0.05,
            "completeness gap {} too large at 64 steps",
            ig.completeness_gap
        );
        assert!(net.integrated_gradients(&k_fix, &k_mov, 0).is_err());
    }
}
