//! Segmentation network: a 3D encoder-decoder whose feature-extractor block
//! chains one dilated convolution, one channel self-attention gate, and two
//! standard convolutions, fused across scales by max pooling and transposed
//! convolutions with channel-concatenation skips.
//!
//! Also hosts the receptive-field arithmetic for standard and dilated stacks
//! and an empirical gradient probe that measures the receptive field of an
//! instantiated linear network, used as the independent oracle for the
//! calculators.

mod checkpoint;
pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint};

use crate::error::{NvError, Result};
use crate::scalar::Real;
use crate::tensor::{kernels, Tape, Var};
use ndarray::{Array1, Array2, Array3, Array4, Array5, ArrayD, Axis, Ix3, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One convolutional layer, as seen by the receptive-field arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    /// 1 = standard convolution.
    pub dilation: usize,
}

impl LayerSpec {
    pub fn new(kernel: usize, stride: usize, dilation: usize) -> Self {
        LayerSpec {
            kernel,
            stride,
            dilation,
        }
    }
}

/// Receptive field of a stack of standard convolutions:
/// `r0 = sum_p ((k_p - 1) * prod_{q<p} s_q) + 1`.
///
/// Rejects stacks containing dilated layers; use
/// [`receptive_field_dilated`] for those.
pub fn receptive_field_standard(layers: &[LayerSpec]) -> Result<usize> {
    if let Some(i) = layers.iter().position(|l| l.dilation != 1) {
        return Err(NvError::Contract(format!(
            "layer {i} has dilation {} > 1; use receptive_field_dilated",
            layers[i].dilation
        )));
    }
    Ok(receptive_field_dilated(layers))
}

/// Receptive field of a mixed standard/dilated stack:
/// `r0' = sum_p (k'_p * prod_{q<p} s_q) + 1` with `k'_p = d_p * (k_p - 1)`
/// for dilated layers and `k_p - 1` otherwise (the `d_p = 1` case of the
/// same product).
pub fn receptive_field_dilated(layers: &[LayerSpec]) -> usize {
    let mut total = 0usize;
    let mut stride_prod = 1usize;
    for l in layers {
        let k_eff = l.dilation * (l.kernel - 1);
        total += k_eff * stride_prod;
        stride_prod *= l.stride;
    }
    total + 1
}

/// Axis along which [`probe_receptive_field`] instantiates the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeAxis {
    Z,
    Y,
    X,
}

/// Empirical receptive field of an instantiated linear network.
///
/// Builds the stack as 1-channel convolutions with all-ones weights, no bias,
/// identity activations, and valid padding, sized so the output has extent 1
/// along the probed axis. Backpropagating from that single output voxel, the
/// result is the extent (last minus first plus one) of input voxels with a
/// nonzero gradient.
pub fn probe_receptive_field<T: Real>(layers: &[LayerSpec], axis: ProbeAxis) -> usize {
    assert!(!layers.is_empty(), "probe requires at least one layer");
    let len = receptive_field_dilated(layers);
    let shape = match axis {
        ProbeAxis::Z => [len, 1, 1],
        ProbeAxis::Y => [1, len, 1],
        ProbeAxis::X => [1, 1, len],
    };
    let mut tape = Tape::<T>::new();
    let input = tape.leaf(
        ArrayD::from_elem(IxDyn(&[1, shape[0], shape[1], shape[2]]), T::one()),
        true,
    );
    let mut cur = input;
    for l in layers {
        let (k, s, d) = match axis {
            ProbeAxis::Z => (
                [l.kernel, 1, 1],
                [l.stride, 1, 1],
                [l.dilation, 1, 1],
            ),
            ProbeAxis::Y => (
                [1, l.kernel, 1],
                [1, l.stride, 1],
                [1, l.dilation, 1],
            ),
            ProbeAxis::X => (
                [1, 1, l.kernel],
                [1, 1, l.stride],
                [1, 1, l.dilation],
            ),
        };
        let w = tape.leaf(
            ArrayD::from_elem(IxDyn(&[1, 1, k[0], k[1], k[2]]), T::one()),
            false,
        );
        cur = tape.conv3d(cur, w, None, s, d, [0, 0, 0]);
    }
    let out_shape = tape.data(cur).shape().to_vec();
    assert_eq!(
        out_shape.iter().product::<usize>(),
        1,
        "probe output should be a single voxel, got {out_shape:?}"
    );
    let seed = ArrayD::from_elem(IxDyn(&out_shape), T::one());
    tape.backward_with(cur, seed);
    let grad = tape.grad(input).expect("input gradient");
    let nz: Vec<usize> = grad
        .iter()
        .enumerate()
        .filter(|(_, g)| **g != T::zero())
        .map(|(i, _)| i)
        .collect();
    match (nz.first(), nz.last()) {
        (Some(&a), Some(&b)) => b - a + 1,
        _ => 0,
    }
}

/// Paired airway/background probability grids in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMaps<T> {
    pub airway: Array3<T>,
    pub background: Array3<T>,
}

impl<T: Real> ConfidenceMaps<T> {
    pub fn new(airway: Array3<T>, background: Array3<T>) -> Result<Self> {
        if airway.dim() != background.dim() {
            return Err(NvError::Alignment(format!(
                "airway map shape {:?} != background map shape {:?}",
                airway.dim(),
                background.dim()
            )));
        }
        for (name, m) in [("airway", &airway), ("background", &background)] {
            if m.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
                return Err(NvError::Data(format!(
                    "{name} map has values outside [0, 1]"
                )));
            }
        }
        Ok(ConfidenceMaps { airway, background })
    }

    pub fn shape(&self) -> [usize; 3] {
        let d = self.airway.dim();
        [d.0, d.1, d.2]
    }
}

/// Squeeze-and-excitation parameters: a two-layer bottleneck over channel
/// descriptors with a sigmoid gate.
#[derive(Debug, Clone)]
pub struct SeParams<T> {
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
}

impl<T: Real> SeParams<T> {
    pub fn init(channels: usize, reduction: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / reduction).max(1);
        SeParams {
            w1: he_matrix(hidden, channels, rng),
            b1: Array1::zeros(hidden),
            w2: he_matrix(channels, hidden, rng),
            b2: Array1::zeros(channels),
        }
    }

    /// Zero bottleneck weights with a saturating positive gate bias: every
    /// gate evaluates to exactly 1, so attention is the identity.
    pub fn identity_gate(channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        SeParams {
            w1: Array2::zeros((hidden, channels)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((channels, hidden)),
            b2: Array1::from_elem(channels, T::of(40.0)),
        }
    }
}

/// Channel self-attention: scales each channel by a gate in (0, 1) computed
/// from its global-average-pooled descriptor through the SE bottleneck.
pub fn channel_attention<T: Real>(features: &Array4<T>, se: &SeParams<T>) -> Array4<T> {
    let desc = kernels::global_avg_pool(features.view());
    let z = kernels::linear_forward(desc.view(), se.w1.view(), se.b1.view());
    let z = z.mapv(|v| if v > T::zero() { v } else { T::zero() });
    let z = kernels::linear_forward(z.view(), se.w2.view(), se.b2.view());
    let gates = z.mapv(kernels::sigmoid);
    let mut out = features.to_owned();
    for (c, mut oc) in out.axis_iter_mut(Axis(0)).enumerate() {
        let g = gates[c];
        oc.mapv_inplace(|v| v * g);
    }
    out
}

/// Network architecture. The decoder mirrors the encoder; the output is two
/// independently sigmoided channels (airway, background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder depth.
    pub levels: usize,
    /// Channels per level, length `levels`.
    pub channels: Vec<usize>,
    /// Spatial kernel size of every convolution (odd).
    pub kernel: usize,
    /// Dilation of each level's first (dilated) convolution, length `levels`.
    pub dilations: Vec<usize>,
    /// SE bottleneck reduction ratio.
    pub se_reduction: usize,
    /// Training/inference patch shape (D, H, W).
    pub patch_shape: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: 3,
            channels: vec![16, 32, 64],
            kernel: 3,
            dilations: vec![2, 2, 2],
            se_reduction: 4,
            patch_shape: [32, 32, 32],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(NvError::Config("levels must be >= 1".into()));
        }
        if self.channels.len() != self.levels || self.dilations.len() != self.levels {
            return Err(NvError::Config(format!(
                "channels/dilations must list one entry per level ({})",
                self.levels
            )));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(NvError::Config("channel counts must be >= 1".into()));
        }
        if self.kernel % 2 == 0 || self.kernel == 0 {
            return Err(NvError::Config(format!(
                "kernel must be odd and >= 1, got {}",
                self.kernel
            )));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(NvError::Config("dilations must be >= 1".into()));
        }
        if self.se_reduction == 0 {
            return Err(NvError::Config("se_reduction must be >= 1".into()));
        }
        let down = 1usize << (self.levels - 1);
        if self.patch_shape.iter().any(|&p| p == 0 || p % down != 0) {
            return Err(NvError::Config(format!(
                "patch shape {:?} must be divisible by {} (levels = {})",
                self.patch_shape, down, self.levels
            )));
        }
        Ok(())
    }

    /// Layer stack of one encoder path from the input to the bottom level,
    /// for receptive-field reporting.
    pub fn encoder_layer_stack(&self) -> Vec<LayerSpec> {
        let mut out = Vec::new();
        for (lv, &d) in self.dilations.iter().enumerate() {
            out.push(LayerSpec::new(self.kernel, 1, d));
            out.push(LayerSpec::new(self.kernel, 1, 1));
            out.push(LayerSpec::new(self.kernel, 1, 1));
            if lv + 1 < self.levels {
                out.push(LayerSpec::new(2, 2, 1)); // pooling
            }
        }
        out
    }
}

/// A named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub data: ArrayD<T>,
}

/// The segmentation model: config plus a flat, name-addressed parameter list
/// in a deterministic order.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Vec<Param<T>>,
}

fn he_matrix<T: Real>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<T> {
    let std = (2.0 / cols as f64).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_fn((rows, cols), |_| T::of(dist.sample(rng)))
}

fn he_conv<T: Real>(
    co: usize,
    ci: usize,
    k: [usize; 3],
    rng: &mut impl Rng,
    gain: f64,
) -> Array5<T> {
    let fan_in = (ci * k[0] * k[1] * k[2]) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    Array5::from_shape_fn((co, ci, k[0], k[1], k[2]), |_| T::of(dist.sample(rng)))
}

const NORM_EPS: f64 = 1e-5;

fn push<T: Real>(params: &mut Vec<Param<T>>, name: String, data: ArrayD<T>) {
    params.push(Param { name, data });
}

fn init_block<T: Real, R: Rng>(
    params: &mut Vec<Param<T>>,
    prefix: &str,
    cin: usize,
    cout: usize,
    kernel: usize,
    se_reduction: usize,
    rng: &mut R,
) {
    let k3 = [kernel, kernel, kernel];
    let hidden = (cout / se_reduction).max(1);
    push(params, format!("{prefix}.conv_d.w"), he_conv::<T>(cout, cin, k3, rng, 1.0).into_dyn());
    push(params, format!("{prefix}.conv_d.b"), Array1::<T>::zeros(cout).into_dyn());
    push(params, format!("{prefix}.in1.g"), Array1::<T>::ones(cout).into_dyn());
    push(params, format!("{prefix}.in1.b"), Array1::<T>::zeros(cout).into_dyn());
    push(params, format!("{prefix}.se.w1"), he_matrix::<T>(hidden, cout, rng).into_dyn());
    push(params, format!("{prefix}.se.b1"), Array1::<T>::zeros(hidden).into_dyn());
    push(params, format!("{prefix}.se.w2"), he_matrix::<T>(cout, hidden, rng).into_dyn());
    push(params, format!("{prefix}.se.b2"), Array1::<T>::zeros(cout).into_dyn());
    push(params, format!("{prefix}.conv_a.w"), he_conv::<T>(cout, cout, k3, rng, 1.0).into_dyn());
    push(params, format!("{prefix}.conv_a.b"), Array1::<T>::zeros(cout).into_dyn());
    push(params, format!("{prefix}.in2.g"), Array1::<T>::ones(cout).into_dyn());
    push(params, format!("{prefix}.in2.b"), Array1::<T>::zeros(cout).into_dyn());
    push(params, format!("{prefix}.conv_b.w"), he_conv::<T>(cout, cout, k3, rng, 1.0).into_dyn());
    push(params, format!("{prefix}.conv_b.b"), Array1::<T>::zeros(cout).into_dyn());
    push(params, format!("{prefix}.in3.g"), Array1::<T>::ones(cout).into_dyn());
    push(params, format!("{prefix}.in3.b"), Array1::<T>::zeros(cout).into_dyn());
}

impl<T: Real> Model<T> {
    /// Initializes a fresh model (He normal weights, identity norms,
    /// mid-range sigmoid heads).
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params: Vec<Param<T>> = Vec::new();
        let c = config.channels.clone();
        for lv in 0..config.levels {
            let cin = if lv == 0 { 1 } else { c[lv - 1] };
            init_block(
                &mut params,
                &format!("enc{lv}"),
                cin,
                c[lv],
                config.kernel,
                config.se_reduction,
                rng,
            );
        }
        for lv in (0..config.levels - 1).rev() {
            let fan = c[lv + 1] * 8;
            let std = (2.0 / fan as f64).sqrt();
            let dist = Normal::new(0.0, std).unwrap();
            let up_w = Array5::from_shape_fn((c[lv + 1], c[lv], 2, 2, 2), |_| {
                T::of(dist.sample(rng))
            });
            push(&mut params, format!("up{lv}.w"), up_w.into_dyn());
            push(&mut params, format!("up{lv}.b"), Array1::<T>::zeros(c[lv]).into_dyn());
            init_block(
                &mut params,
                &format!("dec{lv}"),
                2 * c[lv],
                c[lv],
                config.kernel,
                config.se_reduction,
                rng,
            );
        }
        for head in ["head_aw", "head_bg"] {
            push(
                &mut params,
                format!("{head}.w"),
                he_conv::<T>(1, c[0], [1, 1, 1], rng, 0.1).into_dyn(),
            );
            push(&mut params, format!("{head}.b"), Array1::<T>::zeros(1).into_dyn());
        }
        Ok(Model { config, params })
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Copies every parameter onto `tape` as a leaf; gradients accumulate
    /// into the leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.data.clone(), trainable))
            .collect()
    }

    fn var(&self, vars: &[Var], name: &str) -> Var {
        vars[self
            .param_index(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))]
    }

    fn fe_block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        prefix: &str,
        x: Var,
        dilation: usize,
    ) -> Var {
        let k = self.config.kernel;
        let pad_d = dilation * (k - 1) / 2;
        let pad = (k - 1) / 2;
        let eps = T::of(NORM_EPS);
        let v = |n: &str| self.var(vars, &format!("{prefix}.{n}"));
        let c = tape.conv3d(
            x,
            v("conv_d.w"),
            Some(v("conv_d.b")),
            [1; 3],
            [dilation; 3],
            [pad_d; 3],
        );
        let c = tape.instance_norm(c, v("in1.g"), v("in1.b"), eps);
        let c = tape.relu(c);
        let s = tape.global_avg_pool(c);
        let z = tape.linear(s, v("se.w1"), v("se.b1"));
        let z = tape.relu(z);
        let z = tape.linear(z, v("se.w2"), v("se.b2"));
        let gates = tape.sigmoid(z);
        let c = tape.channel_scale(c, gates);
        let c = tape.conv3d(c, v("conv_a.w"), Some(v("conv_a.b")), [1; 3], [1; 3], [pad; 3]);
        let c = tape.instance_norm(c, v("in2.g"), v("in2.b"), eps);
        let c = tape.relu(c);
        let c = tape.conv3d(c, v("conv_b.w"), Some(v("conv_b.b")), [1; 3], [1; 3], [pad; 3]);
        let c = tape.instance_norm(c, v("in3.g"), v("in3.b"), eps);
        tape.relu(c)
    }

    /// Builds the full network graph on `tape`. Returns the airway and
    /// background confidence nodes, each shaped `[1, D, H, W]`.
    pub fn forward_on(&self, tape: &mut Tape<T>, input: Var, vars: &[Var]) -> (Var, Var) {
        let levels = self.config.levels;
        let mut skips: Vec<Var> = Vec::with_capacity(levels);
        let mut cur = input;
        for lv in 0..levels {
            let out = self.fe_block(tape, vars, &format!("enc{lv}"), cur, self.config.dilations[lv]);
            skips.push(out);
            if lv + 1 < levels {
                cur = tape.maxpool3d(out, 2);
            } else {
                cur = out;
            }
        }
        for lv in (0..levels - 1).rev() {
            let up = tape.convt3d(
                cur,
                self.var(vars, &format!("up{lv}.w")),
                Some(self.var(vars, &format!("up{lv}.b"))),
                2,
            );
            let cat = tape.concat_c(skips[lv], up);
            cur = self.fe_block(tape, vars, &format!("dec{lv}"), cat, self.config.dilations[lv]);
        }
        let aw = tape.conv3d(
            cur,
            self.var(vars, "head_aw.w"),
            Some(self.var(vars, "head_aw.b")),
            [1; 3],
            [1; 3],
            [0; 3],
        );
        let aw = tape.sigmoid(aw);
        let bg = tape.conv3d(
            cur,
            self.var(vars, "head_bg.w"),
            Some(self.var(vars, "head_bg.b")),
            [1; 3],
            [1; 3],
            [0; 3],
        );
        let bg = tape.sigmoid(bg);
        (aw, bg)
    }

    /// Evaluation-mode forward pass over one patch.
    ///
    /// The patch must match the configured patch shape and hold intensities
    /// in `[0, 1]`. Output maps share the input's spatial shape and lie in
    /// `[0, 1]` by construction.
    pub fn forward(&self, patch: &Array3<T>) -> Result<ConfidenceMaps<T>> {
        let d = patch.dim();
        let got = [d.0, d.1, d.2];
        if got != self.config.patch_shape {
            return Err(NvError::Contract(format!(
                "patch shape {got:?} != configured {:?}",
                self.config.patch_shape
            )));
        }
        if patch.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(NvError::Contract(
                "patch intensities must lie in [0, 1] (window the volume first)".into(),
            ));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.leaf(
            patch
                .to_owned()
                .into_shape_with_order(IxDyn(&[1, got[0], got[1], got[2]]))
                .unwrap(),
            false,
        );
        let (aw, bg) = self.forward_on(&mut tape, x, &vars);
        let to3 = |v: Var, tape: &Tape<T>| -> Array3<T> {
            tape.data(v)
                .to_owned()
                .into_shape_with_order(IxDyn(&[got[0], got[1], got[2]]))
                .unwrap()
                .into_dimensionality::<Ix3>()
                .unwrap()
        };
        ConfidenceMaps::new(to3(aw, &tape), to3(bg, &tape))
    }
}
