//! The fusion network: pre-fusion blend, tied-weight encoder with a residual
//! dense block, additive fusion layer and a feedback decoder.
//!
//! Layer table:
//!
//! | layer | kernel | in | out | activation |
//! |-------|--------|----|-----|------------|
//! | encoder.C1 | 3 | 1 | 16 | relu |
//! | encoder.RDB.conv1 | 3 | 16 | 16 | relu |
//! | encoder.RDB.conv2 | 3 | 32 | 16 | relu |
//! | encoder.RDB.conv3 | 3 | 48 | 16 | relu |
//! | encoder.RDB.conv4 | 1 | 64 | 64 | - |
//! | decoder.C2 | 3 | 64 | 64 | relu |
//! | decoder.C3 | 3 | 64 | 32 | relu |
//! | decoder.C4 | 3 | 32 | 16 | relu |
//! | decoder.C5 | 3 | 16 | 1 | - |
//! | decoder.C6 | 3 | 1 | 64 | - |
//!
//! The 16-channel tensors feeding the local and global residual skips are
//! tiled four times along the channel axis to match the 64-channel outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{ImageGray, Provenance};
use crate::tensor::{Real, Tensor};

/// Label attached to the output of every fusion-layer invocation.
pub const FUSION_LABEL: &str = "fusion";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    C1,
    Rdb1,
    Rdb2,
    Rdb3,
    Rdb4,
    C2,
    C3,
    C4,
    C5,
    C6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub relu: bool,
}

impl LayerSpec {
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.cout, self.cin, self.kernel, self.kernel]
    }

    pub fn bias_shape(&self) -> [usize; 1] {
        [self.cout]
    }
}

impl Layer {
    pub const ALL: [Layer; 10] = [
        Layer::C1,
        Layer::Rdb1,
        Layer::Rdb2,
        Layer::Rdb3,
        Layer::Rdb4,
        Layer::C2,
        Layer::C3,
        Layer::C4,
        Layer::C5,
        Layer::C6,
    ];

    pub const RDB: [Layer; 4] = [Layer::Rdb1, Layer::Rdb2, Layer::Rdb3, Layer::Rdb4];

    pub fn spec(self) -> LayerSpec {
        let (name, kernel, cin, cout, relu) = match self {
            Layer::C1 => ("encoder.C1", 3, 1, 16, true),
            Layer::Rdb1 => ("encoder.RDB.conv1", 3, 16, 16, true),
            Layer::Rdb2 => ("encoder.RDB.conv2", 3, 32, 16, true),
            Layer::Rdb3 => ("encoder.RDB.conv3", 3, 48, 16, true),
            Layer::Rdb4 => ("encoder.RDB.conv4", 1, 64, 64, false),
            Layer::C2 => ("decoder.C2", 3, 64, 64, true),
            Layer::C3 => ("decoder.C3", 3, 64, 32, true),
            Layer::C4 => ("decoder.C4", 3, 32, 16, true),
            Layer::C5 => ("decoder.C5", 3, 16, 1, false),
            Layer::C6 => ("decoder.C6", 3, 1, 64, false),
        };
        LayerSpec {
            name,
            kernel,
            cin,
            cout,
            relu,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Names of the 20 parameter tensors, in canonical order.
pub fn tensor_names() -> Vec<String> {
    Layer::ALL
        .iter()
        .flat_map(|l| {
            let name = l.spec().name;
            [format!("{name}.weight"), format!("{name}.bias")]
        })
        .collect()
}

/// Expected shape of each parameter tensor, in canonical order.
pub fn tensor_shapes() -> Vec<Vec<usize>> {
    Layer::ALL
        .iter()
        .flat_map(|l| {
            let s = l.spec();
            [s.weight_shape().to_vec(), s.bias_shape().to_vec()]
        })
        .collect()
}

/// All convolution parameters. There is exactly one copy; both encoder
/// branches read it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    weights: Vec<Tensor<T>>,
    biases: Vec<Tensor<T>>,
}

impl<T: Real> ModelParams<T> {
    /// Build from the 20 tensors in canonical order (weight, bias per
    /// layer), validating every shape.
    pub fn from_tensors(tensors: Vec<Tensor<T>>) -> Result<Self> {
        if tensors.len() != 2 * Layer::ALL.len() {
            return Err(Error::Param(format!(
                "expected {} parameter tensors, got {}",
                2 * Layer::ALL.len(),
                tensors.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut it = tensors.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            weights.push(w);
            biases.push(b);
        }
        let p = ModelParams { weights, biases };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros() -> Self {
        ModelParams {
            weights: Layer::ALL
                .iter()
                .map(|l| Tensor::zeros(l.spec().weight_shape().to_vec()))
                .collect(),
            biases: Layer::ALL
                .iter()
                .map(|l| Tensor::zeros(l.spec().bias_shape().to_vec()))
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in Layer::ALL {
            let s = l.spec();
            let (w, b) = self.layer(l);
            if w.shape() != s.weight_shape() || b.shape() != s.bias_shape() {
                return Err(Error::Param(format!(
                    "{}: expected weight {:?} and bias {:?} ({}x{}, {}->{}), found {:?} and {:?}",
                    s.name,
                    s.weight_shape(),
                    s.bias_shape(),
                    s.kernel,
                    s.kernel,
                    s.cin,
                    s.cout,
                    w.shape(),
                    b.shape()
                )));
            }
            if !w.all_finite() || !b.all_finite() {
                return Err(Error::Param(format!("{}: non-finite parameter", s.name)));
            }
        }
        Ok(())
    }

    pub fn layer(&self, l: Layer) -> (&Tensor<T>, &Tensor<T>) {
        (&self.weights[l.index()], &self.biases[l.index()])
    }

    pub fn layer_mut(&mut self, l: Layer) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.weights[l.index()], &mut self.biases[l.index()])
    }

    /// Zero a layer's weights and bias.
    pub fn zero_layer(&mut self, l: Layer) {
        let (w, b) = self.layer_mut(l);
        w.data_mut().fill(T::zero());
        b.data_mut().fill(T::zero());
    }

    /// All 20 tensors in canonical order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            weights: self.weights.iter().map(Tensor::cast).collect(),
            biases: self.biases.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Fan-in scaled normal weights and zero biases. Layers followed by a relu
/// use the He variance `2 / fan_in`; the others use `1 / fan_in`.
pub fn init_params<T: Real>(seed: u64) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::zeros();
    for l in Layer::ALL {
        let s = l.spec();
        let fan_in = (s.cin * s.kernel * s.kernel) as f64;
        let gain = if s.relu { 2.0 } else { 1.0 };
        let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
        let (w, _) = params.layer_mut(l);
        for v in w.data_mut() {
            *v = T::of(normal.sample(&mut rng));
        }
    }
    params
}

/// Parameter tensors recorded as leaves on a tape.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn register<T: Real>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Self {
        ParamVars {
            vars: params
                .tensors()
                .into_iter()
                .map(|t| tape.leaf(t.clone()))
                .collect(),
        }
    }

    /// Wrap 20 already-recorded leaves given in canonical order.
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.len() != 2 * Layer::ALL.len() {
            return Err(Error::Param(format!(
                "expected {} parameter nodes, got {}",
                2 * Layer::ALL.len(),
                vars.len()
            )));
        }
        Ok(ParamVars {
            vars: vars.to_vec(),
        })
    }

    pub fn layer(&self, l: Layer) -> (Var, Var) {
        (self.vars[2 * l.index()], self.vars[2 * l.index() + 1])
    }

    /// The 20 nodes in canonical order.
    pub fn all(&self) -> &[Var] {
        &self.vars
    }
}

fn conv_layer<T: Real>(tape: &mut Tape<T>, x: Var, p: &ParamVars, l: Layer) -> Result<Var> {
    let (w, b) = p.layer(l);
    let y = tape.conv2d(x, w, b)?;
    Ok(if l.spec().relu { tape.relu(y) } else { y })
}

fn expect_channels<T: Real>(tape: &Tape<T>, x: Var, channels: usize, what: &str) -> Result<()> {
    let (_, c, _, _) = tape.value(x).dims4()?;
    if c != channels {
        return Err(Error::shape(format!(
            "{what}: expected {channels} input channels, got {c}"
        )));
    }
    Ok(())
}

/// Residual dense block: three densely connected 3x3 convs, a 1x1 fusion
/// conv over the 64-channel concatenation, and a local skip from the tiled
/// input.
pub fn rdb_forward<T: Real>(tape: &mut Tape<T>, f0: Var, p: &ParamVars) -> Result<Var> {
    expect_channels(tape, f0, 16, "rdb_forward")?;
    let d1 = conv_layer(tape, f0, p, Layer::Rdb1)?;
    let c1 = tape.concat_channels(&[f0, d1])?;
    let d2 = conv_layer(tape, c1, p, Layer::Rdb2)?;
    let c2 = tape.concat_channels(&[f0, d1, d2])?;
    let d3 = conv_layer(tape, c2, p, Layer::Rdb3)?;
    let c3 = tape.concat_channels(&[f0, d1, d2, d3])?;
    let fused = conv_layer(tape, c3, p, Layer::Rdb4)?;
    let skip = tape.tile_channels(f0, 4)?;
    tape.add(fused, skip)
}

/// One encoder branch. Both branches call this with the same parameters.
pub fn encode<T: Real>(tape: &mut Tape<T>, img: Var, p: &ParamVars) -> Result<Var> {
    expect_channels(tape, img, 1, "encode")?;
    let rough = conv_layer(tape, img, p, Layer::C1)?;
    let block = rdb_forward(tape, rough, p)?;
    let skip = tape.tile_channels(rough, 4)?;
    tape.add(block, skip)
}

/// Addition fusion of two feature maps.
pub fn fuse_add<T: Real>(tape: &mut Tape<T>, phi1: Var, phi2: Var) -> Result<Var> {
    let y = tape.add(phi1, phi2)?;
    tape.label(y, FUSION_LABEL);
    Ok(y)
}

/// Number of decoder passes; iteration `t > 1` feeds `y + C6(previous
/// output)` back into the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedbackConfig {
    n_iterations: usize,
}

impl FeedbackConfig {
    pub fn new(n_iterations: usize) -> Result<Self> {
        if n_iterations == 0 {
            return Err(Error::contract("feedback needs at least one iteration"));
        }
        Ok(FeedbackConfig { n_iterations })
    }

    pub fn n_iterations(&self) -> usize {
        self.n_iterations
    }
}

impl Default for FeedbackConfig {
    fn default() -> Self {
        FeedbackConfig { n_iterations: 4 }
    }
}

fn decode_pass<T: Real>(tape: &mut Tape<T>, x: Var, p: &ParamVars) -> Result<Var> {
    let h = conv_layer(tape, x, p, Layer::C2)?;
    let h = conv_layer(tape, h, p, Layer::C3)?;
    let h = conv_layer(tape, h, p, Layer::C4)?;
    conv_layer(tape, h, p, Layer::C5)
}

/// Feedback decoder. Returns the unclamped single-channel output.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    y: Var,
    p: &ParamVars,
    fb: FeedbackConfig,
) -> Result<Var> {
    expect_channels(tape, y, 64, "decode")?;
    let mut out = decode_pass(tape, y, p)?;
    for _ in 1..fb.n_iterations {
        let feedback = conv_layer(tape, out, p, Layer::C6)?;
        let corrected = tape.add(y, feedback)?;
        out = decode_pass(tape, corrected, p)?;
    }
    Ok(out)
}

/// Pre-fusion blend weights; the second weight is always `1 - a1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreFusionConfig {
    a1: f64,
}

impl PreFusionConfig {
    pub fn new(a1: f64) -> Result<Self> {
        if !(0.5..=1.0).contains(&a1) {
            return Err(Error::contract(format!(
                "pre-fusion weight a1 must lie in [0.5, 1], got {a1}"
            )));
        }
        Ok(PreFusionConfig { a1 })
    }

    pub fn a1(&self) -> f64 {
        self.a1
    }

    pub fn a2(&self) -> f64 {
        1.0 - self.a1
    }
}

impl Default for PreFusionConfig {
    fn default() -> Self {
        PreFusionConfig { a1: 0.7 }
    }
}

/// `(a1 I_i + a2 I_v, a2 I_i + a1 I_v)`.
pub fn pre_fuse(
    ir: &ImageGray,
    vis: &ImageGray,
    cfg: PreFusionConfig,
) -> Result<(ImageGray, ImageGray)> {
    ir.same_size(vis)?;
    let (a1, a2) = (cfg.a1(), cfg.a2());
    let blend = |wi: f64, wv: f64| -> Vec<f64> {
        ir.pixels()
            .iter()
            .zip(vis.pixels())
            .map(|(&i, &v)| (wi * i + wv * v).min(1.0))
            .collect()
    };
    let (w, h) = ir.dims();
    Ok((
        ImageGray::new(w, h, blend(a1, a2), Provenance::PreFused)?,
        ImageGray::new(w, h, blend(a2, a1), Provenance::PreFused)?,
    ))
}

/// Inference-time settings.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FusionOptions {
    pub feedback: FeedbackConfig,
    /// Blend the raw pair before encoding (an ablation; off by default).
    pub pre_fusion: Option<PreFusionConfig>,
}

/// Fuse a registered pair: encode both images with the shared encoder, add
/// the feature maps, decode, and clamp to `[0, 1]`.
pub fn fuse_images<T: Real>(
    ir: &ImageGray,
    vis: &ImageGray,
    params: &ModelParams<T>,
    opts: &FusionOptions,
) -> Result<ImageGray> {
    params.validate()?;
    ir.same_size(vis)?;
    let (a, b) = match opts.pre_fusion {
        Some(cfg) => pre_fuse(ir, vis, cfg)?,
        None => (ir.clone(), vis.clone()),
    };
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let av = tape.leaf(a.to_tensor());
    let bv = tape.leaf(b.to_tensor());
    let fa = encode(&mut tape, av, &pv)?;
    let fb = encode(&mut tape, bv, &pv)?;
    let y = fuse_add(&mut tape, fa, fb)?;
    let out = decode(&mut tape, y, &pv, opts.feedback)?;
    ImageGray::from_tensor_clamped(tape.value(out), Provenance::Fused)
}
