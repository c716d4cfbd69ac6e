//! The dual-latent variational model: a strided convolutional encoder with
//! mean/log-variance heads for the content code `c` and the transformation
//! code `z`, and a fully-connected decoder from `[c; z]` back to pixels.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{ConvGeom, Graph, Var};
use crate::error::{ensure, Error, Result};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Rows processed per graph when running inference over large inputs.
const INFER_CHUNK: usize = 256;

/// Layer layout of encoder and decoder.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each stride-2 3×3 convolution.
    pub conv_channels: Vec<usize>,
    /// Hidden widths of the decoder; it has `decoder_hidden.len() + 1` layers.
    pub decoder_hidden: Vec<usize>,
    pub d_c: usize,
    pub d_z: usize,
}

impl ArchConfig {
    /// Standard layouts: three convolutions for 28×28 inputs, four for 64×64.
    pub fn for_input(height: usize, width: usize, channels: usize, d_c: usize, d_z: usize) -> Result<Self> {
        let conv_channels = match (height, width) {
            (28, 28) => vec![32, 64, 128],
            (64, 64) => vec![32, 64, 128, 256],
            _ => {
                return Err(Error::config(format!(
                    "unsupported input size {height}x{width}; expected 28x28 or 64x64"
                )))
            }
        };
        let arch = ArchConfig {
            height,
            width,
            channels,
            conv_channels,
            decoder_hidden: vec![512; 4],
            d_c,
            d_z,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.height >= 1 && self.width >= 1 && self.channels >= 1,
            Error::config("image dimensions must be positive")
        );
        ensure!(!self.conv_channels.is_empty(), Error::config("encoder needs a convolution"));
        ensure!(
            self.conv_channels.iter().chain(&self.decoder_hidden).all(|&c| c > 0),
            Error::config("layer widths must be positive")
        );
        ensure!(self.d_c > 0 && self.d_z > 0, Error::config("latent dims must be positive"));
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Spatial size after the convolution stack.
    pub fn feature_hw(&self) -> (usize, usize) {
        self.conv_channels.iter().fold((self.height, self.width), |(h, w), _| {
            (
                ConvGeom::out_hw(KERNEL, STRIDE, PAD, h),
                ConvGeom::out_hw(KERNEL, STRIDE, PAD, w),
            )
        })
    }

    pub fn feature_len(&self) -> usize {
        let (h, w) = self.feature_hw();
        h * w * self.conv_channels.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    /// `[in × out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv<T> {
    /// `[k × k × in × out]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Encoder (ψ) and decoder (θ) weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub arch: ArchConfig,
    pub convs: Vec<Conv<T>>,
    pub c_mean: Linear<T>,
    pub c_log_var: Linear<T>,
    pub z_mean: Linear<T>,
    pub z_log_var: Linear<T>,
    pub decoder: Vec<Linear<T>>,
}

fn uniform<T: Real>(rng: &mut rng::Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data)
}

fn init_linear<T: Real>(rng: &mut rng::Rng, fan_in: usize, fan_out: usize, zero_bias: bool) -> Linear<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let weight = uniform(rng, vec![fan_in, fan_out], bound);
    let bias = if zero_bias {
        Tensor::zeros(vec![fan_out])
    } else {
        uniform(rng, vec![fan_out], bound)
    };
    Linear { weight, bias }
}

/// Deterministic initialisation: uniform(±1/√fan_in) weights and biases,
/// zero biases on output layers.
pub fn init_params<T: Real>(arch: &ArchConfig, seed: u64) -> Result<ModelParams<T>> {
    arch.validate()?;
    let mut rng = rng::rng(rng::derive(seed, stream::INIT, 0));
    let mut convs = Vec::with_capacity(arch.conv_channels.len());
    let mut in_c = arch.channels;
    for &out_c in &arch.conv_channels {
        let fan_in = KERNEL * KERNEL * in_c;
        let bound = 1.0 / (fan_in as f64).sqrt();
        convs.push(Conv {
            weight: uniform(&mut rng, vec![KERNEL, KERNEL, in_c, out_c], bound),
            bias: uniform(&mut rng, vec![out_c], bound),
        });
        in_c = out_c;
    }
    let feat = arch.feature_len();
    let c_mean = init_linear(&mut rng, feat, arch.d_c, true);
    let c_log_var = init_linear(&mut rng, feat, arch.d_c, true);
    let z_mean = init_linear(&mut rng, feat, arch.d_z, true);
    let z_log_var = init_linear(&mut rng, feat, arch.d_z, true);

    let mut decoder = Vec::new();
    let mut width = arch.d_c + arch.d_z;
    for &h in &arch.decoder_hidden {
        decoder.push(init_linear(&mut rng, width, h, false));
        width = h;
    }
    decoder.push(init_linear(&mut rng, width, arch.pixels(), true));

    Ok(ModelParams {
        arch: arch.clone(),
        convs,
        c_mean,
        c_log_var,
        z_mean,
        z_log_var,
        decoder,
    })
}

impl<T: Real> ModelParams<T> {
    /// Parameter tensors in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("encoder.conv{i}.weight"), &c.weight));
            out.push((format!("encoder.conv{i}.bias"), &c.bias));
        }
        for (name, l) in [
            ("c_mean", &self.c_mean),
            ("c_log_var", &self.c_log_var),
            ("z_mean", &self.z_mean),
            ("z_log_var", &self.z_log_var),
        ] {
            out.push((format!("encoder.{name}.weight"), &l.weight));
            out.push((format!("encoder.{name}.bias"), &l.bias));
        }
        for (i, l) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.fc{i}.weight"), &l.weight));
            out.push((format!("decoder.fc{i}.bias"), &l.bias));
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for c in self.convs.iter_mut() {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        for l in [
            &mut self.c_mean,
            &mut self.c_log_var,
            &mut self.z_mean,
            &mut self.z_log_var,
        ] {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        for l in self.decoder.iter_mut() {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        ModelParams {
            arch: self.arch.clone(),
            convs: self
                .convs
                .iter()
                .map(|c| Conv {
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
            c_mean: lin(&self.c_mean),
            c_log_var: lin(&self.c_log_var),
            z_mean: lin(&self.z_mean),
            z_log_var: lin(&self.z_log_var),
            decoder: self.decoder.iter().map(lin).collect(),
        }
    }

    /// Rebuild from named tensors, checking every shape against `arch`.
    pub fn from_named(arch: &ArchConfig, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let mut params = init_params::<T>(arch, 0)?;
        let names: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape.clone()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(params.tensors_mut()) {
            let t = lookup(&name).ok_or_else(|| Error::Consistency(format!("missing tensor {name}")))?;
            ensure!(
                t.shape == shape,
                Error::shape(format!("{name}: expected {shape:?}, found {:?}", t.shape))
            );
            *slot = t;
        }
        Ok(params)
    }

    /// Insert parameters into a graph as leaves.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut all = Vec::new();
        let mut pair = |w: &Tensor<T>, b: &Tensor<T>, all: &mut Vec<Var>| {
            let wv = leaf(w);
            let bv = leaf(b);
            all.push(wv);
            all.push(bv);
            (wv, bv)
        };
        let convs = self.convs.iter().map(|c| pair(&c.weight, &c.bias, &mut all)).collect();
        let heads = [
            pair(&self.c_mean.weight, &self.c_mean.bias, &mut all),
            pair(&self.c_log_var.weight, &self.c_log_var.bias, &mut all),
            pair(&self.z_mean.weight, &self.z_mean.bias, &mut all),
            pair(&self.z_log_var.weight, &self.z_log_var.bias, &mut all),
        ];
        let decoder = self.decoder.iter().map(|l| pair(&l.weight, &l.bias, &mut all)).collect();
        Bound {
            convs,
            heads,
            decoder,
            all,
        }
    }
}

/// Graph handles of bound parameters; `all` follows [`ModelParams::named`].
pub struct Bound {
    convs: Vec<(Var, Var)>,
    heads: [(Var, Var); 4],
    decoder: Vec<(Var, Var)>,
    pub all: Vec<Var>,
}

/// Encoder outputs on a graph.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    pub c_mean: Var,
    pub c_log_var: Var,
    pub z_mean: Var,
    pub z_log_var: Var,
}

/// Differentiable encoder. `x` is `[B × H × W × C]`.
pub fn encode_graph<T: Real>(g: &mut Graph<T>, p: &Bound, x: Var) -> EncodedVars {
    let mut h = x;
    for &(w, b) in &p.convs {
        let y = g.conv2d(h, w, b, KERNEL, STRIDE, PAD);
        h = g.relu(y);
    }
    let rows = g.value(h).rows();
    let flat_len = g.value(h).row_len();
    let flat = g.reshape(h, vec![rows, flat_len]);
    let lo = T::from_f64(LOG_VAR_MIN);
    let hi = T::from_f64(LOG_VAR_MAX);
    let [cm, clv, zm, zlv] = p.heads;
    let c_mean = g.linear(flat, cm.0, cm.1);
    let c_raw = g.linear(flat, clv.0, clv.1);
    let c_log_var = g.clamp(c_raw, lo, hi);
    let z_mean = g.linear(flat, zm.0, zm.1);
    let z_raw = g.linear(flat, zlv.0, zlv.1);
    let z_log_var = g.clamp(z_raw, lo, hi);
    EncodedVars {
        c_mean,
        c_log_var,
        z_mean,
        z_log_var,
    }
}

/// Differentiable decoder from `[B × d_c]` and `[B × d_z]` codes to
/// `[B × H × W × C]` intensities in `[0, 1]`.
pub fn decode_graph<T: Real>(g: &mut Graph<T>, p: &Bound, arch: &ArchConfig, c: Var, z: Var) -> Var {
    let mut h = g.concat_cols(c, z);
    let last = p.decoder.len() - 1;
    for (i, &(w, b)) in p.decoder.iter().enumerate() {
        let y = g.linear(h, w, b);
        h = if i == last { g.sigmoid(y) } else { g.relu(y) };
    }
    let rows = g.value(h).rows();
    g.reshape(h, vec![rows, arch.height, arch.width, arch.channels])
}

/// Per-sample diagonal Gaussian posterior.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianLatent<T> {
    pub mean: Tensor<T>,
    pub log_var: Tensor<T>,
}

impl<T: Real> GaussianLatent<T> {
    pub fn new(mean: Tensor<T>, log_var: Tensor<T>) -> Result<Self> {
        ensure!(
            mean.shape.len() == 2 && mean.shape == log_var.shape,
            Error::shape(format!(
                "latent mean {:?} and log-variance {:?} must be equal 2-D shapes",
                mean.shape, log_var.shape
            ))
        );
        Ok(GaussianLatent { mean, log_var })
    }

    pub fn rows(&self) -> usize {
        self.mean.rows()
    }

    pub fn dim(&self) -> usize {
        self.mean.row_len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeKind {
    Content,
    Transformation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    pub values: Tensor<T>,
    pub kind: CodeKind,
}

impl<T: Real> LatentCode<T> {
    pub fn new(values: Tensor<T>, kind: CodeKind) -> Self {
        LatentCode { values, kind }
    }

    pub fn content(values: Tensor<T>) -> Self {
        Self::new(values, CodeKind::Content)
    }

    pub fn transformation(values: Tensor<T>) -> Self {
        Self::new(values, CodeKind::Transformation)
    }
}

fn check_images<T: Real>(arch: &ArchConfig, images: &Tensor<T>) -> Result<()> {
    let want = [arch.height, arch.width, arch.channels];
    ensure!(
        images.shape.len() == 4 && images.shape[1..] == want,
        Error::shape(format!(
            "images {:?} do not match model input [B, {}, {}, {}]",
            images.shape, arch.height, arch.width, arch.channels
        ))
    );
    Ok(())
}

fn concat_rows<T: Real>(parts: Vec<Tensor<T>>, row_shape: &[usize]) -> Tensor<T> {
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut shape = vec![rows];
    shape.extend_from_slice(row_shape);
    let data = parts.into_iter().flat_map(|p| p.data).collect();
    Tensor::new(shape, data)
}

/// Posterior parameters `(φ_c, φ_z)` for a batch of images.
pub fn encode<T: Real>(params: &ModelParams<T>, images: &Tensor<T>) -> Result<(GaussianLatent<T>, GaussianLatent<T>)> {
    check_images(&params.arch, images)?;
    let n = images.rows();
    let (mut cm, mut clv, mut zm, mut zlv) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(images.gather_rows(&idx));
        let e = encode_graph(&mut g, &bound, x);
        cm.push(g.value(e.c_mean).clone());
        clv.push(g.value(e.c_log_var).clone());
        zm.push(g.value(e.z_mean).clone());
        zlv.push(g.value(e.z_log_var).clone());
        start = end;
    }
    let (dc, dz) = (params.arch.d_c, params.arch.d_z);
    if n == 0 {
        let empty = |d: usize| Tensor::zeros(vec![0, d]);
        return Ok((
            GaussianLatent::new(empty(dc), empty(dc))?,
            GaussianLatent::new(empty(dz), empty(dz))?,
        ));
    }
    Ok((
        GaussianLatent::new(concat_rows(cm, &[dc]), concat_rows(clv, &[dc]))?,
        GaussianLatent::new(concat_rows(zm, &[dz]), concat_rows(zlv, &[dz]))?,
    ))
}

/// Reparameterised draw `mean + exp(log_var / 2) ⊙ ε`, `ε ~ N(0, I)` seeded.
pub fn sample_latent<T: Real>(dist: &GaussianLatent<T>, kind: CodeKind, seed: u64) -> LatentCode<T> {
    let mut rng = rng::rng(seed);
    let eps: Vec<T> = rng::normal_vec(&mut rng, dist.mean.len());
    let mut g = Graph::new();
    let m = g.constant(dist.mean.clone());
    let lv = g.constant(dist.log_var.clone());
    let s = g.reparam(m, lv, eps);
    LatentCode::new(g.value(s).clone(), kind)
}

/// Decode paired codes into images.
pub fn decode<T: Real>(params: &ModelParams<T>, c: &LatentCode<T>, z: &LatentCode<T>) -> Result<Tensor<T>> {
    let arch = &params.arch;
    ensure!(
        c.values.rows() == z.values.rows(),
        Error::shape(format!(
            "content rows {} differ from transformation rows {}",
            c.values.rows(),
            z.values.rows()
        ))
    );
    ensure!(
        c.values.shape == [c.values.rows(), arch.d_c] && z.values.shape == [z.values.rows(), arch.d_z],
        Error::shape(format!(
            "codes {:?}/{:?} do not match d_c={} d_z={}",
            c.values.shape, z.values.shape, arch.d_c, arch.d_z
        ))
    );
    let n = c.values.rows();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + INFER_CHUNK).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let cv = g.constant(c.values.gather_rows(&idx));
        let zv = g.constant(z.values.gather_rows(&idx));
        let out = decode_graph(&mut g, &bound, arch, cv, zv);
        parts.push(g.value(out).clone());
        start = end;
    }
    if n == 0 {
        return Ok(Tensor::zeros(vec![0, arch.height, arch.width, arch.channels]));
    }
    Ok(concat_rows(parts, &[arch.height, arch.width, arch.channels]))
}

/// Encode, take posterior means and decode again.
pub fn reconstruct<T: Real>(params: &ModelParams<T>, images: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, z) = encode(params, images)?;
    decode(params, &LatentCode::content(c.mean), &LatentCode::transformation(z.mean))
}
