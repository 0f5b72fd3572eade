//! Generator, reconstructor, segmentor and discriminator definitions.
//!
//! Each network is a declarative [`NetworkSpec`] plus a parameter list
//! ([`NetworkState`]). Channel widths default to the reference tables and
//! scale with [`ArchConfig::width`].

use std::fmt;

use phs_tensor::{
    concat_channels, conv2d, instance_norm, max_pool2, truncated_normal, upsample_nn, NamedTensor, Padding, Tensor,
};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const IN_EPSILON: f64 = 1e-5;
pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Residual,
    /// Nearest-neighbour upsampling; `stride` holds the factor.
    Upsample,
    /// U-Net encoder level: conv block, skip saved, then 2×2 max pool.
    UnetDown,
    UnetBottleneck,
    /// U-Net decoder level: upsample, conv to `out_channels`, concatenate
    /// the matching skip, conv block.
    UnetUp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Sigmoid,
    None,
}

impl Activation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(LEAKY_SLOPE),
            Activation::Sigmoid => x.sigmoid(),
            Activation::None => x.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub filter_size: usize,
    pub stride: usize,
    pub out_channels: usize,
    pub normalized: bool,
    pub activation: Activation,
}

impl LayerSpec {
    fn conv(k: usize, stride: usize, out: usize, normalized: bool, activation: Activation) -> Self {
        Self { kind: LayerKind::Conv, filter_size: k, stride, out_channels: out, normalized, activation }
    }

    fn residual(channels: usize) -> Self {
        Self {
            kind: LayerKind::Residual,
            filter_size: 3,
            stride: 1,
            out_channels: channels,
            normalized: true,
            activation: Activation::LeakyRelu,
        }
    }

    fn upsample(factor: usize, channels: usize) -> Self {
        Self {
            kind: LayerKind::Upsample,
            filter_size: 0,
            stride: factor,
            out_channels: channels,
            normalized: false,
            activation: Activation::None,
        }
    }

    fn unet(kind: LayerKind, out: usize) -> Self {
        Self { kind, filter_size: 3, stride: 1, out_channels: out, normalized: true, activation: Activation::LeakyRelu }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NetworkRole {
    Generator,
    Reconstructor,
    Segmentor,
    Discriminator,
}

/// Width knobs. `width` is the first-layer channel count (32 in the
/// reference tables); every other layer scales proportionally.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub width: usize,
    pub residual_blocks: usize,
    pub unet_depth: usize,
    /// Output channels of the reconstructor (1; the table lists 2).
    pub reconstructor_out: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { width: 32, residual_blocks: 6, unet_depth: 4, reconstructor_out: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub role: NetworkRole,
    pub input_channels: usize,
    pub resolution: (usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Hash of the architecture (layers and input channels), ignoring the
    /// network's name and resolution.
    pub fn architecture_hash(&self) -> String {
        let body = serde_json::to_vec(&(&self.role, self.input_channels, &self.layers)).expect("spec serializes");
        hex::encode(Sha256::digest(&body))
    }

    pub fn with_name(mut self, name: &str) -> Self {
        self.name = name.to_string();
        self
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(self.input_channels)
    }

    /// Parameter shapes in declaration order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut ch = self.input_channels;
        let mut skips = Vec::new();
        let conv = |out: &mut Vec<(String, Vec<usize>)>, p: &str, cin: usize, cout: usize, k: usize, norm: bool| {
            out.push((format!("{p}.weight"), vec![cout, cin, k, k]));
            if norm {
                out.push((format!("{p}.in_gain"), vec![cout]));
                out.push((format!("{p}.in_shift"), vec![cout]));
            } else {
                out.push((format!("{p}.bias"), vec![cout]));
            }
        };
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("l{i}");
            match l.kind {
                LayerKind::Conv => {
                    conv(&mut out, &p, ch, l.out_channels, l.filter_size, l.normalized);
                    ch = l.out_channels;
                }
                LayerKind::Residual => {
                    conv(&mut out, &format!("{p}.a"), ch, ch, l.filter_size, true);
                    conv(&mut out, &format!("{p}.b"), ch, ch, l.filter_size, true);
                }
                LayerKind::Upsample => {}
                LayerKind::UnetDown | LayerKind::UnetBottleneck => {
                    conv(&mut out, &format!("{p}.a"), ch, l.out_channels, 3, true);
                    conv(&mut out, &format!("{p}.b"), l.out_channels, l.out_channels, 3, true);
                    ch = l.out_channels;
                    if l.kind == LayerKind::UnetDown {
                        skips.push(ch);
                    }
                }
                LayerKind::UnetUp => {
                    let skip = skips.pop().expect("validated U-Net has matching skips");
                    conv(&mut out, &format!("{p}.up"), ch, l.out_channels, 3, true);
                    conv(&mut out, &format!("{p}.a"), l.out_channels + skip, l.out_channels, 3, true);
                    conv(&mut out, &format!("{p}.b"), l.out_channels, l.out_channels, 3, true);
                    ch = l.out_channels;
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Input channel count seen by each U-Net decoder level's conv block:
    /// up-sampled channels plus the matching encoder skip.
    pub fn unet_decoder_inputs(&self) -> Vec<usize> {
        let mut skips = Vec::new();
        let mut out = Vec::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::UnetDown => skips.push(l.out_channels),
                LayerKind::UnetUp => out.push(l.out_channels + skips.pop().unwrap_or(0)),
                _ => {}
            }
        }
        out
    }
}

fn check_divisible(what: &str, (h, w): (usize, usize), by: usize) -> Result<()> {
    if h == 0 || w == 0 || h % by != 0 || w % by != 0 {
        return Err(Error::Config(format!("{what} needs a resolution divisible by {by}, got {h}x{w}")));
    }
    Ok(())
}

fn encoder_decoder_trunk(arch: &ArchConfig, out_channels: usize) -> Vec<LayerSpec> {
    let c = arch.width;
    let mut layers = vec![
        LayerSpec::conv(7, 1, c, true, Activation::Relu),
        LayerSpec::conv(3, 2, 2 * c, true, Activation::Relu),
        LayerSpec::conv(3, 2, 4 * c, true, Activation::Relu),
    ];
    layers.extend((0..arch.residual_blocks).map(|_| LayerSpec::residual(4 * c)));
    layers.extend([
        LayerSpec::upsample(2, 4 * c),
        LayerSpec::conv(3, 1, 2 * c, true, Activation::Relu),
        LayerSpec::upsample(2, 2 * c),
        LayerSpec::conv(3, 1, c, true, Activation::Relu),
        LayerSpec::conv(3, 1, out_channels, false, Activation::Sigmoid),
    ]);
    layers
}

/// Pathological → pseudo-healthy image network.
pub fn generator_spec(resolution: (usize, usize), arch: &ArchConfig) -> Result<NetworkSpec> {
    check_divisible("generator", resolution, 4)?;
    Ok(NetworkSpec {
        name: "G".into(),
        role: NetworkRole::Generator,
        input_channels: 1,
        resolution,
        layers: encoder_decoder_trunk(arch, 1),
    })
}

/// Takes `[image, mask]` stacked on the channel axis.
pub fn reconstructor_spec(resolution: (usize, usize), arch: &ArchConfig) -> Result<NetworkSpec> {
    check_divisible("reconstructor", resolution, 4)?;
    Ok(NetworkSpec {
        name: "R".into(),
        role: NetworkRole::Reconstructor,
        input_channels: 2,
        resolution,
        layers: encoder_decoder_trunk(arch, arch.reconstructor_out),
    })
}

/// Residual U-Net with leaky-ReLU activations and a sigmoid mask output.
pub fn segmentor_spec(resolution: (usize, usize), arch: &ArchConfig) -> Result<NetworkSpec> {
    let depth = arch.unet_depth;
    if depth == 0 {
        return Err(Error::Config("U-Net depth must be at least 1".into()));
    }
    check_divisible("segmentor", resolution, 1 << depth)?;
    let c = arch.width;
    let mut layers: Vec<LayerSpec> = (0..depth).map(|l| LayerSpec::unet(LayerKind::UnetDown, c << l)).collect();
    layers.push(LayerSpec::unet(LayerKind::UnetBottleneck, c << depth));
    layers.extend((0..depth).rev().map(|l| LayerSpec::unet(LayerKind::UnetUp, c << l)));
    layers.push(LayerSpec::conv(1, 1, 1, false, Activation::Sigmoid));
    Ok(NetworkSpec { name: "S".into(), role: NetworkRole::Segmentor, input_channels: 1, resolution, layers })
}

/// PatchGAN discriminator producing a `H/16 × W/16` grid of scores.
pub fn discriminator_spec(input_channels: usize, resolution: (usize, usize), arch: &ArchConfig) -> Result<NetworkSpec> {
    check_divisible("discriminator", resolution, 16)?;
    let c = arch.width;
    let layers = vec![
        LayerSpec::conv(4, 2, c, true, Activation::LeakyRelu),
        LayerSpec::conv(4, 2, 4 * c, true, Activation::LeakyRelu),
        LayerSpec::conv(4, 2, 8 * c, true, Activation::LeakyRelu),
        LayerSpec::conv(4, 2, 16 * c, true, Activation::LeakyRelu),
        LayerSpec::conv(4, 1, 1, false, Activation::Sigmoid),
    ];
    Ok(NetworkSpec { name: "D".into(), role: NetworkRole::Discriminator, input_channels, resolution, layers })
}

/// A network's spec together with its parameters.
#[derive(Clone)]
pub struct NetworkState {
    pub spec: NetworkSpec,
    names: Vec<String>,
    params: Vec<Tensor>,
}

impl fmt::Debug for NetworkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NetworkState")
            .field("name", &self.spec.name)
            .field("parameters", &self.parameter_count())
            .finish()
    }
}

/// Intermediate activation shape after one layer, as `(H, W, C)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeRow {
    pub layer: LayerKind,
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

fn hwc(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[2], s[3], s[1])
}

struct ParamCursor<'a> {
    params: &'a [Tensor],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    fn next(&mut self) -> &'a Tensor {
        let t = &self.params[self.pos];
        self.pos += 1;
        t
    }

    /// conv (+ IN) without activation.
    fn conv(&mut self, x: &Tensor, stride: usize, normalized: bool) -> Result<Tensor> {
        let w = self.next();
        if normalized {
            let y = conv2d(x, w, None, stride, Padding::Same)?;
            let (g, s) = (self.next(), self.next());
            Ok(instance_norm(&y, g, s, IN_EPSILON)?)
        } else {
            let b = self.next();
            Ok(conv2d(x, w, Some(b), stride, Padding::Same)?)
        }
    }

    /// Two convs with an additive skip around the second one.
    fn unet_block(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv(x, 1, true)?.leaky_relu(LEAKY_SLOPE);
        let y = self.conv(&h, 1, true)?;
        Ok(y.add(&h)?.leaky_relu(LEAKY_SLOPE))
    }
}

impl NetworkState {
    /// Fresh parameters: truncated-normal conv weights (std 0.02), zero
    /// biases, unit IN gain and zero IN shift.
    pub fn init<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Self {
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in spec.parameter_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".weight") {
                truncated_normal(rng, n, INIT_STD)
            } else if name.ends_with(".in_gain") {
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            params.push(Tensor::param(&shape, data).expect("shape from spec"));
            names.push(name);
        }
        Self { spec, names, params }
    }

    /// Rebuilds a state from named tensors, checking names and shapes
    /// against the spec.
    pub fn from_named(spec: NetworkSpec, tensors: &[NamedTensor]) -> Result<Self> {
        let shapes = spec.parameter_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::Contract(format!(
                "{}: spec has {} parameters, file has {}",
                spec.name,
                shapes.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(shapes.len());
        let mut names = Vec::with_capacity(shapes.len());
        for ((name, shape), t) in shapes.into_iter().zip(tensors) {
            if t.name != name || t.shape != shape {
                return Err(Error::Contract(format!(
                    "{}: expected {name} {shape:?}, found {} {:?}",
                    spec.name, t.name, t.shape
                )));
            }
            params.push(Tensor::param(&shape, t.data.clone())?);
            names.push(name);
        }
        Ok(Self { spec, names, params })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.params)
            .map(|(n, p)| NamedTensor { name: n.clone(), shape: p.shape().to_vec(), data: p.to_vec() })
            .collect()
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Digest of all parameter values, for before/after comparisons.
    pub fn parameter_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            for v in p.data().iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn zero_grad(&self) {
        phs_tensor::zero_grads(&self.params);
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.run(input, None)
    }

    /// Forward pass that also records each layer's input/output shape.
    pub fn forward_traced(&self, input: &Tensor) -> Result<(Tensor, Vec<ShapeRow>)> {
        let mut rows = Vec::new();
        let out = self.run(input, Some(&mut rows))?;
        Ok((out, rows))
    }

    fn run(&self, input: &Tensor, mut trace: Option<&mut Vec<ShapeRow>>) -> Result<Tensor> {
        let s = input.shape();
        if s.len() != 4 || s[1] != self.spec.input_channels {
            return Err(Error::Contract(format!(
                "{} expects [B, {}, H, W] input, got {s:?}",
                self.spec.name, self.spec.input_channels
            )));
        }
        let mut cur = ParamCursor { params: &self.params, pos: 0 };
        let mut x = input.clone();
        let mut skips: Vec<Tensor> = Vec::new();
        for layer in &self.spec.layers {
            let before = hwc(&x);
            x = match layer.kind {
                LayerKind::Conv => {
                    let y = cur.conv(&x, layer.stride, layer.normalized)?;
                    layer.activation.apply(&y)
                }
                LayerKind::Residual => {
                    let h = cur.conv(&x, 1, true)?.leaky_relu(LEAKY_SLOPE);
                    let y = cur.conv(&h, 1, true)?;
                    y.add(&x)?.leaky_relu(LEAKY_SLOPE)
                }
                LayerKind::Upsample => upsample_nn(&x, layer.stride)?,
                LayerKind::UnetDown => {
                    let y = cur.unet_block(&x)?;
                    let pooled = max_pool2(&y)?;
                    skips.push(y);
                    pooled
                }
                LayerKind::UnetBottleneck => cur.unet_block(&x)?,
                LayerKind::UnetUp => {
                    let skip = skips
                        .pop()
                        .ok_or_else(|| Error::Contract(format!("{}: decoder level without a skip", self.spec.name)))?;
                    let up = upsample_nn(&x, 2)?;
                    let up = cur.conv(&up, 1, true)?.leaky_relu(LEAKY_SLOPE);
                    let joined = concat_channels(&[&up, &skip])?;
                    cur.unet_block(&joined)?
                }
            };
            if let Some(rows) = trace.as_deref_mut() {
                rows.push(ShapeRow { layer: layer.kind, input: before, output: hwc(&x) });
            }
        }
        debug_assert_eq!(cur.pos, self.params.len());
        Ok(x)
    }
}

/// Builds and initializes the generator.
pub fn build_generator<R: Rng + ?Sized>(
    resolution: (usize, usize),
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<NetworkState> {
    Ok(NetworkState::init(generator_spec(resolution, arch)?, rng))
}

pub fn build_reconstructor<R: Rng + ?Sized>(
    resolution: (usize, usize),
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<NetworkState> {
    Ok(NetworkState::init(reconstructor_spec(resolution, arch)?, rng))
}

pub fn build_segmentor<R: Rng + ?Sized>(
    resolution: (usize, usize),
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<NetworkState> {
    Ok(NetworkState::init(segmentor_spec(resolution, arch)?, rng))
}

pub fn build_discriminator<R: Rng + ?Sized>(
    input_channels: usize,
    resolution: (usize, usize),
    arch: &ArchConfig,
    rng: &mut R,
) -> Result<NetworkState> {
    Ok(NetworkState::init(discriminator_spec(input_channels, resolution, arch)?, rng))
}
