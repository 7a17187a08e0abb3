//! Encoder–bridge–decoder U-Net assembled from the tensor primitives.
//!
//! Layer inventory for `depth = N`:
//!
//! * encoder stage `s = 1..=N`: two 3×3 same-padded convolutions with ReLU,
//!   optional dropout, then a 2×2 max-pool. The pre-pool map is the skip
//!   tensor for decoder stage `N − s + 1`.
//! * bridge: two 3×3 convolutions with ReLU, optional dropout.
//! * decoder stage `l = 1..=N`: 2×2 stride-2 transposed convolution + ReLU,
//!   depth concatenation `[skip, upsampled]`, two 3×3 convolutions with ReLU.
//! * a final 1×1 convolution to `num_classes` raw logits.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    concat_depth, concat_depth_backward, conv2d_backward, conv2d_forward, dropout,
    dropout_backward, maxpool2x2, maxpool_backward, relu, relu_backward, softmax_channels,
    transposed_conv2x2_backward, transposed_conv2x2_forward, ConvParams, DropoutMode,
    PoolIndices, Scalar, Tensor,
};

/// Where dropout is applied. Serialized as `"encoder-<s>"` or `"bridge"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DropoutSite {
    Encoder(usize),
    Bridge,
}

impl fmt::Display for DropoutSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropoutSite::Encoder(s) => write!(f, "encoder-{s}"),
            DropoutSite::Bridge => f.write_str("bridge"),
        }
    }
}

impl From<DropoutSite> for String {
    fn from(s: DropoutSite) -> Self {
        s.to_string()
    }
}

impl TryFrom<String> for DropoutSite {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        if s == "bridge" {
            return Ok(DropoutSite::Bridge);
        }
        s.strip_prefix("encoder-")
            .and_then(|n| n.parse().ok())
            .map(DropoutSite::Encoder)
            .ok_or_else(|| format!("unknown dropout stage `{s}` (expected `encoder-<n>` or `bridge`)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub dropout_stages: BTreeSet<DropoutSite>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            input_channels: 3,
            num_classes: 3,
            base_filters: 64,
            depth: 4,
            dropout_rate: 0.5,
            dropout_stages: [DropoutSite::Encoder(4), DropoutSite::Bridge].into(),
        }
    }
}

impl UNetConfig {
    /// A reduced network keeping the default layout: dropout at the deepest
    /// encoder stage and the bridge.
    pub fn scaled(input_size: usize, base_filters: usize, depth: usize) -> Self {
        Self {
            input_size,
            base_filters,
            depth,
            dropout_stages: [DropoutSite::Encoder(depth), DropoutSite::Bridge].into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if self.base_filters < 1 {
            return fail("base_filters must be at least 1".into());
        }
        if self.input_channels < 1 || self.num_classes < 1 {
            return fail("input_channels and num_classes must be positive".into());
        }
        if self.depth >= usize::BITS as usize - 1 || self.input_size == 0 || self.input_size % (1 << self.depth) != 0 {
            return fail(format!(
                "input_size {} is not divisible by 2^depth = 2^{}",
                self.input_size, self.depth
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        for site in &self.dropout_stages {
            if let DropoutSite::Encoder(s) = site {
                if *s < 1 || *s > self.depth {
                    return fail(format!(
                        "dropout stage {site} does not exist for depth {}",
                        self.depth
                    ));
                }
            }
        }
        Ok(())
    }

    /// Filters of encoder stage `s` (1-based); `s = depth + 1` is the bridge.
    pub fn stage_filters(&self, s: usize) -> usize {
        self.base_filters << (s - 1)
    }

    fn dropout_at(&self, site: DropoutSite) -> f64 {
        if self.dropout_stages.contains(&site) {
            self.dropout_rate
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// 3×3, stride 1, padding 1.
    Conv3x3,
    /// 2×2 transposed, stride 2, no cropping.
    UpConv2x2,
    /// 1×1, stride 1, no padding.
    Pointwise,
}

/// Static description of one parameterised layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub key: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerSpec {
    fn new(key: String, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            key,
            kind,
            in_channels,
            out_channels,
        }
    }

    pub fn kernel_size(&self) -> usize {
        match self.kind {
            LayerKind::Conv3x3 => 3,
            LayerKind::UpConv2x2 => 2,
            LayerKind::Pointwise => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        let k = self.kernel_size();
        self.out_channels * (k * k * self.in_channels + 1)
    }

    pub fn fan_in(&self) -> usize {
        let k = self.kernel_size();
        k * k * self.in_channels
    }

    fn zeros<T: Scalar>(&self) -> ConvParams<T> {
        let k = self.kernel_size();
        let (stride, pad) = match self.kind {
            LayerKind::Conv3x3 => (1, 1),
            LayerKind::UpConv2x2 => (2, 0),
            LayerKind::Pointwise => (1, 0),
        };
        ConvParams::zeros(k, k, self.in_channels, self.out_channels, stride, pad)
    }
}

/// Every parameterised layer in forward order.
pub fn layer_specs(config: &UNetConfig) -> Vec<LayerSpec> {
    let mut v = Vec::with_capacity(5 * config.depth + 3);
    let mut cin = config.input_channels;
    for s in 1..=config.depth {
        let f = config.stage_filters(s);
        v.push(LayerSpec::new(format!("enc{s}.conv1"), LayerKind::Conv3x3, cin, f));
        v.push(LayerSpec::new(format!("enc{s}.conv2"), LayerKind::Conv3x3, f, f));
        cin = f;
    }
    let fb = config.stage_filters(config.depth + 1);
    v.push(LayerSpec::new("bridge.conv1".into(), LayerKind::Conv3x3, cin, fb));
    v.push(LayerSpec::new("bridge.conv2".into(), LayerKind::Conv3x3, fb, fb));
    let mut cin = fb;
    for l in 1..=config.depth {
        let f = config.stage_filters(config.depth - l + 1);
        v.push(LayerSpec::new(format!("dec{l}.upconv"), LayerKind::UpConv2x2, cin, f));
        v.push(LayerSpec::new(format!("dec{l}.conv1"), LayerKind::Conv3x3, 2 * f, f));
        v.push(LayerSpec::new(format!("dec{l}.conv2"), LayerKind::Conv3x3, f, f));
        cin = f;
    }
    v.push(LayerSpec::new(
        "final.conv".into(),
        LayerKind::Pointwise,
        cin,
        config.num_classes,
    ));
    v
}

/// Total kernel + bias element count.
pub fn parameter_count(config: &UNetConfig) -> Result<usize> {
    config.validate()?;
    Ok(layer_specs(config).iter().map(LayerSpec::param_count).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub key: String,
    pub conv: ConvParams<T>,
}

/// All kernels and biases of a network, in forward order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T> {
    pub config: UNetConfig,
    pub layers: Vec<Layer<T>>,
}

/// Gradients share the parameter layout and keys.
pub type ParamGrads<T> = UNetParams<T>;

impl<T: Scalar> UNetParams<T> {
    /// All-zero parameters (also the accumulator layout for gradients).
    pub fn zeros(config: &UNetConfig) -> Result<Self> {
        config.validate()?;
        let layers = layer_specs(config)
            .into_iter()
            .map(|s| Layer {
                conv: s.zeros(),
                key: s.key,
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn get(&self, key: &str) -> Option<&ConvParams<T>> {
        self.layers.iter().find(|l| l.key == key).map(|l| &l.conv)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut ConvParams<T>> {
        self.layers.iter_mut().find(|l| l.key == key).map(|l| &mut l.conv)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.conv.param_count()).sum()
    }

    /// Flat tensor keys, `<layer>.w` then `<layer>.b` per layer.
    pub fn tensor_keys(&self) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| [format!("{}.w", l.key), format!("{}.b", l.key)])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.conv.kernels.data(), &l.conv.biases[..]])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                let ConvParams {
                    kernels, biases, ..
                } = &mut l.conv;
                [kernels.data_mut(), &mut biases[..]]
            })
            .collect()
    }

    /// Shapes matching [`Self::tensor_keys`].
    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .flat_map(|l| [l.conv.kernels.shape().to_vec(), vec![l.conv.biases.len()]])
            .collect()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x = *x + y;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> UNetParams<U> {
        UNetParams {
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    key: l.key.clone(),
                    conv: ConvParams {
                        kernels: l.conv.kernels.cast(),
                        biases: l.conv.biases.iter().map(|v| U::of(v.as_f64())).collect(),
                        stride: l.conv.stride,
                        padding: l.conv.padding,
                    },
                })
                .collect(),
        }
    }

    fn check_layout(&self) -> Result<()> {
        let specs = layer_specs(&self.config);
        let ok = specs.len() == self.layers.len()
            && specs.iter().zip(&self.layers).all(|(s, l)| {
                let k = s.kernel_size();
                s.key == l.key && l.conv.kernels.shape() == [k, k, s.in_channels, s.out_channels]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("parameter layout does not match its configuration"))
        }
    }

    fn enc(&self, s: usize, j: usize) -> &ConvParams<T> {
        &self.layers[2 * (s - 1) + j].conv
    }

    fn bridge(&self, j: usize) -> &ConvParams<T> {
        &self.layers[2 * self.config.depth + j].conv
    }

    fn dec(&self, l: usize, j: usize) -> &ConvParams<T> {
        &self.layers[2 * self.config.depth + 2 + 3 * (l - 1) + j].conv
    }

    fn final_conv(&self) -> &ConvParams<T> {
        &self.layers.last().expect("non-empty layer list").conv
    }
}

/// Zero-mean Gaussian kernels with variance `2/fan_in`, zero biases.
pub fn build<T: Scalar, R: Rng + ?Sized>(config: &UNetConfig, rng: &mut R) -> Result<UNetParams<T>> {
    let mut params = UNetParams::<T>::zeros(config)?;
    for (spec, layer) in layer_specs(config).iter().zip(params.layers.iter_mut()) {
        let normal = Normal::new(0.0, (2.0 / spec.fan_in() as f64).sqrt())
            .map_err(|e| Error::Config(format!("initializer for {}: {e}", spec.key)))?;
        for w in layer.conv.kernels.data_mut() {
            *w = T::of(normal.sample(rng));
        }
    }
    Ok(params)
}

/// Cached state of one encoder stage (or the bridge, which has no pool).
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    input: Tensor<T>,
    act1: Tensor<T>,
    act2: Tensor<T>,
    dropout: Option<Vec<T>>,
    pool: Option<PoolIndices>,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    up_input: Tensor<T>,
    up_act: Tensor<T>,
    concat: Tensor<T>,
    skip_channels: usize,
    act1: Tensor<T>,
    act2: Tensor<T>,
}

/// Everything the backward pass needs, captured during [`forward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    config: UNetConfig,
    encoders: Vec<EncoderTrace<T>>,
    bridge: EncoderTrace<T>,
    decoders: Vec<DecoderTrace<T>>,
    logits_shape: Vec<usize>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Skip tensor of encoder stage `s` (1-based) as concatenated in the decoder.
    pub fn skip(&self, s: usize) -> Option<Tensor<T>> {
        let l = self.config.depth.checked_sub(s)? + 1;
        let d = self.decoders.get(l - 1)?;
        concat_depth_backward(&d.concat, d.skip_channels).ok().map(|(a, _)| a)
    }
}

fn conv_relu<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    Ok(relu(&conv2d_forward(x, p)?))
}

fn run<T: Scalar, R: Rng + ?Sized>(
    params: &UNetParams<T>,
    image: &Tensor<T>,
    mode: DropoutMode,
    rng: &mut R,
    keep: bool,
) -> Result<(Tensor<T>, Option<ForwardTrace<T>>)> {
    let cfg = &params.config;
    cfg.validate()?;
    params.check_layout()?;
    let (h, w, c) = image.hwc()?;
    if (h, w, c) != (cfg.input_size, cfg.input_size, cfg.input_channels) {
        return Err(Error::invalid(format!(
            "image is {h}×{w}×{c}, network expects {n}×{n}×{}",
            cfg.input_channels,
            n = cfg.input_size
        )));
    }
    image.ensure_finite("image")?;

    let mut encoders = Vec::new();
    let mut skips = Vec::with_capacity(cfg.depth);
    let mut x = image.clone();
    for s in 1..=cfg.depth {
        let act1 = conv_relu(&x, params.enc(s, 0))?;
        let act2 = conv_relu(&act1, params.enc(s, 1))?;
        let (skip, mask) = dropout(&act2, cfg.dropout_at(DropoutSite::Encoder(s)), mode, rng)?;
        let (pooled, idx) = maxpool2x2(&skip)?;
        if keep {
            encoders.push(EncoderTrace {
                input: x,
                act1,
                act2,
                dropout: mask,
                pool: Some(idx),
            });
        }
        skips.push(skip);
        x = pooled;
    }

    let act1 = conv_relu(&x, params.bridge(0))?;
    let act2 = conv_relu(&act1, params.bridge(1))?;
    let (out, mask) = dropout(&act2, cfg.dropout_at(DropoutSite::Bridge), mode, rng)?;
    let bridge = keep.then(|| EncoderTrace {
        input: x,
        act1,
        act2,
        dropout: mask,
        pool: None,
    });
    x = out;

    let mut decoders = Vec::new();
    for l in 1..=cfg.depth {
        let up_act = relu(&transposed_conv2x2_forward(&x, params.dec(l, 0))?);
        let skip = skips.pop().expect("one skip per encoder stage");
        let concat = concat_depth(&skip, &up_act)?;
        let act1 = conv_relu(&concat, params.dec(l, 1))?;
        let act2 = conv_relu(&act1, params.dec(l, 2))?;
        if keep {
            decoders.push(DecoderTrace {
                up_input: x,
                up_act,
                skip_channels: skip.channels(),
                concat,
                act1,
                act2: act2.clone(),
            });
        }
        x = act2;
    }
    let logits = conv2d_forward(&x, params.final_conv())?;
    let trace = bridge.map(|bridge| ForwardTrace {
        config: cfg.clone(),
        encoders,
        bridge,
        decoders,
        logits_shape: logits.shape().to_vec(),
    });
    Ok((logits, trace))
}

/// Forward pass returning raw logits and the trace needed by [`backward`].
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    params: &UNetParams<T>,
    image: &Tensor<T>,
    mode: DropoutMode,
    rng: &mut R,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let (logits, trace) = run(params, image, mode, rng, true)?;
    Ok((logits, trace.expect("trace requested")))
}

/// Inference-mode logits without retaining a trace.
pub fn infer<T: Scalar>(params: &UNetParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    Ok(run(params, image, DropoutMode::Infer, &mut rng, false)?.0)
}

/// Per-pixel class probabilities (softmax of [`infer`] logits).
pub fn predict_probabilities<T: Scalar>(params: &UNetParams<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(softmax_channels(&infer(params, image)?))
}

fn put<T>(grads: &mut UNetParams<T>, idx: usize, g: crate::tensor::ConvGrads<T>) -> Tensor<T> {
    let conv = &mut grads.layers[idx].conv;
    conv.kernels = g.grad_w;
    conv.biases = g.grad_b;
    g.grad_x
}

/// Reverse pass: gradient of the loss with respect to every parameter, given
/// the gradient with respect to the logits.
pub fn backward<T: Scalar>(
    params: &UNetParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Tensor<T>,
) -> Result<ParamGrads<T>> {
    let cfg = &params.config;
    if trace.config != *cfg || trace.encoders.len() != cfg.depth || trace.decoders.len() != cfg.depth {
        return Err(Error::invalid("forward trace was produced by a different network"));
    }
    params.check_layout()?;
    if grad_logits.shape() != &trace.logits_shape[..] {
        return Err(Error::invalid(format!(
            "grad_logits shape {:?} does not match logits {:?}",
            grad_logits.shape(),
            trace.logits_shape
        )));
    }
    let d = cfg.depth;
    let mut grads = UNetParams::<T>::zeros(cfg)?;
    let last = grads.layers.len() - 1;
    let dec_base = 2 * d + 2;

    let top = &trace.decoders[d - 1];
    let g = conv2d_backward(&top.act2, params.final_conv(), grad_logits)?;
    let mut g = put(&mut grads, last, g);

    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; d];
    for l in (1..=d).rev() {
        let t = &trace.decoders[l - 1];
        let base = dec_base + 3 * (l - 1);
        g = relu_backward(&t.act2, &g)?;
        let cg = conv2d_backward(&t.act1, params.dec(l, 2), &g)?;
        g = relu_backward(&t.act1, &put(&mut grads, base + 2, cg))?;
        let cg = conv2d_backward(&t.concat, params.dec(l, 1), &g)?;
        let (g_skip, g_up) = concat_depth_backward(&put(&mut grads, base + 1, cg), t.skip_channels)?;
        skip_grads[d - l] = Some(g_skip);
        g = relu_backward(&t.up_act, &g_up)?;
        let cg = transposed_conv2x2_backward(&t.up_input, params.dec(l, 0), &g)?;
        g = put(&mut grads, base, cg);
    }

    let b = &trace.bridge;
    g = dropout_backward(b.dropout.as_deref(), &g)?;
    g = relu_backward(&b.act2, &g)?;
    let cg = conv2d_backward(&b.act1, params.bridge(1), &g)?;
    g = relu_backward(&b.act1, &put(&mut grads, 2 * d + 1, cg))?;
    let cg = conv2d_backward(&b.input, params.bridge(0), &g)?;
    g = put(&mut grads, 2 * d, cg);

    for s in (1..=d).rev() {
        let t = &trace.encoders[s - 1];
        let pool = t.pool.as_ref().expect("encoder stages pool");
        g = maxpool_backward(pool, &g)?;
        if let Some(sg) = skip_grads[s - 1].take() {
            g.add_assign(&sg);
        }
        g = dropout_backward(t.dropout.as_deref(), &g)?;
        g = relu_backward(&t.act2, &g)?;
        let cg = conv2d_backward(&t.act1, params.enc(s, 1), &g)?;
        g = relu_backward(&t.act1, &put(&mut grads, 2 * (s - 1) + 1, cg))?;
        let cg = conv2d_backward(&t.input, params.enc(s, 0), &g)?;
        g = put(&mut grads, 2 * (s - 1), cg);
    }
    Ok(grads)
}
