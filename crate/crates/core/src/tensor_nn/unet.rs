//! Encoder/decoder network with skip connections.
//!
//! Level `i` works at `base_channels * 2^i` features. The encoder runs a
//! double 3x3 conv (+ReLU) per level with 2x2 max pooling between levels;
//! the decoder upsamples with a 2x2 transposed conv, concatenates the encoder
//! features of the same level (skip first, upsampled second) and runs another
//! double conv. A 1x1 conv maps to the output channels with no activation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ops::{
    concat_channels, conv2d_backward, conv2d_forward, conv2d_param_grads, maxpool2d_backward, maxpool2d_forward,
    relu_backward, relu_forward, split_channels, upconv2d_backward, upconv2d_forward, PoolRecord,
};
use super::{NnError, Real, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_channels: usize,
    /// Scale raw 0..255 inputs by 1/255 before the first convolution.
    pub normalize_input: bool,
    /// Multiply the head output by 255, so the network works in [0, 1]
    /// units internally while still emitting values on the 0..255 scale.
    pub normalize_output: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            in_channels: 36,
            out_channels: 9,
            base_channels: 16,
            normalize_input: true,
            normalize_output: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(NnError::Config("depth must be at least 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.base_channels == 0 {
            return Err(NnError::Config("channel counts must be at least 1".into()));
        }
        if self.depth > 16 {
            return Err(NnError::Config(format!("depth {} is unreasonably deep", self.depth)));
        }
        Ok(())
    }

    /// Feature count at `level`.
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must be multiples of this.
    pub fn spatial_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn input_scale(&self) -> f64 {
        if self.normalize_input {
            1.0 / 255.0
        } else {
            1.0
        }
    }

    pub fn output_scale(&self) -> f64 {
        if self.normalize_output {
            255.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> ConvParams<T> {
    fn zeros(weight_shape: [usize; 4], bias_len: usize) -> Self {
        Self {
            weight: Tensor::zeros(&weight_shape),
            bias: Tensor::zeros(&[bias_len]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubleConv<T> {
    pub first: ConvParams<T>,
    pub second: ConvParams<T>,
}

impl<T: Real> DoubleConv<T> {
    fn zeros(cin: usize, cout: usize) -> Self {
        Self {
            first: ConvParams::zeros([cout, cin, 3, 3], cout),
            second: ConvParams::zeros([cout, cout, 3, 3], cout),
        }
    }
}

/// All weights of the network. Gradients and optimizer velocity use the same
/// type so they mirror parameter shapes exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetParams<T = f32> {
    pub config: UNetConfig,
    /// One per level, `depth` entries.
    pub encoder: Vec<DoubleConv<T>>,
    /// `up[i]` maps level `i + 1` features to level `i`.
    pub up: Vec<ConvParams<T>>,
    /// `decoder[i]` runs at level `i`.
    pub decoder: Vec<DoubleConv<T>>,
    pub head: ConvParams<T>,
}

impl<T: Real> UNetParams<T> {
    pub fn zeros(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let ch = |l| config.level_channels(l);
        let encoder = (0..config.depth)
            .map(|l| DoubleConv::zeros(if l == 0 { config.in_channels } else { ch(l - 1) }, ch(l)))
            .collect();
        let up = (0..config.depth - 1)
            .map(|l| ConvParams::zeros([ch(l + 1), ch(l), 2, 2], ch(l)))
            .collect();
        let decoder = (0..config.depth - 1)
            .map(|l| DoubleConv::zeros(2 * ch(l), ch(l)))
            .collect();
        let head = ConvParams::zeros([config.out_channels, ch(0), 1, 1], config.out_channels);
        Ok(Self {
            config,
            encoder,
            up,
            decoder,
            head,
        })
    }

    /// He-normal weights (std = sqrt(2 / fan_in)) from a seeded generator,
    /// zero biases. The 1x1 head starts at zero, so a fresh network predicts
    /// zero everywhere and every output channel starts from the same point.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, tensor) in params.named_tensors_mut() {
            if name.ends_with(".bias") || name == "head.weight" {
                continue;
            }
            let shape = tensor.shape().to_vec();
            // transposed kernels are (ci, co, 2, 2); every output sees ci inputs
            let fan_in = if name.starts_with("up") {
                shape[0]
            } else {
                shape[1] * shape[2] * shape[3]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in tensor.data_mut() {
                *v = T::from_f64(normal.sample(&mut rng)).unwrap();
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        fn push_conv<'a, T>(out: &mut Vec<(String, &'a Tensor<T>)>, prefix: String, p: &'a ConvParams<T>) {
            out.push((format!("{prefix}.weight"), &p.weight));
            out.push((format!("{prefix}.bias"), &p.bias));
        }
        for (l, dc) in self.encoder.iter().enumerate() {
            push_conv(&mut out, format!("enc{l}.conv1"), &dc.first);
            push_conv(&mut out, format!("enc{l}.conv2"), &dc.second);
        }
        for (l, up) in self.up.iter().enumerate() {
            push_conv(&mut out, format!("up{l}"), up);
        }
        for (l, dc) in self.decoder.iter().enumerate() {
            push_conv(&mut out, format!("dec{l}.conv1"), &dc.first);
            push_conv(&mut out, format!("dec{l}.conv2"), &dc.second);
        }
        push_conv(&mut out, "head".into(), &self.head);
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        fn push<'a, T>(out: &mut Vec<(String, &'a mut Tensor<T>)>, prefix: String, p: &'a mut ConvParams<T>) {
            out.push((format!("{prefix}.weight"), &mut p.weight));
            out.push((format!("{prefix}.bias"), &mut p.bias));
        }
        for (l, dc) in self.encoder.iter_mut().enumerate() {
            push(&mut out, format!("enc{l}.conv1"), &mut dc.first);
            push(&mut out, format!("enc{l}.conv2"), &mut dc.second);
        }
        for (l, up) in self.up.iter_mut().enumerate() {
            push(&mut out, format!("up{l}"), up);
        }
        for (l, dc) in self.decoder.iter_mut().enumerate() {
            push(&mut out, format!("dec{l}.conv1"), &mut dc.first);
            push(&mut out, format!("dec{l}.conv2"), &mut dc.second);
        }
        push(&mut out, "head".into(), &mut self.head);
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.named_tensors_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> UNetParams<U> {
        let mut out = UNetParams::<U>::zeros(self.config).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn check_shapes(&self) -> Result<()> {
        let reference = Self::zeros(self.config)?;
        let expected = reference.named_tensors();
        let actual = self.named_tensors();
        if expected.len() != actual.len() {
            return Err(NnError::Shape("parameter count does not match config".into()));
        }
        for ((name, e), (_, a)) in expected.iter().zip(&actual) {
            if e.shape() != a.shape() {
                return Err(NnError::Shape(format!(
                    "{name}: expected {:?}, got {:?}",
                    e.shape(),
                    a.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Activations kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    /// Network input after input scaling.
    input: Tensor<T>,
    /// Input to each encoder level (the pooled previous level for l > 0).
    enc_in: Vec<Tensor<T>>,
    enc_mid: Vec<Tensor<T>>,
    enc_out: Vec<Tensor<T>>,
    pools: Vec<PoolRecord>,
    up_in: Vec<Tensor<T>>,
    dec_cat: Vec<Tensor<T>>,
    dec_mid: Vec<Tensor<T>>,
    dec_out: Vec<Tensor<T>>,
}

fn conv_relu<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    Ok(relu_forward(&conv2d_forward(x, &p.weight, &p.bias)?))
}

fn check_input<T: Real>(params: &UNetParams<T>, x: &Tensor<T>) -> Result<()> {
    let (_, c, h, w) = x.dims4()?;
    let cfg = &params.config;
    if c != cfg.in_channels {
        return Err(NnError::Shape(format!(
            "network expects {} input channels, got {c}",
            cfg.in_channels
        )));
    }
    let multiple = cfg.spatial_multiple();
    if h % multiple != 0 || w % multiple != 0 {
        return Err(NnError::NotDivisible { h, w, multiple });
    }
    Ok(())
}

pub fn unet_forward_cached<T: Real>(params: &UNetParams<T>, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_input(params, x)?;
    let depth = params.config.depth;
    let mut input = x.clone();
    let scale = params.config.input_scale();
    if scale != 1.0 {
        input.scale(T::from_f64(scale).unwrap());
    }
    let mut cache = ForwardCache {
        input,
        enc_in: Vec::with_capacity(depth),
        enc_mid: Vec::with_capacity(depth),
        enc_out: Vec::with_capacity(depth),
        pools: Vec::with_capacity(depth),
        up_in: Vec::new(),
        dec_cat: Vec::new(),
        dec_mid: Vec::new(),
        dec_out: Vec::new(),
    };
    for (l, block) in params.encoder.iter().enumerate() {
        let level_in = if l == 0 {
            cache.input.clone()
        } else {
            let (pooled, record) = maxpool2d_forward(&cache.enc_out[l - 1])?;
            cache.pools.push(record);
            pooled
        };
        let mid = conv_relu(&level_in, &block.first)?;
        let out = conv_relu(&mid, &block.second)?;
        cache.enc_in.push(level_in);
        cache.enc_mid.push(mid);
        cache.enc_out.push(out);
    }

    // decoder runs from the deepest level upward; caches are stored by level
    let levels = depth - 1;
    let mut up_in: Vec<Option<Tensor<T>>> = vec![None; levels];
    let mut dec_cat: Vec<Option<Tensor<T>>> = vec![None; levels];
    let mut dec_mid: Vec<Option<Tensor<T>>> = vec![None; levels];
    let mut dec_out: Vec<Option<Tensor<T>>> = vec![None; levels];
    let mut current = cache.enc_out[depth - 1].clone();
    for l in (0..levels).rev() {
        let up = &params.up[l];
        let upsampled = upconv2d_forward(&current, &up.weight, &up.bias)?;
        let cat = concat_channels(&cache.enc_out[l], &upsampled)?;
        let mid = conv_relu(&cat, &params.decoder[l].first)?;
        let out = conv_relu(&mid, &params.decoder[l].second)?;
        up_in[l] = Some(std::mem::replace(&mut current, out.clone()));
        dec_cat[l] = Some(cat);
        dec_mid[l] = Some(mid);
        dec_out[l] = Some(out);
    }
    let unwrap_all = |v: Vec<Option<Tensor<T>>>| v.into_iter().map(|t| t.expect("filled")).collect();
    cache.up_in = unwrap_all(up_in);
    cache.dec_cat = unwrap_all(dec_cat);
    cache.dec_mid = unwrap_all(dec_mid);
    cache.dec_out = unwrap_all(dec_out);

    let mut output = conv2d_forward(&current, &params.head.weight, &params.head.bias)?;
    let scale = params.config.output_scale();
    if scale != 1.0 {
        output.scale(T::from_f64(scale).unwrap());
    }
    Ok((output, cache))
}

/// Runs the network on `x` of shape (n, in_channels, H, W). H and W must be
/// multiples of `2^(depth - 1)`.
pub fn unet_forward<T: Real>(params: &UNetParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(unet_forward_cached(params, x)?.0)
}

fn set_grads<T: Real>(dst: &mut ConvParams<T>, weight: Tensor<T>, bias: Tensor<T>) {
    dst.weight = weight;
    dst.bias = bias;
}

/// Backpropagates `grad_out` through a cached forward pass. Returns parameter
/// gradients and the gradient with respect to the raw input.
pub fn unet_backward_cached<T: Real>(
    params: &UNetParams<T>,
    cache: &ForwardCache<T>,
    grad_out: &Tensor<T>,
) -> Result<(UNetParams<T>, Tensor<T>)> {
    let (grads, grad_x) = backward(params, cache, grad_out, true)?;
    Ok((grads, grad_x.expect("requested")))
}

/// Parameter gradients only; skips the input gradient of the first layer.
pub fn unet_param_grads<T: Real>(
    params: &UNetParams<T>,
    cache: &ForwardCache<T>,
    grad_out: &Tensor<T>,
) -> Result<UNetParams<T>> {
    Ok(backward(params, cache, grad_out, false)?.0)
}

fn backward<T: Real>(
    params: &UNetParams<T>,
    cache: &ForwardCache<T>,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<(UNetParams<T>, Option<Tensor<T>>)> {
    let depth = params.config.depth;
    let levels = depth - 1;
    let mut grads = params.zeros_like();

    let head_in = if levels > 0 { &cache.dec_out[0] } else { &cache.enc_out[0] };
    let (n, _, h, w) = head_in.dims4()?;
    let expected = [n, params.config.out_channels, h, w];
    if grad_out.shape() != expected {
        return Err(NnError::Shape(format!(
            "grad_out: expected {expected:?}, got {:?}",
            grad_out.shape()
        )));
    }
    let scale = params.config.output_scale();
    let g = if scale != 1.0 {
        let mut scaled = grad_out.clone();
        scaled.scale(T::from_f64(scale).unwrap());
        conv2d_backward(head_in, &params.head.weight, &scaled)?
    } else {
        conv2d_backward(head_in, &params.head.weight, grad_out)?
    };
    set_grads(&mut grads.head, g.weight, g.bias);
    let mut grad = g.input;

    let mut skip_grads: Vec<Option<Tensor<T>>> = vec![None; depth];
    for l in 0..levels {
        let block = &params.decoder[l];
        let grad_pre = relu_backward(&cache.dec_out[l], &grad)?;
        let g2 = conv2d_backward(&cache.dec_mid[l], &block.second.weight, &grad_pre)?;
        set_grads(&mut grads.decoder[l].second, g2.weight, g2.bias);
        let grad_pre = relu_backward(&cache.dec_mid[l], &g2.input)?;
        let g1 = conv2d_backward(&cache.dec_cat[l], &block.first.weight, &grad_pre)?;
        set_grads(&mut grads.decoder[l].first, g1.weight, g1.bias);
        let (grad_skip, grad_up) = split_channels(&g1.input, params.config.level_channels(l))?;
        skip_grads[l] = Some(grad_skip);
        let gu = upconv2d_backward(&cache.up_in[l], &params.up[l].weight, &grad_up)?;
        set_grads(&mut grads.up[l], gu.weight, gu.bias);
        grad = gu.input;
    }

    for l in (0..depth).rev() {
        if let Some(skip) = skip_grads[l].take() {
            grad.add_assign(&skip)?;
        }
        let block = &params.encoder[l];
        let grad_pre = relu_backward(&cache.enc_out[l], &grad)?;
        let g2 = conv2d_backward(&cache.enc_mid[l], &block.second.weight, &grad_pre)?;
        set_grads(&mut grads.encoder[l].second, g2.weight, g2.bias);
        let grad_pre = relu_backward(&cache.enc_mid[l], &g2.input)?;
        if l == 0 && !want_input {
            let (weight, bias) = conv2d_param_grads(&cache.enc_in[0], &block.first.weight, &grad_pre)?;
            set_grads(&mut grads.encoder[0].first, weight, bias);
            return Ok((grads, None));
        }
        let g1 = conv2d_backward(&cache.enc_in[l], &block.first.weight, &grad_pre)?;
        set_grads(&mut grads.encoder[l].first, g1.weight, g1.bias);
        grad = if l > 0 {
            maxpool2d_backward(&cache.pools[l - 1], &g1.input)?
        } else {
            g1.input
        };
    }

    let scale = params.config.input_scale();
    if scale != 1.0 {
        grad.scale(T::from_f64(scale).unwrap());
    }
    Ok((grads, Some(grad)))
}

/// Full-network gradients of `sum(grad_out * unet_forward(params, x))`.
pub fn unet_backward<T: Real>(
    params: &UNetParams<T>,
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(UNetParams<T>, Tensor<T>)> {
    let (_, cache) = unet_forward_cached(params, x)?;
    unet_backward_cached(params, &cache, grad_out)
}
