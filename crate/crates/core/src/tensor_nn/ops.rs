//! Forward and backward kernels on (n, c, h, w) tensors.
//!
//! Kernels split work over whole output planes, and every output element is
//! accumulated in a fixed order, so results are bit-identical for any number
//! of threads.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use super::{NnError, Real, Result, Tensor};

fn check_shape(name: &str, actual: &[usize], expected: &[usize]) -> Result<()> {
    if actual != expected {
        return Err(NnError::Shape(format!(
            "{name}: expected {expected:?}, got {actual:?}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Copy)]
struct ConvDims {
    n: usize,
    ci: usize,
    co: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<ConvDims> {
    let (n, ci, h, w) = x.dims4()?;
    let (co, kci, kh, kw) = kernel.dims4()?;
    if kci != ci {
        return Err(NnError::Shape(format!(
            "kernel expects {kci} input channels, input has {ci}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(NnError::Shape(format!("same padding needs odd kernels, got {kh}x{kw}")));
    }
    if let Some(bias) = bias {
        check_shape("bias", bias.shape(), &[co])?;
    }
    Ok(ConvDims { n, ci, co, h, w, kh, kw })
}

/// Output pixels per patch-matrix tile.
const TILE: usize = 512;

/// Patch matrix for output pixels `p0..p0 + len` of one sample, laid out
/// (ci * kh * kw) x len. Taps outside the plane read zero.
fn im2col<T: Real>(x: &[T], d: &ConvDims, p0: usize, len: usize, col: &mut [T]) {
    let ConvDims { ci, h, w, kh, kw, .. } = *d;
    let plane = h * w;
    let mut p = p0;
    while p < p0 + len {
        let (y, xa) = (p / w, p % w);
        let xb = w.min(xa + p0 + len - p);
        let off = p - p0;
        for c in 0..ci {
            let src = &x[c * plane..][..plane];
            for ky in 0..kh {
                let sy = (y + ky) as isize - (kh / 2) as isize;
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let dst = &mut col[row * len + off..][..xb - xa];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[sy as usize * w..][..w];
                    // source columns xa + dx .. xb + dx, clipped to the plane
                    let dx = kx as isize - (kw / 2) as isize;
                    let lo = (xa as isize + dx).max(0) as usize;
                    let hi = (xb as isize + dx).min(w as isize).max(lo as isize) as usize;
                    let head = (lo as isize - dx) as usize - xa;
                    dst[..head].fill(T::zero());
                    dst[head..head + hi - lo].copy_from_slice(&src_row[lo..hi]);
                    dst[head + hi - lo..].fill(T::zero());
                }
            }
        }
        p += xb - xa;
    }
}

/// Tiles of the flattened output plane, as (sample, first pixel, length).
fn tiles(n: usize, plane: usize) -> Vec<(usize, usize, usize)> {
    (0..n)
        .flat_map(|b| (0..plane).step_by(TILE).map(move |p0| (b, p0, TILE.min(plane - p0))))
        .collect()
}

/// Stride-1 cross-correlation with zero "same" padding.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = conv_dims(x, kernel, Some(bias))?;
    let ConvDims { n, ci, co, h, w, kh, kw } = dims;
    let plane = h * w;
    let kdim = ci * kh * kw;
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let work = tiles(n, plane);
    let blocks: Vec<Vec<T>> = work
        .par_iter()
        .map(|&(b, p0, len)| {
            let mut col = vec![T::zero(); kdim * len];
            im2col(&xd[b * ci * plane..][..ci * plane], &dims, p0, len, &mut col);
            let mut block = vec![T::zero(); co * len];
            for (o, row) in block.chunks_mut(len).enumerate() {
                row.fill(bd[o]);
            }
            gemm(co, len, kdim, MatRef { data: kd, rs: kdim, cs: 1 }, &col, len, &mut block, len);
            block
        })
        .collect();
    let mut out = Tensor::zeros(&[n, co, h, w]);
    let od = out.data_mut();
    for (&(b, p0, len), block) in work.iter().zip(&blocks) {
        for (o, row) in block.chunks(len).enumerate() {
            od[(b * co + o) * plane + p0..][..len].copy_from_slice(row);
        }
    }
    Ok(out)
}

/// Kernel for the input gradient: channels swapped and taps reversed.
fn flipped_kernel<T: Real>(kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (co, ci, kh, kw) = kernel.dims4()?;
    let kd = kernel.data();
    Ok(Tensor::from_fn(&[ci, co, kh, kw], |idx| {
        let (kx, rest) = (idx % kw, idx / kw);
        let (ky, rest) = (rest % kh, rest / kh);
        let (o, c) = (rest % co, rest / co);
        kd[((o * ci + c) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx)]
    }))
}

fn conv_weight_grad<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>, dims: &ConvDims) -> Tensor<T> {
    let ConvDims { n, ci, co, h, w, kh, kw } = *dims;
    let plane = h * w;
    let kdim = ci * kh * kw;
    let (xd, gd) = (x.data(), grad_out.data());
    // transposed gradient, kdim x co, accumulated as col * g^T per tile
    let partials: Vec<Vec<T>> = tiles(n, plane)
        .par_iter()
        .map(|&(b, p0, len)| {
            let mut col = vec![T::zero(); kdim * len];
            im2col(&xd[b * ci * plane..][..ci * plane], dims, p0, len, &mut col);
            let mut g_t = vec![T::zero(); len * co];
            for o in 0..co {
                for (p, &v) in gd[(b * co + o) * plane + p0..][..len].iter().enumerate() {
                    g_t[p * co + o] = v;
                }
            }
            let mut partial = vec![T::zero(); kdim * co];
            gemm(kdim, co, len, MatRef { data: &col, rs: len, cs: 1 }, &g_t, co, &mut partial, co);
            partial
        })
        .collect();
    let mut grad_t = vec![T::zero(); kdim * co];
    for partial in &partials {
        for (a, &v) in grad_t.iter_mut().zip(partial) {
            *a += v;
        }
    }
    Tensor::from_fn(&[co, ci, kh, kw], |idx| grad_t[(idx % kdim) * co + idx / kdim])
}

/// Gradients of `sum(grad_out * conv2d_forward(x, kernel, bias))`.
pub fn conv2d_backward<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (weight, bias) = conv2d_param_grads(x, kernel, grad_out)?;
    let zero_bias = Tensor::zeros(&[x.dims4()?.1]);
    Ok(ConvGrads {
        input: conv2d_forward(grad_out, &flipped_kernel(kernel)?, &zero_bias)?,
        weight,
        bias,
    })
}

/// Weight and bias gradients only.
pub(crate) fn conv2d_param_grads<T: Real>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let dims = conv_dims(x, kernel, None)?;
    check_shape("grad_out", grad_out.shape(), &[dims.n, dims.co, dims.h, dims.w])?;
    Ok((conv_weight_grad(x, grad_out, &dims), channel_sums(grad_out)?))
}

/// Sum of an (n, c, h, w) tensor over everything but the channel axis.
fn channel_sums<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    let plane = h * w;
    let data = t.data();
    let sums = (0..c)
        .into_par_iter()
        .map(|o| {
            let mut total = T::zero();
            for b in 0..n {
                total += data[(b * c + o) * plane..][..plane].iter().copied().sum::<T>();
            }
            total
        })
        .collect();
    Tensor::new(&[c], sums)
}

fn upconv_dims<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, ci, h, w) = x.dims4()?;
    let (kci, co, kh, kw) = kernel.dims4()?;
    if kci != ci || kh != 2 || kw != 2 {
        return Err(NnError::Shape(format!(
            "transposed kernel {:?} does not fit {ci} input channels",
            kernel.shape()
        )));
    }
    Ok((n, ci, co, h, w))
}

/// 2x2 transposed convolution with stride 2. Kernel layout is (ci, co, 2, 2).
pub fn upconv2d_forward<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ci, co, h, w) = upconv_dims(x, kernel)?;
    check_shape("bias", bias.shape(), &[co])?;
    let (xd, kd, bd) = (x.data(), kernel.data(), bias.data());
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, co, h2, w2]);
    out.data_mut()
        .par_chunks_mut(h2 * w2)
        .enumerate()
        .for_each(|(idx, out_plane)| {
            let (b, o) = (idx / co, idx % co);
            out_plane.fill(bd[o]);
            for c in 0..ci {
                let in_plane = &xd[(b * ci + c) * h * w..][..h * w];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = kd[((c * co + o) * 2 + dy) * 2 + dx];
                        for y in 0..h {
                            let row = &mut out_plane[(2 * y + dy) * w2..][..w2];
                            for (x, &v) in in_plane[y * w..(y + 1) * w].iter().enumerate() {
                                row[2 * x + dx] += wv * v;
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

pub fn upconv2d_backward<T: Real>(x: &Tensor<T>, kernel: &Tensor<T>, grad_out: &Tensor<T>) -> Result<ConvGrads<T>> {
    let (n, ci, co, h, w) = upconv_dims(x, kernel)?;
    let (h2, w2) = (2 * h, 2 * w);
    check_shape("grad_out", grad_out.shape(), &[n, co, h2, w2])?;
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());

    let mut grad_x = Tensor::zeros(x.shape());
    grad_x
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, gx)| {
            let (b, c) = (idx / ci, idx % ci);
            for o in 0..co {
                let g = &gd[(b * co + o) * h2 * w2..][..h2 * w2];
                for dy in 0..2 {
                    for dx in 0..2 {
                        let wv = kd[((c * co + o) * 2 + dy) * 2 + dx];
                        for y in 0..h {
                            let row = &g[(2 * y + dy) * w2..][..w2];
                            for (x, d) in gx[y * w..(y + 1) * w].iter_mut().enumerate() {
                                *d += wv * row[2 * x + dx];
                            }
                        }
                    }
                }
            }
        });

    let mut grad_k = Tensor::zeros(kernel.shape());
    grad_k
        .data_mut()
        .par_chunks_mut(co * 4)
        .enumerate()
        .for_each(|(c, gk)| {
            for o in 0..co {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let mut total = T::zero();
                        for b in 0..n {
                            let xin = &xd[(b * ci + c) * h * w..][..h * w];
                            let g = &gd[(b * co + o) * h2 * w2..][..h2 * w2];
                            for y in 0..h {
                                let row = &g[(2 * y + dy) * w2..][..w2];
                                for (x, &v) in xin[y * w..(y + 1) * w].iter().enumerate() {
                                    total += v * row[2 * x + dx];
                                }
                            }
                        }
                        gk[(o * 2 + dy) * 2 + dx] = total;
                    }
                }
            }
        });

    Ok(ConvGrads {
        input: grad_x,
        weight: grad_k,
        bias: channel_sums(grad_out)?,
    })
}

pub fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `input > 0`. The gradient at exactly 0 is 0.
/// `input` may be either the pre-activation or the ReLU output.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    check_shape("grad_out", grad_out.shape(), input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data)
}

/// Winner of each 2x2 window, as an offset `dy * 2 + dx` inside the window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolRecord {
    input_shape: [usize; 4],
    argmax: Vec<u8>,
}

impl PoolRecord {
    pub fn argmax(&self) -> &[u8] {
        &self.argmax
    }
}

/// 2x2 max pooling with stride 2. Ties go to the first element in row-major
/// window order.
pub fn maxpool2d_forward<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolRecord)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::NotDivisible { h, w, multiple: 2 });
    }
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0u8; n * c * ho * wo];
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .zip(argmax.par_chunks_mut(ho * wo))
        .enumerate()
        .for_each(|(p, (out_plane, arg_plane))| {
            let in_plane = &xd[p * h * w..][..h * w];
            for y in 0..ho {
                for x in 0..wo {
                    let mut best = in_plane[2 * y * w + 2 * x];
                    let mut best_k = 0u8;
                    for k in 1..4u8 {
                        let (dy, dx) = ((k / 2) as usize, (k % 2) as usize);
                        let v = in_plane[(2 * y + dy) * w + 2 * x + dx];
                        if v > best {
                            best = v;
                            best_k = k;
                        }
                    }
                    out_plane[y * wo + x] = best;
                    arg_plane[y * wo + x] = best_k;
                }
            }
        });
    Ok((
        out,
        PoolRecord {
            input_shape: [n, c, h, w],
            argmax,
        },
    ))
}

pub fn maxpool2d_backward<T: Real>(record: &PoolRecord, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = record.input_shape;
    let (ho, wo) = (h / 2, w / 2);
    check_shape("grad_out", grad_out.shape(), &[n, c, ho, wo])?;
    let gd = grad_out.data();
    let mut grad_x = Tensor::zeros(&record.input_shape);
    grad_x
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, gx)| {
            let g = &gd[p * ho * wo..][..ho * wo];
            let args = &record.argmax[p * ho * wo..][..ho * wo];
            for y in 0..ho {
                for x in 0..wo {
                    let k = args[y * wo + x] as usize;
                    gx[(2 * y + k / 2) * w + 2 * x + k % 2] = g[y * wo + x];
                }
            }
        });
    Ok(grad_x)
}

/// Stacks `b` after `a` along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(NnError::Shape(format!(
            "cannot concat {:?} with {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(&[n, ca + cb, h, w], data)
}

/// Splits a channel-stacked gradient into the first `ca` channels and the rest.
pub fn split_channels<T: Real>(t: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = t.dims4()?;
    if ca > c {
        return Err(NnError::Shape(format!("cannot split {ca} channels from {c}")));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut a = Vec::with_capacity(n * ca * plane);
    let mut b = Vec::with_capacity(n * cb * plane);
    for chunk in t.data().chunks(c * plane) {
        a.extend_from_slice(&chunk[..ca * plane]);
        b.extend_from_slice(&chunk[ca * plane..]);
    }
    Ok((Tensor::new(&[n, ca, h, w], a)?, Tensor::new(&[n, cb, h, w], b)?))
}

/// Original spatial size of a padded tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRecord {
    pub h: usize,
    pub w: usize,
}

/// Zero-pads bottom and right up to (h, w).
pub fn pad_to<T: Real>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = x.dims4()?;
    if hi > h || wi > w {
        return Err(NnError::Shape(format!("cannot pad {hi}x{wi} down to {h}x{w}")));
    }
    if (hi, wi) == (h, w) {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros(&[n, c, h, w]);
    for (dst, src) in out.data_mut().chunks_mut(h * w).zip(x.data().chunks(hi * wi)) {
        for y in 0..hi {
            dst[y * w..y * w + wi].copy_from_slice(&src[y * wi..(y + 1) * wi]);
        }
    }
    Ok(out)
}

/// Pads h and w up to the next multiple of `multiple`.
pub fn pad_spatial<T: Real>(x: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, CropRecord)> {
    let (_, _, h, w) = x.dims4()?;
    let multiple = multiple.max(1);
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    Ok((pad_to(x, up(h), up(w))?, CropRecord { h, w }))
}

pub fn crop_spatial<T: Real>(x: &Tensor<T>, record: CropRecord) -> Result<Tensor<T>> {
    let (n, c, hi, wi) = x.dims4()?;
    let CropRecord { h, w } = record;
    if h > hi || w > wi {
        return Err(NnError::Shape(format!("cannot crop {hi}x{wi} to {h}x{w}")));
    }
    if (hi, wi) == (h, w) {
        return Ok(x.clone());
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for src in x.data().chunks(hi * wi) {
        for y in 0..h {
            data.extend_from_slice(&src[y * wi..y * wi + w]);
        }
    }
    Tensor::new(&[n, c, h, w], data)
}

/// Mean squared error and its gradient `2 (pred - target) / N`.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_shape("target", target.shape(), pred.shape())?;
    let count = pred.len().max(1);
    let scale = T::from_f64(2.0 / count as f64).unwrap();
    let mut total = 0.0f64;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            let df = d.to_f64().unwrap_or(f64::NAN);
            total += df * df;
            d * scale
        })
        .collect();
    Ok((total / count as f64, Tensor::new(pred.shape(), grad)?))
}

pub fn clamp_255<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let hi = T::from_f64(255.0).unwrap();
    x.map(|v| v.max(T::zero()).min(hi))
}
