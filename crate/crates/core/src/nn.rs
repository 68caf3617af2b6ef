//! Neural-network kernels on `[C,H,W]` tensors.
//!
//! Forward and backward kernels live here as plain functions; the tape in
//! [`crate::autodiff`] wires them into reverse-mode differentiation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A 2-D convolution layer; `weights` is `[C_out, C_in, q, q]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl Conv2dLayer {
    /// He-initialised layer with zero bias.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights: Tensor::randn(
                [out_channels, in_channels, kernel, kernel],
                (2.0 / fan_in).sqrt(),
                rng,
            ),
            bias: Tensor::zeros([out_channels]),
        }
    }

    /// Prunable parameter count `C_in * C_out * q * q` (bias excluded).
    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    pub fn check(&self) -> Result<()> {
        let expected = [self.out_channels, self.in_channels, self.kernel, self.kernel];
        if self.weights.shape() != expected {
            return Err(Error::ShapeMismatch {
                op: "conv2d layer",
                lhs: self.weights.shape().to_vec(),
                rhs: expected.to_vec(),
            });
        }
        if self.bias.shape() != [self.out_channels] {
            return Err(Error::ShapeMismatch {
                op: "conv2d layer bias",
                lhs: self.bias.shape().to_vec(),
                rhs: vec![self.out_channels],
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check()?;
        let (out, _) = conv2d_forward(input, &self.weights, Some(&self.bias), self.stride, self.padding)?;
        Ok(out)
    }
}

/// A fully connected layer; `weights` is `[H_out, H_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub in_features: usize,
    pub out_features: usize,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn init<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Self {
            in_features,
            out_features,
            weights: Tensor::randn(
                [out_features, in_features],
                (2.0 / in_features as f64).sqrt(),
                rng,
            ),
            bias: Tensor::zeros([out_features]),
        }
    }

    pub fn weight_count(&self) -> usize {
        self.in_features * self.out_features
    }
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// `c = a * b (+ beta * c)` for row-major matrices, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are asserted above and strides describe
    // row-major (or transposed) layouts that stay inside each slice.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    q: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.q == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.q * g.q * npix];
    for c in 0..g.cin {
        for ki in 0..g.q {
            for kj in 0..g.q {
                let row = (c * g.q + ki) * g.q + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[oi * g.wo + oj] = src_row[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let npix = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for c in 0..g.cin {
        for ki in 0..g.q {
            for kj in 0..g.q {
                let row = (c * g.q + ki) * g.q + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut x[(c * g.h + ii as usize) * g.w..][..g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst_row[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn conv_geom(input: &Tensor, weights: &Tensor, stride: usize, padding: usize) -> Result<(ConvGeom, usize)> {
    let (cin, h, w) = input.dims3()?;
    let [cout, wcin, q, q2] = weights.shape()[..] else {
        return Err(Error::invalid(
            "conv2d",
            format!("weights must be [C_out,C_in,q,q], got {:?}", weights.shape()),
        ));
    };
    if q != q2 {
        return Err(Error::invalid("conv2d", "kernel must be square"));
    }
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    let (Some(ho), Some(wo)) = (
        conv_out_dim(h, q, stride, padding),
        conv_out_dim(w, q, stride, padding),
    ) else {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {q} with padding {padding} does not fit a {h}x{w} input"),
        ));
    };
    Ok((
        ConvGeom {
            cin,
            h,
            w,
            q,
            stride,
            pad: padding,
            ho,
            wo,
        },
        cout,
    ))
}

/// Cached im2col matrix, kept for the backward pass.
#[derive(Debug)]
pub(crate) struct ConvCache {
    cols: Option<Vec<f64>>,
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, ConvCache)> {
    let (g, cout) = conv_geom(input, weights, stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![cout],
            });
        }
    }
    let npix = g.ho * g.wo;
    let kdim = g.cin * g.q * g.q;
    let mut out = vec![0.0; cout * npix];
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(npix).enumerate() {
            row.fill(b.data()[o]);
        }
    }
    let cache = if g.is_pointwise() {
        gemm(cout, kdim, npix, weights.data(), false, input.data(), false, &mut out, 1.0);
        ConvCache { cols: None }
    } else {
        let cols = im2col(input.data(), &g);
        gemm(cout, kdim, npix, weights.data(), false, &cols, false, &mut out, 1.0);
        ConvCache { cols: Some(cols) }
    };
    Ok((Tensor::from_parts(vec![cout, g.ho, g.wo], out), cache))
}

/// Gradients `(d_input, d_weights, d_bias)` of a convolution.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    weights: &Tensor,
    cache: &ConvCache,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (g, cout) = conv_geom(input, weights, stride, padding).expect("validated in forward");
    let npix = g.ho * g.wo;
    let kdim = g.cin * g.q * g.q;
    let cols: &[f64] = cache.cols.as_deref().unwrap_or(input.data());

    let mut d_w = vec![0.0; cout * kdim];
    gemm(cout, npix, kdim, grad_out, false, cols, true, &mut d_w, 0.0);

    let mut d_cols = vec![0.0; kdim * npix];
    gemm(kdim, cout, npix, weights.data(), true, grad_out, false, &mut d_cols, 0.0);
    let d_x = if g.is_pointwise() { d_cols } else { col2im(&d_cols, &g) };

    let d_b = grad_out.chunks(npix).map(|r| r.iter().sum()).collect();
    (d_x, d_w, d_b)
}

/// Convolution with zero padding.
pub fn conv2d(input: &Tensor, layer: &Conv2dLayer) -> Result<Tensor> {
    if input.shape().first() != Some(&layer.in_channels) {
        return Err(Error::ChannelMismatch {
            producer: "input".into(),
            consumer: "conv2d".into(),
            produced: input.shape().first().copied().unwrap_or(0),
            expected: layer.in_channels,
        });
    }
    layer.forward(input)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * h2 * w2];
    let x = input.data();
    for ch in 0..c {
        for i in 0..h2 {
            let src = &x[(ch * h + i / 2) * w..][..w];
            let dst = &mut out[(ch * h2 + i) * w2..][..w2];
            for j in 0..w2 {
                dst[j] = src[j / 2];
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, h2, w2], out))
}

pub(crate) fn upsample2x_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h2 {
            let src = &grad[(ch * h2 + i) * w2..][..w2];
            let dst = &mut d[(ch * h + i / 2) * w..][..w];
            for j in 0..w2 {
                dst[j / 2] += src[j];
            }
        }
    }
    d
}

/// 2x2 average pooling; odd trailing rows/columns are dropped.
pub fn avgpool2x(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (ho, wo) = (h / 2, w / 2);
    if ho == 0 || wo == 0 {
        return Err(Error::invalid(
            "avgpool2x",
            format!("input {h}x{w} too small to pool"),
        ));
    }
    let x = input.data();
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for i in 0..ho {
            let r0 = &x[(ch * h + 2 * i) * w..][..w];
            let r1 = &x[(ch * h + 2 * i + 1) * w..][..w];
            let dst = &mut out[(ch * ho + i) * wo..][..wo];
            for j in 0..wo {
                dst[j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, ho, wo], out))
}

pub(crate) fn avgpool2x_backward(grad: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (ho, wo) = (h / 2, w / 2);
    let mut d = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * grad[(ch * ho + i) * wo + j];
                for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    d[(ch * h + 2 * i + di) * w + 2 * j + dj] += g;
                }
            }
        }
    }
    d
}

/// Stack `[C_a,H,W]` and `[C_b,H,W]` along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    concat_many(&[a, b])
}

pub(crate) fn concat_many(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return Err(Error::invalid("concat", "nothing to concatenate"));
    };
    let (_, h, w) = first.dims3()?;
    let mut c_total = 0;
    for p in parts {
        let (c, ph, pw) = p.dims3()?;
        if (ph, pw) != (h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        c_total += c;
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::from_parts(vec![c_total, h, w], data))
}

/// Per-pixel softmax over the channel axis, max-subtracted for stability.
pub fn channel_softmax(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; c * hw];
    for p in 0..hw {
        let mut m = f64::NEG_INFINITY;
        for ch in 0..c {
            m = m.max(x[ch * hw + p]);
        }
        let mut s = 0.0;
        for ch in 0..c {
            let e = (x[ch * hw + p] - m).exp();
            out[ch * hw + p] = e;
            s += e;
        }
        let inv = 1.0 / s;
        for ch in 0..c {
            out[ch * hw + p] *= inv;
        }
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

pub(crate) fn channel_softmax_backward(y: &[f64], grad: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut d = vec![0.0; c * hw];
    for p in 0..hw {
        let mut dot = 0.0;
        for ch in 0..c {
            dot += grad[ch * hw + p] * y[ch * hw + p];
        }
        for ch in 0..c {
            let k = ch * hw + p;
            d[k] = y[k] * (grad[k] - dot);
        }
    }
    d
}

/// One bilinear tap: the four neighbour indices (within a channel plane),
/// their weights, and the derivative of the sample w.r.t. `y` and `x`
/// expressed as weight vectors over the same four neighbours.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BilinearTap {
    pub idx: [usize; 4],
    pub wt: [f64; 4],
    /// d(weights)/dy, zero when `y` was clamped.
    pub dwy: [f64; 4],
    /// d(weights)/dx, zero when `x` was clamped.
    pub dwx: [f64; 4],
}

#[inline]
pub(crate) fn bilinear_tap(h: usize, w: usize, y: f64, x: f64) -> BilinearTap {
    let ymax = (h - 1) as f64;
    let xmax = (w - 1) as f64;
    let y_in = (0.0..=ymax).contains(&y);
    let x_in = (0.0..=xmax).contains(&x);
    let yc = y.clamp(0.0, ymax);
    let xc = x.clamp(0.0, xmax);
    let y0 = yc.floor();
    let x0 = xc.floor();
    let fy = yc - y0;
    let fx = xc - x0;
    let y0 = y0 as usize;
    let x0 = x0 as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
    let wt = [
        (1.0 - fy) * (1.0 - fx),
        (1.0 - fy) * fx,
        fy * (1.0 - fx),
        fy * fx,
    ];
    let dwy = if y_in {
        [-(1.0 - fx), -fx, 1.0 - fx, fx]
    } else {
        [0.0; 4]
    };
    let dwx = if x_in {
        [-(1.0 - fy), 1.0 - fy, -fy, fy]
    } else {
        [0.0; 4]
    };
    BilinearTap { idx, wt, dwy, dwx }
}

/// Bilinear interpolation of `image[channel]` at real coordinates `(y, x)`.
///
/// Coordinates are clamped to `[0,H-1] x [0,W-1]` first (border replication).
pub fn bilinear_sample(image: &Tensor, y: f64, x: f64, channel: usize) -> Result<f64> {
    let (c, h, w) = image.dims3()?;
    if channel >= c {
        return Err(Error::invalid(
            "bilinear_sample",
            format!("channel {channel} out of range for {c} channels"),
        ));
    }
    let tap = bilinear_tap(h, w, y, x);
    let plane = &image.data()[channel * h * w..(channel + 1) * h * w];
    Ok((0..4).map(|n| tap.wt[n] * plane[tap.idx[n]]).sum())
}

/// Bilinear resize to `(out_h, out_w)` using half-pixel centres.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear", "target size must be positive"));
    }
    let taps = resize_taps(h, w, out_h, out_w);
    let x = input.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for (p, tap) in taps.iter().enumerate() {
            out[ch * out_h * out_w + p] = (0..4).map(|n| tap.wt[n] * plane[tap.idx[n]]).sum();
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

pub(crate) fn resize_taps(h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<BilinearTap> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut taps = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let y = (i as f64 + 0.5) * sy - 0.5;
        for j in 0..out_w {
            let x = (j as f64 + 0.5) * sx - 0.5;
            taps.push(bilinear_tap(h, w, y, x));
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t3(c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
        Tensor::new([c, h, w], data).unwrap()
    }

    /// Direct nested-loop convolution with zero padding.
    fn conv_loop(x: &Tensor, l: &Conv2dLayer) -> Tensor {
        let (cin, h, w) = x.dims3().unwrap();
        let q = l.kernel;
        let ho = (h + 2 * l.padding - q) / l.stride + 1;
        let wo = (w + 2 * l.padding - q) / l.stride + 1;
        let mut out = vec![0.0; l.out_channels * ho * wo];
        for o in 0..l.out_channels {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = l.bias.data()[o];
                    for c in 0..cin {
                        for ki in 0..q {
                            for kj in 0..q {
                                let ii = (oi * l.stride + ki) as isize - l.padding as isize;
                                let jj = (oj * l.stride + kj) as isize - l.padding as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                                    continue;
                                }
                                let wv = l.weights.data()[((o * cin + c) * q + ki) * q + kj];
                                acc += wv * x.at3(c, ii as usize, jj as usize);
                            }
                        }
                    }
                    out[(o * ho + oi) * wo + oj] = acc;
                }
            }
        }
        t3(l.out_channels, ho, wo, out)
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut l = Conv2dLayer::init(1, 1, 3, 1, 0, &mut rng);
        l.weights = Tensor::ones([1, 1, 3, 3]);
        let out = conv2d(&Tensor::ones([1, 3, 3]), &l).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut l = Conv2dLayer::init(2, 2, 1, 1, 0, &mut rng);
        l.weights = Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::uniform([2, 4, 5], -1.0, 1.0, &mut rng);
        assert_eq!(conv2d(&x, &l).unwrap(), x);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for case in 0..50 {
            let cin = rng.gen_range(1..=4);
            let cout = rng.gen_range(1..=4);
            let q = [1, 3, 5][case % 3];
            let h = rng.gen_range(q.max(1)..=8);
            let w = rng.gen_range(q.max(1)..=8);
            let stride = rng.gen_range(1..=2);
            let pad = rng.gen_range(0..=q / 2);
            let mut l = Conv2dLayer::init(cin, cout, q, stride, pad, &mut rng);
            l.bias = Tensor::uniform([cout], -1.0, 1.0, &mut rng);
            let x = Tensor::uniform([cin, h, w], -1.0, 1.0, &mut rng);
            let fast = conv2d(&x, &l).unwrap();
            let slow = conv_loop(&x, &l);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow) < 1e-9, "case {case}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let l = Conv2dLayer::init(3, 2, 3, 1, 1, &mut rng);
        let err = conv2d(&Tensor::ones([2, 4, 4]), &l).unwrap_err();
        assert!(matches!(err, Error::ChannelMismatch { produced: 2, expected: 3, .. }));
    }

    #[test]
    fn upsample_pool_concat() {
        let up = upsample2x(&Tensor::ones([1, 1, 1])).unwrap();
        assert_eq!(up, Tensor::ones([1, 2, 2]));
        let p = avgpool2x(&t3(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(p.data(), &[2.5]);
        let c = concat_channels(&Tensor::ones([3, 2, 2]), &Tensor::zeros([5, 2, 2])).unwrap();
        assert_eq!(c.shape(), &[8, 2, 2]);
        assert!(concat_channels(&Tensor::ones([3, 2, 2]), &Tensor::ones([1, 2, 3])).is_err());
    }

    #[test]
    fn softmax_cases() {
        let u = channel_softmax(&Tensor::full([4, 2, 2], 0.7)).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = channel_softmax(&t3(2, 1, 1, vec![0.0, 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let big = channel_softmax(&t3(2, 1, 1, vec![1e4, 0.0])).unwrap();
        assert!(big.is_finite());
        assert!((big.sum() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bilinear_cases() {
        let img = t3(1, 4, 4, (0..16).map(f64::from).collect());
        assert_eq!(bilinear_sample(&img, 2.0, 3.0, 0).unwrap(), 11.0);
        let two = t3(1, 1, 2, vec![0.0, 1.0]);
        assert_eq!(bilinear_sample(&two, 0.0, 0.5, 0).unwrap(), 0.5);
        assert_eq!(
            bilinear_sample(&img, -5.3, 2.0, 0).unwrap(),
            img.at3(0, 0, 2)
        );
        assert!(bilinear_sample(&img, 0.0, 0.0, 1).is_err());
    }

    #[test]
    fn resize_identity_and_halving() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform([2, 6, 4], 0.0, 1.0, &mut rng);
        assert!(resize_bilinear(&x, 6, 4).unwrap().max_abs_diff(&x) < 1e-15);
        // Half-pixel centres make a 2x downscale equal to 2x2 averaging.
        let half = resize_bilinear(&x, 3, 2).unwrap();
        assert!(half.max_abs_diff(&avgpool2x(&x).unwrap()) < 1e-12);
    }
}
