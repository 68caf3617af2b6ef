//! Adaptive collaboration of flows: a per-pixel separable deformable
//! convolution that warps a source frame.
//!
//! Output pixel `(i, j)` is a convex combination of `F*F` bilinear samples
//! of the source. Sample `(k, l)` sits at
//! `(i - c + d*k + alpha, j - c + d*l + beta)` with `c = d*(F-1)/2`, so that
//! zero offsets give a patch centred on the output pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::bilinear_tap;
use crate::tensor::Tensor;

/// Kernel size `F` (odd) and dilation `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaCofConfig {
    pub kernel_size: usize,
    pub dilation: usize,
}

impl Default for AdaCofConfig {
    fn default() -> Self {
        Self {
            kernel_size: 3,
            dilation: 1,
        }
    }
}

impl AdaCofConfig {
    pub fn new(kernel_size: usize, dilation: usize) -> Result<Self> {
        let cfg = Self {
            kernel_size,
            dilation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(
                "adacof",
                format!("kernel size must be odd and positive, got {}", self.kernel_size),
            ));
        }
        if self.dilation == 0 {
            return Err(Error::invalid("adacof", "dilation must be at least 1"));
        }
        Ok(())
    }

    /// Number of taps `F^2`.
    pub fn taps(&self) -> usize {
        self.kernel_size * self.kernel_size
    }

    /// Patch centring shift `d*(F-1)/2`.
    pub fn center_offset(&self) -> f64 {
        (self.dilation * (self.kernel_size - 1) / 2) as f64
    }
}

/// Per-pixel kernel weights and offsets for one warp direction,
/// each shaped `[F^2, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaCofParams {
    pub weights: Tensor,
    pub alpha: Tensor,
    pub beta: Tensor,
}

impl AdaCofParams {
    /// Single centred tap with unit weight: the warp reproduces its input.
    pub fn identity(cfg: &AdaCofConfig, h: usize, w: usize) -> Self {
        let taps = cfg.taps();
        let mut weights = Tensor::zeros([taps, h, w]);
        let centre = taps / 2;
        weights.data_mut()[centre * h * w..(centre + 1) * h * w].fill(1.0);
        Self {
            weights,
            alpha: Tensor::zeros([taps, h, w]),
            beta: Tensor::zeros([taps, h, w]),
        }
    }

    /// Checks shapes against `cfg` and the weight-sum invariant.
    pub fn validate(&self, cfg: &AdaCofConfig) -> Result<()> {
        let (taps, h, w) = self.weights.dims3()?;
        check_param_shapes(cfg, &self.weights, &self.alpha, &self.beta, taps, h, w)?;
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::invalid("adacof", "offsets must be finite"));
        }
        let hw = h * w;
        let wd = self.weights.data();
        for p in 0..hw {
            let s: f64 = (0..taps).map(|t| wd[t * hw + p]).sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(
                    "adacof",
                    format!("kernel weights at pixel {p} sum to {s}, expected 1"),
                ));
            }
        }
        Ok(())
    }
}

fn check_param_shapes(
    cfg: &AdaCofConfig,
    weights: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    taps: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    if taps != cfg.taps() {
        return Err(Error::invalid(
            "adacof",
            format!("weights carry {taps} channels, kernel size {} needs {}", cfg.kernel_size, cfg.taps()),
        ));
    }
    for t in [alpha, beta] {
        if t.shape() != [taps, h, w] {
            return Err(Error::ShapeMismatch {
                op: "adacof offsets",
                lhs: weights.shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

pub(crate) fn check_warp_inputs(
    source: &Tensor,
    weights: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    cfg: &AdaCofConfig,
) -> Result<()> {
    cfg.validate()?;
    let (_, h, w) = source.dims3()?;
    let (taps, ph, pw) = weights.dims3()?;
    if (ph, pw) != (h, w) {
        return Err(Error::ShapeMismatch {
            op: "adacof_warp",
            lhs: source.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    check_param_shapes(cfg, weights, alpha, beta, taps, h, w)
}

/// Warp kernel without invariant checks; shapes must already be validated.
pub(crate) fn warp_forward(
    source: &Tensor,
    weights: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    cfg: &AdaCofConfig,
) -> Tensor {
    let (c, h, w) = source.dims3().expect("validated");
    let hw = h * w;
    let f = cfg.kernel_size;
    let d = cfg.dilation as f64;
    let oc = cfg.center_offset();
    let (src, wd, ad, bd) = (source.data(), weights.data(), alpha.data(), beta.data());
    let mut out = vec![0.0; c * hw];
    for t in 0..f * f {
        let (k, l) = ((t / f) as f64, (t % f) as f64);
        for i in 0..h {
            let ybase = i as f64 - oc + d * k;
            for j in 0..w {
                let p = i * w + j;
                let q = t * hw + p;
                let tap = bilinear_tap(h, w, ybase + ad[q], j as f64 - oc + d * l + bd[q]);
                let wgt = wd[q];
                for ch in 0..c {
                    let plane = &src[ch * hw..(ch + 1) * hw];
                    let s = tap.wt[0] * plane[tap.idx[0]]
                        + tap.wt[1] * plane[tap.idx[1]]
                        + tap.wt[2] * plane[tap.idx[2]]
                        + tap.wt[3] * plane[tap.idx[3]];
                    out[ch * hw + p] += wgt * s;
                }
            }
        }
    }
    Tensor::from_parts(vec![c, h, w], out)
}

/// Gradients of the warp w.r.t. `(source, weights, alpha, beta)`.
pub(crate) struct WarpGrads {
    pub source: Vec<f64>,
    pub weights: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

pub(crate) fn warp_backward(
    source: &Tensor,
    weights: &Tensor,
    alpha: &Tensor,
    beta: &Tensor,
    cfg: &AdaCofConfig,
    grad_out: &[f64],
) -> WarpGrads {
    let (c, h, w) = source.dims3().expect("validated");
    let hw = h * w;
    let f = cfg.kernel_size;
    let taps = f * f;
    let d = cfg.dilation as f64;
    let oc = cfg.center_offset();
    let (src, wd, ad, bd) = (source.data(), weights.data(), alpha.data(), beta.data());
    let mut g = WarpGrads {
        source: vec![0.0; c * hw],
        weights: vec![0.0; taps * hw],
        alpha: vec![0.0; taps * hw],
        beta: vec![0.0; taps * hw],
    };
    for t in 0..taps {
        let (k, l) = ((t / f) as f64, (t % f) as f64);
        for i in 0..h {
            let ybase = i as f64 - oc + d * k;
            for j in 0..w {
                let p = i * w + j;
                let q = t * hw + p;
                let tap = bilinear_tap(h, w, ybase + ad[q], j as f64 - oc + d * l + bd[q]);
                let wgt = wd[q];
                let (mut dw, mut dy, mut dx) = (0.0, 0.0, 0.0);
                for ch in 0..c {
                    let go = grad_out[ch * hw + p];
                    if go == 0.0 {
                        continue;
                    }
                    let plane = &src[ch * hw..(ch + 1) * hw];
                    let mut s = 0.0;
                    let mut sy = 0.0;
                    let mut sx = 0.0;
                    for n in 0..4 {
                        let v = plane[tap.idx[n]];
                        s += tap.wt[n] * v;
                        sy += tap.dwy[n] * v;
                        sx += tap.dwx[n] * v;
                    }
                    dw += go * s;
                    dy += go * sy;
                    dx += go * sx;
                    let gs = &mut g.source[ch * hw..(ch + 1) * hw];
                    let scaled = wgt * go;
                    for n in 0..4 {
                        gs[tap.idx[n]] += scaled * tap.wt[n];
                    }
                }
                g.weights[q] = dw;
                g.alpha[q] = wgt * dy;
                g.beta[q] = wgt * dx;
            }
        }
    }
    g
}

/// Warp `source` (`[C,H,W]`) with `params`; requires the weight-sum invariant.
pub fn adacof_warp(source: &Tensor, params: &AdaCofParams, cfg: &AdaCofConfig) -> Result<Tensor> {
    check_warp_inputs(source, &params.weights, &params.alpha, &params.beta, cfg)?;
    params.validate(cfg)?;
    Ok(warp_forward(source, &params.weights, &params.alpha, &params.beta, cfg))
}

/// Same as [`adacof_warp`] but without the weight-sum check.
pub fn adacof_warp_unchecked(
    source: &Tensor,
    params: &AdaCofParams,
    cfg: &AdaCofConfig,
) -> Result<Tensor> {
    check_warp_inputs(source, &params.weights, &params.alpha, &params.beta, cfg)?;
    Ok(warp_forward(source, &params.weights, &params.alpha, &params.beta, cfg))
}

/// `V * a + (1 - V) * b` with the `[1,H,W]` mask broadcast over channels.
pub fn occlusion_blend(frame_a: &Tensor, frame_b: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_blend(frame_a, frame_b, mask)?;
    if mask.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("occlusion_blend", "mask values must lie in [0, 1]"));
    }
    Ok(blend_forward(frame_a, frame_b, mask))
}

pub(crate) fn check_blend(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<()> {
    crate::tensor::same_shape("occlusion_blend", a, b)?;
    let (_, h, w) = a.dims3()?;
    if mask.shape() != [1, h, w] {
        return Err(Error::ShapeMismatch {
            op: "occlusion_blend mask",
            lhs: a.shape().to_vec(),
            rhs: mask.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn blend_forward(a: &Tensor, b: &Tensor, mask: &Tensor) -> Tensor {
    let hw = mask.numel();
    let v = mask.data();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(k, (&x, &y))| {
            let m = v[k % hw];
            m * x + (1.0 - m) * y
        })
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// Brute-force reference for [`adacof_warp`]: a literal loop over output
/// channel, row, column and kernel tap with its own scalar bilinear
/// interpolation. Kept independent of the fast path for cross-checking.
pub mod oracle {
    use super::{AdaCofConfig, AdaCofParams};
    use crate::error::Result;
    use crate::tensor::Tensor;

    fn sample(img: &Tensor, c: usize, y: f64, x: f64) -> f64 {
        let (_, h, w) = img.dims3().unwrap();
        let y = y.max(0.0).min((h - 1) as f64);
        let x = x.max(0.0).min((w - 1) as f64);
        let i0 = y.floor() as usize;
        let j0 = x.floor() as usize;
        let i1 = if i0 + 1 < h { i0 + 1 } else { i0 };
        let j1 = if j0 + 1 < w { j0 + 1 } else { j0 };
        let a = y - i0 as f64;
        let b = x - j0 as f64;
        let top = img.at3(c, i0, j0) * (1.0 - b) + img.at3(c, i0, j1) * b;
        let bottom = img.at3(c, i1, j0) * (1.0 - b) + img.at3(c, i1, j1) * b;
        top * (1.0 - a) + bottom * a
    }

    pub fn adacof_oracle(
        source: &Tensor,
        params: &AdaCofParams,
        cfg: &AdaCofConfig,
    ) -> Result<Tensor> {
        super::check_warp_inputs(source, &params.weights, &params.alpha, &params.beta, cfg)?;
        let (channels, h, w) = source.dims3()?;
        let f = cfg.kernel_size;
        let d = cfg.dilation;
        let half = (d * (f - 1) / 2) as f64;
        let mut out = Tensor::zeros([channels, h, w]);
        for c in 0..channels {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for k in 0..f {
                        for l in 0..f {
                            let t = k * f + l;
                            let wt = params.weights.at3(t, i, j);
                            let y = i as f64 + (d * k) as f64 + params.alpha.at3(t, i, j) - half;
                            let x = j as f64 + (d * l) as f64 + params.beta.at3(t, i, j) - half;
                            acc += wt * sample(source, c, y, x);
                        }
                    }
                    out.data_mut()[(c * h + i) * w + j] = acc;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::oracle::adacof_oracle;
    use super::*;
    use crate::nn::channel_softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(cfg: &AdaCofConfig, h: usize, w: usize, rng: &mut ChaCha8Rng) -> AdaCofParams {
        let t = cfg.taps();
        AdaCofParams {
            weights: channel_softmax(&Tensor::randn([t, h, w], 1.0, rng)).unwrap(),
            alpha: Tensor::uniform([t, h, w], -1.0, 1.0, rng),
            beta: Tensor::uniform([t, h, w], -1.0, 1.0, rng),
        }
    }

    #[test]
    fn identity_kernel_reproduces_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let src = Tensor::uniform([3, 5, 6], 0.0, 1.0, &mut rng);
        let cfg = AdaCofConfig::new(1, 1).unwrap();
        let p = AdaCofParams::identity(&cfg, 5, 6);
        assert_eq!(adacof_warp(&src, &p, &cfg).unwrap(), src);
        assert_eq!(adacof_oracle(&src, &p, &cfg).unwrap(), src);
        // A centred unit tap is also the identity for larger kernels.
        let cfg3 = AdaCofConfig::new(3, 2).unwrap();
        let p3 = AdaCofParams::identity(&cfg3, 5, 6);
        assert_eq!(adacof_warp(&src, &p3, &cfg3).unwrap(), src);
    }

    #[test]
    fn zero_weights_annihilate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let src = Tensor::uniform([2, 4, 4], 0.0, 1.0, &mut rng);
        let cfg = AdaCofConfig::default();
        let mut p = random_params(&cfg, 4, 4, &mut rng);
        p.weights = Tensor::zeros([9, 4, 4]);
        assert!(adacof_warp(&src, &p, &cfg).is_err());
        let out = adacof_warp_unchecked(&src, &p, &cfg).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_tap_shifts_with_border_replication() {
        let src = Tensor::new([1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let cfg = AdaCofConfig::default();
        let mut p = AdaCofParams::identity(&cfg, 3, 3);
        p.weights = Tensor::zeros([9, 3, 3]);
        p.weights.data_mut()[..9].fill(1.0);
        let expect = |i: usize, j: usize| src.at3(0, i.saturating_sub(1), j.saturating_sub(1));
        for out in [
            adacof_warp(&src, &p, &cfg).unwrap(),
            adacof_oracle(&src, &p, &cfg).unwrap(),
        ] {
            for i in 0..3 {
                for j in 0..3 {
                    assert_eq!(out.at3(0, i, j), expect(i, j));
                }
            }
        }
    }

    #[test]
    fn matches_oracle_on_random_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let src = Tensor::uniform([1, 5, 5], 0.0, 1.0, &mut rng);
        let cfg = AdaCofConfig::default();
        let p = random_params(&cfg, 5, 5, &mut rng);
        let a = adacof_warp(&src, &p, &cfg).unwrap();
        let b = adacof_oracle(&src, &p, &cfg).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn constant_image_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let cfg = AdaCofConfig::new([1, 3, 5][rng.gen_range(0..3)], rng.gen_range(1..=2)).unwrap();
            let mut p = random_params(&cfg, 6, 7, &mut rng);
            p.alpha = Tensor::uniform(p.alpha.shape().to_vec(), -4.0, 4.0, &mut rng);
            let v = rng.gen_range(0.0..1.0);
            let out = adacof_warp(&Tensor::full([2, 6, 7], v), &p, &cfg).unwrap();
            assert!(out.data().iter().all(|&o| (o - v).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_mismatched_shapes() {
        let cfg = AdaCofConfig::default();
        let p = AdaCofParams::identity(&cfg, 4, 4);
        let err = adacof_warp(&Tensor::ones([3, 5, 4]), &p, &cfg).unwrap_err();
        assert!(err.to_string().contains("[3, 5, 4]"));
        let cfg5 = AdaCofConfig::new(5, 1).unwrap();
        assert!(adacof_warp(&Tensor::ones([3, 4, 4]), &p, &cfg5).is_err());
        assert!(AdaCofConfig::new(4, 1).is_err());
        assert!(AdaCofConfig::new(3, 0).is_err());
    }

    #[test]
    fn blend_cases() {
        let a = Tensor::zeros([3, 2, 2]);
        let b = Tensor::ones([3, 2, 2]);
        assert_eq!(occlusion_blend(&a, &b, &Tensor::ones([1, 2, 2])).unwrap(), a);
        assert_eq!(occlusion_blend(&a, &b, &Tensor::zeros([1, 2, 2])).unwrap(), b);
        let mid = occlusion_blend(&a, &b, &Tensor::full([1, 2, 2], 0.5)).unwrap();
        assert!(mid.data().iter().all(|&v| v == 0.5));
        assert!(occlusion_blend(&a, &b, &Tensor::full([1, 2, 2], 1.5)).is_err());
    }
}
