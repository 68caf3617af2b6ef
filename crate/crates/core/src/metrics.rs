//! Image quality metrics on `[C,H,W]` images in `[0,1]`.

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Tensor};

/// Reported when the two images are identical.
pub const PSNR_IDENTICAL: f64 = 99.0;

pub fn psnr(a: &Tensor, b: &Tensor, max_value: f64) -> Result<f64> {
    same_shape("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (max_value * max_value / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Normalised 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Channel mean as an `H×W` plane.
pub fn grayscale(img: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    let (c, h, w) = img.dims3()?;
    let mut g = vec![0.0; h * w];
    for ch in 0..c {
        for (o, v) in g.iter_mut().zip(&img.data()[ch * h * w..(ch + 1) * h * w]) {
            *o += v;
        }
    }
    g.iter_mut().for_each(|v| *v /= c as f64);
    Ok((g, h, w))
}

/// Valid-mode separable filtering of an `h×w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let k = SSIM_WINDOW;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| g[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| g[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean structural similarity of the grayscale images over every window
/// position that fits entirely inside the image.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let (x, h, w) = grayscale(a)?;
    let (y, _, _) = grayscale(b)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim",
            format!("image {h}×{w} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"),
        ));
    }
    let g = gaussian_taps();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter(&x, h, w, &g);
    let my = filter(&y, h, w, &g);
    let mxx = filter(&prod(&x, &x), h, w, &g);
    let myy = filter(&prod(&y, &y), h, w, &g);
    let mxy = filter(&prod(&x, &y), h, w, &g);
    let n = mx.len();
    let s: f64 = (0..n).map(|i| ssim_terms(mx[i], my[i], mxx[i], myy[i], mxy[i])).sum();
    Ok(s / n as f64)
}

/// SSIM of one window from its weighted moments.
pub fn ssim_terms(mx: f64, my: f64, mxx: f64, myy: f64, mxy: f64) -> f64 {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let vx = mxx - mx * mx;
    let vy = myy - my * my;
    let cxy = mxy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}
