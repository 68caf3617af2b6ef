//! Browser bindings for three small demos: an AdaCoF warp explorer, the
//! P/O sparsifier density trajectory, and the channel-count calculator.
//!
//! The exported functions are thin wrappers; the plain-Rust versions below
//! them are what the tests exercise.

use std::collections::BTreeSet;

use sgfi::adacof::{adacof_warp, AdaCofConfig, AdaCofParams};
use sgfi::arch::{baseline_spec, Activation, NodeKind, Role, SpecBuilder, UNetConfig};
use sgfi::compressor::{compress, reshape_layer, DensityProfile, LayerDensity, Strategy};
use sgfi::data::{render, scene_for, GenParams, Split};
use sgfi::metrics::psnr;
use sgfi::sparse_opt::{sparsify, Evaluation, ObproxSchedule, ParamStore, SparsifyProblem};
use sgfi::Tensor;
use wasm_bindgen::prelude::*;

pub const FRAME: usize = 64;

fn scene(seed: u64) -> sgfi::data::Scene {
    let params = GenParams {
        seed,
        size: FRAME,
        ..GenParams::default()
    };
    scene_for(&params, Split::Val, 0)
}

/// Row-major RGBA bytes of a `[3,H,W]` image.
pub fn to_rgba(img: &Tensor) -> Vec<u8> {
    let (_, h, w) = img.dims3().expect("image");
    let mut out = Vec::with_capacity(4 * h * w);
    for p in 0..h * w {
        for c in 0..3 {
            out.push((img.data()[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Same kernel at every pixel: taps weighted by `exp(-sharpness * r^2)`
/// around the centre and shifted by a uniform offset.
pub fn uniform_params(cfg: &AdaCofConfig, dy: f64, dx: f64, sharpness: f64) -> AdaCofParams {
    let (f, taps, hw) = (cfg.kernel_size, cfg.taps(), FRAME * FRAME);
    let c = (f / 2) as f64;
    let raw: Vec<f64> = (0..taps)
        .map(|t| {
            let (k, l) = ((t / f) as f64 - c, (t % f) as f64 - c);
            (-sharpness * (k * k + l * l)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    let mut weights = Vec::with_capacity(taps * hw);
    for v in &raw {
        weights.extend(std::iter::repeat(v / s).take(hw));
    }
    let shape = vec![taps, FRAME, FRAME];
    AdaCofParams {
        weights: Tensor::new(shape.clone(), weights).expect("shape"),
        alpha: Tensor::full(shape.clone(), dy),
        beta: Tensor::full(shape, dx),
    }
}

/// Warp the first frame of scene `seed`; returns the warped frame and its
/// PSNR against the true middle frame.
pub fn warp_first_frame(
    seed: u64,
    kernel: usize,
    dilation: usize,
    dy: f64,
    dx: f64,
    sharpness: f64,
) -> Result<(Tensor, f64), String> {
    let cfg = AdaCofConfig::new(kernel, dilation).map_err(|e| e.to_string())?;
    let s = scene(seed);
    let out = adacof_warp(&render(&s, 0.0), &uniform_params(&cfg, dy, dx, sharpness), &cfg).map_err(|e| e.to_string())?;
    let score = psnr(&out, &render(&s, 0.5), 1.0).map_err(|e| e.to_string())?;
    Ok((out, score))
}

/// Sparse least-squares task: 40 features, 5 of them informative.
struct Regression {
    x: Vec<[f64; 40]>,
    y: Vec<f64>,
}

fn regression(seed: u64) -> Regression {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let truth = [1.5, -2.0, 0.8, 1.1, -0.6];
    let mut x = Vec::with_capacity(200);
    let mut y = Vec::with_capacity(200);
    for _ in 0..200 {
        let mut row = [0.0; 40];
        row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        y.push(truth.iter().zip(&row).map(|(a, b)| a * b).sum::<f64>() + 0.05 * rng.gen_range(-1.0..1.0));
        x.push(row);
    }
    Regression { x, y }
}

/// Density trajectory of the sparsifier on the regression task, as CSV.
pub fn trajectory_csv(lambda: f64, lr: f64, epochs: usize, p_epochs: usize, seed: u64) -> Result<String, String> {
    let task = regression(seed);
    let idx: Vec<usize> = (0..task.y.len()).collect();
    let objective = |p: &ParamStore, batch: &[&usize]| {
        let w = p["w"].data();
        let mut g = vec![0.0; 40];
        let mut loss = 0.0;
        for &&i in batch {
            let r = task.x[i].iter().zip(w).map(|(a, b)| a * b).sum::<f64>() - task.y[i];
            loss += 0.5 * r * r;
            g.iter_mut().zip(&task.x[i]).for_each(|(gi, xi)| *gi += r * xi);
        }
        let n = batch.len() as f64;
        g.iter_mut().for_each(|v| *v /= n);
        Ok(Evaluation {
            loss: loss / n,
            grads: [("w".to_string(), Tensor::from_vec(g))].into(),
        })
    };
    let start: ParamStore = [("w".to_string(), Tensor::full([40], 0.3))].into();
    let reg: BTreeSet<String> = ["w".to_string()].into();
    let mut problem = SparsifyProblem::new(start, reg, lambda, objective).map_err(|e| e.to_string())?;
    let schedule = ObproxSchedule {
        total_epochs: epochs,
        p_step_epochs: p_epochs.min(epochs),
        lr,
        lr_decay: None,
        batch_size: 10,
        seed,
    };
    let traj = sparsify(&mut problem, &schedule, &idx, None).map_err(|e| e.to_string())?;
    Ok(traj.to_csv())
}

/// Shrunk geometry of one convolution plus the whole default U-Net at a
/// uniform density, as JSON.
pub fn channel_report(c_in: usize, c_out: usize, kernel: usize, density: f64) -> Result<String, String> {
    let mut b = SpecBuilder::new();
    b.input("in", c_in);
    b.conv("layer", "in", c_out, kernel, 1, Activation::Relu, Role::Prunable);
    b.pass("out", NodeKind::Sink, "layer");
    let spec = b.finish().map_err(|e| e.to_string())?;
    let node = spec.node("layer").expect("built above");
    let shape = reshape_layer(node, density).map_err(|e| e.to_string())?;

    let unet = baseline_spec(&UNetConfig::default(), &AdaCofConfig::default()).map_err(|e| e.to_string())?;
    let profile = DensityProfile::from_layers(
        unet.learned()
            .map(|n| {
                let k = n.weight_count();
                let zeros = k - ((density * k as f64).round() as usize).min(k);
                LayerDensity::new(&n.id, k, zeros)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?,
    );
    let lo = compress(&unet, &profile, Strategy::Min).map_err(|e| e.to_string())?;
    let hi = compress(&unet, &profile, Strategy::Max).map_err(|e| e.to_string())?;
    let widths = |s: &sgfi::arch::ArchSpec| {
        s.learned()
            .filter(|n| n.id.starts_with("enc") || n.id.starts_with("dec"))
            .map(|n| (n.id.clone(), n.out_channels))
            .collect::<Vec<_>>()
    };
    Ok(serde_json::json!({
        "layer": {
            "in": shape.in_channels,
            "out": shape.out_channels,
            "kernel": shape.kernel,
            "weights_before": node.weight_count(),
            "weights_after": shape.weight_count(),
        },
        "unet": {
            "params": unet.param_count(),
            "min": lo.param_count(),
            "max": hi.param_count(),
            "widths_min": widths(&lo),
            "widths_max": widths(&hi),
        }
    })
    .to_string())
}

#[wasm_bindgen]
pub fn frame_rgba(seed: u64, t: f64) -> Vec<u8> {
    to_rgba(&render(&scene(seed), t))
}

#[wasm_bindgen]
pub fn frame_size() -> usize {
    FRAME
}

/// RGBA of the warped first frame; the PSNR against the middle frame is
/// available from [`warp_psnr`].
#[wasm_bindgen]
pub fn warp_rgba(seed: u64, kernel: usize, dilation: usize, dy: f64, dx: f64, sharpness: f64) -> Result<Vec<u8>, JsError> {
    let (img, _) = warp_first_frame(seed, kernel, dilation, dy, dx, sharpness).map_err(|e| JsError::new(&e))?;
    Ok(to_rgba(&img))
}

#[wasm_bindgen]
pub fn warp_psnr(seed: u64, kernel: usize, dilation: usize, dy: f64, dx: f64, sharpness: f64) -> Result<f64, JsError> {
    let (_, p) = warp_first_frame(seed, kernel, dilation, dy, dx, sharpness).map_err(|e| JsError::new(&e))?;
    Ok(p)
}

#[wasm_bindgen]
pub fn density_trajectory(lambda: f64, lr: f64, epochs: usize, p_epochs: usize, seed: u64) -> Result<String, JsError> {
    trajectory_csv(lambda, lr, epochs, p_epochs, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn channels(c_in: usize, c_out: usize, kernel: usize, density: f64) -> Result<String, JsError> {
    channel_report(c_in, c_out, kernel, density).map_err(|e| JsError::new(&e))
}
