//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adacof::AdaCofConfig;
use crate::arch::{baseline_spec, EnhanceConfig, UNetConfig};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{loss_and_grads, FeatureLossPlugin, LossWeights};
use crate::model::{Model, TripletSample};
use crate::sparse_opt::ParamStore;
use crate::tensor::Tensor;

/// Compare the analytic gradient returned by `f` with central differences.
///
/// `f` maps a point to `(value, gradient)`. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(mut f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite_diff_check", "step must be positive"));
    }
    let (v1, analytic) = f(point)?;
    let (v2, analytic2) = f(point)?;
    if v1.to_bits() != v2.to_bits() || analytic != analytic2 {
        return Err(Error::invalid(
            "finite_diff_check",
            "function is not deterministic across probe calls",
        ));
    }
    if analytic.shape() != point.shape() {
        return Err(Error::ShapeMismatch {
            op: "finite_diff_check",
            lhs: point.shape().to_vec(),
            rhs: analytic.shape().to_vec(),
        });
    }
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for k in 0..point.numel() {
        let x0 = point.data()[k];
        probe.data_mut()[k] = x0 + h;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[k] = x0 - h;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[k] = x0;
        let numeric = (fp - fm) / (2.0 * h);
        let err = (analytic.data()[k] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Gradient check for a scalar function recorded on a fresh tape.
///
/// `build` receives the tape and the leaf holding the probe point.
pub fn check_tape_fn<B>(build: B, point: &Tensor, h: f64) -> Result<f64>
where
    B: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check(
        |p| {
            let mut tape = Tape::new();
            let x = tape.param("x", p.clone())?;
            let y = build(&mut tape, x)?;
            let value = tape.value(y).item()?;
            let mut grads = tape.backward(y)?.into_params(&tape);
            let g = grads.remove("x").expect("registered");
            Ok((value, g))
        },
        point,
        h,
    )
}

/// Flatten named tensors into one vector, in map order.
pub fn flatten(params: &ParamStore) -> Tensor {
    Tensor::from_vec(params.values().flat_map(|t| t.data().iter().copied()).collect())
}

/// Inverse of [`flatten`] using `like` for names and shapes.
pub fn unflatten(flat: &Tensor, like: &ParamStore) -> ParamStore {
    let mut pos = 0;
    like.iter()
        .map(|(k, t)| {
            let n = t.numel();
            let data = flat.data()[pos..pos + n].to_vec();
            pos += n;
            (k.clone(), Tensor::new(t.shape().to_vec(), data).expect("same size"))
        })
        .collect()
}

/// Tiny enhanced model on 8×8 frames used for end-to-end checks.
pub fn tiny_model(seed: u64) -> Result<(Model, TripletSample)> {
    let cfg = AdaCofConfig::default();
    let spec = baseline_spec(
        &UNetConfig {
            widths: vec![2, 3],
            head_width: 2,
        },
        &cfg,
    )?;
    let base = Model::init(spec, cfg, seed)?;
    let enhance = EnhanceConfig {
        pyramid_widths: vec![2, 2],
        grid_rows: 2,
        grid_cols: 2,
        grid_widths: vec![2, 2],
        head_width: 2,
        ..EnhanceConfig::default()
    };
    let mut model = base.enhance(&enhance, seed + 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    // offsets of a few pixels so the warp samples between grid points
    for (name, t) in model.params.iter_mut() {
        if name.ends_with(".bias") {
            *t = Tensor::uniform(t.shape().to_vec(), -0.3, 0.3, &mut rng);
        }
    }
    let frame = |rng: &mut ChaCha8Rng| Tensor::uniform([3, 8, 8], 0.0, 1.0, rng);
    let sample = TripletSample::new(frame(&mut rng), frame(&mut rng), frame(&mut rng))?;
    Ok((model, sample))
}

/// Largest relative error between the analytic gradient of the full
/// training loss and central differences, over every model parameter.
pub fn model_gradcheck(seed: u64, h: f64) -> Result<f64> {
    let (model, sample) = tiny_model(seed)?;
    let weights = LossWeights::default();
    let plugin = FeatureLossPlugin::random(seed);
    let point = flatten(&model.params);
    finite_diff_check(
        |p| {
            let mut m = model.clone();
            m.params = unflatten(p, &model.params);
            let ev = loss_and_grads(&m, &[&sample], &weights, &plugin)?;
            Ok((ev.loss, flatten(&ev.grads)))
        },
        &point,
        h,
    )
}
