//! Training objective: Charbonnier reconstruction, total variation of the
//! offset fields, and an optional feature-space term.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{ForwardVars, Model, TripletSample};
use crate::sparse_opt::{Evaluation, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_vgg: f64,
    pub lambda_tv: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_vgg: 0.005,
            lambda_tv: 0.01,
            epsilon: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_vgg, self.lambda_tv, self.epsilon].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("loss weights", "weights and epsilon must be >= 0"));
        }
        Ok(())
    }
}

/// Mean of `sqrt(d^2 + eps^2)` over all elements.
pub fn charbonnier(tape: &mut Tape, out: Var, gt: Var, eps: f64) -> Result<Var> {
    let d = tape.sub(out, gt)?;
    let rho = rho(tape, d, eps)?;
    tape.mean(rho)
}

fn rho(tape: &mut Tape, d: Var, eps: f64) -> Result<Var> {
    let sq = tape.mul(d, d)?;
    let sq = tape.add_const(sq, eps * eps)?;
    tape.powf(sq, 0.5)
}

/// Total variation of one `[C,H,W]` field: the mean penalty over every
/// horizontal and vertical neighbour pair.
pub fn total_variation(tape: &mut Tape, field: Var, eps: f64) -> Result<Var> {
    let (_, h, w) = tape.value(field).dims3()?;
    let c = tape.value(field).shape()[0];
    let pairs = c * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    if pairs == 0 {
        return Err(Error::invalid("tv_loss", "field has no neighbour pairs"));
    }
    let mut terms = Vec::new();
    for (axis, len) in [(2, w), (1, h)] {
        if len < 2 {
            continue;
        }
        let a = tape.slice(field, axis, 1, len)?;
        let b = tape.slice(field, axis, 0, len - 1)?;
        let d = tape.sub(a, b)?;
        let r = rho(tape, d, eps)?;
        terms.push(tape.sum(r)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.mul_const(total, 1.0 / pairs as f64)
}

/// `tau(alpha1) + tau(alpha2) + tau(beta1) + tau(beta2)`.
pub fn tv(tape: &mut Tape, offsets: [Var; 4], eps: f64) -> Result<Var> {
    let mut acc = total_variation(tape, offsets[0], eps)?;
    for &f in &offsets[1..] {
        let t = total_variation(tape, f, eps)?;
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

/// Value-level Charbonnier loss.
pub fn charbonnier_loss(out: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    crate::tensor::same_shape("charbonnier_loss", out, gt)?;
    let mut tape = Tape::new();
    let a = tape.constant(out.clone())?;
    let b = tape.constant(gt.clone())?;
    let l = charbonnier(&mut tape, a, b, eps)?;
    tape.value(l).item()
}

/// Value-level total-variation loss of the four offset fields.
pub fn tv_loss(alpha1: &Tensor, alpha2: &Tensor, beta1: &Tensor, beta2: &Tensor, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = [alpha1, alpha2, beta1, beta2].map(|t| tape.constant(t.clone()));
    let [a, b, c, d] = vars;
    let l = tv(&mut tape, [a?, b?, c?, d?], eps)?;
    tape.value(l).item()
}

/// Fixed two-layer convolutional feature map used for the feature loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    layers: [(Tensor, Tensor); 2],
}

impl FeatureExtractor {
    /// Seeded random extractor: 3→8→8 channels, 3×3 kernels, ReLU between.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = |cin: usize, cout: usize, rng: &mut ChaCha8Rng| {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            (Tensor::randn([cout, cin, 3, 3], std, rng), Tensor::zeros([cout]))
        };
        let a = conv(3, 8, &mut rng);
        let b = conv(8, 8, &mut rng);
        Self { layers: [a, b] }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w0, b0) = (tape.constant(self.layers[0].0.clone())?, tape.constant(self.layers[0].1.clone())?);
        let (w1, b1) = (tape.constant(self.layers[1].0.clone())?, tape.constant(self.layers[1].1.clone())?);
        let h = tape.conv2d(x, w0, Some(b0), 1, 1)?;
        let h = tape.relu(h)?;
        tape.conv2d(h, w1, Some(b1), 1, 1)
    }
}

/// Optional feature-space loss `||phi(out) - phi(gt)||_2`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureLossPlugin {
    pub extractor: Option<FeatureExtractor>,
    pub enabled: bool,
}

impl FeatureLossPlugin {
    pub fn disabled() -> Self {
        Self::default()
    }

    pub fn random(seed: u64) -> Self {
        Self {
            extractor: Some(FeatureExtractor::random(seed)),
            enabled: true,
        }
    }

    fn term(&self, tape: &mut Tape, out: Var, gt: Var) -> Result<Option<Var>> {
        match (&self.extractor, self.enabled) {
            (Some(phi), true) => {
                let a = phi.apply(tape, out)?;
                let b = phi.apply(tape, gt)?;
                let d = tape.sub(a, b)?;
                Ok(Some(tape.l2_norm(d)?))
            }
            _ => Ok(None),
        }
    }
}

/// `L_charb + lambda_vgg * L_vgg + lambda_tv * L_tv` on the tape.
pub fn total_loss(
    tape: &mut Tape,
    outputs: &ForwardVars,
    gt: Var,
    weights: &LossWeights,
    plugin: &FeatureLossPlugin,
) -> Result<Var> {
    let eps = weights.epsilon;
    let mut loss = charbonnier(tape, outputs.i_final, gt, eps)?;
    if weights.lambda_tv != 0.0 {
        let t = tv(tape, [outputs.fwd[1], outputs.bwd[1], outputs.fwd[2], outputs.bwd[2]], eps)?;
        let t = tape.mul_const(t, weights.lambda_tv)?;
        loss = tape.add(loss, t)?;
    }
    if weights.lambda_vgg != 0.0 {
        if let Some(f) = plugin.term(tape, outputs.i_final, gt)? {
            let f = tape.mul_const(f, weights.lambda_vgg)?;
            loss = tape.add(loss, f)?;
        }
    }
    Ok(loss)
}

/// Mean loss and parameter gradients over a mini-batch.
pub fn loss_and_grads(
    model: &Model,
    batch: &[&TripletSample],
    weights: &LossWeights,
    plugin: &FeatureLossPlugin,
) -> Result<Evaluation> {
    if batch.is_empty() {
        return Err(Error::invalid("loss_and_grads", "empty batch"));
    }
    let mut total = 0.0;
    let mut grads: Option<ParamStore> = None;
    for sample in batch {
        let mut tape = Tape::new();
        let pvars = model.load_params(&mut tape, true)?;
        let i0 = tape.constant(sample.i0.clone())?;
        let i1 = tape.constant(sample.i1.clone())?;
        let gt = tape.constant(sample.gt.clone())?;
        let out = model.forward_on(&mut tape, &pvars, i0, i1, false)?;
        let loss = total_loss(&mut tape, &out, gt, weights, plugin)?;
        total += tape.value(loss).item()?;
        let g = tape.backward(loss)?.into_params(&tape);
        match grads.as_mut() {
            None => grads = Some(g),
            Some(acc) => {
                for (name, t) in acc.iter_mut() {
                    t.axpy(1.0, &g[name]);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = grads.expect("non-empty batch");
    grads.values_mut().for_each(|t| t.scale(1.0 / n));
    Ok(Evaluation { loss: total / n, grads })
}

/// Loss of the model on one sample without gradients.
pub fn eval_loss(model: &Model, sample: &TripletSample, weights: &LossWeights, plugin: &FeatureLossPlugin) -> Result<f64> {
    let mut tape = Tape::new();
    let pvars = model.load_params(&mut tape, false)?;
    let i0 = tape.constant(sample.i0.clone())?;
    let i1 = tape.constant(sample.i1.clone())?;
    let gt = tape.constant(sample.gt.clone())?;
    let out = model.forward_on(&mut tape, &pvars, i0, i1, false)?;
    let loss = total_loss(&mut tape, &out, gt, weights, plugin)?;
    tape.value(loss).item()
}
