//! AdaMax for plain training and an orthant-based proximal stochastic
//! method for l1-regularised sparsification.
//!
//! The sparsifier alternates two kinds of updates on the regularised
//! tensors:
//!
//! - **P-step**: a stochastic gradient step on the smooth loss followed by
//!   soft-thresholding with threshold `lr * lambda`.
//! - **O-step**: zeros stay frozen; every other coordinate moves along the
//!   pseudo-gradient `grad + lambda * sign(theta)` and is projected to zero
//!   if it would leave its orthant.
//!
//! Unregularised tensors (biases) take plain SGD steps in both phases.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors (also used for named gradients).
pub type ParamStore = BTreeMap<String, Tensor>;

#[inline]
pub fn soft_threshold(z: f64, tau: f64) -> f64 {
    if z > tau {
        z - tau
    } else if z < -tau {
        z + tau
    } else {
        0.0
    }
}

/// Proximal map of `tau * ||.||_1`.
pub fn prox_l1(z: &Tensor, tau: f64) -> Result<Tensor> {
    if !(tau >= 0.0) {
        return Err(Error::invalid("prox_l1", format!("threshold must be >= 0, got {tau}")));
    }
    Ok(z.map(|v| soft_threshold(v, tau)))
}

/// Fraction of nonzero entries over the named tensors (exact zero test).
pub fn global_density<'a>(params: &ParamStore, names: impl IntoIterator<Item = &'a String>) -> f64 {
    let (mut nonzero, mut total) = (0usize, 0usize);
    for name in names {
        if let Some(t) = params.get(name) {
            total += t.numel();
            nonzero += t.numel() - t.count_zeros();
        }
    }
    if total == 0 {
        1.0
    } else {
        nonzero as f64 / total as f64
    }
}

fn grads_finite(grads: &ParamStore) -> bool {
    grads.values().all(Tensor::is_finite)
}

fn grad_for<'a>(grads: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    grads
        .get(name)
        .ok_or_else(|| Error::invalid("optimizer", format!("missing gradient for {name}")))
}

/// In-place P-step over all parameters.
pub fn apply_p_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    regularized: &BTreeSet<String>,
    lr: f64,
    lambda: f64,
) -> Result<()> {
    let tau = lr * lambda;
    for (name, theta) in params.iter_mut() {
        let g = grad_for(grads, name)?;
        let reg = regularized.contains(name);
        for (t, &gi) in theta.data_mut().iter_mut().zip(g.data()) {
            let z = *t - lr * gi;
            *t = if reg { soft_threshold(z, tau) } else { z };
        }
    }
    Ok(())
}

/// In-place O-step over all parameters.
pub fn apply_o_step(
    params: &mut ParamStore,
    grads: &ParamStore,
    regularized: &BTreeSet<String>,
    lr: f64,
    lambda: f64,
) -> Result<()> {
    for (name, theta) in params.iter_mut() {
        let g = grad_for(grads, name)?;
        let reg = regularized.contains(name);
        for (t, &gi) in theta.data_mut().iter_mut().zip(g.data()) {
            if !reg {
                *t -= lr * gi;
                continue;
            }
            if *t == 0.0 {
                continue;
            }
            let sign = t.signum();
            let trial = *t - lr * (gi + lambda * sign);
            *t = if trial.signum() == sign && trial != 0.0 { trial } else { 0.0 };
        }
    }
    Ok(())
}

/// Loss value and gradients of the smooth objective on one mini-batch.
pub struct Evaluation {
    pub loss: f64,
    pub grads: ParamStore,
}

/// The l1-regularised training problem `min f(theta) + lambda * ||theta||_1`.
///
/// Only the tensors named in `regularized` carry the l1 term.
pub struct SparsifyProblem<F> {
    pub params: ParamStore,
    pub regularized: BTreeSet<String>,
    pub lambda: f64,
    pub objective: F,
}

/// Result of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// False when the gradient was non-finite and the update was skipped.
    pub accepted: bool,
}

impl<F> SparsifyProblem<F> {
    pub fn new(params: ParamStore, regularized: BTreeSet<String>, lambda: f64, objective: F) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::invalid("sparsify", format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(Self {
            params,
            regularized,
            lambda,
            objective,
        })
    }

    pub fn density(&self) -> f64 {
        global_density(&self.params, &self.regularized)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepKind {
    Proximal,
    Orthant,
}

impl<F> SparsifyProblem<F> {
    fn evaluate<S>(&mut self, batch: &[&S]) -> Result<Option<Evaluation>>
    where
        F: FnMut(&ParamStore, &[&S]) -> Result<Evaluation>,
    {
        match (self.objective)(&self.params, batch) {
            Ok(ev) if ev.loss.is_finite() && grads_finite(&ev.grads) => Ok(Some(ev)),
            Ok(_) | Err(Error::NonFinite { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn step<S>(&mut self, kind: StepKind, batch: &[&S], lr: f64) -> Result<StepOutcome>
    where
        F: FnMut(&ParamStore, &[&S]) -> Result<Evaluation>,
    {
        if !(lr > 0.0) {
            return Err(Error::invalid("sparsify step", format!("lr must be > 0, got {lr}")));
        }
        let Some(ev) = self.evaluate(batch)? else {
            return Ok(StepOutcome {
                loss: f64::NAN,
                accepted: false,
            });
        };
        match kind {
            StepKind::Proximal => apply_p_step(&mut self.params, &ev.grads, &self.regularized, lr, self.lambda)?,
            StepKind::Orthant => apply_o_step(&mut self.params, &ev.grads, &self.regularized, lr, self.lambda)?,
        }
        Ok(StepOutcome {
            loss: ev.loss,
            accepted: true,
        })
    }

    pub fn p_step<S>(&mut self, batch: &[&S], lr: f64) -> Result<StepOutcome>
    where
        F: FnMut(&ParamStore, &[&S]) -> Result<Evaluation>,
    {
        self.step(StepKind::Proximal, batch, lr)
    }

    pub fn o_step<S>(&mut self, batch: &[&S], lr: f64) -> Result<StepOutcome>
    where
        F: FnMut(&ParamStore, &[&S]) -> Result<Evaluation>,
    {
        self.step(StepKind::Orthant, batch, lr)
    }
}

/// Epoch plan: `p_step_epochs` of P-steps, then O-steps to `total_epochs`.
#[derive(Clone, Debug, PartialEq)]
pub struct ObproxSchedule {
    pub total_epochs: usize,
    pub p_step_epochs: usize,
    pub lr: f64,
    /// Halve the learning rate every this many epochs.
    pub lr_decay: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl ObproxSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.p_step_epochs > self.total_epochs {
            return Err(Error::invalid(
                "schedule",
                format!(
                    "p_step_epochs {} exceeds total_epochs {}",
                    self.p_step_epochs, self.total_epochs
                ),
            ));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.lr_decay == Some(0) {
            return Err(Error::invalid("schedule", "lr, batch size and decay period must be positive"));
        }
        Ok(())
    }

    pub fn kind_for_epoch(&self, epoch: usize) -> StepKind {
        if epoch < self.p_step_epochs {
            StepKind::Proximal
        } else {
            StepKind::Orthant
        }
    }

    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(period) => lr_schedule(self.lr, epoch, period),
            None => self.lr,
        }
    }
}

/// `initial_lr * 0.5^floor(epoch / halve_every)`.
pub fn lr_schedule(initial_lr: f64, epoch: usize, halve_every: usize) -> f64 {
    assert!(halve_every > 0, "halve_every must be positive");
    initial_lr * 0.5f64.powi((epoch / halve_every) as i32)
}

/// Seeded shuffled mini-batches of indices for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub density: f64,
    pub loss: f64,
    pub psnr: Option<f64>,
    /// Mini-batches skipped because of non-finite gradients.
    pub flagged_batches: usize,
}

/// Per-epoch density/loss log of a sparsification run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensityTrajectory {
    records: Vec<EpochRecord>,
}

impl DensityTrajectory {
    pub fn push(&mut self, record: EpochRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.epoch <= last.epoch {
                return Err(Error::invalid(
                    "trajectory",
                    format!("epoch {} does not follow {}", record.epoch, last.epoch),
                ));
            }
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn last_density(&self) -> Option<f64> {
        self.records.last().map(|r| r.density)
    }

    /// CSV with header `epoch,density,loss,psnr`; empty `psnr` when absent.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,density,loss,psnr\n");
        for r in &self.records {
            let psnr = r.psnr.map(format_g6).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", r.epoch, format_g6(r.density), format_g6(r.loss), psnr);
        }
        s
    }
}

/// Format with six significant digits, `%.6g` style.
pub fn format_g6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let mant = trim_zeros(mant);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mant}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// Run the sparsifier over `dataset` according to `schedule`.
///
/// `validate`, when given, is called after every epoch and its value is
/// logged in the `psnr` column.
pub fn sparsify<S, F>(
    problem: &mut SparsifyProblem<F>,
    schedule: &ObproxSchedule,
    dataset: &[S],
    mut validate: Option<&mut dyn FnMut(&ParamStore) -> Result<f64>>,
) -> Result<DensityTrajectory>
where
    F: FnMut(&ParamStore, &[&S]) -> Result<Evaluation>,
{
    schedule.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("sparsify", "dataset is empty"));
    }
    let mut traj = DensityTrajectory::default();
    for epoch in 0..schedule.total_epochs {
        let kind = schedule.kind_for_epoch(epoch);
        let lr = schedule.lr_for_epoch(epoch);
        let mut loss_sum = 0.0;
        let mut accepted = 0usize;
        let mut flagged = 0usize;
        for batch in epoch_batches(dataset.len(), schedule.batch_size, schedule.seed, epoch) {
            let items: Vec<&S> = batch.iter().map(|&i| &dataset[i]).collect();
            let out = problem.step(kind, &items, lr)?;
            if out.accepted {
                loss_sum += out.loss;
                accepted += 1;
            } else {
                flagged += 1;
            }
        }
        let psnr = match validate.as_mut() {
            Some(v) => Some(v(&problem.params)?),
            None => None,
        };
        traj.push(EpochRecord {
            epoch: epoch + 1,
            density: problem.density(),
            loss: if accepted > 0 { loss_sum / accepted as f64 } else { f64::NAN },
            psnr,
            flagged_batches: flagged,
        })?;
    }
    Ok(traj)
}

/// AdaMax optimizer state.
#[derive(Clone, Debug)]
pub struct AdaMax {
    pub beta1: f64,
    pub beta2: f64,
    pub step: u64,
    m: ParamStore,
    u: ParamStore,
}

/// Denominator guard for the infinity-norm accumulator.
pub const ADAMAX_EPS: f64 = 1e-12;

impl Default for AdaMax {
    fn default() -> Self {
        Self::new(0.9, 0.999).expect("valid decay rates")
    }
}

impl AdaMax {
    pub fn new(beta1: f64, beta2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::invalid("adamax", "decay rates must lie in [0, 1)"));
        }
        Ok(Self {
            beta1,
            beta2,
            step: 0,
            m: ParamStore::new(),
            u: ParamStore::new(),
        })
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn infinity_norm(&self, name: &str) -> Option<&Tensor> {
        self.u.get(name)
    }

    /// One update of every parameter that has a gradient in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::invalid("adamax", format!("lr must be > 0, got {lr}")));
        }
        self.step += 1;
        let step_size = lr / (1.0 - self.beta1.powi(self.step as i32));
        for (name, theta) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            crate::tensor::same_shape("adamax", theta, g)?;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            let u = self
                .u
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(theta.shape().to_vec()));
            for (((t, &gi), mi), ui) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(u.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *ui = (self.beta2 * *ui).max(gi.abs());
                *t -= step_size * *mi / ui.max(ADAMAX_EPS);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdaMax::update`].
pub fn adamax_step(state: &mut AdaMax, params: &mut ParamStore, grads: &ParamStore, lr: f64) -> Result<()> {
    state.update(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamStore {
        ParamStore::from([(name.to_string(), Tensor::scalar(v))])
    }

    fn reg(name: &str) -> BTreeSet<String> {
        BTreeSet::from([name.to_string()])
    }

    #[test]
    fn prox_examples() {
        let z = Tensor::from_vec(vec![0.5, -0.05, 0.0]);
        let p = prox_l1(&z, 0.1).unwrap();
        assert!((p.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(p.data()[1], 0.0);
        assert_eq!(p.data()[2], 0.0);
        assert!(prox_l1(&z, -1.0).is_err());
    }

    #[test]
    fn p_step_examples() {
        let mut p = single("w", 0.5);
        apply_p_step(&mut p, &single("w", 0.0), &reg("w"), 0.1, 1.0).unwrap();
        assert!((p["w"].data()[0] - 0.4).abs() < 1e-15);

        let mut p = single("w", 1.0);
        apply_p_step(&mut p, &single("w", 2.0), &reg("w"), 0.1, 0.0).unwrap();
        assert!((p["w"].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn o_step_examples() {
        let mut p = single("w", 0.0);
        apply_o_step(&mut p, &single("w", 5.0), &reg("w"), 0.2, 1.0).unwrap();
        assert_eq!(p["w"].data()[0], 0.0);

        let mut p = single("w", 0.1);
        apply_o_step(&mut p, &single("w", 0.0), &reg("w"), 0.2, 1.0).unwrap();
        assert_eq!(p["w"].data()[0], 0.0);

        let mut p = single("w", 1.0);
        apply_o_step(&mut p, &single("w", 0.0), &reg("w"), 0.2, 0.5).unwrap();
        assert!((p["w"].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn unregularized_tensors_take_sgd_steps() {
        let mut p = single("b", 0.0);
        apply_o_step(&mut p, &single("b", 1.0), &BTreeSet::new(), 0.5, 1.0).unwrap();
        assert_eq!(p["b"].data()[0], -0.5);
    }

    #[test]
    fn lr_schedule_examples() {
        assert_eq!(lr_schedule(0.001, 0, 20), 0.001);
        assert_eq!(lr_schedule(0.001, 20, 20), 0.0005);
        assert_eq!(lr_schedule(0.001, 45, 20), 0.00025);
    }

    #[test]
    fn adamax_first_step() {
        let mut opt = AdaMax::default();
        let mut p = single("w", 0.0);
        opt.update(&mut p, &single("w", 1.0), 0.001).unwrap();
        assert!((opt.first_moment("w").unwrap().data()[0] - 0.1).abs() < 1e-15);
        assert_eq!(opt.infinity_norm("w").unwrap().data()[0], 1.0);
        assert!((p["w"].data()[0].abs() - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adamax_zero_gradient_is_noop() {
        let mut opt = AdaMax::default();
        let mut p = single("w", 0.3);
        opt.update(&mut p, &single("w", 0.0), 0.01).unwrap();
        assert_eq!(p["w"].data()[0], 0.3);
    }

    #[test]
    fn adamax_quadratic_bowl() {
        let mut opt = AdaMax::default();
        let mut p = single("w", 1.0);
        for _ in 0..500 {
            let g = single("w", 2.0 * p["w"].data()[0]);
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!(p["w"].data()[0].abs() < 1e-2, "{}", p["w"].data()[0]);
    }

    #[test]
    fn schedule_validation() {
        let s = ObproxSchedule {
            total_epochs: 2,
            p_step_epochs: 3,
            lr: 0.1,
            lr_decay: None,
            batch_size: 1,
            seed: 0,
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn trajectory_rejects_non_increasing_epochs() {
        let mut t = DensityTrajectory::default();
        let rec = |e| EpochRecord {
            epoch: e,
            density: 0.5,
            loss: 0.1,
            psnr: None,
            flagged_batches: 0,
        };
        t.push(rec(1)).unwrap();
        assert!(t.push(rec(1)).is_err());
    }

    #[test]
    fn g6_format() {
        assert_eq!(format_g6(0.5), "0.5");
        assert_eq!(format_g6(0.123456789), "0.123457");
        assert_eq!(format_g6(30.0), "30");
        assert_eq!(format_g6(1234567.0), "1.23457e+06");
        assert_eq!(format_g6(0.00001234), "1.234e-05");
        assert_eq!(format_g6(1.0), "1");
        assert_eq!(format_g6(-2.5), "-2.5");
    }

    #[test]
    fn csv_layout() {
        let mut t = DensityTrajectory::default();
        t.push(EpochRecord {
            epoch: 1,
            density: 0.75,
            loss: 0.0123,
            psnr: Some(31.5),
            flagged_batches: 0,
        })
        .unwrap();
        t.push(EpochRecord {
            epoch: 2,
            density: 0.5,
            loss: 0.01,
            psnr: None,
            flagged_batches: 0,
        })
        .unwrap();
        assert_eq!(t.to_csv(), "epoch,density,loss,psnr\n1,0.75,0.0123,31.5\n2,0.5,0.01,\n");
    }
}
