#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sgfi::autodiff::Tape;
use sgfi::sparse_opt::{sparsify, DensityTrajectory, Evaluation, ObproxSchedule, ParamStore, SparsifyProblem};
use sgfi::{Result, Tensor};

/// Regression target that depends on only two of the eight inputs.
pub struct Point {
    pub x: Tensor,
    pub y: f64,
}

pub fn toy_points(n: usize, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let x = Tensor::uniform([8, 1], -1.0, 1.0, &mut rng);
            let y = (1.5 * x.data()[0]).tanh() - 0.8 * x.data()[3] + 0.05 * rng.gen_range(-1.0..1.0);
            Point { x, y }
        })
        .collect()
}

pub fn toy_params(seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    p.insert("l1.weight".into(), Tensor::uniform([16, 8], -0.5, 0.5, &mut rng));
    p.insert("l1.bias".into(), Tensor::zeros([16, 1]));
    p.insert("l2.weight".into(), Tensor::uniform([1, 16], -0.5, 0.5, &mut rng));
    p.insert("l2.bias".into(), Tensor::zeros([1, 1]));
    p
}

/// Mean squared error of an 8-16-1 tanh network and its gradients.
pub fn toy_objective(params: &ParamStore, batch: &[&Point]) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let v: Vec<_> = ["l1.weight", "l1.bias", "l2.weight", "l2.bias"]
        .iter()
        .map(|k| tape.param(*k, params[*k].clone()))
        .collect::<Result<_>>()?;
    let mut total = None;
    for p in batch {
        let x = tape.constant(p.x.clone())?;
        let h = tape.matmul(v[0], x)?;
        let h = tape.add(h, v[1])?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(v[2], h)?;
        let o = tape.add(o, v[3])?;
        let o = tape.add_const(o, -p.y)?;
        let sq = tape.mul(o, o)?;
        let sq = tape.sum(sq)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    let loss = tape.mul_const(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?.into_params(&tape);
    Ok(Evaluation { loss: value, grads })
}

pub fn toy_run(lambda: f64, lr: f64, epochs: usize, p_epochs: usize) -> DensityTrajectory {
    toy_run_seeded(lambda, lr, epochs, p_epochs, 8, 0)
}

pub fn toy_run_seeded(lambda: f64, lr: f64, epochs: usize, p_epochs: usize, batch_size: usize, seed: u64) -> DensityTrajectory {
    let data = toy_points(64, seed);
    let regularized: BTreeSet<String> = ["l1.weight".to_string(), "l2.weight".to_string()].into();
    let mut problem = SparsifyProblem::new(toy_params(seed + 1), regularized, lambda, toy_objective).unwrap();
    let schedule = ObproxSchedule {
        total_epochs: epochs,
        p_step_epochs: p_epochs,
        lr,
        lr_decay: None,
        batch_size,
        seed: seed + 2,
    };
    sparsify(&mut problem, &schedule, &data, None).unwrap()
}

pub fn densities(t: &DensityTrajectory) -> Vec<f64> {
    t.records().iter().map(|r| r.density).collect()
}
