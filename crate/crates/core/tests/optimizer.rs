mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use sgfi::sparse_opt::{
    apply_o_step, epoch_batches, prox_l1, soft_threshold, AdaMax, Evaluation, ParamStore, SparsifyProblem,
};
use sgfi::Tensor;

fn store(name: &str, t: Tensor) -> ParamStore {
    [(name.to_string(), t)].into()
}

#[test]
fn lasso_p_steps_reach_the_shrunk_minimiser() {
    let reg: BTreeSet<String> = ["t".to_string()].into();
    let objective = |p: &ParamStore, _: &[&()]| {
        let t = p["t"].data()[0];
        Ok(Evaluation {
            loss: 0.5 * (t - 1.0) * (t - 1.0),
            grads: store("t", Tensor::from_vec(vec![t - 1.0])),
        })
    };
    let mut prob = SparsifyProblem::new(store("t", Tensor::from_vec(vec![-2.0])), reg, 0.3, objective).unwrap();
    for _ in 0..200 {
        prob.p_step(&[&()], 0.1).unwrap();
    }
    assert!((prob.params["t"].data()[0] - 0.7).abs() < 1e-3);
}

#[test]
fn adamax_first_step_is_lr() {
    let mut p = store("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let g = store("w", Tensor::from_vec(vec![0.3, -7.0, 1e-4]));
    let before = p["w"].clone();
    AdaMax::default().update(&mut p, &g, 0.002).unwrap();
    for ((a, b), gi) in p["w"].data().iter().zip(before.data()).zip(g["w"].data()) {
        assert!(((b - a) - 0.002 * gi.signum()).abs() < 1e-15);
    }
}

#[test]
fn batches_cover_every_index_once() {
    let b = epoch_batches(23, 4, 5, 2);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..23).collect::<Vec<_>>());
    assert_eq!(b, epoch_batches(23, 4, 5, 2));
    assert_ne!(b, epoch_batches(23, 4, 5, 3));
}

#[test]
fn larger_lambda_is_never_denser() {
    let weak = common::densities(&common::toy_run(1e-4, 0.3, 100, 50));
    let strong = common::densities(&common::toy_run(1e-3, 0.3, 100, 50));
    for (e, (s, w)) in strong.iter().zip(&weak).enumerate() {
        assert!(s <= w, "epoch {}: {s} > {w}", e + 1);
    }
    assert!(strong.last().unwrap() < &0.7);
}

#[test]
fn orthant_steps_sparsify_more_than_proximal() {
    let all_p = common::toy_run(1e-3, 0.3, 100, 100).last_density().unwrap();
    let half = common::toy_run(1e-3, 0.3, 100, 50).last_density().unwrap();
    assert!(all_p > half, "all-P {all_p} vs half {half}");
}

proptest! {
    #[test]
    fn soft_threshold_matches_closed_form(z in -10.0f64..10.0, tau in 0.0f64..5.0) {
        let s = soft_threshold(z, tau);
        let expect = z.signum() * (z.abs() - tau).max(0.0);
        prop_assert_eq!(s, if expect == 0.0 { 0.0 } else { expect });
    }

    #[test]
    fn prox_is_non_expansive(
        a in prop::collection::vec(-5.0f64..5.0, 12),
        b in prop::collection::vec(-5.0f64..5.0, 12),
        tau in 0.0f64..3.0,
    ) {
        let (ta, tb) = (Tensor::from_vec(a), Tensor::from_vec(b));
        let (pa, pb) = (prox_l1(&ta, tau).unwrap(), prox_l1(&tb, tau).unwrap());
        let d = |x: &Tensor, y: &Tensor| x.data().iter().zip(y.data()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>();
        prop_assert!(d(&pa, &pb) <= d(&ta, &tb) + 1e-12);
    }

    #[test]
    fn orthant_step_never_flips_a_sign(
        theta in prop::collection::vec(prop_oneof![Just(0.0f64), -2.0f64..2.0], 16),
        g in prop::collection::vec(-20.0f64..20.0, 16),
        lr in 0.001f64..0.5,
        lambda in 0.0f64..1.0,
    ) {
        let reg: BTreeSet<String> = ["w".to_string()].into();
        let mut p = store("w", Tensor::from_vec(theta.clone()));
        apply_o_step(&mut p, &store("w", Tensor::from_vec(g)), &reg, lr, lambda).unwrap();
        for (new, old) in p["w"].data().iter().zip(&theta) {
            prop_assert!(new * old >= 0.0);
            if *old == 0.0 {
                prop_assert_eq!(*new, 0.0);
            }
        }
    }
}

