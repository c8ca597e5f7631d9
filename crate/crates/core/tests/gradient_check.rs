//! Central finite differences against the hand-written backward pass.

use cirnn::data::{Sequence, Split};
use cirnn::init::{init_model, InitConfig, InitScheme};
use cirnn::models::{Activation, LayerDims, ModelKind};
use cirnn::training::{objective_and_gradient, BatchItem, Packing, TrainModel};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-4;

fn random_sequence(rng: &mut ChaCha8Rng, horizon: usize, n_u: usize, n_y: usize) -> Sequence {
    Sequence {
        name: "fd".into(),
        inputs: (0..horizon).map(|_| DVector::from_fn(n_u, |_, _| rng.random_range(-1.0..1.0))).collect(),
        outputs: (0..horizon).map(|_| DVector::from_fn(n_y, |_, _| rng.random_range(-1.0..1.0))).collect(),
        split: Split::Train,
    }
}

/// A model with every trainable entry jittered so the penalty is active.
fn jittered(kind: ModelKind, act: Activation, layers: usize, seed: u64) -> TrainModel {
    let dims = LayerDims { n_x: 3, n_u: 2, n_y: 2, widths: vec![3; layers + 1] };
    let scheme = match kind {
        ModelKind::CiRnn => InitScheme::Projected,
        ModelKind::SRnn => InitScheme::Clipped,
        _ => InitScheme::Sampled,
    };
    let bundle = init_model(kind, scheme, &InitConfig::new(dims, 0.7, seed)).unwrap();
    let mut m = TrainModel::from_bundle(&bundle, act, 0.97, EPS, 2).unwrap();
    let packing = Packing::new(&m);
    let mut theta = packing.pack(&m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    theta.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    packing.unpack_into(&theta, &mut m);
    for p in &mut m.p {
        p.iter_mut().for_each(|v| *v = v.abs() + 0.5);
    }
    m
}

fn check(m: &TrainModel, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s0 = random_sequence(&mut rng, 7, 2, 2);
    let s1 = random_sequence(&mut rng, 7, 2, 2);
    let batch = [BatchItem { seq: &s0, x0: Some(1) }, BatchItem { seq: &s1, x0: None }];
    let mu = 3.0;
    let packing = Packing::new(m);
    let eval = objective_and_gradient(m, &batch, mu, EPS).unwrap();
    if m.kind != ModelKind::Rnn && m.kind != ModelKind::Implicit {
        assert!(eval.penalty > 0.0, "penalty should be active");
    }
    let theta = packing.pack(m);
    let mut probe = m.clone();
    let mut f = |t: &[f64]| {
        packing.unpack_into(t, &mut probe);
        objective_and_gradient(&probe, &batch, mu, EPS).unwrap().objective
    };
    for (slot, range) in &packing.slots {
        let mut diff2 = 0.0;
        let mut norm2 = 0.0;
        for i in range.clone() {
            let h = 1e-6 * theta[i].abs().max(1.0);
            let mut t = theta.clone();
            t[i] += h;
            let up = f(&t);
            t[i] -= 2.0 * h;
            let down = f(&t);
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - eval.grad[i]).powi(2);
            norm2 += eval.grad[i].powi(2);
        }
        let (diff, norm) = (diff2.sqrt(), norm2.sqrt());
        assert!(diff <= 1e-5 * norm + 1e-7, "{:?} {slot}: |fd - g| = {diff:e}, |g| = {norm:e}", m.kind);
    }
}

#[test]
fn every_model_kind_matches_finite_differences() {
    for kind in [ModelKind::Rnn, ModelKind::SRnn, ModelKind::CiRnn, ModelKind::Implicit] {
        for layers in [1, 2] {
            check(&jittered(kind, Activation::Tanh, layers, 11 + layers as u64), 5);
        }
    }
}

#[test]
fn unused_initial_state_has_zero_gradient() {
    let m = jittered(ModelKind::CiRnn, Activation::Tanh, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_sequence(&mut rng, 5, 2, 2);
    let eval = objective_and_gradient(&m, &[BatchItem { seq: &s, x0: Some(1) }], 1.0, EPS).unwrap();
    let packing = Packing::new(&m);
    let r = packing.range(cirnn::training::Slot::X0(0)).unwrap();
    assert!(eval.grad[r].iter().all(|g| *g == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gradient_matches_on_random_models(seed in 0u64..10_000, kind_ix in 0usize..4, linear in any::<bool>()) {
        let kind = [ModelKind::Rnn, ModelKind::SRnn, ModelKind::CiRnn, ModelKind::Implicit][kind_ix];
        let act = if linear { Activation::Identity } else { Activation::Tanh };
        check(&jittered(kind, act, 2, seed), seed + 1);
    }
}
