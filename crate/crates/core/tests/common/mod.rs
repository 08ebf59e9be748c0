//! Shared finite-difference oracle for gradient checks. Central differences
//! (h = 1e-5, f64) against the forward path only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec_core::model::{
    bind_encoder, bind_projector, encoder_forward, projector_forward, EncoderParams, ModelConfig,
    ProjectorParams,
};
use twinspec_core::objective::{barlow_loss, cross_correlation};
use twinspec_core::tensor::{Array, BnRunning, Graph, Mode, Tensor};

pub const H: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Central-difference gradient of `f` w.r.t. every element of every leaf.
pub fn numerical_grad(f: &mut dyn FnMut(&[Array]) -> f64, leaves: &[Array]) -> Vec<Array> {
    let mut grads = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut grad = vec![0.0; leaves[li].numel()];
        for ei in 0..leaves[li].numel() {
            let mut plus = leaves.to_vec();
            plus[li].data_mut()[ei] += H;
            let fp = f(&plus);
            let mut minus = leaves.to_vec();
            minus[li].data_mut()[ei] -= H;
            let fm = f(&minus);
            grad[ei] = (fp - fm) / (2.0 * H);
        }
        grads.push(Array::from_vec(leaves[li].shape(), grad).unwrap());
    }
    grads
}

pub fn assert_close(analytic: &Array, numeric: &Array, what: &str) {
    assert_eq!(analytic.shape(), numeric.shape(), "{what}: shape");
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-2);
        let rel = (a - n).abs() / denom;
        assert!(
            rel < REL_TOL,
            "{what}[{i}]: analytic {a} vs numeric {n} (rel {rel:.2e})"
        );
    }
}

pub fn random_array(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Array {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Array::from_vec(shape, data).unwrap()
}

/// Check one op: `build` maps graph leaves to the op output; the loss is a
/// fixed random projection of the output so every element matters.
pub fn check_op(
    name: &str,
    leaves: &[Array],
    build: &mut dyn FnMut(&mut Graph, &[Tensor]) -> Tensor,
    seed: u64,
) {
    let coeff = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0FFEE);
        let mut g = Graph::new();
        let ts: Vec<Tensor> = leaves
            .iter()
            .map(|l| g.leaf(l.clone(), false).unwrap())
            .collect();
        let out = build(&mut g, &ts);
        random_array(g.shape(out), -1.0, 1.0, &mut rng)
    };

    let mut eval = |arrays: &[Array]| -> f64 {
        let mut g = Graph::new();
        let ts: Vec<Tensor> = arrays
            .iter()
            .map(|l| g.leaf(l.clone(), false).unwrap())
            .collect();
        let out = build(&mut g, &ts);
        let c = g.leaf(coeff.clone(), false).unwrap();
        let prod = g.mul(out, c).unwrap();
        let loss = g.sum_all(prod).unwrap();
        g.value(loss).scalar_value()
    };
    let numeric = numerical_grad(&mut eval, leaves);

    let mut g = Graph::new();
    let ts: Vec<Tensor> = leaves
        .iter()
        .map(|l| g.leaf(l.clone(), true).unwrap())
        .collect();
    let out = build(&mut g, &ts);
    let c = g.leaf(coeff, false).unwrap();
    let prod = g.mul(out, c).unwrap();
    let loss = g.sum_all(prod).unwrap();
    g.backward(loss).unwrap();
    for (i, t) in ts.iter().enumerate() {
        let analytic = g
            .grad(*t)
            .unwrap_or_else(|| panic!("{name}: missing grad {i}"));
        assert_close(analytic, &numeric[i], &format!("{name} leaf {i}"));
    }
}

// ── named per-op checks ─────────────────────────────────────────────

pub fn check_conv2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random_array(&[2, 2, 4, 6], -1.0, 1.0, &mut rng);
    let w = random_array(&[3, 2, 3, 3], -0.5, 0.5, &mut rng);
    let b = random_array(&[3], -0.5, 0.5, &mut rng);
    check_op(
        "conv2d",
        &[x, w, b],
        &mut |g, ts| g.conv2d(ts[0], ts[1], ts[2]).unwrap(),
        10,
    );
}

pub fn check_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_array(&[2, 3, 5], -1.0, 1.0, &mut rng);
    let w = random_array(&[4, 5], -1.0, 1.0, &mut rng);
    let b = random_array(&[4], -1.0, 1.0, &mut rng);
    check_op(
        "linear",
        &[x, w, b],
        &mut |g, ts| g.linear(ts[0], ts[1], ts[2]).unwrap(),
        11,
    );
}

pub fn check_maxpool2d() {
    // values spaced well apart so the +-h probes never flip an argmax
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut x = random_array(&[2, 3, 4, 6], -1.0, 1.0, &mut rng);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += (i % 7) as f64 * 0.05;
    }
    check_op("maxpool2d", &[x], &mut |g, ts| g.maxpool2d(ts[0]).unwrap(), 12);
}

pub fn check_relu() {
    // inputs bounded away from the kink at zero
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Array::from_vec(&[4, 6], data).unwrap();
    check_op("relu", &[x], &mut |g, ts| g.relu(ts[0]).unwrap(), 13);
}

pub fn check_temporal_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut x = random_array(&[2, 4, 3], -1.0, 1.0, &mut rng);
    for (i, v) in x.data_mut().iter_mut().enumerate() {
        *v += (i % 5) as f64 * 0.07;
    }
    check_op(
        "temporal_pool",
        &[x],
        &mut |g, ts| g.temporal_pool(ts[0]).unwrap(),
        14,
    );
}

pub fn check_to_sequence() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random_array(&[2, 3, 2, 4], -1.0, 1.0, &mut rng);
    check_op(
        "to_sequence",
        &[x],
        &mut |g, ts| g.to_sequence(ts[0]).unwrap(),
        15,
    );
}

pub fn check_batchnorm2d_train() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_array(&[3, 2, 2, 2], -1.0, 1.0, &mut rng);
    let scale = random_array(&[2], 0.5, 1.5, &mut rng);
    let shift = random_array(&[2], -0.5, 0.5, &mut rng);
    check_op(
        "batchnorm2d_train",
        &[x, scale, shift],
        &mut |g, ts| {
            let mut run = BnRunning::new(2);
            g.batchnorm2d(ts[0], Some((ts[1], ts[2])), &mut run, Mode::Train, 1e-5, 0.1)
                .unwrap()
        },
        16,
    );
}

pub fn check_batchnorm1d_train_no_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = random_array(&[5, 4], -1.0, 1.0, &mut rng);
    check_op(
        "batchnorm1d_train",
        &[x],
        &mut |g, ts| {
            let mut run = BnRunning::new(4);
            g.batchnorm1d(ts[0], None, &mut run, Mode::Train, 1e-5, 0.1).unwrap()
        },
        17,
    );
}

pub fn check_batchnorm_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let x = random_array(&[3, 4], -1.0, 1.0, &mut rng);
    let scale = random_array(&[4], 0.5, 1.5, &mut rng);
    let shift = random_array(&[4], -0.5, 0.5, &mut rng);
    let mean: Vec<f64> = (0..4).map(|_| rng.random_range(-0.3..0.3)).collect();
    let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.5..2.0)).collect();
    check_op(
        "batchnorm1d_eval",
        &[x, scale, shift],
        &mut |g, ts| {
            let mut run = BnRunning {
                mean: mean.clone(),
                var: var.clone(),
            };
            g.batchnorm1d(ts[0], Some((ts[1], ts[2])), &mut run, Mode::Eval, 1e-5, 0.1)
                .unwrap()
        },
        18,
    );
}

pub fn check_dropout() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = random_array(&[4, 8], -1.0, 1.0, &mut rng);
    check_op(
        "dropout",
        &[x],
        &mut |g, ts| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(77);
            g.dropout(ts[0], 0.3, Mode::Train, &mut mask_rng).unwrap()
        },
        19,
    );
}

pub fn check_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let logits = random_array(&[4, 5], -2.0, 2.0, &mut rng);
    let labels = [0usize, 3, 2, 4];
    let mut eval = |arrays: &[Array]| {
        let mut g = Graph::new();
        let t = g.leaf(arrays[0].clone(), false).unwrap();
        let loss = g.softmax_cross_entropy(t, &labels).unwrap();
        g.value(loss).scalar_value()
    };
    let numeric = numerical_grad(&mut eval, std::slice::from_ref(&logits));
    let mut g = Graph::new();
    let t = g.leaf(logits, true).unwrap();
    let loss = g.softmax_cross_entropy(t, &labels).unwrap();
    g.backward(loss).unwrap();
    assert_close(g.grad(t).unwrap(), &numeric[0], "softmax_cross_entropy");
}

/// Objective gradient on random [8, 16] twin embeddings.
pub fn check_objective_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let za = random_array(&[8, 16], -1.0, 1.0, &mut rng);
    let zb = random_array(&[8, 16], -1.0, 1.0, &mut rng);
    let mut eval = |arrays: &[Array]| {
        let mut g = Graph::new();
        let a = g.leaf(arrays[0].clone(), false).unwrap();
        let b = g.leaf(arrays[1].clone(), false).unwrap();
        let c = cross_correlation(&mut g, a, b).unwrap();
        let (loss, _) = barlow_loss(&mut g, c, 0.0051).unwrap();
        g.value(loss).scalar_value()
    };
    let leaves = [za, zb];
    let numeric = numerical_grad(&mut eval, &leaves);
    let mut g = Graph::new();
    let a = g.leaf(leaves[0].clone(), true).unwrap();
    let b = g.leaf(leaves[1].clone(), true).unwrap();
    let c = cross_correlation(&mut g, a, b).unwrap();
    let (loss, _) = barlow_loss(&mut g, c, 0.0051).unwrap();
    g.backward(loss).unwrap();
    assert_close(g.grad(a).unwrap(), &numeric[0], "objective za");
    assert_close(g.grad(b).unwrap(), &numeric[1], "objective zb");
}

// ── composed network check at toy width ─────────────────────────────

pub fn toy_cfg() -> ModelConfig {
    ModelConfig {
        n_mels: 16,
        channels: 4,
        fc_dim: 16,
        proj_dim: 8,
        dropout: 0.3,
    }
}

pub fn assemble(cfg: &ModelConfig, arrays: &[Array]) -> (EncoderParams, ProjectorParams) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut enc = EncoderParams::init(cfg, &mut rng).unwrap();
    let mut proj = ProjectorParams::init(cfg, &mut rng).unwrap();
    let mut idx = 0;
    for (_, p, _) in enc.named_mut() {
        *p = arrays[idx].clone();
        idx += 1;
    }
    for (_, p, _) in proj.named_mut() {
        *p = arrays[idx].clone();
        idx += 1;
    }
    assert_eq!(idx, arrays.len());
    (enc, proj)
}

pub fn composed_loss(cfg: &ModelConfig, arrays: &[Array], xa: &Array, xb: &Array) -> f64 {
    let (mut enc, mut proj) = assemble(cfg, arrays);
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(123); // fixes all dropout masks
    let ta = g.leaf(xa.clone(), false).unwrap();
    let tb = g.leaf(xb.clone(), false).unwrap();
    let eb = bind_encoder(&mut g, &enc, false).unwrap();
    let pb = bind_projector(&mut g, &proj, false).unwrap();
    let (ha, _) = encoder_forward(&mut g, &eb, &mut enc, cfg, ta, Mode::Train, &mut rng).unwrap();
    let za = projector_forward(&mut g, &pb, &mut proj, cfg, ha, Mode::Train, &mut rng).unwrap();
    let (hb, _) = encoder_forward(&mut g, &eb, &mut enc, cfg, tb, Mode::Train, &mut rng).unwrap();
    let zb = projector_forward(&mut g, &pb, &mut proj, cfg, hb, Mode::Train, &mut rng).unwrap();
    let c = cross_correlation(&mut g, za, zb).unwrap();
    let (loss, _) = barlow_loss(&mut g, c, 0.0051).unwrap();
    g.value(loss).scalar_value()
}

/// FD check of the full encoder -> projector -> objective graph at toy
/// width: channels 4, projector dim 8, batch 4.
pub fn check_composed_gradient() {
    let cfg = toy_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut init_rng = ChaCha8Rng::seed_from_u64(9);
    let enc = EncoderParams::init(&cfg, &mut init_rng).unwrap();
    let proj = ProjectorParams::init(&cfg, &mut init_rng).unwrap();
    let leaves: Vec<Array> = enc
        .named()
        .into_iter()
        .map(|(_, a, _)| a.clone())
        .chain(proj.named().into_iter().map(|(_, a, _)| a.clone()))
        .collect();
    let xa = random_array(&[4, 1, 16, 16], -1.0, 1.0, &mut rng);
    let xb = random_array(&[4, 1, 16, 16], -1.0, 1.0, &mut rng);

    let mut eval = |arrays: &[Array]| composed_loss(&cfg, arrays, &xa, &xb);
    let numeric = numerical_grad(&mut eval, &leaves);

    let (mut enc, mut proj) = assemble(&cfg, &leaves);
    let mut g = Graph::new();
    let mut mask_rng = ChaCha8Rng::seed_from_u64(123);
    let ta = g.leaf(xa.clone(), false).unwrap();
    let tb = g.leaf(xb.clone(), false).unwrap();
    let eb = bind_encoder(&mut g, &enc, true).unwrap();
    let pb = bind_projector(&mut g, &proj, true).unwrap();
    let (ha, _) =
        encoder_forward(&mut g, &eb, &mut enc, &cfg, ta, Mode::Train, &mut mask_rng).unwrap();
    let za =
        projector_forward(&mut g, &pb, &mut proj, &cfg, ha, Mode::Train, &mut mask_rng).unwrap();
    let (hb, _) =
        encoder_forward(&mut g, &eb, &mut enc, &cfg, tb, Mode::Train, &mut mask_rng).unwrap();
    let zb =
        projector_forward(&mut g, &pb, &mut proj, &cfg, hb, Mode::Train, &mut mask_rng).unwrap();
    let c = cross_correlation(&mut g, za, zb).unwrap();
    let (loss, _) = barlow_loss(&mut g, c, 0.0051).unwrap();
    g.backward(loss).unwrap();

    let names: Vec<&'static str> = enc
        .named()
        .into_iter()
        .map(|(n, _, _)| n)
        .chain(proj.named().into_iter().map(|(n, _, _)| n))
        .collect();
    let tensors: Vec<Tensor> = eb.named().into_iter().chain(pb.named()).collect();
    for ((t, numeric_grad), name) in tensors.iter().zip(numeric.iter()).zip(names.iter()) {
        let analytic = g
            .grad(*t)
            .unwrap_or_else(|| panic!("missing grad for {name}"));
        assert_close(analytic, numeric_grad, name);
    }
}
