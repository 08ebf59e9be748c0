//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured quantities. Tolerances are pinned in the assertions.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twinspec_core::augment::{
    mix_arrays, mixup, normalize, resized_crop, sample_crop_window, CropWindow, MixupConfig,
    MixupQueue, NormStats, RrcConfig,
};
use twinspec_core::checkpoint::MetricsRecord;
use twinspec_core::config::RunConfig;
use twinspec_core::data::{synth_dataset, DataSet, BatchMode, Split, SynthSpec};
use twinspec_core::dsp::{self, AudioClip, DspConfig};
use twinspec_core::eval::{finetune, linear_probe, InitKind};
use twinspec_core::model::{bind_encoder, encoder_forward, EncoderParams, ModelConfig};
use twinspec_core::objective::{barlow_loss, cross_correlation};
use twinspec_core::optim::{lr_at, ScheduleConfig};
use twinspec_core::tensor::{Array, Graph, Mode};
use twinspec_core::trainer::{
    encoder_from_checkpoint, pretrain_step, run_pretraining, PretrainState,
};

// ── criterion 1: Table-1 shape conformance at full width ───────────

#[test]
fn criterion_1_shape_conformance() {
    let cfg = ModelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut enc = EncoderParams::init(&cfg, &mut rng).unwrap();
    let b = 2;
    let input = common::random_array(&[b, 1, 64, 96], -1.0, 1.0, &mut rng);

    let started = Instant::now();
    let mut g = Graph::new();
    let x = g.leaf(input, false).unwrap();
    let bind = bind_encoder(&mut g, &enc, false).unwrap();
    let (h, trace) =
        encoder_forward(&mut g, &bind, &mut enc, &cfg, x, Mode::Eval, &mut rng).unwrap();
    let elapsed = started.elapsed();

    let expected: Vec<(&str, Vec<usize>)> = vec![
        ("conv2d_1", vec![b, 64, 64, 96]),
        ("batchnorm2d_2", vec![b, 64, 64, 96]),
        ("relu_3", vec![b, 64, 64, 96]),
        ("maxpool2d_4", vec![b, 64, 32, 48]),
        ("conv2d_5", vec![b, 64, 32, 48]),
        ("batchnorm2d_6", vec![b, 64, 32, 48]),
        ("relu_7", vec![b, 64, 32, 48]),
        ("maxpool2d_8", vec![b, 64, 16, 24]),
        ("conv2d_9", vec![b, 64, 16, 24]),
        ("batchnorm2d_10", vec![b, 64, 16, 24]),
        ("relu_11", vec![b, 64, 16, 24]),
        ("maxpool2d_12", vec![b, 64, 8, 12]),
        ("reshape_13", vec![b, 12, 512]),
        ("linear_14", vec![b, 12, 2048]),
        ("relu_15", vec![b, 12, 2048]),
        ("dropout_16", vec![b, 12, 2048]),
        ("linear_17", vec![b, 12, 2048]),
        ("relu_18", vec![b, 12, 2048]),
        ("max_plus_mean_19", vec![b, 2048]),
    ];
    assert_eq!(trace.len(), expected.len());
    for ((got_name, got_shape), (want_name, want_shape)) in trace.iter().zip(&expected) {
        assert_eq!(got_name, want_name);
        assert_eq!(got_shape, want_shape, "{want_name}");
    }
    assert_eq!(g.shape(h), &[b, 2048]);
    assert!(
        elapsed.as_secs_f64() < 1.0,
        "forward took {elapsed:?}, budget is 1 s"
    );
    println!(
        "PASS criterion 1: all 19 layer shapes match at [2,1,64,96]; forward {elapsed:?}"
    );
}

// ── criterion 2: gradient suite ─────────────────────────────────────

#[test]
fn criterion_2_gradient_suite() {
    let started = Instant::now();
    common::check_conv2d();
    common::check_linear();
    common::check_maxpool2d();
    common::check_relu();
    common::check_temporal_pool();
    common::check_to_sequence();
    common::check_batchnorm2d_train();
    common::check_batchnorm1d_train_no_affine();
    common::check_batchnorm_eval();
    common::check_dropout();
    common::check_softmax_cross_entropy();
    common::check_objective_gradient();
    common::check_composed_gradient();
    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 120.0,
        "gradient suite took {elapsed:?}, budget is 2 min"
    );
    println!(
        "PASS criterion 2: finite differences (h=1e-5, rel tol 1e-4) agree for every op \
         and the composed graph; {elapsed:?}"
    );
}

// ── criterion 3: loss identities ────────────────────────────────────

#[test]
fn criterion_3_loss_identities() {
    // identity matrix -> zero loss
    let mut g = Graph::new();
    let mut eye = vec![0.0; 36];
    for i in 0..6 {
        eye[i * 6 + i] = 1.0;
    }
    let c = g.leaf(Array::from_vec(&[6, 6], eye).unwrap(), false).unwrap();
    let (loss, _) = barlow_loss(&mut g, c, 0.0051).unwrap();
    assert_eq!(g.value(loss).scalar_value(), 0.0);

    // hand-derived case: C = [[1,-1],[1,-1]], lambda 0.0051 -> 4.0102
    let mut g = Graph::new();
    let c = g
        .leaf(Array::from_vec(&[2, 2], vec![1.0, -1.0, 1.0, -1.0]).unwrap(), false)
        .unwrap();
    let (loss, breakdown) = barlow_loss(&mut g, c, 0.0051).unwrap();
    assert!((g.value(loss).scalar_value() - 4.0102).abs() < 1e-9);
    assert!((breakdown.invariance - 4.0).abs() < 1e-12);
    assert!((breakdown.redundancy - 2.0).abs() < 1e-12);

    // self-correlation diagonal
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..12 * 9).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut g = Graph::new();
    let za = g.leaf(Array::from_vec(&[12, 9], data.clone()).unwrap(), false).unwrap();
    let zb = g.leaf(Array::from_vec(&[12, 9], data).unwrap(), false).unwrap();
    let c = cross_correlation(&mut g, za, zb).unwrap();
    for i in 0..9 {
        assert!((g.value(c).data()[i * 9 + i] - 1.0).abs() < 1e-6);
    }

    // batch permutation invariance (1e-12)
    let b = 8;
    let d = 5;
    let a_data: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b_data: Vec<f64> = (0..b * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let perm = [5usize, 2, 7, 0, 4, 6, 1, 3];
    let permute = |data: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; b * d];
        for (dst, &src) in perm.iter().enumerate() {
            out[dst * d..(dst + 1) * d].copy_from_slice(&data[src * d..(src + 1) * d]);
        }
        out
    };
    let corr = |ad: Vec<f64>, bd: Vec<f64>| {
        let mut g = Graph::new();
        let za = g.leaf(Array::from_vec(&[b, d], ad).unwrap(), false).unwrap();
        let zb = g.leaf(Array::from_vec(&[b, d], bd).unwrap(), false).unwrap();
        let c = cross_correlation(&mut g, za, zb).unwrap();
        g.value(c).clone()
    };
    let c1 = corr(a_data.clone(), b_data.clone());
    let c2 = corr(permute(&a_data), permute(&b_data));
    for (x, y) in c1.data().iter().zip(c2.data()) {
        assert!((x - y).abs() < 1e-12);
    }

    // per-column positive scaling invariance (1e-12)
    let mut scaled = a_data.clone();
    for row in 0..b {
        scaled[row * d + 2] *= 4.25;
    }
    let c3 = corr(scaled, b_data);
    for j in 0..d {
        assert!((c1.data()[2 * d + j] - c3.data()[2 * d + j]).abs() < 1e-12);
    }

    println!(
        "PASS criterion 3: zero at identity, hand case 4.0102 (1e-9), unit self-diagonal \
         (1e-6), permutation and scaling invariance (1e-12)"
    );
}

// ── criterion 4: DSP oracle ─────────────────────────────────────────

#[test]
fn criterion_4_dsp_oracle() {
    let cfg = DspConfig::default();

    // analytically computed filter centers as tone frequencies
    let edges = dsp::mel_band_edges(&cfg);
    let picked: Vec<usize> = (0..10).map(|i| 3 + i * 6).collect(); // filters 3..57
    let mut checked = 0;
    for &m in &picked {
        let center = edges[m + 1];
        assert!((100.0..=7000.0).contains(&center), "filter {m} at {center} Hz");
        let clip = AudioClip {
            samples: (0..16_000)
                .map(|i| 0.5 * (std::f64::consts::TAU * center * i as f64 / 16_000.0).sin())
                .collect(),
            sample_rate: 16_000,
        };
        let spec = dsp::logmel(&clip, &cfg).unwrap();
        for frame in 0..spec.frames() {
            let argmax = (0..cfg.n_mels)
                .max_by(|&a, &b| spec.get(a, frame).partial_cmp(&spec.get(b, frame)).unwrap())
                .unwrap();
            assert_eq!(argmax, m, "tone at {center:.1} Hz, frame {frame}");
        }
        checked += 1;
    }
    assert_eq!(checked, 10);

    // frame-count formula on 10 random lengths
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let len = rng.random_range(1024..80_000);
        let clip = AudioClip {
            samples: vec![0.003; len],
            sample_rate: 16_000,
        };
        let spec = dsp::logmel(&clip, &cfg).unwrap();
        assert_eq!(spec.frames(), 1 + (len - 1024) / 160);
    }

    // amplitude scaling shifts every value by 2 ln s (tol 1e-6)
    let samples: Vec<f64> = (0..16_224).map(|_| rng.random_range(-0.4..0.4)).collect();
    let clip = AudioClip {
        samples: samples.clone(),
        sample_rate: 16_000,
    };
    let scaled = AudioClip {
        samples: samples.iter().map(|v| v * 2.0).collect(),
        sample_rate: 16_000,
    };
    let sa = dsp::logmel(&clip, &cfg).unwrap();
    let sb = dsp::logmel(&scaled, &cfg).unwrap();
    let shift = 2.0 * 2.0f64.ln();
    for (x, y) in sa.values().data().iter().zip(sb.values().data()) {
        assert!((y - x - shift).abs() < 1e-6);
    }

    println!(
        "PASS criterion 4: tone argmax matches the analytic mel bin for 10 frequencies, \
         frame formula exact on 10 lengths, amplitude shift within 1e-6"
    );
}

// ── criterion 5: augmentation properties ────────────────────────────

#[test]
fn criterion_5_augmentation_properties() {
    // FIFO semantics over 5000 pushes at capacity 2048
    let cfg = MixupConfig::default();
    let mut queue = MixupQueue::new(cfg.queue_size);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..5000 {
        let x = Array::full(&[1, 1], (i as f64) * 1e-4);
        mixup(&x, &mut queue, &cfg, &mut rng).unwrap();
        assert!(queue.len() <= 2048);
    }
    assert_eq!(queue.len(), 2048);
    for (slot, push_idx) in (5000 - 2048..5000).enumerate() {
        let expect = ((push_idx as f64) * 1e-4).exp();
        let got = queue.get(slot).unwrap().data()[0];
        assert!((got - expect).abs() < 1e-12, "slot {slot}");
    }

    // mixup with ratio zero is an identity up to the exp/ln round trip
    let x = common::random_array(&[8, 12], -2.0, 2.0, &mut rng);
    let partner = common::random_array(&[8, 12], -2.0, 2.0, &mut rng);
    let out = mix_arrays(&x, &partner, 0.0).unwrap();
    for (a, b) in out.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }

    // identity crop reproduces the input within interpolation tolerance
    let spec = common::random_array(&[16, 24], -1.5, 1.5, &mut rng);
    let v = 36; // 1.5 * 24
    let window = CropWindow {
        f_start: 0,
        f_len: 16,
        t_start: (v - 24) / 2,
        t_len: 24,
        virtual_t: v,
    };
    let out = resized_crop(&spec, &window).unwrap();
    for (a, b) in out.data().iter().zip(spec.data()) {
        assert!((a - b).abs() < 1e-5);
    }

    // the frequency crop never exceeds the input over 1e4 draws
    let rrc = RrcConfig::default();
    for _ in 0..10_000 {
        let w = sample_crop_window(64, 96, &rrc, &mut rng).unwrap();
        assert!(w.f_len <= 64);
        assert!(w.f_start + w.f_len <= 64);
    }

    println!(
        "PASS criterion 5: FIFO over 5000 pushes, r=0 identity (1e-6), RRC identity \
         (1e-5), freq crop clamp over 1e4 draws"
    );
}

// ── criterion 6: learning-rate schedule ─────────────────────────────

#[test]
fn criterion_6_schedule() {
    let cfg = ScheduleConfig::default();
    for spe in [1usize, 7, 53] {
        let base = 0.2 * 64.0 / 256.0;
        let warm = cfg.warmup_epochs * spe;
        let total = cfg.total_epochs * spe;
        assert_eq!(lr_at(0, spe, &cfg, base), 0.0);
        assert_eq!(lr_at(warm, spe, &cfg, base), base, "warmup end exact");
        assert!(
            (lr_at(total, spe, &cfg, base) - base / 1000.0).abs() < 1e-9,
            "final value"
        );
        // both branch formulas meet at the boundary
        let warmup_side = base * warm as f64 / warm as f64;
        assert!((warmup_side - lr_at(warm, spe, &cfg, base)).abs() < 1e-9);
        // monotone non-increasing after warmup
        let mut prev = lr_at(warm, spe, &cfg, base);
        for step in warm + 1..=total {
            let lr = lr_at(step, spe, &cfg, base);
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
    println!(
        "PASS criterion 6: warmup end exact, final = base/1000 (1e-9), boundary \
         continuous (1e-9), non-increasing decay"
    );
}

// ── criterion 9: determinism and resume equivalence ─────────────────

fn desk_run_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model.channels = 4;
    cfg.model.fc_dim = 16;
    cfg.model.proj_dim = 8;
    cfg.trainer.epochs = 2;
    cfg.trainer.batch_size = 8;
    cfg.schedule.warmup_epochs = 1;
    cfg.schedule.total_epochs = 4;
    cfg.augment.mixup.queue_size = 64;
    cfg
}

#[test]
fn criterion_9_determinism_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let manifest = synth_dataset(
        &SynthSpec {
            classes: 2,
            per_class: 12,
            duration_s: 1.0,
            seed: 9,
        },
        &data_dir,
    )
    .unwrap()
    .with_all_in_split(Split::Train);
    let cfg = desk_run_config(77);

    // identical seeds, identical bytes
    let (_, path_a) = run_pretraining(&cfg, &manifest, &dir.path().join("a"), None).unwrap();
    let (_, path_b) = run_pretraining(&cfg, &manifest, &dir.path().join("b"), None).unwrap();
    let metrics_a = std::fs::read(dir.path().join("a/metrics.jsonl")).unwrap();
    let metrics_b = std::fs::read(dir.path().join("b/metrics.jsonl")).unwrap();
    assert_eq!(metrics_a, metrics_b, "metrics logs differ between reruns");
    let ckpt_a = std::fs::read(&path_a).unwrap();
    let ckpt_b = std::fs::read(&path_b).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "final checkpoints differ between reruns");

    // save/load mid-run equals the uninterrupted run, bit for bit
    let split_dir = dir.path().join("split");
    let mut one = cfg.clone();
    one.trainer.epochs = 1;
    let (_, mid) = run_pretraining(&one, &manifest, &split_dir, None).unwrap();
    let mut two = cfg.clone();
    two.trainer.epochs = 2;
    let (_, resumed_path) = run_pretraining(&two, &manifest, &split_dir, Some(&mid)).unwrap();
    let resumed_bytes = std::fs::read(&resumed_path).unwrap();
    assert_eq!(ckpt_a, resumed_bytes, "resumed checkpoint differs");
    let metrics_split = std::fs::read(split_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics_a, metrics_split, "resumed metrics log differs");

    println!(
        "PASS criterion 9: rerun and save/load-resume produce bit-identical metrics \
         and checkpoints"
    );
}
