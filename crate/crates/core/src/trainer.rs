//! Pretraining loop: twin-view construction, encoder/projector forward,
//! cross-correlation loss, LARS updates, per-epoch checkpoints and a
//! line-delimited metrics log.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{make_views, MixupQueue, NormStats};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MetricsRecord};
use crate::config::RunConfig;
use crate::data::{BatchMode, DataSet, Manifest, Split};
use crate::error::{Error, Result};
use crate::model::{
    bind_encoder, bind_projector, encoder_forward, projector_forward, BnLayer, ClassifierHead,
    ConvLayer, EncoderParams, LinearLayer, ModelConfig, ProjectorParams,
};
use crate::objective::{barlow_loss, cross_correlation, LossBreakdown};
use crate::optim::{lr_at, Lars, LarsConfig};
use crate::tensor::{Array, BnRunning, Graph, Mode};

const METRICS_TAIL_LEN: usize = 50;

/// Everything the pretraining loop mutates across steps.
pub struct PretrainState {
    pub encoder: EncoderParams,
    pub projector: ProjectorParams,
    pub lars: Lars,
    pub queue_a: MixupQueue,
    pub queue_b: MixupQueue,
    pub rng: ChaCha8Rng,
    pub norm_stats: NormStats,
    /// Epochs fully completed.
    pub epoch: usize,
    /// Global steps completed.
    pub step: usize,
    metrics_tail: Vec<MetricsRecord>,
    rng_seed: [u8; 32],
}

impl PretrainState {
    pub fn init(cfg: &RunConfig, norm_stats: NormStats) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rng_seed = rng.get_seed();
        let encoder = EncoderParams::init(&cfg.model, &mut rng)?;
        let projector = ProjectorParams::init(&cfg.model, &mut rng)?;
        Ok(PretrainState {
            encoder,
            projector,
            lars: Lars::new(cfg.lars.clone()),
            queue_a: MixupQueue::new(cfg.augment.mixup.queue_size),
            queue_b: MixupQueue::new(cfg.augment.mixup.queue_size),
            rng,
            norm_stats,
            epoch: 0,
            step: 0,
            metrics_tail: Vec::new(),
            rng_seed,
        })
    }

    fn record_metrics(&mut self, rec: MetricsRecord) {
        self.metrics_tail.push(rec);
        if self.metrics_tail.len() > METRICS_TAIL_LEN {
            let drop = self.metrics_tail.len() - METRICS_TAIL_LEN;
            self.metrics_tail.drain(..drop);
        }
    }
}

/// One optimization step over an unlabeled feature batch `[b, 1, f, t]`.
/// Runs make-views, both twin forwards, the correlation objective, backward
/// and a LARS update at the scheduled rate for `state.step`.
pub fn pretrain_step(
    state: &mut PretrainState,
    cfg: &RunConfig,
    steps_per_epoch: usize,
    features: &Array,
) -> Result<(LossBreakdown, f64)> {
    let shape = features.shape();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::ShapeMismatch {
            context: "pretrain_step",
            expected: "[b, 1, n_mels, t]".into(),
            actual: format!("{shape:?}"),
        });
    }
    let (b, f, t) = (shape[0], shape[2], shape[3]);
    let per_sample = f * t;
    let specs: Vec<Array> = (0..b)
        .map(|i| {
            Array::from_vec(
                &[f, t],
                features.data()[i * per_sample..(i + 1) * per_sample].to_vec(),
            )
            .unwrap()
        })
        .collect();

    let (views_a, views_b) = make_views(
        &specs,
        &state.norm_stats,
        &cfg.augment,
        &mut state.queue_a,
        &mut state.queue_b,
        &mut state.rng,
    )?;
    let xa = Array::stack(&views_a)?.reshaped(&[b, 1, f, t])?;
    let xb = Array::stack(&views_b)?.reshaped(&[b, 1, f, t])?;

    let step_context = |e: Error, stage: &str, state: &PretrainState| {
        Error::Numerical(format!(
            "step {} failed during {stage}: {e}",
            state.step
        ))
    };

    let mut g = Graph::new();
    let xa_t = g.leaf(xa, false)?;
    let xb_t = g.leaf(xb, false)?;
    let enc_bind = bind_encoder(&mut g, &state.encoder, true)?;
    let proj_bind = bind_projector(&mut g, &state.projector, true)?;
    let (ha, _) = encoder_forward(
        &mut g,
        &enc_bind,
        &mut state.encoder,
        &cfg.model,
        xa_t,
        Mode::Train,
        &mut state.rng,
    )
    .map_err(|e| step_context(e, "encoder view A", state))?;
    let za = projector_forward(
        &mut g,
        &proj_bind,
        &mut state.projector,
        &cfg.model,
        ha,
        Mode::Train,
        &mut state.rng,
    )
    .map_err(|e| step_context(e, "projector view A", state))?;
    let (hb, _) = encoder_forward(
        &mut g,
        &enc_bind,
        &mut state.encoder,
        &cfg.model,
        xb_t,
        Mode::Train,
        &mut state.rng,
    )
    .map_err(|e| step_context(e, "encoder view B", state))?;
    let zb = projector_forward(
        &mut g,
        &proj_bind,
        &mut state.projector,
        &cfg.model,
        hb,
        Mode::Train,
        &mut state.rng,
    )
    .map_err(|e| step_context(e, "projector view B", state))?;

    let c = cross_correlation(&mut g, za, zb).map_err(|e| {
        let za_norm = g.value(za).norm();
        let zb_norm = g.value(zb).norm();
        Error::Numerical(format!(
            "step {} failed computing the correlation matrix: {e} \
             (|Z_A| = {za_norm:.3e}, |Z_B| = {zb_norm:.3e})",
            state.step
        ))
    })?;
    let (loss, breakdown) = barlow_loss(&mut g, c, cfg.trainer.lambda)?;
    if !breakdown.total.is_finite() {
        let cv = g.value(c).data();
        let cmin = cv.iter().cloned().fold(f64::INFINITY, f64::min);
        let cmax = cv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::Numerical(format!(
            "step {}: non-finite loss (invariance {:.3e}, redundancy {:.3e}, \
             C range [{cmin:.3e}, {cmax:.3e}], |Z_A| {:.3e}, |Z_B| {:.3e})",
            state.step,
            breakdown.invariance,
            breakdown.redundancy,
            g.value(za).norm(),
            g.value(zb).norm(),
        )));
    }
    g.backward(loss)?;

    let grads: Vec<Array> = enc_bind
        .named()
        .into_iter()
        .chain(proj_bind.named())
        .map(|t| {
            g.grad(t)
                .cloned()
                .ok_or_else(|| Error::Numerical("missing gradient after backward".into()))
        })
        .collect::<Result<_>>()?;

    let scale = LarsConfig::batch_scale(cfg.trainer.batch_size);
    let lr_w = lr_at(
        state.step,
        steps_per_epoch,
        &cfg.schedule,
        cfg.lars.base_lr_weights * scale,
    );
    let lr_b = lr_at(
        state.step,
        steps_per_epoch,
        &cfg.schedule,
        cfg.lars.base_lr_biases * scale,
    );
    let mut params: Vec<_> = state.encoder.named_mut();
    params.extend(state.projector.named_mut());
    state.lars.step(&mut params, &grads, lr_w, lr_b)?;
    state.step += 1;
    Ok((breakdown, lr_w))
}

/// Full pretraining over the train split of `manifest`. Writes a resolved
/// config snapshot, per-epoch checkpoints and a JSONL metrics log into
/// `out_dir`; returns the final checkpoint and its path.
pub fn run_pretraining(
    cfg: &RunConfig,
    manifest: &Manifest,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<(Checkpoint, PathBuf)> {
    let (cfg, mut state, start_fresh) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let mut resumed_cfg = ckpt.config.clone();
            resumed_cfg.trainer.epochs = cfg.trainer.epochs;
            resumed_cfg.validate()?;
            let state = restore_state(&ckpt, &resumed_cfg)?;
            (resumed_cfg, state, false)
        }
        None => {
            cfg.validate()?;
            let cfg = cfg.clone();
            let dataset = DataSet::load(manifest, Split::Train, &cfg.dsp)?;
            let norm_stats =
                NormStats::from_values(dataset.features().iter().map(|s| s.values()))?;
            let state = PretrainState::init(&cfg, norm_stats)?;
            (cfg, state, true)
        }
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.save_toml(&out_dir.join("config.toml"))?;

    let dataset = DataSet::load(manifest, Split::Train, &cfg.dsp)?;
    let steps_per_epoch = dataset.len() / cfg.trainer.batch_size;
    if steps_per_epoch == 0 {
        return Err(Error::Config(format!(
            "train split has {} clips, fewer than one batch of {}",
            dataset.len(),
            cfg.trainer.batch_size
        )));
    }

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file = open_metrics_log(&metrics_path, state.epoch, start_fresh)?;

    let mut last_path = PathBuf::new();
    for epoch in state.epoch..cfg.trainer.epochs {
        let batches = dataset.epoch_batches(
            cfg.trainer.batch_size,
            cfg.dsp.pretrain_frames,
            BatchMode::Pretrain,
            &cfg.dsp,
            &mut state.rng,
        )?;
        for batch in &batches {
            let step = state.step;
            let outcome = pretrain_step(&mut state, &cfg, steps_per_epoch, &batch.features);
            let (breakdown, lr) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    // best-effort emergency checkpoint, then propagate
                    let ckpt = state_to_checkpoint(&state, &cfg);
                    let _ = save_checkpoint(&ckpt, &out_dir.join("ckpt-abort.bin"));
                    return Err(e);
                }
            };
            let rec = MetricsRecord::new(step, epoch, lr, &breakdown);
            writeln!(
                metrics_file,
                "{}",
                serde_json::to_string(&rec).map_err(|e| Error::Checkpoint(e.to_string()))?
            )
            .map_err(|e| Error::io(&metrics_path, e))?;
            state.record_metrics(rec);
        }
        metrics_file.flush().map_err(|e| Error::io(&metrics_path, e))?;
        state.epoch = epoch + 1;
        let ckpt = state_to_checkpoint(&state, &cfg);
        let path = out_dir.join(format!("ckpt-epoch{:04}.bin", state.epoch));
        save_checkpoint(&ckpt, &path)?;
        last_path = path;
    }

    let final_ckpt = state_to_checkpoint(&state, &cfg);
    if last_path.as_os_str().is_empty() {
        // resumed at or past the target epoch count: write a final snapshot
        last_path = out_dir.join(format!("ckpt-epoch{:04}.bin", state.epoch));
        save_checkpoint(&final_ckpt, &last_path)?;
    }
    Ok((final_ckpt, last_path))
}

/// Rebuild the metrics log for a run starting at `start_epoch`: keep lines
/// from earlier epochs, drop any later partial output.
fn open_metrics_log(
    path: &Path,
    start_epoch: usize,
    start_fresh: bool,
) -> Result<std::fs::File> {
    if start_fresh || !path.exists() {
        return std::fs::File::create(path).map_err(|e| Error::io(path, e));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<&str> = text
        .lines()
        .filter(|line| {
            serde_json::from_str::<MetricsRecord>(line)
                .map(|r| r.epoch < start_epoch)
                .unwrap_or(false)
        })
        .collect();
    let mut rebuilt = kept.join("\n");
    if !rebuilt.is_empty() {
        rebuilt.push('\n');
    }
    std::fs::write(path, rebuilt).map_err(|e| Error::io(path, e))?;
    std::fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

// ── state <-> checkpoint ────────────────────────────────────────────

pub fn state_to_checkpoint(state: &PretrainState, cfg: &RunConfig) -> Checkpoint {
    let mut ckpt = Checkpoint::new(
        cfg.clone(),
        state.epoch,
        state.step,
        state.rng_seed,
        state.rng.get_word_pos(),
        Some(state.norm_stats),
        state.metrics_tail.clone(),
    );
    for (name, arr, _) in state.encoder.named() {
        ckpt.push_array(name, arr.clone());
    }
    for (name, run) in state.encoder.running_stats() {
        ckpt.push_array(
            format!("{name}.run_mean"),
            Array::from_vec(&[run.mean.len()], run.mean.clone()).unwrap(),
        );
        ckpt.push_array(
            format!("{name}.run_var"),
            Array::from_vec(&[run.var.len()], run.var.clone()).unwrap(),
        );
    }
    for (name, arr, _) in state.projector.named() {
        ckpt.push_array(name, arr.clone());
    }
    for (name, run) in state.projector.running_stats() {
        ckpt.push_array(
            format!("{name}.run_mean"),
            Array::from_vec(&[run.mean.len()], run.mean.clone()).unwrap(),
        );
        ckpt.push_array(
            format!("{name}.run_var"),
            Array::from_vec(&[run.var.len()], run.var.clone()).unwrap(),
        );
    }
    let param_names: Vec<&'static str> = state
        .encoder
        .named()
        .into_iter()
        .map(|(n, _, _)| n)
        .chain(state.projector.named().into_iter().map(|(n, _, _)| n))
        .collect();
    for (name, buf) in param_names.iter().zip(state.lars.buffers()) {
        ckpt.push_array(
            format!("opt.{name}"),
            Array::from_vec(&[buf.len()], buf.clone()).unwrap(),
        );
    }
    for (i, entry) in state.queue_a.entries().enumerate() {
        ckpt.push_array(format!("queue_a.{i}"), entry.clone());
    }
    for (i, entry) in state.queue_b.entries().enumerate() {
        ckpt.push_array(format!("queue_b.{i}"), entry.clone());
    }
    ckpt
}

fn bn_from_checkpoint(ckpt: &Checkpoint, name: &str, channels: usize) -> Result<BnLayer> {
    Ok(BnLayer {
        scale: ckpt.take(&format!("{name}.scale"), &[channels])?,
        shift: ckpt.take(&format!("{name}.shift"), &[channels])?,
        running: running_from_checkpoint(ckpt, name, channels)?,
    })
}

fn running_from_checkpoint(ckpt: &Checkpoint, name: &str, channels: usize) -> Result<BnRunning> {
    Ok(BnRunning {
        mean: ckpt
            .take(&format!("{name}.run_mean"), &[channels])?
            .into_data(),
        var: ckpt
            .take(&format!("{name}.run_var"), &[channels])?
            .into_data(),
    })
}

/// Encoder parameters from a checkpoint, validated against `cfg` dims.
pub fn encoder_from_checkpoint(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<EncoderParams> {
    let c = cfg.channels;
    Ok(EncoderParams {
        conv1: ConvLayer {
            weight: ckpt.take("enc.conv1.weight", &[c, 1, 3, 3])?,
            bias: ckpt.take("enc.conv1.bias", &[c])?,
        },
        bn1: bn_from_checkpoint(ckpt, "enc.bn1", c)?,
        conv2: ConvLayer {
            weight: ckpt.take("enc.conv2.weight", &[c, c, 3, 3])?,
            bias: ckpt.take("enc.conv2.bias", &[c])?,
        },
        bn2: bn_from_checkpoint(ckpt, "enc.bn2", c)?,
        conv3: ConvLayer {
            weight: ckpt.take("enc.conv3.weight", &[c, c, 3, 3])?,
            bias: ckpt.take("enc.conv3.bias", &[c])?,
        },
        bn3: bn_from_checkpoint(ckpt, "enc.bn3", c)?,
        fc1: LinearLayer {
            weight: ckpt.take("enc.fc1.weight", &[cfg.fc_dim, cfg.sequence_feat()])?,
            bias: ckpt.take("enc.fc1.bias", &[cfg.fc_dim])?,
        },
        fc2: LinearLayer {
            weight: ckpt.take("enc.fc2.weight", &[cfg.fc_dim, cfg.fc_dim])?,
            bias: ckpt.take("enc.fc2.bias", &[cfg.fc_dim])?,
        },
    })
}

pub fn projector_from_checkpoint(ckpt: &Checkpoint, cfg: &ModelConfig) -> Result<ProjectorParams> {
    Ok(ProjectorParams {
        fc1: LinearLayer {
            weight: ckpt.take("proj.fc1.weight", &[cfg.proj_dim, cfg.fc_dim])?,
            bias: ckpt.take("proj.fc1.bias", &[cfg.proj_dim])?,
        },
        bn1: bn_from_checkpoint(ckpt, "proj.bn1", cfg.proj_dim)?,
        fc2: LinearLayer {
            weight: ckpt.take("proj.fc2.weight", &[cfg.proj_dim, cfg.proj_dim])?,
            bias: ckpt.take("proj.fc2.bias", &[cfg.proj_dim])?,
        },
        bn2_running: running_from_checkpoint(ckpt, "proj.bn2", cfg.proj_dim)?,
    })
}

/// Optional classifier head stored alongside the encoder.
pub fn head_from_checkpoint(ckpt: &Checkpoint) -> Result<Option<ClassifierHead>> {
    match ckpt.get("head.weight") {
        None => Ok(None),
        Some(w) => {
            let shape = w.shape().to_vec();
            Ok(Some(ClassifierHead {
                linear: LinearLayer {
                    weight: ckpt.take("head.weight", &shape)?,
                    bias: ckpt.take("head.bias", &[shape[0]])?,
                },
            }))
        }
    }
}

fn restore_state(ckpt: &Checkpoint, cfg: &RunConfig) -> Result<PretrainState> {
    let encoder = encoder_from_checkpoint(ckpt, &cfg.model)?;
    let projector = projector_from_checkpoint(ckpt, &cfg.model)?;
    let mut lars = Lars::new(cfg.lars.clone());
    let param_names: Vec<String> = encoder
        .named()
        .into_iter()
        .map(|(n, _, _)| n.to_string())
        .chain(projector.named().into_iter().map(|(n, _, _)| n.to_string()))
        .collect();
    let mut buffers = Vec::with_capacity(param_names.len());
    for name in &param_names {
        let arr = ckpt.get(&format!("opt.{name}")).ok_or_else(|| {
            Error::Checkpoint(format!("missing optimizer state opt.{name}"))
        })?;
        buffers.push(arr.data().to_vec());
    }
    lars.set_buffers(buffers);

    let load_queue = |prefix: &str| -> MixupQueue {
        let entries: Vec<Array> = ckpt
            .names_with_prefix(prefix)
            .map(|n| ckpt.get(n).unwrap().clone())
            .collect();
        MixupQueue::from_entries(cfg.augment.mixup.queue_size, entries)
    };
    let queue_a = load_queue("queue_a.");
    let queue_b = load_queue("queue_b.");

    let mut rng = ChaCha8Rng::from_seed(ckpt.rng_seed);
    rng.set_word_pos(ckpt.rng_word_pos);
    let norm_stats = ckpt.norm_stats.ok_or_else(|| {
        Error::Checkpoint("checkpoint lacks normalization statistics".into())
    })?;
    Ok(PretrainState {
        encoder,
        projector,
        lars,
        queue_a,
        queue_b,
        rng,
        norm_stats,
        epoch: ckpt.epoch,
        step: ckpt.step,
        metrics_tail: ckpt.metrics_tail.clone(),
        rng_seed: ckpt.rng_seed,
    })
}
