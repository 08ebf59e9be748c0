//! Downstream protocols: linear probing on frozen embeddings, end-to-end
//! fine-tuning, and top-1 evaluation. Augmentations stay off downstream;
//! inputs are normalized with train-split statistics and center-cropped.

use std::io::Write as IoWrite;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{normalize, NormStats};
use crate::config::RunConfig;
use crate::data::{downstream_frames, DataSet, Manifest, Split};
use crate::dsp::crop_frames_center;
use crate::error::{Error, Result};
use crate::model::{
    bind_encoder, bind_head, classify, encoder_forward, ClassifierHead, EncoderParams,
};
use crate::optim::Adam;
use crate::tensor::{Array, Graph, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Linear,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitKind {
    Random,
    Pretrained,
}

/// Outcome of one downstream run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub protocol: Protocol,
    pub init: InitKind,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub selection: String,
}

impl EvalReport {
    /// Aligned text table over a set of reports.
    pub fn table(reports: &[EvalReport]) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:<10} {:<11} {:>7} {:>7} {:>7}\n",
            "Task", "Protocol", "Init", "train", "val", "test"
        ));
        for r in reports {
            out.push_str(&format!(
                "{:<20} {:<10} {:<11} {:>7.3} {:>7.3} {:>7.3}\n",
                r.task,
                match r.protocol {
                    Protocol::Linear => "linear",
                    Protocol::Finetune => "finetune",
                },
                match r.init {
                    InitKind::Random => "random",
                    InitKind::Pretrained => "pretrained",
                },
                r.train_accuracy,
                r.val_accuracy,
                r.test_accuracy
            ));
        }
        out
    }
}

/// Normalized, center-cropped `[f, t]` features with labels, one entry per
/// record of a split.
struct LabeledFeatures {
    features: Vec<Array>,
    labels: Vec<usize>,
}

impl LabeledFeatures {
    fn len(&self) -> usize {
        self.features.len()
    }

    /// Stack a subset of records into a `[b, 1, f, t]` batch.
    fn gather(&self, indices: &[usize]) -> Result<(Array, Vec<usize>)> {
        let specs: Vec<Array> = indices.iter().map(|&i| self.features[i].clone()).collect();
        let stacked = Array::stack(&specs)?;
        let shape = stacked.shape().to_vec();
        let features = stacked.reshaped(&[shape[0], 1, shape[1], shape[2]])?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((features, labels))
    }

    /// Contiguous chunks in record order (evaluation; partial tail kept).
    fn sequential_batches(&self, batch_size: usize) -> Result<Vec<(Array, Vec<usize>)>> {
        let indices: Vec<usize> = (0..self.len()).collect();
        indices
            .chunks(batch_size.max(1))
            .map(|chunk| self.gather(chunk))
            .collect()
    }
}

fn load_split(
    manifest: &Manifest,
    split: Split,
    cfg: &RunConfig,
    t_frames: usize,
    stats: &NormStats,
) -> Result<LabeledFeatures> {
    let dataset = DataSet::load(manifest, split, &cfg.dsp)?;
    let mut features = Vec::with_capacity(dataset.len());
    for spec in dataset.features() {
        let cropped = crop_frames_center(spec, t_frames, &cfg.dsp);
        features.push(normalize(cropped.values(), stats)?);
    }
    let records: Vec<_> = manifest.split_records(split).collect();
    let labels: Vec<usize> = records
        .iter()
        .map(|r| {
            r.label
                .as_deref()
                .and_then(|l| manifest.label_index(l))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "record {} in split {split} is unlabeled",
                        r.path.display()
                    ))
                })
        })
        .collect::<Result<_>>()?;
    Ok(LabeledFeatures { features, labels })
}

/// Normalization statistics over the train split's full spectrograms.
pub fn downstream_norm_stats(manifest: &Manifest, cfg: &RunConfig) -> Result<NormStats> {
    let train = DataSet::load(manifest, Split::Train, &cfg.dsp)?;
    NormStats::from_values(train.features().iter().map(|s| s.values()))
}

/// Frozen eval-mode embeddings, one row per record: `[n, fc_dim]`.
fn embed_records(
    enc: &EncoderParams,
    cfg: &RunConfig,
    data: &LabeledFeatures,
    batch_size: usize,
) -> Result<Array> {
    let mut enc_work = enc.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in eval mode
    let d = cfg.model.fc_dim;
    let mut rows = Vec::with_capacity(data.len() * d);
    for (features, _) in data.sequential_batches(batch_size)? {
        let mut g = Graph::new();
        let x = g.leaf(features, false)?;
        let bind = bind_encoder(&mut g, &enc_work, false)?;
        let (h, _) = encoder_forward(
            &mut g,
            &bind,
            &mut enc_work,
            &cfg.model,
            x,
            Mode::Eval,
            &mut rng,
        )?;
        rows.extend_from_slice(g.value(h).data());
    }
    debug_assert!(enc_work == *enc, "eval-mode embedding must not touch the encoder");
    Array::from_vec(&[data.len(), d], rows)
}

fn argmax_accuracy(logits: &Array, labels: &[usize]) -> f64 {
    let k = logits.shape()[1];
    let mut correct = 0;
    for (row, &label) in labels.iter().enumerate() {
        let slice = &logits.data()[row * k..(row + 1) * k];
        let argmax = slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        if argmax == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Top-1 accuracy of `head` over an `[n, d]` embedding matrix.
fn evaluate_embeddings(head: &ClassifierHead, embeddings: &Array, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation split".into()));
    }
    let mut g = Graph::new();
    let h = g.leaf(embeddings.clone(), false)?;
    let bind = bind_head(&mut g, head, false)?;
    let logits = classify(&mut g, h, &bind)?;
    Ok(argmax_accuracy(g.value(logits), labels))
}

/// Top-1 accuracy of encoder + head over one split: eval mode, full
/// coverage including partial batches.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    enc: &EncoderParams,
    head: &ClassifierHead,
    cfg: &RunConfig,
    manifest: &Manifest,
    split: Split,
    batch_size: usize,
    stats: &NormStats,
    t_frames: usize,
) -> Result<f64> {
    let data = load_split(manifest, split, cfg, t_frames, stats)?;
    let embeddings = embed_records(enc, cfg, &data, batch_size)?;
    evaluate_embeddings(head, &embeddings, &data.labels)
}

/// Train a zero-initialized linear head on frozen embeddings with Adam.
/// Mini-batches are re-partitioned every epoch; the epoch with the best
/// validation accuracy supplies the returned head.
fn train_head(
    train_emb: &Array,
    train_labels: &[usize],
    val_emb: &Array,
    val_labels: &[usize],
    cfg: &RunConfig,
    num_classes: usize,
) -> Result<(ClassifierHead, usize, usize, f64, f64)> {
    let d = train_emb.shape()[1];
    let n = train_emb.shape()[0];
    let mut head = ClassifierHead::zeros(num_classes, d);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E3779B97F4A7C15);
    let mut best_head = head.clone();
    let mut best_epoch = 0usize;
    let mut best_val = evaluate_embeddings(&head, val_emb, val_labels)?;

    let gather = |indices: &[usize]| -> (Array, Vec<usize>) {
        let mut rows = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            rows.extend_from_slice(&train_emb.data()[i * d..(i + 1) * d]);
            labels.push(train_labels[i]);
        }
        (Array::from_vec(&[indices.len(), d], rows).unwrap(), labels)
    };

    let mut epochs_run = 0;
    for epoch in 1..=cfg.adam.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.adam.batch_size.max(1)) {
            let (embeddings, labels) = gather(chunk);
            let mut g = Graph::new();
            let h = g.leaf(embeddings, false)?;
            let bind = bind_head(&mut g, &head, true)?;
            let logits = classify(&mut g, h, &bind)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            let grads: Vec<Array> = bind
                .named()
                .into_iter()
                .map(|t| g.grad(t).cloned().unwrap())
                .collect();
            let mut params = head.named_mut();
            adam.step(&mut params, &grads)?;
        }
        epochs_run = epoch;
        let val_acc = evaluate_embeddings(&head, val_emb, val_labels)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_head = head.clone();
            best_epoch = epoch;
        }
    }
    let train_acc = evaluate_embeddings(&best_head, train_emb, train_labels)?;
    Ok((best_head, best_epoch, epochs_run, train_acc, best_val))
}

/// Linear evaluation: freeze the encoder, compute embeddings once, train
/// only the classifier head.
pub fn linear_probe(
    enc: &EncoderParams,
    cfg: &RunConfig,
    manifest: &Manifest,
    task: &str,
    init: InitKind,
) -> Result<EvalReport> {
    if manifest.num_classes() < 2 {
        return Err(Error::InvalidArgument(
            "downstream task needs at least 2 labeled classes".into(),
        ));
    }
    let t_frames = downstream_frames(manifest, &cfg.dsp)?;
    let stats = downstream_norm_stats(manifest, cfg)?;
    let batch = cfg.adam.batch_size;
    let train = load_split(manifest, Split::Train, cfg, t_frames, &stats)?;
    let val = load_split(manifest, Split::Val, cfg, t_frames, &stats)?;
    let test = load_split(manifest, Split::Test, cfg, t_frames, &stats)?;

    let train_emb = embed_records(enc, cfg, &train, batch)?;
    let val_emb = embed_records(enc, cfg, &val, batch)?;
    let test_emb = embed_records(enc, cfg, &test, batch)?;

    let (head, best_epoch, epochs_run, train_acc, val_acc) = train_head(
        &train_emb,
        &train.labels,
        &val_emb,
        &val.labels,
        cfg,
        manifest.num_classes(),
    )?;
    let test_acc = evaluate_embeddings(&head, &test_emb, &test.labels)?;
    Ok(EvalReport {
        task: task.to_string(),
        protocol: Protocol::Linear,
        init,
        train_accuracy: train_acc,
        val_accuracy: val_acc,
        test_accuracy: test_acc,
        epochs_run,
        best_epoch,
        selection: "best validation accuracy".into(),
    })
}

/// End-to-end fine-tuning of encoder plus head with Adam, best-validation
/// selection over at most `adam.max_epochs` epochs.
pub fn finetune(
    enc_init: &EncoderParams,
    cfg: &RunConfig,
    manifest: &Manifest,
    task: &str,
    init: InitKind,
) -> Result<EvalReport> {
    if manifest.num_classes() < 2 {
        return Err(Error::InvalidArgument(
            "downstream task needs at least 2 labeled classes".into(),
        ));
    }
    let t_frames = downstream_frames(manifest, &cfg.dsp)?;
    let stats = downstream_norm_stats(manifest, cfg)?;
    let batch = cfg.adam.batch_size.max(2);
    let train = load_split(manifest, Split::Train, cfg, t_frames, &stats)?;
    let val = load_split(manifest, Split::Val, cfg, t_frames, &stats)?;
    let test = load_split(manifest, Split::Test, cfg, t_frames, &stats)?;
    let num_classes = manifest.num_classes();

    let mut enc = enc_init.clone();
    let mut head = ClassifierHead::zeros(num_classes, cfg.model.fc_dim);
    let mut adam = Adam::new(cfg.adam.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6A09E667F3BCC909);

    let eval_on = |enc: &EncoderParams,
                   head: &ClassifierHead,
                   data: &LabeledFeatures|
     -> Result<f64> {
        let emb = embed_records(enc, cfg, data, batch)?;
        evaluate_embeddings(head, &emb, &data.labels)
    };

    let mut best_val = eval_on(&enc, &head, &val)?;
    let mut best_snapshot = (enc.clone(), head.clone(), 0usize);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.adam.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                // train-mode batch norm needs at least two samples
                continue;
            }
            let (features, labels) = train.gather(chunk)?;
            let mut g = Graph::new();
            let x = g.leaf(features, false)?;
            let enc_bind = bind_encoder(&mut g, &enc, true)?;
            let head_bind = bind_head(&mut g, &head, true)?;
            let (h, _) = encoder_forward(
                &mut g,
                &enc_bind,
                &mut enc,
                &cfg.model,
                x,
                Mode::Train,
                &mut rng,
            )?;
            let logits = classify(&mut g, h, &head_bind)?;
            let loss = g.softmax_cross_entropy(logits, &labels)?;
            g.backward(loss)?;
            let grads: Vec<Array> = enc_bind
                .named()
                .into_iter()
                .chain(head_bind.named())
                .map(|t| g.grad(t).cloned().unwrap())
                .collect();
            let mut params = enc.named_mut();
            params.extend(head.named_mut());
            adam.step(&mut params, &grads)?;
        }
        epochs_run = epoch;
        let val_acc = eval_on(&enc, &head, &val)?;
        if val_acc > best_val {
            best_val = val_acc;
            best_snapshot = (enc.clone(), head.clone(), epoch);
        }
    }

    let (best_enc, best_head, best_epoch) = best_snapshot;
    let train_acc = eval_on(&best_enc, &best_head, &train)?;
    let test_acc = eval_on(&best_enc, &best_head, &test)?;
    Ok(EvalReport {
        task: task.to_string(),
        protocol: Protocol::Finetune,
        init,
        train_accuracy: train_acc,
        val_accuracy: best_val,
        test_accuracy: test_acc,
        epochs_run,
        best_epoch,
        selection: "best validation accuracy".into(),
    })
}

// ── embedding extraction ────────────────────────────────────────────

const EMBED_MAGIC: &[u8; 4] = b"DLEM";
const EMBED_VERSION: u32 = 1;

/// Eval-mode embeddings for every record in the manifest, in record order.
pub fn extract_embeddings(
    enc: &EncoderParams,
    cfg: &RunConfig,
    manifest: &Manifest,
    batch_size: usize,
) -> Result<Vec<(String, Vec<f64>)>> {
    let t_frames = downstream_frames(manifest, &cfg.dsp)?;
    let all = manifest.with_all_in_split(Split::Train);
    let dataset = DataSet::load(&all, Split::Train, &cfg.dsp)?;
    let stats = NormStats::from_values(dataset.features().iter().map(|s| s.values()))?;
    let features: Vec<Array> = dataset
        .features()
        .iter()
        .map(|spec| normalize(crop_frames_center(spec, t_frames, &cfg.dsp).values(), &stats))
        .collect::<Result<_>>()?;
    let labels = vec![0usize; features.len()];
    let data = LabeledFeatures { features, labels };
    let embeddings = embed_records(enc, cfg, &data, batch_size)?;
    let d = cfg.model.fc_dim;
    Ok(all
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| {
            (
                r.path.display().to_string(),
                embeddings.data()[i * d..(i + 1) * d].to_vec(),
            )
        })
        .collect())
}

/// Write embeddings as `{magic, version, count, dim, rows}` with each row
/// `{u16 id length, id bytes, dim * f32 little-endian}`.
pub fn write_embeddings(path: &Path, rows: &[(String, Vec<f64>)]) -> Result<()> {
    let dim = rows.first().map(|(_, v)| v.len()).unwrap_or(0);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(EMBED_MAGIC);
    bytes.extend_from_slice(&EMBED_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(dim as u32).to_le_bytes());
    for (id, values) in rows {
        let id_bytes = id.as_bytes();
        bytes.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
        bytes.extend_from_slice(id_bytes);
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}
