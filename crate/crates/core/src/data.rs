//! Dataset ingestion: CSV manifests, a synthetic tone-cluster generator for
//! desk-scale runs, per-record feature extraction and epoch batching.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{self, DspConfig, LogMelSpectrogram};
use crate::error::{Error, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn parse(token: &str) -> Option<Split> {
        match token {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub label: Option<String>,
    pub split: Split,
}

/// Validated record list with a deterministic label -> index map built from
/// the sorted distinct labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    records: Vec<ManifestRecord>,
    label_map: BTreeMap<String, usize>,
}

impl Manifest {
    pub fn from_records(records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen: HashSet<(Split, &Path)> = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            if !seen.insert((rec.split, rec.path.as_path())) {
                return Err(Error::Manifest {
                    line: i + 2, // header is line 1
                    message: format!(
                        "duplicate path {} in split {}",
                        rec.path.display(),
                        rec.split
                    ),
                });
            }
        }
        let mut labels: Vec<String> = records
            .iter()
            .filter_map(|r| r.label.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        labels.sort();
        let label_map = labels
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l, i))
            .collect();
        Ok(Manifest { records, label_map })
    }

    /// Parse a `path,label,split` CSV with a required header. The label
    /// column may be empty for unlabeled records.
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .from_path(path)
            .map_err(|e| Error::Manifest {
                line: 0,
                message: format!("{}: {e}", path.display()),
            })?;
        {
            let headers = reader.headers().map_err(|e| Error::Manifest {
                line: 1,
                message: e.to_string(),
            })?;
            let expected = ["path", "label", "split"];
            let got: Vec<&str> = headers.iter().collect();
            if got != expected {
                return Err(Error::Manifest {
                    line: 1,
                    message: format!("header must be path,label,split, got {}", got.join(",")),
                });
            }
        }
        let mut records = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| Error::Manifest {
                line,
                message: e.to_string(),
            })?;
            if row.len() != 3 {
                return Err(Error::Manifest {
                    line,
                    message: format!("expected 3 columns, got {}", row.len()),
                });
            }
            let split = Split::parse(&row[2]).ok_or_else(|| Error::Manifest {
                line,
                message: format!("unknown split token {:?}", &row[2]),
            })?;
            let label = if row[1].is_empty() {
                None
            } else {
                Some(row[1].to_string())
            };
            records.push(ManifestRecord {
                path: PathBuf::from(&row[0]),
                label,
                split,
            });
        }
        let mut seen: HashSet<(Split, PathBuf)> = HashSet::new();
        for (i, rec) in records.iter().enumerate() {
            if !seen.insert((rec.split, rec.path.clone())) {
                return Err(Error::Manifest {
                    line: i + 2,
                    message: format!(
                        "duplicate path {} in split {}",
                        rec.path.display(),
                        rec.split
                    ),
                });
            }
        }
        Manifest::from_records(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,label,split\n");
        for rec in &self.records {
            out.push_str(&format!(
                "{},{},{}\n",
                rec.path.display(),
                rec.label.as_deref().unwrap_or(""),
                rec.split
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn label_map(&self) -> &BTreeMap<String, usize> {
        &self.label_map
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_map.get(label).copied()
    }

    /// Copy of this manifest with every record assigned to one split.
    /// Used to turn a labeled dataset into an unlabeled pretraining pool.
    pub fn with_all_in_split(&self, split: Split) -> Manifest {
        let records = self
            .records
            .iter()
            .map(|r| ManifestRecord {
                path: r.path.clone(),
                label: r.label.clone(),
                split,
            })
            .collect();
        Manifest::from_records(records).expect("relabeled manifest stays valid")
    }

    /// Mean clip duration in seconds, from WAV headers.
    pub fn average_duration_s(&self) -> Result<f64> {
        if self.records.is_empty() {
            return Err(Error::InvalidArgument("empty manifest".into()));
        }
        let mut total = 0.0;
        for rec in &self.records {
            let reader = hound::WavReader::open(&rec.path).map_err(|e| Error::Audio {
                path: rec.path.clone(),
                message: e.to_string(),
            })?;
            let spec = reader.spec();
            let frames = reader.duration() as f64;
            total += frames / spec.sample_rate as f64;
        }
        Ok(total / self.records.len() as f64)
    }
}

/// Downstream crop length: frame count of the average clip duration,
/// rounded to the nearest multiple of 16 so the three 2x pools stay
/// integral (minimum 16).
pub fn downstream_frames(manifest: &Manifest, cfg: &DspConfig) -> Result<usize> {
    let avg_s = manifest.average_duration_s()?;
    let samples = (avg_s * cfg.sample_rate as f64).round() as usize;
    let frames = cfg.frame_count(samples).unwrap_or(1);
    Ok((((frames + 8) / 16) * 16).max(16))
}

// ── synthetic dataset ───────────────────────────────────────────────

/// Synthetic dataset shape: `classes` tone-cluster classes, `per_class`
/// clips each, deterministic under `seed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 4,
            per_class: 50,
            duration_s: 1.0,
            seed: 0,
        }
    }
}

/// Generate WAVs plus a manifest under `out_dir`.
///
/// Class k is a band-limited tone cluster at base frequency 200 * 2^(k/2)
/// Hz: five sinusoids drawn from the band 0.75-1.25 times the base, each
/// with random phase and +-3% frequency jitter, plus white noise at 20 dB
/// SNR. Neighboring class bands overlap, so single clips are genuinely
/// confusable. Splits are assigned per class in a 5:2:2 train/val/test
/// ratio.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    if spec.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.per_class == 0 || spec.duration_s <= 0.0 {
        return Err(Error::InvalidArgument(
            "per_class and duration must be positive".into(),
        ));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sample_rate = 16_000u32;
    let n_samples = (spec.duration_s * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.classes * spec.per_class);

    let n = spec.per_class;
    let n_val = ((2 * n) as f64 / 9.0).round() as usize;
    let n_test = n_val;
    for class in 0..spec.classes {
        let base_freq = 200.0 * 2f64.powf(class as f64 / 2.0);
        let label = format!("class_{class:02}");
        // TODO(tuning): frozen after the desk-scale experiments; remove env knob
        let spread: f64 = std::env::var("C8_SPREAD")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(0.25);
        for idx in 0..n {
            let mut signal = vec![0.0f64; n_samples];
            for _ in 0..5 {
                let band = rng.random_range(1.0 - spread..1.0 + spread);
                let jitter = 1.0 + rng.random_range(-0.03..0.03);
                let freq = base_freq * band * jitter;
                if freq >= sample_rate as f64 / 2.0 {
                    continue;
                }
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                for (i, s) in signal.iter_mut().enumerate() {
                    *s += (std::f64::consts::TAU * freq * i as f64 / sample_rate as f64 + phase)
                        .sin();
                }
            }
            // white noise at 20 dB SNR
            let signal_power =
                signal.iter().map(|v| v * v).sum::<f64>() / n_samples as f64;
            let noise_std = (signal_power / 100.0).sqrt();
            for s in signal.iter_mut() {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *s += noise_std * z;
            }
            let peak = signal.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                let gain = 0.9 / peak;
                for s in signal.iter_mut() {
                    *s *= gain;
                }
            }
            let filename = format!("{label}_{idx:04}.wav");
            let path = out_dir.join(&filename);
            dsp::write_wav_mono16(&path, &signal, sample_rate)?;
            let split = if idx < n - n_val - n_test {
                Split::Train
            } else if idx < n - n_test {
                Split::Val
            } else {
                Split::Test
            };
            records.push(ManifestRecord {
                path,
                label: Some(label.clone()),
                split,
            });
        }
    }
    let manifest = Manifest::from_records(records)?;
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

// ── batching ────────────────────────────────────────────────────────

/// One training/evaluation batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[b, 1, n_mels, t]` log-mel features.
    pub features: Array,
    /// Present for supervised tasks.
    pub labels: Option<Vec<usize>>,
    /// Record identifiers (paths).
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Unlabeled, final partial batch dropped (batch statistics need
    /// full-size batches).
    Pretrain,
    /// Labeled, every record visited.
    Supervised,
}

/// Decoded features for one split, extracted once and batched per epoch.
pub struct DataSet {
    ids: Vec<String>,
    labels: Vec<Option<usize>>,
    features: Vec<LogMelSpectrogram>,
}

impl DataSet {
    pub fn load(manifest: &Manifest, split: Split, cfg: &DspConfig) -> Result<DataSet> {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut features = Vec::new();
        for rec in manifest.split_records(split) {
            let clip = dsp::load_audio(&rec.path, cfg.sample_rate)?;
            let spec = dsp::logmel(&clip, cfg).map_err(|e| Error::Audio {
                path: rec.path.clone(),
                message: e.to_string(),
            })?;
            ids.push(rec.path.display().to_string());
            labels.push(
                rec.label
                    .as_deref()
                    .and_then(|l| manifest.label_index(l)),
            );
            features.push(spec);
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "split {split} of the manifest is empty"
            )));
        }
        Ok(DataSet {
            ids,
            labels,
            features,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn features(&self) -> &[LogMelSpectrogram] {
        &self.features
    }

    /// Batches for one epoch: shuffle under the caller's rng, crop or pad
    /// every clip to `t_frames`, stack to `[b, 1, n_mels, t]`.
    pub fn epoch_batches(
        &self,
        batch_size: usize,
        t_frames: usize,
        mode: BatchMode,
        cfg: &DspConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let mut batches = Vec::new();
        for chunk in order.chunks(batch_size) {
            if mode == BatchMode::Pretrain && chunk.len() < batch_size {
                break;
            }
            let mut specs = Vec::with_capacity(chunk.len());
            let mut ids = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                // random crops are a pretraining augmentation; supervised
                // paths use a deterministic center crop
                let cropped = if mode == BatchMode::Pretrain {
                    dsp::crop_frames(&self.features[i], t_frames, cfg, rng)
                } else {
                    dsp::crop_frames_center(&self.features[i], t_frames, cfg)
                };
                specs.push(cropped.into_values());
                ids.push(self.ids[i].clone());
                labels.push(self.labels[i]);
            }
            let stacked = Array::stack(&specs)?; // [b, f, t]
            let shape = stacked.shape().to_vec();
            let features = stacked.reshaped(&[shape[0], 1, shape[1], shape[2]])?;
            let labels = if mode == BatchMode::Supervised {
                let resolved: Option<Vec<usize>> = labels.into_iter().collect();
                Some(resolved.ok_or_else(|| {
                    Error::InvalidArgument("supervised batch contains unlabeled records".into())
                })?)
            } else {
                None
            };
            batches.push(Batch {
                features,
                labels,
                ids,
            });
        }
        Ok(batches)
    }
}

use rand::SeedableRng;
