//! Log-mel feature extraction: WAV ingestion, band-limited resampling,
//! Hann-windowed power spectra, Slaney-scale mel filterbank, log compression
//! and fixed-length frame crops.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Mono audio in [-1, 1] at a known sample rate.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// Log-compressed mel filterbank features, `[n_mels, frames]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    values: Array,
}

impl LogMelSpectrogram {
    pub fn new(values: Array) -> Result<Self> {
        if values.shape().len() != 2 || values.shape()[1] == 0 {
            return Err(Error::ShapeMismatch {
                context: "LogMelSpectrogram",
                expected: "[n_mels, frames >= 1]".into(),
                actual: format!("{:?}", values.shape()),
            });
        }
        Ok(LogMelSpectrogram { values })
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Array {
        &self.values
    }

    pub fn into_values(self) -> Array {
        self.values
    }

    pub fn get(&self, mel: usize, frame: usize) -> f64 {
        self.values.data()[mel * self.frames() + frame]
    }
}

/// Feature extraction parameters. Defaults: 16 kHz audio, 64 ms window,
/// 10 ms hop, 64 mel bins spanning 60-7800 Hz, natural-log compression
/// floored at 1e-10, 96-frame pretraining crops.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub pretrain_frames: usize,
}

impl Default for DspConfig {
    fn default() -> Self {
        DspConfig {
            sample_rate: 16_000,
            window_ms: 64,
            hop_ms: 10,
            n_mels: 64,
            fmin: 60.0,
            fmax: 7800.0,
            log_floor: 1e-10,
            pretrain_frames: 96,
        }
    }
}

impl DspConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fmin < self.fmax && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Config(format!(
                "mel band range {}-{} Hz invalid for sample rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if self.window_ms <= self.hop_ms {
            return Err(Error::Config(format!(
                "window ({} ms) must exceed hop ({} ms)",
                self.window_ms, self.hop_ms
            )));
        }
        if self.n_mels == 0 || self.log_floor <= 0.0 || self.pretrain_frames == 0 {
            return Err(Error::Config("n_mels, log_floor and pretrain_frames must be positive".into()));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        (self.sample_rate as usize * self.window_ms as usize) / 1000
    }

    pub fn hop_len(&self) -> usize {
        (self.sample_rate as usize * self.hop_ms as usize) / 1000
    }

    /// FFT size: next power of two >= window length.
    pub fn fft_len(&self) -> usize {
        self.window_len().next_power_of_two()
    }

    /// Padding value used outside real frames: the log floor.
    pub fn floor_value(&self) -> f64 {
        self.log_floor.ln()
    }

    /// Frame count for a clip of `len` samples: 1 + floor((len - window) / hop).
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        if len < self.window_len() {
            None
        } else {
            Some(1 + (len - self.window_len()) / self.hop_len())
        }
    }
}

// ── mel scale ───────────────────────────────────────────────────────

/// Hz to mel, Slaney formula: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(freq: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    const MIN_LOG_MEL: f64 = 15.0;
    if freq < MIN_LOG_HZ {
        freq / F_SP
    } else {
        MIN_LOG_MEL + (freq / MIN_LOG_HZ).ln() / (6.4f64.ln() / 27.0)
    }
}

/// Mel to Hz, inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_MEL: f64 = 15.0;
    if mel < MIN_LOG_MEL {
        mel * F_SP
    } else {
        1000.0 * ((mel - MIN_LOG_MEL) * (6.4f64.ln() / 27.0)).exp()
    }
}

/// Triangular band edge frequencies in Hz: `n_mels + 2` points equally
/// spaced on the mel scale between fmin and fmax.
pub fn mel_band_edges(cfg: &DspConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.fmin);
    let hi = hz_to_mel(cfg.fmax);
    (0..cfg.n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect()
}

/// Mel filterbank `[n_mels, n_fft/2 + 1]`: peak-one triangles sampled at the
/// FFT bin centers.
pub fn mel_filterbank(cfg: &DspConfig) -> Vec<Vec<f64>> {
    let edges = mel_band_edges(cfg);
    let n_bins = cfg.fft_len() / 2 + 1;
    let bin_hz = cfg.sample_rate as f64 / cfg.fft_len() as f64;
    (0..cfg.n_mels)
        .map(|m| {
            let (f_lo, f_c, f_hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let rising = (f - f_lo) / (f_c - f_lo);
                    let falling = (f_hi - f) / (f_hi - f_c);
                    rising.min(falling).max(0.0)
                })
                .collect()
        })
        .collect()
}

// ── audio loading ───────────────────────────────────────────────────

/// Read a PCM WAV (16-bit int or 32-bit float), average channels to mono,
/// and resample to `target_rate`.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<AudioClip> {
    let audio_err = |message: String| Error::Audio {
        path: path.to_path_buf(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(audio_err("zero channels".into()));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| audio_err(e.to_string()))?,
        (fmt, bits) => {
            return Err(audio_err(format!(
                "unsupported sample format {fmt:?} at {bits} bits (need 16-bit PCM or 32-bit float)"
            )))
        }
    };
    if interleaved.is_empty() {
        return Err(audio_err("empty audio".into()));
    }
    let mono: Vec<f64> = interleaved
        .chunks_exact(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(audio_err("empty audio".into()));
    }
    let mut samples = resample(&mono, spec.sample_rate, target_rate);
    if samples.is_empty() {
        return Err(audio_err("empty audio after resampling".into()));
    }
    for v in samples.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(AudioClip {
        samples,
        sample_rate: target_rate,
    })
}

/// Write mono samples as 16-bit PCM WAV.
pub fn write_wav_mono16(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    for &v in samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(|e| Error::Audio {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    }
    writer.finalize().map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Band-limited polyphase resampling with a Hann-windowed sinc prototype.
pub fn resample(input: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    assert!(from_rate > 0 && to_rate > 0);
    if from_rate == to_rate {
        return input.to_vec();
    }
    let g = gcd(from_rate as u64, to_rate as u64);
    let up = (to_rate as u64 / g) as i64; // L
    let down = (from_rate as u64 / g) as i64; // M
    let max_ratio = up.max(down);

    // Prototype lowpass at the upsampled rate: cutoff pi / max(L, M),
    // 16 zero crossings per side, Hann window, gain L.
    let half = 16 * max_ratio;
    let n_taps = 2 * half + 1;
    let cutoff = 1.0 / max_ratio as f64;
    let taps: Vec<f64> = (0..n_taps)
        .map(|i| {
            let x = (i - half) as f64;
            let sinc = if x == 0.0 {
                1.0
            } else {
                (std::f64::consts::PI * cutoff * x).sin() / (std::f64::consts::PI * cutoff * x)
            };
            let window = 0.5
                + 0.5
                    * (std::f64::consts::PI * (i - half) as f64 / (half + 1) as f64)
                        .cos();
            up as f64 * cutoff * sinc * window
        })
        .collect();

    let n_in = input.len() as i64;
    let n_out = (input.len() as u64 * up as u64 / down as u64) as usize;
    let mut out = vec![0.0; n_out];
    for (j, o) in out.iter_mut().enumerate() {
        let up_pos = j as i64 * down;
        // taps index = up_pos - t*up + half must lie in [0, n_taps)
        let t_min = ((up_pos + half - (n_taps - 1)) + up - 1).div_euclid(up).max(0);
        let t_max = ((up_pos + half).div_euclid(up)).min(n_in - 1);
        let mut acc = 0.0;
        for t in t_min..=t_max {
            let tap = (up_pos - t * up + half) as usize;
            acc += input[t as usize] * taps[tap];
        }
        *o = acc;
    }
    out
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ── log-mel extraction ──────────────────────────────────────────────

/// Log-compressed mel filterbank features of a clip.
///
/// Per frame: Hann window, magnitude-squared FFT, triangular mel pooling,
/// then `ln(max(power, log_floor))`.
pub fn logmel(clip: &AudioClip, cfg: &DspConfig) -> Result<LogMelSpectrogram> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "clip rate {} differs from configured {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let window_len = cfg.window_len();
    let hop = cfg.hop_len();
    let n_frames = cfg.frame_count(clip.samples.len()).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "clip of {} samples is shorter than one {}-sample window",
            clip.samples.len(),
            window_len
        ))
    })?;
    let fft_len = cfg.fft_len();
    let n_bins = fft_len / 2 + 1;

    // Periodic Hann window.
    let window: Vec<f64> = (0..window_len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / window_len as f64).cos())
        .collect();
    let filters = mel_filterbank(cfg);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(fft_len);

    let mut out = vec![0.0; cfg.n_mels * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut power = vec![0.0; n_bins];
    for frame in 0..n_frames {
        let start = frame * hop;
        for (i, c) in buf.iter_mut().enumerate() {
            let v = if i < window_len {
                clip.samples[start + i] * window[i]
            } else {
                0.0
            };
            *c = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filter) in filters.iter().enumerate() {
            let mut acc = 0.0;
            for (w, p) in filter.iter().zip(power.iter()) {
                acc += w * p;
            }
            out[m * n_frames + frame] = acc.max(cfg.log_floor).ln();
        }
    }
    LogMelSpectrogram::new(Array::from_vec(&[cfg.n_mels, n_frames], out)?)
}

/// Crop or right-pad to `length` frames. Crops take a uniformly random
/// contiguous column window; padding fills with the log floor. Values are
/// copied, never interpolated.
pub fn crop_frames(
    spec: &LogMelSpectrogram,
    length: usize,
    cfg: &DspConfig,
    rng: &mut ChaCha8Rng,
) -> LogMelSpectrogram {
    let t = spec.frames();
    let start = if t > length {
        rng.random_range(0..=t - length)
    } else {
        0
    };
    crop_frames_at(spec, length, cfg, start)
}

/// Deterministic centered crop (or right-pad), for evaluation paths where
/// random cropping would act as an augmentation.
pub fn crop_frames_center(
    spec: &LogMelSpectrogram,
    length: usize,
    cfg: &DspConfig,
) -> LogMelSpectrogram {
    let t = spec.frames();
    let start = if t > length { (t - length) / 2 } else { 0 };
    crop_frames_at(spec, length, cfg, start)
}

fn crop_frames_at(
    spec: &LogMelSpectrogram,
    length: usize,
    cfg: &DspConfig,
    start: usize,
) -> LogMelSpectrogram {
    let f = spec.n_mels();
    let t = spec.frames();
    let mut out = vec![cfg.floor_value(); f * length];
    if t >= length {
        for m in 0..f {
            let src = &spec.values.data()[m * t + start..m * t + start + length];
            out[m * length..(m + 1) * length].copy_from_slice(src);
        }
    } else {
        for m in 0..f {
            let src = &spec.values.data()[m * t..(m + 1) * t];
            out[m * length..m * length + t].copy_from_slice(src);
        }
    }
    LogMelSpectrogram::new(Array::from_vec(&[f, length], out).unwrap()).unwrap()
}

// ── feature cache ───────────────────────────────────────────────────

const CACHE_MAGIC: &[u8; 4] = b"MELC";
const CACHE_VERSION: u32 = 1;

/// Write a spectrogram as `{magic, version, F, T, float32 row-major}`.
pub fn write_feature_cache(path: &Path, spec: &LogMelSpectrogram) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + spec.values.numel() * 4);
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(spec.n_mels() as u32).to_le_bytes());
    bytes.extend_from_slice(&(spec.frames() as u32).to_le_bytes());
    for &v in spec.values.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Read a spectrogram written by [`write_feature_cache`]. Values carry f32
/// precision.
pub fn read_feature_cache(path: &Path) -> Result<LogMelSpectrogram> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != CACHE_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a feature cache file",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: feature cache version {version}, expected {CACHE_VERSION}",
            path.display()
        )));
    }
    let f = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected = 16 + f * t * 4;
    if bytes.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{}: truncated feature cache ({} bytes, expected {expected})",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    LogMelSpectrogram::new(Array::from_vec(&[f, t], data)?)
}

/// Cast spectrogram values to f32 bit patterns, matching what the cache
/// stores. Used to compare freshly computed features with cached ones.
pub fn quantize_f32(spec: &LogMelSpectrogram) -> Vec<f32> {
    spec.values.data().iter().map(|&v| v as f32).collect()
}
