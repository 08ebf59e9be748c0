//! Twin-view spectrogram augmentation: dataset normalization, linear-domain
//! mixup against a FIFO queue of past inputs, and random resized crop inside
//! a virtual time boundary.

use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Scalar mean/std of all training-set log-mel values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub nu: f64,
}

impl NormStats {
    /// Welford pass over every value of every spectrogram.
    pub fn from_values<'a>(specs: impl Iterator<Item = &'a Array>) -> Result<Self> {
        let mut count = 0u64;
        let mut mean = 0.0;
        let mut m2 = 0.0;
        for spec in specs {
            for &v in spec.data() {
                count += 1;
                let delta = v - mean;
                mean += delta / count as f64;
                m2 += delta * (v - mean);
            }
        }
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cannot compute normalization stats from an empty set".into(),
            ));
        }
        let nu = (m2 / count as f64).sqrt();
        if nu <= 0.0 {
            return Err(Error::Numerical(
                "normalization std is zero: all feature values identical".into(),
            ));
        }
        Ok(NormStats { mu: mean, nu })
    }
}

/// Elementwise (x - mu) / nu.
pub fn normalize(spec: &Array, stats: &NormStats) -> Result<Array> {
    if stats.nu <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "normalization std must be positive, got {}",
            stats.nu
        )));
    }
    let data: Vec<f64> = spec
        .data()
        .iter()
        .map(|&v| (v - stats.mu) / stats.nu)
        .collect();
    Array::from_vec(spec.shape(), data)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct MixupConfig {
    pub queue_size: usize,
    pub mix_ratio_max: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        MixupConfig {
            queue_size: 2048,
            mix_ratio_max: 0.4,
            enabled: true,
        }
    }
}

/// FIFO queue of past inputs kept in the linear power domain.
#[derive(Debug, Clone, Default)]
pub struct MixupQueue {
    entries: VecDeque<Array>,
    capacity: usize,
}

impl MixupQueue {
    pub fn new(capacity: usize) -> Self {
        MixupQueue {
            entries: VecDeque::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> Option<&Array> {
        self.entries.get(idx)
    }

    fn push(&mut self, entry: Array) {
        self.entries.push_back(entry);
        while self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = &Array> {
        self.entries.iter()
    }

    pub(crate) fn from_entries(capacity: usize, entries: Vec<Array>) -> Self {
        MixupQueue {
            entries: entries.into(),
            capacity,
        }
    }
}

/// log((1-r) * exp(x) + r * exp(partner)), elementwise.
pub fn mix_arrays(x: &Array, partner: &Array, r: f64) -> Result<Array> {
    if x.shape() != partner.shape() {
        return Err(Error::ShapeMismatch {
            context: "mixup",
            expected: format!("{:?}", x.shape()),
            actual: format!("{:?}", partner.shape()),
        });
    }
    let data: Vec<f64> = x
        .data()
        .iter()
        .zip(partner.data())
        .map(|(&a, &b)| ((1.0 - r) * a.exp() + r * b.exp()).ln())
        .collect();
    Array::from_vec(x.shape(), data)
}

/// Mix the input against a uniformly drawn queue entry at ratio
/// r ~ U(0, mix_ratio_max), then enqueue the input's linear version.
/// A cold (empty) queue passes the input through unchanged.
pub fn mixup(
    x: &Array,
    queue: &mut MixupQueue,
    cfg: &MixupConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    let out = if queue.is_empty() {
        x.clone()
    } else {
        let idx = rng.random_range(0..queue.len());
        let r = rng.random_range(0.0..cfg.mix_ratio_max.max(f64::MIN_POSITIVE));
        let partner = queue.get(idx).unwrap();
        let linear_partner_log: Vec<f64> = partner.data().iter().map(|&v| v.ln()).collect();
        let partner_log = Array::from_vec(partner.shape(), linear_partner_log)?;
        mix_arrays(x, &partner_log, r)?
    };
    let linear: Vec<f64> = x.data().iter().map(|&v| v.exp()).collect();
    queue.push(Array::from_vec(x.shape(), linear)?);
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RrcConfig {
    pub freq_range: [f64; 2],
    pub time_range: [f64; 2],
    pub virtual_time_factor: f64,
    pub enabled: bool,
}

impl Default for RrcConfig {
    fn default() -> Self {
        RrcConfig {
            freq_range: [0.6, 1.5],
            time_range: [0.6, 1.5],
            virtual_time_factor: 1.5,
            enabled: true,
        }
    }
}

impl RrcConfig {
    pub fn validate(&self) -> Result<()> {
        let [h1, h2] = self.freq_range;
        let [w1, w2] = self.time_range;
        if !(h1 > 0.0 && h1 <= h2 && w1 > 0.0 && w1 <= w2) {
            return Err(Error::Config(format!(
                "crop ranges must satisfy 0 < lo <= hi, got freq {:?}, time {:?}",
                self.freq_range, self.time_range
            )));
        }
        if self.virtual_time_factor < 1.0 {
            return Err(Error::Config(
                "virtual_time_factor must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Sampled crop geometry inside the virtual boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropWindow {
    pub f_start: usize,
    pub f_len: usize,
    /// Start in virtual time coordinates; the real spectrogram is centered
    /// in the virtual extent and zero-padded outside.
    pub t_start: usize,
    pub t_len: usize,
    pub virtual_t: usize,
}

/// Crop size per the clamped-uniform rule: the frequency crop never exceeds
/// the input, the time crop may spill into the zero-padded virtual region.
pub fn sample_crop_window(
    f: usize,
    t: usize,
    cfg: &RrcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<CropWindow> {
    cfg.validate()?;
    let [h1, h2] = cfg.freq_range;
    let [w1, w2] = cfg.time_range;
    let fu: f64 = rng.random_range(h1..=h2);
    let tu: f64 = rng.random_range(w1..=w2);
    let f_len = (fu.min(1.0) * f as f64).floor() as usize;
    let t_len = (tu * t as f64).floor() as usize;
    let virtual_t = (cfg.virtual_time_factor * t as f64).floor() as usize;
    if f_len < 1 || t_len < 1 {
        return Err(Error::Config(format!(
            "crop ranges produce an empty crop ({f_len}x{t_len}) for a {f}x{t} input"
        )));
    }
    let t_len = t_len.min(virtual_t);
    let f_start = rng.random_range(0..=f - f_len);
    let t_start = rng.random_range(0..=virtual_t - t_len);
    Ok(CropWindow {
        f_start,
        f_len,
        t_start,
        t_len,
        virtual_t,
    })
}

/// Extract `window` from the zero-padded virtual canvas and resize it back
/// to the input size with Catmull-Rom bicubic interpolation.
pub fn resized_crop(spec: &Array, window: &CropWindow) -> Result<Array> {
    let (f, t) = match spec.shape() {
        [f, t] => (*f, *t),
        other => {
            return Err(Error::ShapeMismatch {
                context: "resized_crop",
                expected: "[f, t]".into(),
                actual: format!("{other:?}"),
            })
        }
    };
    // The real spectrogram sits centered inside [0, virtual_t).
    let pad_left = (window.virtual_t - t) / 2;
    let mut crop = vec![0.0; window.f_len * window.t_len];
    for fi in 0..window.f_len {
        for ti in 0..window.t_len {
            let vf = window.f_start + fi;
            let vt = window.t_start + ti;
            let value = if vt >= pad_left && vt < pad_left + t {
                spec.data()[vf * t + (vt - pad_left)]
            } else {
                0.0
            };
            crop[fi * window.t_len + ti] = value;
        }
    }
    Ok(bicubic_resize(&crop, window.f_len, window.t_len, f, t))
}

/// Full random resized crop: sample a window, crop, resize back.
pub fn random_resized_crop(
    spec: &Array,
    cfg: &RrcConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    let (f, t) = match spec.shape() {
        [f, t] => (*f, *t),
        other => {
            return Err(Error::ShapeMismatch {
                context: "random_resized_crop",
                expected: "[f, t]".into(),
                actual: format!("{other:?}"),
            })
        }
    };
    if f < 4 || t < 4 {
        return Err(Error::InvalidArgument(format!(
            "random_resized_crop needs at least a 4x4 input, got {f}x{t}"
        )));
    }
    let window = sample_crop_window(f, t, cfg, rng)?;
    resized_crop(spec, &window)
}

/// Catmull-Rom kernel (a = -0.5).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

/// Separable bicubic resize with edge-clamped sampling.
fn bicubic_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Array {
    let mut out = vec![0.0; dh * dw];
    let scale_y = sh as f64 / dh as f64;
    let scale_x = sw as f64 / dw as f64;
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    for dy in 0..dh {
        let sy = (dy as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor() as isize;
        let fy = sy - y0 as f64;
        let wy: [f64; 4] = [
            cubic_weight(fy + 1.0),
            cubic_weight(fy),
            cubic_weight(fy - 1.0),
            cubic_weight(fy - 2.0),
        ];
        for dx in 0..dw {
            let sx = (dx as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor() as isize;
            let fx = sx - x0 as f64;
            let wx: [f64; 4] = [
                cubic_weight(fx + 1.0),
                cubic_weight(fx),
                cubic_weight(fx - 1.0),
                cubic_weight(fx - 2.0),
            ];
            let mut acc = 0.0;
            for (i, &wyv) in wy.iter().enumerate() {
                if wyv == 0.0 {
                    continue;
                }
                let row = clamp(y0 - 1 + i as isize, sh);
                let mut racc = 0.0;
                for (j, &wxv) in wx.iter().enumerate() {
                    let col = clamp(x0 - 1 + j as isize, sw);
                    racc += wxv * src[row * sw + col];
                }
                acc += wyv * racc;
            }
            out[dy * dw + dx] = acc;
        }
    }
    Array::from_vec(&[dh, dw], out).unwrap()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct AugmentConfig {
    pub mixup: MixupConfig,
    pub rrc: RrcConfig,
}

/// Build the two distorted views of a batch of normalized-ready log-mel
/// crops. Each view runs normalize -> mixup -> random resized crop with its
/// own queue and independent random draws; both views of a sample start
/// from the same crop.
pub fn make_views(
    batch: &[Array],
    stats: &NormStats,
    cfg: &AugmentConfig,
    queue_a: &mut MixupQueue,
    queue_b: &mut MixupQueue,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Array>, Vec<Array>)> {
    let mut views_a = Vec::with_capacity(batch.len());
    let mut views_b = Vec::with_capacity(batch.len());
    for spec in batch {
        let normalized = normalize(spec, stats)?;
        views_a.push(augment_view(&normalized, cfg, queue_a, rng)?);
        views_b.push(augment_view(&normalized, cfg, queue_b, rng)?);
    }
    Ok((views_a, views_b))
}

fn augment_view(
    normalized: &Array,
    cfg: &AugmentConfig,
    queue: &mut MixupQueue,
    rng: &mut ChaCha8Rng,
) -> Result<Array> {
    let mixed = if cfg.mixup.enabled {
        mixup(normalized, queue, &cfg.mixup, rng)?
    } else {
        normalized.clone()
    };
    if cfg.rrc.enabled {
        random_resized_crop(&mixed, &cfg.rrc, rng)
    } else {
        Ok(mixed)
    }
}
