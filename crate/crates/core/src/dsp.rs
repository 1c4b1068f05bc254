//! Log-mel filterbank feature extraction and corpus-level mean/variance
//! normalization.
//!
//! Pipeline: pre-emphasis, Hamming-windowed framing, magnitude spectrum,
//! triangular mel filterbank (HTK mel scale, peak 1.0), floor, natural log.

use ndarray::{Array1, Array2};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};

pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Framing and filterbank parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub num_mels: usize,
    pub fft_size: usize,
    pub preemphasis: f64,
    pub low_freq: f64,
    pub high_freq: f64,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            num_mels: 80,
            fft_size: 512,
            preemphasis: 0.97,
            low_freq: 20.0,
            high_freq: 7600.0,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn frame_samples(&self, sample_rate: u32) -> usize {
        (self.frame_length_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.frame_shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let fail = |m: String| Err(Error::Feature(m));
        if self.num_mels == 0 {
            return fail("num_mels must be positive".into());
        }
        if self.frame_shift_ms <= 0.0 || self.frame_shift_ms > self.frame_length_ms {
            return fail(format!(
                "frame_shift {} ms must be in (0, frame_length {} ms]",
                self.frame_shift_ms, self.frame_length_ms
            ));
        }
        if self.fft_size < self.frame_samples(sample_rate) {
            return fail(format!(
                "fft_size {} is smaller than the {}-sample frame",
                self.fft_size,
                self.frame_samples(sample_rate)
            ));
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return fail(format!("preemphasis {} outside [0, 1)", self.preemphasis));
        }
        let nyquist = sample_rate as f64 / 2.0;
        if !(self.low_freq >= 0.0 && self.low_freq < self.high_freq && self.high_freq <= nyquist) {
            return fail(format!(
                "mel range [{}, {}] Hz invalid for Nyquist {} Hz",
                self.low_freq, self.high_freq, nyquist
            ));
        }
        if self.log_floor <= 0.0 {
            return fail(format!("log_floor {} must be positive", self.log_floor));
        }
        Ok(())
    }

    /// Stable 64-bit hash of the configuration, stored in feature archives
    /// so mismatched configs are caught at load time.
    pub fn content_hash(&self) -> u64 {
        let mut bytes = Vec::with_capacity(8 * 8);
        for v in [
            self.frame_length_ms,
            self.frame_shift_ms,
            self.num_mels as f64,
            self.fft_size as f64,
            self.preemphasis,
            self.low_freq,
            self.high_freq,
            self.log_floor,
        ] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fnv1a(&bytes)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Frames-by-mels feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    pub config: FeatureConfig,
    pub normalized: bool,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_mels(&self) -> usize {
        self.data.ncols()
    }
}

/// Number of frames produced for a waveform of `len` samples.
pub fn frame_count(len: usize, frame_samples: usize, shift_samples: usize) -> Option<usize> {
    if len < frame_samples {
        return None;
    }
    Some(1 + (len - frame_samples) / shift_samples)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the triangular filters: uniformly spaced in
/// mel between `low_freq` and `high_freq`.
pub fn mel_filter_centers(cfg: &FeatureConfig) -> Vec<f64> {
    mel_points(cfg)[1..=cfg.num_mels].iter().map(|&m| mel_to_hz(m)).collect()
}

fn mel_points(cfg: &FeatureConfig) -> Vec<f64> {
    let lo = hz_to_mel(cfg.low_freq);
    let hi = hz_to_mel(cfg.high_freq);
    let n = cfg.num_mels + 1;
    (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect()
}

/// Dense filterbank matrix: num_mels x (fft_size/2 + 1), triangles linear in
/// mel with peak 1.0.
fn build_filterbank(cfg: &FeatureConfig, sample_rate: u32) -> Array2<f64> {
    let bins = cfg.fft_size / 2 + 1;
    let points = mel_points(cfg);
    let mut fb = Array2::zeros((cfg.num_mels, bins));
    for b in 0..bins {
        let hz = b as f64 * sample_rate as f64 / cfg.fft_size as f64;
        let mel = hz_to_mel(hz);
        for m in 0..cfg.num_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let w = if mel >= left && mel <= center {
                (mel - left) / (center - left)
            } else if mel > center && mel <= right {
                (right - mel) / (right - center)
            } else {
                0.0
            };
            fb[(m, b)] = w;
        }
    }
    fb
}

/// Extract a log-mel feature matrix from a waveform segment.
pub fn log_mel(waveform: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    cfg.validate(waveform.sample_rate)?;
    let frame = cfg.frame_samples(waveform.sample_rate);
    let shift = cfg.shift_samples(waveform.sample_rate);
    let len = waveform.samples.len();
    let frames = frame_count(len, frame, shift).ok_or_else(|| {
        Error::Feature(format!(
            "waveform of {len} samples is shorter than one {frame}-sample frame"
        ))
    })?;

    // Pre-emphasis over the whole signal.
    let mut emphasized = Vec::with_capacity(len);
    emphasized.push(waveform.samples[0]);
    for t in 1..len {
        emphasized.push(waveform.samples[t] - cfg.preemphasis * waveform.samples[t - 1]);
    }

    let window: Vec<f64> = (0..frame)
        .map(|n| {
            if frame == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (frame - 1) as f64).cos()
            }
        })
        .collect();

    let filterbank = build_filterbank(cfg, waveform.sample_rate);
    let bins = cfg.fft_size / 2 + 1;
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);

    let mut data = Array2::zeros((frames, cfg.num_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
    let mut magnitude = vec![0.0f64; bins];
    for fi in 0..frames {
        let offset = fi * shift;
        for (i, c) in buf.iter_mut().enumerate() {
            let s = if i < frame {
                emphasized[offset + i] * window[i]
            } else {
                0.0
            };
            *c = Complex::new(s, 0.0);
        }
        fft.process(&mut buf);
        for (b, m) in magnitude.iter_mut().enumerate() {
            *m = buf[b].norm();
        }
        for m in 0..cfg.num_mels {
            let mut energy = 0.0;
            for b in 0..bins {
                energy += filterbank[(m, b)] * magnitude[b];
            }
            data[(fi, m)] = energy.max(cfg.log_floor).ln();
        }
    }
    Ok(FeatureMatrix {
        data,
        config: cfg.clone(),
        normalized: false,
    })
}

/// Per-dimension pooled mean and population variance.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
    pub frame_count: u64,
}

/// Pool mean and population variance over all frames of all matrices.
/// Variances are floored at `VARIANCE_FLOOR`.
pub fn cmvn_fit<'a>(features: impl IntoIterator<Item = &'a FeatureMatrix> + Clone) -> Result<CmvnStats> {
    let mut dims: Option<usize> = None;
    let mut total: u64 = 0;
    for fm in features.clone() {
        if fm.normalized {
            return Err(Error::Cmvn("cannot fit on normalized features".into()));
        }
        match dims {
            None => dims = Some(fm.num_mels()),
            Some(d) if d != fm.num_mels() => {
                return Err(Error::Cmvn(format!(
                    "mixed dimensionality: {} vs {}",
                    d,
                    fm.num_mels()
                )))
            }
            _ => {}
        }
        total += fm.frames() as u64;
    }
    let dims = dims.ok_or_else(|| Error::Cmvn("empty feature collection".into()))?;
    if total < 2 {
        return Err(Error::Cmvn(format!("need at least 2 frames, have {total}")));
    }

    let mut mean = Array1::<f64>::zeros(dims);
    for fm in features.clone() {
        for row in fm.data.rows() {
            mean += &row;
        }
    }
    mean /= total as f64;

    let mut variance = Array1::<f64>::zeros(dims);
    for fm in features {
        for row in fm.data.rows() {
            let centered = &row - &mean;
            variance += &centered.mapv(|v| v * v);
        }
    }
    variance /= total as f64;
    variance.mapv_inplace(|v| v.max(VARIANCE_FLOOR));

    Ok(CmvnStats {
        mean,
        variance,
        frame_count: total,
    })
}

/// Normalize a feature matrix: `(x - mean) / sqrt(variance)` per dimension.
pub fn cmvn_apply(stats: &CmvnStats, fm: &FeatureMatrix) -> Result<FeatureMatrix> {
    if fm.normalized {
        return Err(Error::Cmvn("features are already normalized".into()));
    }
    if fm.num_mels() != stats.mean.len() {
        return Err(Error::Cmvn(format!(
            "dimension mismatch: features {} vs stats {}",
            fm.num_mels(),
            stats.mean.len()
        )));
    }
    let scale = stats.variance.mapv(f64::sqrt);
    let mut data = fm.data.clone();
    for mut row in data.rows_mut() {
        row -= &stats.mean;
        row /= &scale;
    }
    Ok(FeatureMatrix {
        data,
        config: fm.config.clone(),
        normalized: true,
    })
}
