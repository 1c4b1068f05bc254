//! Waveform handling: 16-bit PCM mono WAV files, segment slicing, and
//! speed perturbation by band-limited resampling.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::{SegmentRecord, SPEED_SUFFIX};

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Read a mono 16-bit PCM WAV file. Any other layout is rejected.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            message: format!("expected mono audio, found {} channels", spec.channels),
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Audio {
            path: path.to_path_buf(),
            message: format!(
                "expected 16-bit PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let sample_rate = spec.sample_rate;
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples().collect();
    let samples = samples.map_err(|e| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Waveform {
        samples: samples.iter().map(|&s| f64::from(s) / 32768.0).collect(),
        sample_rate,
    })
}

/// Write a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, waveform: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: waveform.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map_err = |e: hound::Error| Error::Audio {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    for &s in &waveform.samples {
        let q = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)?;
    Ok(())
}

/// Extract the sample span of a record: `round(start*rate)` inclusive to
/// `round(end*rate)` exclusive.
pub fn slice_segment(waveform: &Waveform, record: &SegmentRecord) -> Result<Waveform> {
    if waveform.sample_rate != record.sample_rate {
        return Err(Error::InvalidRecord {
            id: record.id.clone(),
            message: format!(
                "record sample_rate {} does not match audio sample_rate {}",
                record.sample_rate, waveform.sample_rate
            ),
        });
    }
    let rate = waveform.sample_rate as f64;
    let start = (record.start * rate).round() as usize;
    let end = (record.end * rate).round() as usize;
    if end > waveform.samples.len() || start >= end {
        return Err(Error::SliceOutOfRange {
            start,
            end,
            len: waveform.samples.len(),
        });
    }
    Ok(Waveform {
        samples: waveform.samples[start..end].to_vec(),
        sample_rate: waveform.sample_rate,
    })
}

pub fn check_speed_factor(factor: f64) -> Result<()> {
    if !(factor > 0.5 && factor < 2.0) {
        return Err(Error::SpeedFactor(factor));
    }
    Ok(())
}

// Half-width of the windowed-sinc interpolation kernel, in input samples.
const SINC_TAPS: isize = 32;

/// Resample so playback is `factor` times faster: output sample `i` is the
/// band-limited interpolation of the input at position `i * factor`. The
/// sample rate is unchanged and the output holds `round(len/factor)` samples.
///
/// Kernel: Hann-windowed sinc, with the cutoff lowered to `1/factor` when
/// speeding up so content above the new Nyquist is attenuated instead of
/// aliased. At `factor = 1` the kernel reduces to the identity.
pub fn speed_perturb(waveform: &Waveform, factor: f64) -> Result<Waveform> {
    check_speed_factor(factor)?;
    let n = waveform.samples.len();
    let out_len = (n as f64 / factor).round() as usize;
    let cutoff = (1.0 / factor).min(1.0);
    let x = &waveform.samples;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * factor;
        let center = pos.floor() as isize;
        let mut acc = 0.0;
        for k in (center - SINC_TAPS + 1)..=(center + SINC_TAPS) {
            if k < 0 || k as usize >= n {
                continue;
            }
            let d = pos - k as f64;
            acc += x[k as usize] * windowed_sinc(d, cutoff);
        }
        out.push(acc);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: waveform.sample_rate,
    })
}

fn windowed_sinc(d: f64, cutoff: f64) -> f64 {
    let t = d / SINC_TAPS as f64;
    if t.abs() >= 1.0 {
        return 0.0;
    }
    let window = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
    cutoff * sinc(cutoff * d) * window
}

fn sinc(v: f64) -> f64 {
    if v == 0.0 {
        1.0
    } else {
        let pv = std::f64::consts::PI * v;
        pv.sin() / pv
    }
}

/// Resolves `audio_ref` strings to waveforms. Plain refs are WAV paths
/// relative to the store root; a `#sp<factor>` suffix applies speed
/// perturbation on load.
#[derive(Debug, Clone)]
pub struct AudioStore {
    root: PathBuf,
}

impl AudioStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        AudioStore { root: root.into() }
    }

    pub fn resolve_path(&self, audio_ref: &str) -> (PathBuf, Option<f64>) {
        match audio_ref.split_once(SPEED_SUFFIX) {
            Some((base, factor)) => (self.root.join(base), factor.parse().ok()),
            None => (self.root.join(audio_ref), None),
        }
    }

    /// Load the waveform behind a record's `audio_ref`, validating the
    /// record's declared sample rate against the file.
    pub fn load(&self, record: &SegmentRecord) -> Result<Waveform> {
        let (path, factor) = self.resolve_path(&record.audio_ref);
        let wave = read_wav(&path)?;
        if wave.sample_rate != record.sample_rate {
            return Err(Error::SampleRate {
                path,
                found: wave.sample_rate,
                expected: record.sample_rate,
            });
        }
        match factor {
            Some(f) => speed_perturb(&wave, f),
            None => Ok(wave),
        }
    }

    /// Load and slice the record's segment in one step.
    pub fn load_segment(&self, record: &SegmentRecord) -> Result<Waveform> {
        let wave = self.load(record)?;
        slice_segment(&wave, record)
    }
}
