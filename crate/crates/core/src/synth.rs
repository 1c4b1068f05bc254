//! Deterministic synthetic consonant-vowel corpus generator.
//!
//! Each token is built source-filter style: a consonant portion whose
//! acoustic signature depends on the consonant class (burst, frication,
//! glide, or murmur archetypes with class-specific resonances) followed by
//! a vowel portion (impulse-train source through two formant resonators).
//! The vowel's onset formants start at a locus determined by the produced
//! consonant class and glide to the vowel target, so consonant identity is
//! carried into the vowel — the co-articulation cue the CV segments rely
//! on.
//!
//! Two corruption knobs support controlled experiments: `consonant_noise`
//! mixes the consonant portion toward white noise (degrading C segments
//! while leaving the vowel transition intact) and `vowel_jitter` perturbs
//! formant targets (mildly degrading CV segments).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::manifest::{record_id, CorpusManifest, Group, SegmentKind, SegmentRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub consonants: Vec<String>,
    pub vowels: Vec<String>,
    /// Tokens generated per consonant-vowel combination.
    pub tokens_per_class: usize,
    pub sample_rate: u32,
    pub train_speakers: usize,
    pub test_speakers: usize,
    /// Fraction of test tokens whose produced consonant is substituted.
    pub atypical_fraction: f64,
    /// 0 keeps consonant portions clean; 1 replaces them with white noise.
    pub consonant_noise: f64,
    /// Scales random deviation of vowel formant targets (0 = none).
    pub vowel_jitter: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            consonants: vec!["b".into(), "s".into(), "l".into(), "m".into()],
            vowels: vec!["a".into(), "i".into(), "u".into()],
            tokens_per_class: 20,
            sample_rate: 16000,
            train_speakers: 4,
            test_speakers: 3,
            atypical_fraction: 0.1,
            consonant_noise: 0.0,
            vowel_jitter: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::SynthConfig(m));
        if self.consonants.len() < 2 {
            return fail(format!(
                "need at least 2 consonant classes, have {}",
                self.consonants.len()
            ));
        }
        if self.vowels.is_empty() {
            return fail("need at least 1 vowel class".into());
        }
        if self.tokens_per_class == 0 {
            return fail("tokens_per_class must be positive".into());
        }
        if self.sample_rate == 0 {
            return fail("sample_rate must be positive".into());
        }
        if self.train_speakers == 0 || self.test_speakers == 0 {
            return fail("need at least one training and one test speaker".into());
        }
        for (name, v) in [
            ("atypical_fraction", self.atypical_fraction),
            ("consonant_noise", self.consonant_noise),
            ("vowel_jitter", self.vowel_jitter),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return fail(format!("{name} {v} outside [0, 1]"));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for label in self.consonants.iter().chain(self.vowels.iter()) {
            if !seen.insert(label) {
                return fail(format!("duplicate class label {label:?}"));
            }
        }
        Ok(())
    }
}

pub struct SynthOutput {
    /// (audio_ref, waveform) in manifest order, one token per file.
    pub waveforms: Vec<(String, Waveform)>,
    pub manifest: CorpusManifest,
}

struct Speaker {
    id: String,
    f0: f64,
    formant_scale: f64,
    amplitude: f64,
    train: bool,
}

struct TokenPlan {
    speaker: usize,
    expected: usize,
    produced: usize,
    vowel: usize,
    group: Group,
}

/// Generates the corpus. Pure function of (spec, seed): waveforms and
/// manifest are bit-identical across calls.
pub fn synth_cv_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // 1. Speaker traits, in speaker order.
    let total_speakers = spec.train_speakers + spec.test_speakers;
    let speakers: Vec<Speaker> = (0..total_speakers)
        .map(|i| Speaker {
            id: format!("spk{i:02}"),
            f0: 235.0 + 50.0 * (rng.gen::<f64>() - 0.5),
            formant_scale: 0.92 + 0.16 * rng.gen::<f64>(),
            amplitude: 0.28 + 0.08 * rng.gen::<f64>(),
            train: i < spec.train_speakers,
        })
        .collect();

    // 2. Token plans in canonical (consonant, vowel, repetition) order;
    // speakers assigned round-robin within each cell.
    let mut plans = Vec::new();
    for ci in 0..spec.consonants.len() {
        for vi in 0..spec.vowels.len() {
            for k in 0..spec.tokens_per_class {
                let speaker = k % total_speakers;
                let group = if speakers[speaker].train {
                    Group::TrainTd
                } else {
                    Group::TestTd
                };
                plans.push(TokenPlan {
                    speaker,
                    expected: ci,
                    produced: ci,
                    vowel: vi,
                    group,
                });
            }
        }
    }

    // 3. Atypical substitutions among test tokens.
    let mut test_indices: Vec<usize> = plans
        .iter()
        .enumerate()
        .filter(|(_, p)| p.group == Group::TestTd)
        .map(|(i, _)| i)
        .collect();
    if spec.atypical_fraction > 0.0 && !test_indices.is_empty() {
        let count = ((test_indices.len() as f64 * spec.atypical_fraction).round() as usize)
            .clamp(1, test_indices.len());
        test_indices.shuffle(&mut rng);
        for &idx in test_indices.iter().take(count) {
            let shift = 1 + rng.gen_range(0..spec.consonants.len() - 1);
            let plan = &mut plans[idx];
            plan.produced = (plan.expected + shift) % spec.consonants.len();
            plan.group = Group::TestAtypical;
        }
    }

    // 4. Render tokens and emit one C and one CV record each.
    let mut waveforms = Vec::with_capacity(plans.len());
    let mut records = Vec::with_capacity(plans.len() * 2);
    for (idx, plan) in plans.iter().enumerate() {
        let speaker = &speakers[plan.speaker];
        let token = render_token(spec, speaker, plan.produced, plan.vowel, &mut rng);
        let audio_ref = format!("audio/tok{idx:04}.wav");
        let fs = spec.sample_rate as f64;
        let c_start = token.consonant_span.0 as f64 / fs;
        let c_end = token.consonant_span.1 as f64 / fs;
        let v_end = token.vowel_end as f64 / fs;
        let consonant = spec.consonants[plan.produced].clone();
        let expected = spec.consonants[plan.expected].clone();
        records.push(SegmentRecord {
            id: String::new(),
            audio_ref: audio_ref.clone(),
            sample_rate: spec.sample_rate,
            start: c_start,
            end: c_end,
            speaker_id: speaker.id.clone(),
            consonant: consonant.clone(),
            vowel: None,
            kind: SegmentKind::C,
            group: plan.group,
            expected_consonant: expected.clone(),
        });
        records.push(SegmentRecord {
            id: String::new(),
            audio_ref: audio_ref.clone(),
            sample_rate: spec.sample_rate,
            start: c_start,
            end: v_end,
            speaker_id: speaker.id.clone(),
            consonant,
            vowel: Some(spec.vowels[plan.vowel].clone()),
            kind: SegmentKind::Cv,
            group: plan.group,
            expected_consonant: expected,
        });
        waveforms.push((
            audio_ref,
            Waveform {
                samples: token.samples,
                sample_rate: spec.sample_rate,
            },
        ));
    }

    for (i, r) in records.iter_mut().enumerate() {
        r.id = record_id(i);
    }
    let manifest = CorpusManifest::from_records(records)?;
    Ok(SynthOutput {
        waveforms,
        manifest,
    })
}

struct RenderedToken {
    samples: Vec<f64>,
    consonant_span: (usize, usize),
    vowel_end: usize,
}

/// Archetype index for a consonant class.
fn archetype(class: usize) -> usize {
    class % 4
}

/// Second-formant locus (Hz) that the produced consonant imposes on the
/// following vowel's onset — the co-articulation cue.
fn f2_locus(class: usize) -> f64 {
    700.0 + 420.0 * class as f64
}

fn f1_locus(class: usize) -> f64 {
    [350.0, 300.0, 420.0, 260.0][archetype(class)]
}

/// Vowel formant targets (F1, F2) in Hz.
fn vowel_targets(vowel: usize) -> (f64, f64) {
    let base = [
        (850.0, 1500.0),
        (400.0, 2450.0),
        (430.0, 1050.0),
        (560.0, 2050.0),
        (620.0, 950.0),
        (500.0, 1700.0),
    ];
    let (f1, f2) = base[vowel % base.len()];
    let stretch = 1.0 + 0.06 * (vowel / base.len()) as f64;
    (f1 * stretch, f2 * stretch)
}

fn ms_to_samples(ms: f64, fs: f64) -> usize {
    (ms * fs / 1000.0).round() as usize
}

fn white(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect()
}

/// Two-pole resonator with a per-sample center frequency.
fn resonate(input: &[f64], freq: impl Fn(usize) -> f64, bandwidth: f64, fs: f64) -> Vec<f64> {
    let r = (-std::f64::consts::PI * bandwidth / fs).exp();
    let mut out = vec![0.0; input.len()];
    let (mut y1, mut y2) = (0.0, 0.0);
    for (n, &x) in input.iter().enumerate() {
        let theta = 2.0 * std::f64::consts::PI * freq(n) / fs;
        let y = (1.0 - r) * x + 2.0 * r * theta.cos() * y1 - r * r * y2;
        out[n] = y;
        y2 = y1;
        y1 = y;
    }
    out
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn scale_to_peak(v: &mut [f64], target: f64) {
    let peak = v.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if peak > 0.0 {
        let s = target / peak;
        for x in v.iter_mut() {
            *x *= s;
        }
    }
}

/// Glottal source: impulse train following an f0 contour, with a whisper
/// of aspiration noise.
fn voiced_source(
    n: usize,
    f0: impl Fn(usize) -> f64,
    fs: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut phase = 1.0f64;
    for (t, o) in out.iter_mut().enumerate() {
        phase += f0(t) / fs;
        if phase >= 1.0 {
            phase -= 1.0;
            *o = 1.0;
        }
        *o += 0.02 * (2.0 * rng.gen::<f64>() - 1.0);
    }
    out
}

fn render_consonant(
    spec: &SynthSpec,
    class: usize,
    n: usize,
    fs: f64,
    f0_base: f64,
    rng: &mut ChaCha20Rng,
) -> Vec<f64> {
    let family = class / 4;
    let mut sig = match archetype(class) {
        0 => {
            // Plosive: silence, then a sharp noise burst with fast decay.
            let silence = n * 11 / 20;
            let tau = fs * 0.006;
            let noise = white(rng, n);
            let mut s = vec![0.0; n];
            for t in silence..n {
                s[t] = noise[t] * (-((t - silence) as f64) / tau).exp();
            }
            resonate(&s, |_| 2900.0 + 260.0 * family as f64, 550.0, fs)
        }
        1 => {
            // Frication: sustained narrow-band high-frequency noise.
            let noise = white(rng, n);
            let ramp_len = ms_to_samples(10.0, fs).max(1);
            let mut s = resonate(&noise, |_| 4300.0 + 240.0 * family as f64, 800.0, fs);
            for (t, x) in s.iter_mut().enumerate() {
                let ramp = (t as f64 / ramp_len as f64).min(1.0);
                *x *= ramp;
            }
            s
        }
        2 => {
            // Glide: voiced with a slow rising second resonance.
            let src = voiced_source(n, |_| f0_base, fs, rng);
            let low = resonate(&src, |_| 420.0, 90.0, fs);
            let f2_start = 900.0 + 140.0 * family as f64;
            let hi = resonate(
                &src,
                |t| f2_start + 300.0 * t as f64 / n.max(1) as f64,
                120.0,
                fs,
            );
            low.iter().zip(&hi).map(|(a, b)| a + 0.7 * b).collect()
        }
        _ => {
            // Murmur: heavily damped voicing with a faint upper resonance.
            let src = voiced_source(n, |_| f0_base, fs, rng);
            let low = resonate(&src, |_| 270.0, 50.0, fs);
            let hi = resonate(&src, |_| 2300.0 + 200.0 * family as f64, 260.0, fs);
            low.iter().zip(&hi).map(|(a, b)| a + 0.25 * b).collect()
        }
    };
    // Corruption knob: mix toward equal-power white noise, erasing the
    // class signature but not the segment's existence.
    if spec.consonant_noise > 0.0 {
        let level = rms(&sig);
        let noise = white(rng, n);
        let k = spec.consonant_noise;
        for (x, nz) in sig.iter_mut().zip(&noise) {
            *x = (1.0 - k) * *x + k * nz * level * 1.7;
        }
    }
    sig
}

fn render_vowel(
    spec: &SynthSpec,
    produced: usize,
    vowel: usize,
    n: usize,
    fs: f64,
    speaker: &Speaker,
    rng: &mut ChaCha20Rng,
) -> Vec<f64> {
    let f0_token = speaker.f0 * (1.0 + 0.04 * (2.0 * rng.gen::<f64>() - 1.0));
    let (t1, t2) = vowel_targets(vowel);
    let jit = |rng: &mut ChaCha20Rng| 1.0 + spec.vowel_jitter * 0.25 * (2.0 * rng.gen::<f64>() - 1.0);
    let f1_target = t1 * speaker.formant_scale * jit(rng);
    let f2_target = t2 * speaker.formant_scale * jit(rng);
    let f1_start = f1_locus(produced) * speaker.formant_scale;
    let f2_start = f2_locus(produced) * speaker.formant_scale;

    let transition = ms_to_samples(60.0, fs).min(n / 2).max(1);
    let track = move |start: f64, target: f64| {
        move |t: usize| {
            let frac = (t as f64 / transition as f64).min(1.0);
            let ramp = 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
            start + (target - start) * ramp
        }
    };
    let src = voiced_source(
        n,
        move |t| f0_token * (1.0 - 0.08 * t as f64 / n.max(1) as f64),
        fs,
        rng,
    );
    let form1 = resonate(&src, track(f1_start, f1_target), 90.0, fs);
    let form2 = resonate(&src, track(f2_start, f2_target), 120.0, fs);
    form1.iter().zip(&form2).map(|(a, b)| a + 0.7 * b).collect()
}

fn render_token(
    spec: &SynthSpec,
    speaker: &Speaker,
    produced: usize,
    vowel: usize,
    rng: &mut ChaCha20Rng,
) -> RenderedToken {
    let fs = spec.sample_rate as f64;
    let c_len = ms_to_samples(70.0 + 40.0 * rng.gen::<f64>(), fs);
    let v_len = ms_to_samples(160.0 + 80.0 * rng.gen::<f64>(), fs);
    let lead = ms_to_samples(20.0, fs);
    let trail = ms_to_samples(20.0, fs);

    let mut consonant = render_consonant(spec, produced, c_len, fs, speaker.f0, rng);
    let mut vowel_sig = render_vowel(spec, produced, vowel, v_len, fs, speaker, rng);
    scale_to_peak(&mut consonant, speaker.amplitude * 0.9);
    scale_to_peak(&mut vowel_sig, speaker.amplitude);

    let mut samples = vec![0.0; lead];
    samples.extend_from_slice(&consonant);
    samples.extend_from_slice(&vowel_sig);
    samples.extend(std::iter::repeat(0.0).take(trail));
    for x in samples.iter_mut() {
        *x = x.clamp(-1.0, 1.0);
    }
    RenderedToken {
        samples,
        consonant_span: (lead, lead + c_len),
        vowel_end: lead + c_len + v_len,
    }
}
