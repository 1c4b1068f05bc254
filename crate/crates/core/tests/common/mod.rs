//! Shared fixtures and independent oracles for the integration suites.
//!
//! The oracles are deliberate re-implementations over slower, simpler
//! routes; the library's fast paths must agree with them to the stated
//! tolerances.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use segembed::archive::{save_cmvn, EmbeddingTable};
use segembed::audio::{write_wav, Waveform};
use segembed::dsp::FeatureConfig;
use segembed::eval::{report, EvalReport};
use segembed::extractor::{Checkpoint, ExtractorConfig, TrainingLog};
use segembed::ioutil::write_atomic;
use segembed::manifest::{save_manifest, SegmentKind};
use segembed::pipeline::{embed_corpus, featurize_corpus, relation_of, train_from_archive};
use segembed::scoring::{build_eval_pairs, PairSet, PairingParams, PairingStats};
use segembed::synth::{synth_cv_corpus, SynthSpec};

/// AUC as the probability that a random positive outranks a random
/// negative, ties counting one half. O(P*N), no ROC curve involved.
pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| !l)
        .map(|(&s, _)| s)
        .collect();
    assert!(!pos.is_empty() && !neg.is_empty(), "need both labels");
    let mut won = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                won += 1.0;
            } else if p == n {
                won += 0.5;
            }
        }
    }
    won / (pos.len() as f64 * neg.len() as f64)
}

/// EER by exhaustive threshold enumeration: every distinct score (plus
/// +inf) is an operating point under the rule "positive iff score >= t";
/// rates come from brute-force recounts at each point, and the crossing
/// of the two rate polylines is solved on the bracketing segment.
pub fn sweep_eer_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    assert!(positives > 0 && negatives > 0, "need both labels");

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);

    let rates = |t: f64| -> (f64, f64) {
        let mut fp = 0usize;
        let mut tp = 0usize;
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        (
            fp as f64 / negatives as f64,
            (positives - tp) as f64 / positives as f64,
        )
    };

    let (mut fpr0, mut fnr0) = rates(thresholds[0]);
    if fpr0 >= fnr0 {
        return fpr0;
    }
    for &t in &thresholds[1..] {
        let (fpr1, fnr1) = rates(t);
        if fpr1 >= fnr1 {
            if fpr1 == fnr1 {
                return fpr1;
            }
            // fpr(a) = fpr0 + a*(fpr1-fpr0) meets fnr(a) = fnr0 + a*(fnr1-fnr0)
            let a = (fnr0 - fpr0) / ((fpr1 - fpr0) + (fnr0 - fnr1));
            return fpr0 + a * (fpr1 - fpr0);
        }
        (fpr0, fnr0) = (fpr1, fnr1);
    }
    unreachable!("the lowest threshold accepts everything: fpr 1, fnr 0");
}

/// Dominant frequency by naive DFT magnitude over all bins up to Nyquist.
pub fn dft_peak_hz(samples: &[f64], rate: u32) -> f64 {
    let n = samples.len();
    assert!(n > 1);
    let mut best_bin = 0usize;
    let mut best_mag = f64::NEG_INFINITY;
    for k in 0..n / 2 {
        let mut re = 0.0;
        let mut im = 0.0;
        for (t, &x) in samples.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * k as f64 * t as f64 / n as f64;
            re += x * phase.cos();
            im += x * phase.sin();
        }
        let mag = re * re + im * im;
        if mag > best_mag {
            best_mag = mag;
            best_bin = k;
        }
    }
    best_bin as f64 * rate as f64 / n as f64
}

pub fn tone(freq: f64, rate: u32, len: usize) -> Waveform {
    let samples = (0..len)
        .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    Waveform {
        samples,
        sample_rate: rate,
    }
}

/// HTK mel scale, re-derived here so filterbank placement has an
/// independent reference.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Triangular filterbank weights of every channel at one frequency,
/// from first principles: num_mels+2 equally spaced mel edges, channel i
/// rising over [edge_i, edge_{i+1}] and falling over [edge_{i+1}, edge_{i+2}].
pub fn mel_weights_at(cfg: &FeatureConfig, freq: f64) -> Vec<f64> {
    let lo = hz_to_mel(cfg.low_freq);
    let hi = hz_to_mel(cfg.high_freq);
    let m = hz_to_mel(freq);
    let edge = |k: usize| lo + k as f64 * (hi - lo) / (cfg.num_mels + 1) as f64;
    (0..cfg.num_mels)
        .map(|i| {
            let (l, c, r) = (edge(i), edge(i + 1), edge(i + 2));
            if m >= l && m <= c {
                (m - l) / (c - l)
            } else if m > c && m <= r {
                (r - m) / (r - c)
            } else {
                0.0
            }
        })
        .collect()
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap()
}

pub fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

pub fn assert_same_bytes(a: &Path, b: &Path) {
    assert_eq!(
        read_bytes(a),
        read_bytes(b),
        "{} and {} differ",
        a.display(),
        b.display()
    );
}

/// Runs the installed binary; returns (exit code, stdout, stderr).
pub fn run_cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_segembed"))
        .args(args)
        .output()
        .expect("spawn segembed");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Knobs for one library-level end-to-end run.
pub struct ChainSpec {
    pub synth: SynthSpec,
    pub synth_seed: u64,
    pub feature: FeatureConfig,
    pub speed_factors: Vec<f64>,
    pub extractor: ExtractorConfig,
    pub params: PairingParams,
    pub grid: Vec<f64>,
}

impl ChainSpec {
    /// Desk-scale toy setup: small recurrent stacks, default features.
    pub fn toy(synth: SynthSpec, synth_seed: u64) -> ChainSpec {
        ChainSpec {
            synth,
            synth_seed,
            feature: FeatureConfig::default(),
            speed_factors: vec![0.9, 1.1],
            extractor: ExtractorConfig {
                num_layers: 2,
                hidden_units: 32,
                embedding_dim: 16,
                epochs: 3,
                dropout: 0.1,
                learning_rate: 0.002,
                batch_size: 48,
                pairs_per_sample: 2,
                seed: 100,
                ..ExtractorConfig::default()
            },
            params: PairingParams::default(),
            grid: (0..=10).map(|i| i as f64 / 10.0).collect(),
        }
    }
}

pub struct ChainArtifacts {
    pub dir: PathBuf,
    pub manifest_path: PathBuf,
    pub archive_path: PathBuf,
    pub cmvn_path: PathBuf,
    pub c_ckpt_path: PathBuf,
    pub cv_ckpt_path: PathBuf,
    pub c_table_path: PathBuf,
    pub cv_table_path: PathBuf,
    pub pairs_path: PathBuf,
    pub report_txt_path: PathBuf,
    pub report_json_path: PathBuf,
    pub report: EvalReport,
    pub c_log: TrainingLog,
    pub cv_log: TrainingLog,
    pub stats: PairingStats,
}

impl ChainArtifacts {
    /// Every file the run wrote, for byte-level comparisons.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut out = vec![
            self.manifest_path.clone(),
            self.archive_path.clone(),
            self.cmvn_path.clone(),
            self.c_ckpt_path.clone(),
            self.cv_ckpt_path.clone(),
            self.c_table_path.clone(),
            self.cv_table_path.clone(),
            self.pairs_path.clone(),
            self.report_txt_path.clone(),
            self.report_json_path.clone(),
        ];
        let audio = self.dir.join("audio");
        let mut wavs: Vec<PathBuf> = std::fs::read_dir(&audio)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        wavs.sort();
        out.extend(wavs);
        out
    }
}

/// Synthesize, featurize, train both kinds, embed, score, and evaluate,
/// writing every artifact under `dir` exactly as the pipeline commands do.
pub fn run_chain(dir: &Path, spec: &ChainSpec) -> ChainArtifacts {
    std::fs::create_dir_all(dir.join("audio")).unwrap();
    let out = synth_cv_corpus(&spec.synth, spec.synth_seed).unwrap();
    for (audio_ref, wave) in &out.waveforms {
        write_wav(&dir.join(audio_ref), wave).unwrap();
    }
    let manifest_path = dir.join("manifest.txt");
    save_manifest(&out.manifest, &manifest_path).unwrap();
    let manifest = out.manifest;

    let feats = featurize_corpus(&manifest, dir, &spec.feature, &spec.speed_factors).unwrap();
    let archive_path = dir.join("features.bin");
    let cmvn_path = dir.join("cmvn.bin");
    feats.archive.save(&archive_path).unwrap();
    save_cmvn(&feats.stats, &cmvn_path).unwrap();

    let mut ckpts = Vec::new();
    for (kind, name) in [(SegmentKind::C, "c.ckpt"), (SegmentKind::Cv, "cv.ckpt")] {
        let classes = match kind {
            SegmentKind::C => manifest.consonant_inventory.len(),
            SegmentKind::Cv => manifest.cv_inventory.len(),
        };
        let cfg = ExtractorConfig {
            num_classes: classes,
            ..spec.extractor.clone()
        };
        let mut ckpt =
            train_from_archive(&feats.augmented, &feats.archive, &feats.stats, kind, &cfg)
                .unwrap();
        let path = dir.join(name);
        ckpt.save(&path).unwrap();
        ckpts.push((ckpt, path));
    }
    let (cv_ckpt, cv_ckpt_path) = ckpts.pop().unwrap();
    let (c_ckpt, c_ckpt_path) = ckpts.pop().unwrap();

    let c_table = embed_corpus(&c_ckpt, &manifest, &feats.archive).unwrap();
    let cv_table = embed_corpus(&cv_ckpt, &manifest, &feats.archive).unwrap();
    let c_table_path = dir.join("c.emb");
    let cv_table_path = dir.join("cv.emb");
    c_table.save(&c_table_path).unwrap();
    cv_table.save(&cv_table_path).unwrap();

    let (rows, stats) = build_eval_pairs(
        &manifest,
        &c_table,
        &cv_table,
        &relation_of(&c_ckpt),
        &relation_of(&cv_ckpt),
        &spec.params,
    )
    .unwrap();
    let pairs_path = dir.join("pairs.txt");
    PairSet {
        params: spec.params.clone(),
        rows: rows.clone(),
    }
    .save(&pairs_path)
    .unwrap();

    let rep = report(&rows, &spec.grid).unwrap();
    let report_txt_path = dir.join("report.txt");
    let report_json_path = dir.join("report.json");
    write_atomic(&report_txt_path, rep.text_table().as_bytes()).unwrap();
    write_atomic(&report_json_path, rep.to_json().as_bytes()).unwrap();

    ChainArtifacts {
        dir: dir.to_path_buf(),
        manifest_path,
        archive_path,
        cmvn_path,
        c_ckpt_path,
        cv_ckpt_path,
        c_table_path,
        cv_table_path,
        pairs_path,
        report_txt_path,
        report_json_path,
        report: rep,
        c_log: c_ckpt.log.clone(),
        cv_log: cv_ckpt.log.clone(),
        stats,
    }
}

/// Loads both embedding tables back from disk (for bit-exactness checks).
pub fn load_tables(art: &ChainArtifacts) -> (EmbeddingTable, EmbeddingTable) {
    (
        EmbeddingTable::load(&art.c_table_path).unwrap(),
        EmbeddingTable::load(&art.cv_table_path).unwrap(),
    )
}

/// Loads a checkpoint back from disk.
pub fn load_ckpt(path: &Path) -> Checkpoint {
    Checkpoint::load(path).unwrap()
}
