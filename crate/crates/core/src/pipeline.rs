//! Stage composition: turn a manifest plus audio into a feature archive,
//! a feature archive into trained extractors, and extractors into
//! embedding tables. The CLI wraps these; tests drive them directly.
//!
//! Normalization stats are fit on training records only (originals plus
//! speed-perturbed copies, both kinds pooled) and applied everywhere, so
//! no test-set statistics leak into the features.

use std::path::Path;

use rayon::prelude::*;

use crate::archive::{EmbeddingTable, FeatureArchive};
use crate::audio::AudioStore;
use crate::dsp::{cmvn_apply, cmvn_fit, log_mel, CmvnStats, FeatureConfig, FeatureMatrix};
use crate::error::{Error, Result};
use crate::extractor::{train_model, Checkpoint, ExtractorConfig, TrainSample};
use crate::manifest::{augment_training_set, CorpusManifest, Group, SegmentKind};
use crate::scoring::Relation;

pub struct FeaturizeOutput {
    pub archive: FeatureArchive,
    pub stats: CmvnStats,
    /// The manifest actually featurized: input records plus one
    /// speed-perturbed copy per factor for every training record.
    pub augmented: CorpusManifest,
}

/// Extracts features for every record (training records additionally at
/// each speed factor) and fits normalization stats on the training part.
pub fn featurize_corpus(
    manifest: &CorpusManifest,
    audio_root: &Path,
    config: &FeatureConfig,
    speed_factors: &[f64],
) -> Result<FeaturizeOutput> {
    let augmented = augment_training_set(manifest, speed_factors)?;
    let store = AudioStore::new(audio_root);
    let features: Vec<FeatureMatrix> = augmented
        .records
        .par_iter()
        .map(|r| {
            let wave = store.load_segment(r)?;
            log_mel(&wave, config).map_err(|e| match e {
                Error::Feature(m) => Error::Feature(format!("record {}: {m}", r.id)),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut archive = FeatureArchive::new(config.clone());
    for (r, fm) in augmented.records.iter().zip(&features) {
        archive.insert(&r.id, fm)?;
    }
    let training: Vec<&FeatureMatrix> = augmented
        .records
        .iter()
        .zip(&features)
        .filter(|(r, _)| r.group == Group::TrainTd)
        .map(|(_, f)| f)
        .collect();
    if training.is_empty() {
        return Err(Error::Feature("manifest has no training records".into()));
    }
    let stats = cmvn_fit(training)?;
    Ok(FeaturizeOutput {
        archive,
        stats,
        augmented,
    })
}

/// Training set for one segment kind: normalized features and class
/// indices into the manifest's inventory for that kind.
pub fn training_set(
    manifest: &CorpusManifest,
    archive: &FeatureArchive,
    stats: &CmvnStats,
    kind: SegmentKind,
) -> Result<(Vec<TrainSample>, Vec<String>)> {
    let inventory = match kind {
        SegmentKind::C => manifest.consonant_inventory.clone(),
        SegmentKind::Cv => manifest.cv_inventory.clone(),
    };
    let mut samples = Vec::new();
    for r in manifest.training_records().filter(|r| r.kind == kind) {
        let class_index = manifest.class_index(r).ok_or_else(|| {
            Error::Training(format!("record {}: category not in inventory", r.id))
        })?;
        let features = cmvn_apply(stats, &archive.require(&r.id)?)?;
        samples.push(TrainSample {
            id: r.id.clone(),
            features,
            class_index,
        });
    }
    if samples.is_empty() {
        return Err(Error::Training(format!(
            "manifest has no {kind} training records"
        )));
    }
    Ok((samples, inventory))
}

/// Featurized-manifest in, trained checkpoint out.
pub fn train_from_archive(
    manifest: &CorpusManifest,
    archive: &FeatureArchive,
    stats: &CmvnStats,
    kind: SegmentKind,
    cfg: &ExtractorConfig,
) -> Result<Checkpoint> {
    let (samples, inventory) = training_set(manifest, archive, stats, kind)?;
    train_model(&samples, &inventory, kind, stats, cfg)
}

/// Embeds every record of the checkpoint's kind in the manifest, using
/// the checkpoint's own normalization stats.
pub fn embed_corpus(
    checkpoint: &Checkpoint,
    manifest: &CorpusManifest,
    archive: &FeatureArchive,
) -> Result<EmbeddingTable> {
    let records: Vec<_> = manifest
        .records
        .iter()
        .filter(|r| r.kind == checkpoint.kind)
        .collect();
    let embeddings: Vec<_> = records
        .par_iter()
        .map(|r| {
            let features = cmvn_apply(&checkpoint.cmvn, &archive.require(&r.id)?)?;
            checkpoint.model.embed(&features)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = EmbeddingTable::new(checkpoint.kind, checkpoint.model.config.embedding_dim);
    for (r, e) in records.iter().zip(embeddings) {
        table.insert(&r.id, e)?;
    }
    if table.is_empty() {
        return Err(Error::Model(format!(
            "manifest has no {} records to embed",
            checkpoint.kind
        )));
    }
    Ok(table)
}

/// The relation head of a checkpoint in scoring form.
pub fn relation_of(checkpoint: &Checkpoint) -> Relation {
    let (w, bias) = checkpoint.model.relation_params();
    Relation {
        weights: w.column(0).to_owned(),
        bias,
    }
}
