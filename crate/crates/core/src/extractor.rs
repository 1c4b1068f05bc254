//! Bidirectional recurrent embedding extractor trained with a multi-task
//! objective: multi-class cross-entropy on segment labels plus pairwise
//! binary cross-entropy on a relation head that predicts whether two
//! segments share a class.
//!
//! Two independent extractors are trained in practice, one on consonant
//! segments and one on consonant+vowel segments; this module implements a
//! single extractor and leaves the pairing of the two to the pipeline.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{concatenate, Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dsp::{CmvnStats, FeatureMatrix};
use crate::error::{Error, Result};
use crate::ioutil::{BinReader, BinWriter};
use crate::manifest::SegmentKind;
use crate::nn::adam::{AdamConfig, AdamState};
use crate::nn::dense::{accuracy, binary_xent_logit, softmax_xent, Dense};
use crate::nn::gru::{Direction, GruCache, GruLayer};
use crate::nn::{dropout_mask, Param, ParamModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEGCKPT0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorConfig {
    pub num_layers: usize,
    pub hidden_units: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pairs_per_sample: usize,
    pub seed: u64,
    pub task_weight: f64,
    /// Mean-pool the recurrent states over time instead of taking the
    /// final forward / first backward states. Off by default.
    pub mean_pool: bool,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            num_layers: 3,
            hidden_units: 400,
            embedding_dim: 128,
            num_classes: 2,
            dropout: 0.5,
            learning_rate: 0.001,
            weight_decay: 0.0005,
            batch_size: 256,
            epochs: 5,
            pairs_per_sample: 4,
            seed: 0,
            task_weight: 0.5,
            mean_pool: false,
        }
    }
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Model(m));
        if self.num_layers == 0
            || self.hidden_units == 0
            || self.embedding_dim == 0
            || self.num_classes < 2
            || self.batch_size == 0
            || self.epochs == 0
            || self.pairs_per_sample == 0
        {
            return fail(format!(
                "all structural counts must be positive and num_classes >= 2: {self:?}"
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.task_weight) {
            return fail(format!("task_weight {} outside [0, 1]", self.task_weight));
        }
        if self.learning_rate <= 0.0 || self.weight_decay < 0.0 {
            return fail(format!(
                "learning_rate {} must be positive, weight_decay {} non-negative",
                self.learning_rate, self.weight_decay
            ));
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2 so pairs can be drawn".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorModel {
    pub config: ExtractorConfig,
    pub input_dim: usize,
    forward_layers: Vec<GruLayer>,
    backward_layers: Vec<GruLayer>,
    embedding_head: Dense,
    class_head: Dense,
    relation_head: Dense,
}

/// Per-sequence activations kept for backpropagation.
pub struct SequenceCache {
    layer_inputs: Vec<Array2<f64>>,
    forward: Vec<(Array2<f64>, GruCache)>,
    backward: Vec<(Array2<f64>, GruCache)>,
    frames: usize,
}

impl ExtractorModel {
    pub fn new(config: &ExtractorConfig, input_dim: usize, rng: &mut ChaCha20Rng) -> Result<ExtractorModel> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Model("input dimension must be positive".into()));
        }
        let h = config.hidden_units;
        let mut forward_layers = Vec::new();
        let mut backward_layers = Vec::new();
        for l in 0..config.num_layers {
            let in_dim = if l == 0 { input_dim } else { 2 * h };
            forward_layers.push(GruLayer::new(
                &format!("l{l}.fwd"),
                in_dim,
                h,
                Direction::Forward,
                rng,
            ));
            backward_layers.push(GruLayer::new(
                &format!("l{l}.bwd"),
                in_dim,
                h,
                Direction::Backward,
                rng,
            ));
        }
        Ok(ExtractorModel {
            config: config.clone(),
            input_dim,
            embedding_head: Dense::new("embed", 2 * h, config.embedding_dim, rng),
            class_head: Dense::new("class", config.embedding_dim, config.num_classes, rng),
            relation_head: Dense::new("relation", config.embedding_dim, 1, rng),
            forward_layers,
            backward_layers,
        })
    }

    pub fn relation_params(&self) -> (&Array2<f64>, f64) {
        (&self.relation_head.w.value, self.relation_head.b.value[(0, 0)])
    }

    /// Runs the recurrent stack over one sequence. Returns the pooled
    /// 2*hidden summary vector (pre embedding head) and the cache.
    /// `masks`, when given, holds one (frames x 2*hidden) dropout mask per
    /// layer boundary (num_layers - 1 of them).
    fn forward_sequence(
        &self,
        frames: &Array2<f64>,
        masks: Option<&[Array2<f64>]>,
    ) -> Result<(Array1<f64>, SequenceCache)> {
        if frames.ncols() != self.input_dim {
            return Err(Error::Model(format!(
                "feature dimension {} does not match model input {}",
                frames.ncols(),
                self.input_dim
            )));
        }
        if let Some(m) = masks {
            if m.len() + 1 != self.config.num_layers {
                return Err(Error::Model(format!(
                    "{} dropout masks given for {} layer boundaries",
                    m.len(),
                    self.config.num_layers - 1
                )));
            }
        }
        let t_len = frames.nrows();
        let mut cache = SequenceCache {
            layer_inputs: Vec::new(),
            forward: Vec::new(),
            backward: Vec::new(),
            frames: t_len,
        };
        let mut x = frames.clone();
        for l in 0..self.config.num_layers {
            cache.layer_inputs.push(x.clone());
            let (hf, cf) = self.forward_layers[l].forward(&x)?;
            let (hb, cb) = self.backward_layers[l].forward(&x)?;
            let mut concat = concatenate(Axis(1), &[hf.view(), hb.view()])
                .expect("forward/backward row counts match");
            cache.forward.push((hf, cf));
            cache.backward.push((hb, cb));
            if l + 1 < self.config.num_layers {
                if let Some(m) = masks {
                    concat *= &m[l];
                }
            }
            x = concat;
        }
        let h = self.config.hidden_units;
        let top_f = &cache.forward.last().unwrap().0;
        let top_b = &cache.backward.last().unwrap().0;
        let summary = if self.config.mean_pool {
            let mut s = Array1::zeros(2 * h);
            for t in 0..t_len {
                for j in 0..h {
                    s[j] += top_f[(t, j)];
                    s[h + j] += top_b[(t, j)];
                }
            }
            s / t_len as f64
        } else {
            let mut s = Array1::zeros(2 * h);
            for j in 0..h {
                s[j] = top_f[(t_len - 1, j)];
                s[h + j] = top_b[(0, j)];
            }
            s
        };
        Ok((summary, cache))
    }

    /// Backpropagates a gradient on the pooled summary vector through the
    /// recurrent stack, accumulating parameter gradients.
    fn backward_sequence(
        &mut self,
        cache: &SequenceCache,
        masks: Option<&[Array2<f64>]>,
        dsummary: &Array1<f64>,
    ) {
        let h = self.config.hidden_units;
        let t_len = cache.frames;
        let mut dh = Array2::<f64>::zeros((t_len, 2 * h));
        if self.config.mean_pool {
            let scaled = dsummary / t_len as f64;
            for t in 0..t_len {
                for j in 0..2 * h {
                    dh[(t, j)] = scaled[j];
                }
            }
        } else {
            for j in 0..h {
                dh[(t_len - 1, j)] = dsummary[j];
                dh[(0, h + j)] = dsummary[h + j];
            }
        }
        for l in (0..self.config.num_layers).rev() {
            let dhf = dh.slice(ndarray::s![.., ..h]).to_owned();
            let dhb = dh.slice(ndarray::s![.., h..]).to_owned();
            let x = &cache.layer_inputs[l];
            let dxf = self.forward_layers[l].backward(x, &cache.forward[l].1, &dhf);
            let dxb = self.backward_layers[l].backward(x, &cache.backward[l].1, &dhb);
            let mut dx = dxf + dxb;
            if l > 0 {
                if let Some(m) = masks {
                    dx *= &m[l - 1];
                }
                dh = dx;
            }
        }
    }

    /// Embedding of one normalized feature matrix, dropout inactive.
    pub fn embed(&self, fm: &FeatureMatrix) -> Result<Array1<f64>> {
        if !fm.normalized {
            return Err(Error::Model(
                "features must be normalized before embedding".into(),
            ));
        }
        let (summary, _) = self.forward_sequence(&fm.data, None)?;
        let row = summary.insert_axis(Axis(0));
        Ok(self.embedding_head.forward(&row).row(0).to_owned())
    }
}

impl ParamModel for ExtractorModel {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in 0..self.forward_layers.len() {
            self.forward_layers[l].visit_params(f);
            self.backward_layers[l].visit_params(f);
        }
        self.embedding_head.visit_params(f);
        self.class_head.visit_params(f);
        self.relation_head.visit_params(f);
    }
}

/// One training example: normalized features plus its class index.
pub struct BatchItem<'a> {
    pub features: &'a FeatureMatrix,
    pub class_index: usize,
}

/// Frozen randomness for one batch: dropout masks per sample per layer
/// boundary, and partner indices per sample. Drawing the plan up front
/// makes the loss a deterministic function of the parameters, which is
/// what the gradient checker needs.
pub struct BatchPlan {
    pub dropout: Vec<Vec<Array2<f64>>>,
    pub pairs: Vec<Vec<usize>>,
}

impl BatchPlan {
    /// Draws masks for every sample first, then partners for every
    /// sample, so the stream of random numbers is a fixed function of
    /// (config, frame counts, rng state).
    pub fn draw(
        cfg: &ExtractorConfig,
        frame_counts: &[usize],
        rng: &mut ChaCha20Rng,
    ) -> Result<BatchPlan> {
        let n = frame_counts.len();
        if n == 0 {
            return Err(Error::Training("empty batch".into()));
        }
        if n == 1 && cfg.pairs_per_sample > 0 {
            return Err(Error::Training(
                "batch of one sample cannot form pairs".into(),
            ));
        }
        let width = 2 * cfg.hidden_units;
        let mut dropout = Vec::with_capacity(n);
        for &t in frame_counts {
            let mut masks = Vec::with_capacity(cfg.num_layers.saturating_sub(1));
            for _ in 0..cfg.num_layers.saturating_sub(1) {
                masks.push(dropout_mask(t, width, cfg.dropout, rng));
            }
            dropout.push(masks);
        }
        let mut pairs = Vec::with_capacity(n);
        for i in 0..n {
            let others = n - 1;
            let mut partners = Vec::with_capacity(cfg.pairs_per_sample);
            if cfg.pairs_per_sample <= others {
                // Without replacement when the batch allows.
                for idx in sample(rng, others, cfg.pairs_per_sample).into_iter() {
                    partners.push(if idx >= i { idx + 1 } else { idx });
                }
            } else {
                for _ in 0..cfg.pairs_per_sample {
                    let idx = rng.gen_range(0..others);
                    partners.push(if idx >= i { idx + 1 } else { idx });
                }
            }
            pairs.push(partners);
        }
        Ok(BatchPlan { dropout, pairs })
    }

    /// Inference-style plan: no dropout, no pairs.
    pub fn inactive(n: usize) -> BatchPlan {
        BatchPlan {
            dropout: vec![Vec::new(); n],
            pairs: vec![Vec::new(); n],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: f64,
    pub class_ce: f64,
    pub pair_bce: f64,
    pub accuracy: f64,
}

/// Multi-task loss over one batch under a frozen plan:
/// total = task_weight * mean CE + (1 - task_weight) * mean pair BCE.
/// With `compute_grads`, gradients are accumulated into the model.
pub fn batch_loss(
    model: &mut ExtractorModel,
    items: &[BatchItem],
    plan: &BatchPlan,
    compute_grads: bool,
) -> Result<LossParts> {
    let n = items.len();
    if n == 0 {
        return Err(Error::Training("empty batch".into()));
    }
    if n == 1 && model.config.pairs_per_sample > 0 && !plan.pairs[0].is_empty() {
        return Err(Error::Training(
            "batch of one sample cannot form pairs".into(),
        ));
    }
    if plan.dropout.len() != n || plan.pairs.len() != n {
        return Err(Error::Training(format!(
            "plan covers {} samples, batch has {}",
            plan.dropout.len(),
            n
        )));
    }
    let cfg = model.config.clone();
    for item in items {
        if !item.features.normalized {
            return Err(Error::Training(
                "training features must be normalized".into(),
            ));
        }
        if item.class_index >= cfg.num_classes {
            return Err(Error::Training(format!(
                "class index {} out of range for {} classes",
                item.class_index, cfg.num_classes
            )));
        }
    }

    // Forward through the recurrent stack, one sequence at a time.
    let mut caches = Vec::with_capacity(n);
    let mut summary = Array2::zeros((n, 2 * cfg.hidden_units));
    for (i, item) in items.iter().enumerate() {
        let masks = if plan.dropout[i].is_empty() {
            None
        } else {
            Some(plan.dropout[i].as_slice())
        };
        let (s, cache) = model.forward_sequence(&item.features.data, masks)?;
        summary.row_mut(i).assign(&s);
        caches.push(cache);
    }
    let embeddings = model.embedding_head.forward(&summary);
    let logits = model.class_head.forward(&embeddings);
    let targets: Vec<usize> = items.iter().map(|it| it.class_index).collect();
    let (class_ce, dlogits) = softmax_xent(&logits, &targets);
    let class_accuracy = accuracy(&logits, &targets);

    // Relation pairs: squared differences of embeddings.
    let mut pair_list: Vec<(usize, usize, bool)> = Vec::new();
    for (i, partners) in plan.pairs.iter().enumerate() {
        for &j in partners {
            if j >= n || j == i {
                return Err(Error::Training(format!(
                    "invalid partner index {j} for sample {i}"
                )));
            }
            pair_list.push((i, j, targets[i] == targets[j]));
        }
    }
    let num_pairs = pair_list.len();
    let mut pair_bce = 0.0;
    let mut sq = Array2::zeros((num_pairs, cfg.embedding_dim));
    let mut dlogit_pairs = Array2::zeros((num_pairs, 1));
    if num_pairs > 0 {
        for (p, &(i, j, _)) in pair_list.iter().enumerate() {
            let d = &embeddings.row(i) - &embeddings.row(j);
            sq.row_mut(p).assign(&(&d * &d));
        }
        let rel_logits = model.relation_head.forward(&sq);
        for (p, &(_, _, label)) in pair_list.iter().enumerate() {
            let (loss, dl) = binary_xent_logit(rel_logits[(p, 0)], label);
            pair_bce += loss;
            dlogit_pairs[(p, 0)] = dl;
        }
        pair_bce /= num_pairs as f64;
    }

    let w = cfg.task_weight;
    let total = w * class_ce + (1.0 - w) * pair_bce;

    if compute_grads {
        let mut dembed = model.class_head.backward(&embeddings, &(dlogits * w));
        if num_pairs > 0 {
            let scale = (1.0 - w) / num_pairs as f64;
            let dsq = model.relation_head.backward(&sq, &(dlogit_pairs * scale));
            for (p, &(i, j, _)) in pair_list.iter().enumerate() {
                let d = &embeddings.row(i) - &embeddings.row(j);
                let g = 2.0 * &d * &dsq.row(p);
                let gi = &dembed.row(i) + &g;
                dembed.row_mut(i).assign(&gi);
                let gj = &dembed.row(j) - &g;
                dembed.row_mut(j).assign(&gj);
            }
        }
        let dsummary = model.embedding_head.backward(&summary, &dembed);
        for (i, cache) in caches.iter().enumerate() {
            let masks = if plan.dropout[i].is_empty() {
                None
            } else {
                Some(plan.dropout[i].as_slice())
            };
            model.backward_sequence(cache, masks, &dsummary.row(i).to_owned());
        }
    }

    Ok(LossParts {
        total,
        class_ce,
        pair_bce,
        accuracy: class_accuracy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub mean_class_ce: f64,
    pub mean_pair_bce: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
    pub final_train_accuracy: f64,
}

/// One prepared training example.
#[derive(Debug)]
pub struct TrainSample {
    pub id: String,
    pub features: FeatureMatrix,
    pub class_index: usize,
}

/// Trains an extractor from scratch. `samples` must already be normalized
/// with `cmvn`; `inventory[i]` names class i. Returns the trained model
/// bundled as a checkpoint.
pub fn train_model(
    samples: &[TrainSample],
    inventory: &[String],
    kind: SegmentKind,
    cmvn: &CmvnStats,
    cfg: &ExtractorConfig,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if inventory.len() != cfg.num_classes {
        return Err(Error::Training(format!(
            "inventory has {} labels but config expects {} classes",
            inventory.len(),
            cfg.num_classes
        )));
    }
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let distinct: std::collections::BTreeSet<usize> =
        samples.iter().map(|s| s.class_index).collect();
    if distinct.len() < 2 {
        return Err(Error::Training(
            "training data covers fewer than 2 classes".into(),
        ));
    }
    let input_dim = samples[0].features.num_mels();
    for s in samples {
        if s.features.num_mels() != input_dim {
            return Err(Error::Training(format!(
                "sample {} has dimension {}, expected {input_dim}",
                s.id,
                s.features.num_mels()
            )));
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = ExtractorModel::new(cfg, input_dim, &mut rng)?;
    let mut optimizer = AdamState::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });

    let n = samples.len();
    let mut log = TrainingLog::default();
    for _epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut used = 0usize;
        let (mut sum_loss, mut sum_ce, mut sum_bce) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() == 1 && cfg.pairs_per_sample > 0 {
                // A trailing remainder of one cannot form pairs; skip it.
                continue;
            }
            let frame_counts: Vec<usize> =
                chunk.iter().map(|&i| samples[i].features.frames()).collect();
            let plan = BatchPlan::draw(cfg, &frame_counts, &mut rng)?;
            let items: Vec<BatchItem> = chunk
                .iter()
                .map(|&i| BatchItem {
                    features: &samples[i].features,
                    class_index: samples[i].class_index,
                })
                .collect();
            let parts = batch_loss(&mut model, &items, &plan, true)?;
            optimizer.step(&mut model)?;
            let b = chunk.len() as f64;
            sum_loss += parts.total * b;
            sum_ce += parts.class_ce * b;
            sum_bce += parts.pair_bce * b;
            used += chunk.len();
        }
        if used == 0 {
            return Err(Error::Training(
                "no usable batches in an epoch (all were singletons)".into(),
            ));
        }
        log.epochs.push(EpochStats {
            mean_loss: sum_loss / used as f64,
            mean_class_ce: sum_ce / used as f64,
            mean_pair_bce: sum_bce / used as f64,
        });
    }

    // Final classification accuracy over the full training set, dropout
    // inactive.
    let mut summary = Array2::zeros((n, 2 * cfg.hidden_units));
    for (i, s) in samples.iter().enumerate() {
        let (vec, _) = model.forward_sequence(&s.features.data, None)?;
        summary.row_mut(i).assign(&vec);
    }
    let logits = model.class_head.forward(&model.embedding_head.forward(&summary));
    let targets: Vec<usize> = samples.iter().map(|s| s.class_index).collect();
    log.final_train_accuracy = accuracy(&logits, &targets);

    Ok(Checkpoint {
        model,
        kind,
        inventory: inventory.to_vec(),
        cmvn: cmvn.clone(),
        log,
    })
}

/// A trained extractor with everything needed to reproduce embeddings:
/// parameters, configuration, label inventory, and the normalization
/// statistics the features were trained under.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: ExtractorModel,
    pub kind: SegmentKind,
    pub inventory: Vec<String>,
    pub cmvn: CmvnStats,
    pub log: TrainingLog,
}

impl Checkpoint {
    /// Serializes the checkpoint. Takes `&mut self` only because the
    /// parameter visitor is mutable; the checkpoint is not changed.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        let mut w = BinWriter::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
        w.write_u8(match self.kind {
            SegmentKind::C => 0,
            SegmentKind::Cv => 1,
        });
        let cfg = self.model.config.clone();
        w.write_u32(cfg.num_layers as u32);
        w.write_u32(cfg.hidden_units as u32);
        w.write_u32(cfg.embedding_dim as u32);
        w.write_u32(cfg.num_classes as u32);
        w.write_f64(cfg.dropout);
        w.write_f64(cfg.learning_rate);
        w.write_f64(cfg.weight_decay);
        w.write_u32(cfg.batch_size as u32);
        w.write_u32(cfg.epochs as u32);
        w.write_u32(cfg.pairs_per_sample as u32);
        w.write_u64(cfg.seed);
        w.write_f64(cfg.task_weight);
        w.write_u8(cfg.mean_pool as u8);
        w.write_u32(self.model.input_dim as u32);

        w.write_u32(self.inventory.len() as u32);
        for label in &self.inventory {
            w.write_string(label);
        }

        let mut count = 0u32;
        self.model.visit_params(&mut |_| count += 1);
        w.write_u32(count);
        self.model.visit_params(&mut |p| {
            w.write_string(&p.name);
            w.write_u32(p.value.nrows() as u32);
            w.write_u32(p.value.ncols() as u32);
            w.write_f64_slice(p.value.as_slice().expect("row-major layout"));
        });

        w.write_u32(self.cmvn.mean.len() as u32);
        w.write_f64_slice(self.cmvn.mean.as_slice().expect("contiguous"));
        w.write_f64_slice(self.cmvn.variance.as_slice().expect("contiguous"));
        w.write_u64(self.cmvn.frame_count);

        w.write_u32(self.log.epochs.len() as u32);
        for e in &self.log.epochs {
            w.write_f64(e.mean_loss);
            w.write_f64(e.mean_class_ce);
            w.write_f64(e.mean_pair_bce);
        }
        w.write_f64(self.log.final_train_accuracy);
        w.save(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BinReader::open(path)?;
        r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
        r.expect_version(CHECKPOINT_VERSION)?;
        let kind = match r.read_u8("segment kind")? {
            0 => SegmentKind::C,
            1 => SegmentKind::Cv,
            k => return r.fail(format!("unknown segment kind tag {k}")),
        };
        let cfg = ExtractorConfig {
            num_layers: r.read_u32("num_layers")? as usize,
            hidden_units: r.read_u32("hidden_units")? as usize,
            embedding_dim: r.read_u32("embedding_dim")? as usize,
            num_classes: r.read_u32("num_classes")? as usize,
            dropout: r.read_f64("dropout")?,
            learning_rate: r.read_f64("learning_rate")?,
            weight_decay: r.read_f64("weight_decay")?,
            batch_size: r.read_u32("batch_size")? as usize,
            epochs: r.read_u32("epochs")? as usize,
            pairs_per_sample: r.read_u32("pairs_per_sample")? as usize,
            seed: r.read_u64("seed")?,
            task_weight: r.read_f64("task_weight")?,
            mean_pool: r.read_u8("mean_pool")? != 0,
        };
        let input_dim = r.read_u32("input_dim")? as usize;

        let inventory_len = r.read_u32("inventory size")? as usize;
        let mut inventory = Vec::with_capacity(inventory_len);
        for _ in 0..inventory_len {
            inventory.push(r.read_string("inventory label")?);
        }
        if inventory.len() != cfg.num_classes {
            return r.fail(format!(
                "inventory holds {} labels, config expects {}",
                inventory.len(),
                cfg.num_classes
            ));
        }

        let param_count = r.read_u32("parameter count")? as usize;
        let mut blobs: HashMap<String, Array2<f64>> = HashMap::new();
        for _ in 0..param_count {
            let name = r.read_string("parameter name")?;
            let rows = r.read_u32("parameter rows")? as usize;
            let cols = r.read_u32("parameter cols")? as usize;
            let data = r.read_f64_vec(rows * cols, &name)?;
            let arr = match Array2::from_shape_vec((rows, cols), data) {
                Ok(a) => a,
                Err(e) => return r.fail(format!("parameter {name}: {e}")),
            };
            if blobs.insert(name.clone(), arr).is_some() {
                return r.fail(format!("duplicate parameter {name}"));
            }
        }

        let dim = r.read_u32("normalization dimension")? as usize;
        let cmvn = CmvnStats {
            mean: Array1::from_vec(r.read_f64_vec(dim, "normalization means")?),
            variance: Array1::from_vec(r.read_f64_vec(dim, "normalization variances")?),
            frame_count: r.read_u64("normalization frame count")?,
        };

        let epoch_count = r.read_u32("epoch count")? as usize;
        let mut log = TrainingLog::default();
        for _ in 0..epoch_count {
            log.epochs.push(EpochStats {
                mean_loss: r.read_f64("epoch loss")?,
                mean_class_ce: r.read_f64("epoch class loss")?,
                mean_pair_bce: r.read_f64("epoch pair loss")?,
            });
        }
        log.final_train_accuracy = r.read_f64("final accuracy")?;
        r.expect_eof()?;

        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = ExtractorModel::new(&cfg, input_dim, &mut rng)?;
        let mut missing: Vec<String> = Vec::new();
        let mut assigned = 0usize;
        model.visit_params(&mut |p| match blobs.remove(&p.name) {
            Some(arr) if arr.raw_dim() == p.value.raw_dim() => {
                p.value = arr;
                p.grad.fill(0.0);
                assigned += 1;
            }
            Some(arr) => missing.push(format!(
                "{} has shape {:?}, expected {:?}",
                p.name,
                arr.shape(),
                p.value.shape()
            )),
            None => missing.push(format!("{} absent", p.name)),
        });
        if !missing.is_empty() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("parameter mismatch: {}", missing.join("; ")),
            });
        }
        if !blobs.is_empty() {
            let extra: Vec<String> = blobs.keys().cloned().collect();
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("unknown parameters: {}", extra.join(", ")),
            });
        }
        let _ = assigned;

        Ok(Checkpoint {
            model,
            kind,
            inventory,
            cmvn,
            log,
        })
    }
}
