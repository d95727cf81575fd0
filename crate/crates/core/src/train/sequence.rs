use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    diverged, finish_stage, guard_finite, owned_grads, stage_name_attention, stage_name_sequence, Adam, EpochLog,
    RunContext, StageResult, TrainConfig, TrainError,
};
use crate::metrics::{affect_loss, AffectLabel, ClassWeights, MetricReport};
use crate::model::{AnclafModel, Variant};
use crate::scalar::Scalar;
use crate::seed;
use crate::synth::SubjectData;
use crate::tensor::{Graph, NodeId};

/// Windows evaluated per inference graph; results do not depend on it.
const EVAL_WINDOWS: usize = 64;

/// Predictions in frame order with their ground truth.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Predictions {
    pub preds: Vec<AffectLabel>,
    pub truths: Vec<AffectLabel>,
    /// Most likely quadrant according to D, per frame.
    pub quadrant_pred: Vec<usize>,
}

fn argmax4(q: &[f64]) -> usize {
    (0..4).fold(0, |b, i| if q[i] > q[b] { i } else { b })
}

impl Predictions {
    pub(crate) fn push_rows<T: Scalar>(&mut self, pred: &[T], q: &[T], truths: impl Iterator<Item = AffectLabel>) {
        for ((p, q), t) in pred.chunks(2).zip(q.chunks(4)).zip(truths) {
            self.preds.push(AffectLabel::new(p[0].as_f64(), p[1].as_f64()));
            let q: Vec<f64> = q.iter().map(|v| v.as_f64()).collect();
            self.quadrant_pred.push(argmax4(&q));
            self.truths.push(t);
        }
    }

    pub fn len(&self) -> usize {
        self.preds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preds.is_empty()
    }

    /// The affect objective over all predictions taken as one batch.
    pub fn loss(&self, weights: &ClassWeights) -> Result<f64, TrainError> {
        let mut g = Graph::<f64>::inference();
        let flat: Vec<f64> = self.preds.iter().flat_map(|p| [p.valence, p.arousal]).collect();
        let p = g.constant_from(&[self.preds.len(), 2], flat)?;
        let loss = affect_loss(&mut g, p, &self.truths, weights)?;
        Ok(g.scalar_value(loss))
    }

    pub fn report(&self, model: &str, fold: Option<usize>, seq_len: usize) -> Result<MetricReport, TrainError> {
        Ok(MetricReport::from_predictions(model, fold, seq_len, &self.preds, &self.truths)?)
    }
}

/// Clean-image `zq` rows of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectFeatures {
    pub subject_id: u32,
    /// `frames × zq_dim`, row-major.
    pub zq: Vec<f64>,
    pub labels: Vec<AffectLabel>,
}

impl SubjectFeatures {
    pub fn frames(&self) -> usize {
        self.labels.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub zq_dim: usize,
    pub subjects: Vec<SubjectFeatures>,
}

impl FeatureCache {
    pub fn frame_count(&self) -> usize {
        self.subjects.iter().map(SubjectFeatures::frames).sum()
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectFeatures> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn row(&self, subject: usize, frame: usize) -> &[f64] {
        let s = &self.subjects[subject];
        &s.zq[frame * self.zq_dim..(frame + 1) * self.zq_dim]
    }

    /// Cached quadrant guess of D for one frame.
    pub fn quadrant_pred(&self, subject: usize, frame: usize) -> usize {
        let row = self.row(subject, frame);
        argmax4(&row[self.zq_dim - 4..])
    }
}

/// Runs clean frames through G and D once. No sampling is involved, so equal
/// models give bit-identical caches.
pub fn extract_features<T: Scalar>(
    model: &AnclafModel<T>,
    subjects: &[&SubjectData],
) -> Result<FeatureCache, TrainError> {
    let zq_dim = model.arch.zq_dim();
    let mut out = Vec::with_capacity(subjects.len());
    for s in subjects {
        if s.frames.is_empty() {
            return Err(TrainError::MissingFrames(s.subject_id));
        }
        let mut zq = Vec::with_capacity(s.frames.len() * zq_dim);
        for chunk in s.frames.chunks(256) {
            let mut g = Graph::inference();
            let pixels = chunk[0].image.len();
            let data: Vec<T> = chunk.iter().flat_map(|f| f.image.iter().map(|&p| T::of(p))).collect();
            let x = g.constant_from(&[chunk.len(), pixels], data)?;
            let f = model.latent_features(&mut g, x)?;
            zq.extend(g.value(f.zq).iter().map(|v| v.as_f64()));
        }
        out.push(SubjectFeatures {
            subject_id: s.subject_id,
            zq,
            labels: s.frames.iter().map(|f| f.label).collect(),
        });
    }
    Ok(FeatureCache { zq_dim, subjects: out })
}

/// Sequence inputs for one side of a split. With `images` set, `zq` is
/// recomputed through G and D on every pass instead of read from the cache.
#[derive(Debug, Clone, Copy)]
pub struct SequenceSet<'a> {
    pub features: &'a FeatureCache,
    pub images: Option<&'a [&'a SubjectData]>,
}

impl<'a> SequenceSet<'a> {
    pub fn cached(features: &'a FeatureCache) -> Self {
        Self { features, images: None }
    }

    fn lengths(&self) -> Vec<usize> {
        self.features.subjects.iter().map(SubjectFeatures::frames).collect()
    }
}

/// Non-overlapping windows `(subject, start)` of `n` consecutive frames per
/// subject, and the number of tail frames left over.
pub fn windows(lengths: &[usize], n: usize) -> (Vec<(usize, usize)>, usize) {
    let mut out = Vec::new();
    let mut dropped = 0;
    for (s, &len) in lengths.iter().enumerate() {
        out.extend((0..len / n).map(|w| (s, w * n)));
        dropped += len % n;
    }
    (out, dropped)
}

fn step_input<T: Scalar>(
    model: &AnclafModel<T>,
    g: &mut Graph<T>,
    set: &SequenceSet<'_>,
    batch: &[(usize, usize)],
    t: usize,
) -> Result<NodeId, TrainError> {
    match set.images {
        None => {
            let dim = set.features.zq_dim;
            let data: Vec<T> = batch
                .iter()
                .flat_map(|&(s, start)| set.features.row(s, start + t).iter().map(|&v| T::of(v)))
                .collect();
            Ok(g.constant_from(&[batch.len(), dim], data)?)
        }
        Some(subjects) => {
            let pixels = model.arch.pixels();
            let data: Vec<T> = batch
                .iter()
                .flat_map(|&(s, start)| subjects[s].frames[start + t].image.iter().map(|&p| T::of(p)))
                .collect();
            let x = g.constant_from(&[batch.len(), pixels], data)?;
            Ok(model.latent_features(g, x)?.zq)
        }
    }
}

/// Forward over a batch of windows; returns predictions `[(n·B) × 2]` in
/// time-major row order and the matching truths.
fn forward_windows<T: Scalar>(
    model: &AnclafModel<T>,
    g: &mut Graph<T>,
    set: &SequenceSet<'_>,
    batch: &[(usize, usize)],
) -> Result<(NodeId, Vec<AffectLabel>), TrainError> {
    let n = model.arch.seq_len;
    let inputs = (0..n)
        .map(|t| step_input(model, g, set, batch, t))
        .collect::<Result<Vec<_>, _>>()?;
    let out = match model.arch.variant {
        Variant::SequenceAttention => model.anclaf_sa_forward(g, &inputs, n)?,
        _ => model.anclaf_s_forward(g, &inputs, n)?,
    };
    let preds = g.concat(&out.predictions, 0)?;
    let mut truths = Vec::with_capacity(n * batch.len());
    for t in 0..n {
        for &(s, start) in batch {
            truths.push(set.features.subjects[s].labels[start + t]);
        }
    }
    Ok((preds, truths))
}

/// Window-wise evaluation: every window starts from a zero state and an empty
/// attention window. Tail frames that do not fill a window are skipped.
pub fn evaluate_sequences<T: Scalar>(
    model: &AnclafModel<T>,
    set: &SequenceSet<'_>,
) -> Result<Predictions, TrainError> {
    let n = model.arch.seq_len;
    let (wins, _) = windows(&set.lengths(), n);
    let mut out = Predictions::default();
    for batch in wins.chunks(EVAL_WINDOWS) {
        let mut g = Graph::inference();
        let (preds, _) = forward_windows(model, &mut g, set, batch)?;
        let values = g.value(preds);
        let b = batch.len();
        for (i, &(s, start)) in batch.iter().enumerate() {
            for t in 0..n {
                let row = &values[(t * b + i) * 2..(t * b + i) * 2 + 2];
                out.preds.push(AffectLabel::new(row[0].as_f64(), row[1].as_f64()));
                out.truths.push(set.features.subjects[s].labels[start + t]);
                out.quadrant_pred.push(set.features.quadrant_pred(s, start + t));
            }
        }
    }
    Ok(out)
}

/// The affect objective over every window of `set`, as one batch.
pub fn sequence_loss<T: Scalar>(
    model: &AnclafModel<T>,
    set: &SequenceSet<'_>,
    weights: &ClassWeights,
) -> Result<f64, TrainError> {
    evaluate_sequences(model, set)?.loss(weights)
}

/// Trains one sequence model (with or without attention) at its own window length.
pub fn train_sequence_stage<T: Scalar>(
    config: &TrainConfig,
    mut model: AnclafModel<T>,
    train: &SequenceSet<'_>,
    validation: &SequenceSet<'_>,
    weights: &ClassWeights,
    stage: &str,
    ctx: &RunContext,
) -> Result<(AnclafModel<T>, StageResult), TrainError> {
    let started = Instant::now();
    let n = model.arch.seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.stage_seed(config.seed, stage));
    let (mut wins, dropped_frames) = windows(&train.lengths(), n);
    if wins.is_empty() {
        return Err(TrainError::Config(format!("no training sequence holds a window of {n} frames")));
    }
    let fold = ctx.fold.as_ref().map(|f| f.fold);
    let name = model.name();
    let owner = if config.freeze_gd_stage2 || train.images.is_none() {
        "c."
    } else {
        ""
    };

    let initial_train_loss = sequence_loss(&model, train, weights)?;
    let initial = evaluate_sequences(&model, validation)?;
    let initial_validation_loss = initial.loss(weights)?;
    let initial_validation = initial.report(&name, fold, n)?;

    let mut adam = Adam::new(config.adam());
    let mut epochs = Vec::new();
    let mut last = (initial_validation_loss, initial_validation.clone());
    for epoch in 1..=config.epochs_per_stage {
        wins.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for batch in wins.chunks(config.batch_size) {
            let mut g = Graph::new();
            let (preds, truths) = forward_windows(&model, &mut g, train, batch)?;
            let loss = affect_loss(&mut g, preds, &truths, weights)?;
            let value = g.scalar_value(loss).as_f64();
            guard_finite(stage, "loss", value)?;
            let grads = g.backward(loss)?;
            let owned = owned_grads(&model, &g, &[(owner, &grads)]);
            adam.step(&mut model.params, &owned)
                .map_err(|e| diverged(stage, e.to_string()))?;
            sum += value;
            batches += 1;
        }
        let preds = evaluate_sequences(&model, validation)?;
        let val_loss = preds.loss(weights)?;
        guard_finite(stage, "validation loss", val_loss)?;
        let report = preds.report(&name, fold, n)?;
        let log = EpochLog {
            epoch,
            loss: sum / batches as f64,
            val_loss,
            val_ccc: report.avg.ccc,
        };
        ctx.progress(stage, &log);
        epochs.push(log);
        last = (val_loss, report);
    }

    let final_train_loss = sequence_loss(&model, train, weights)?;
    let mut result = StageResult {
        stage: stage.to_string(),
        model: name,
        seq_len: n,
        fold,
        epochs,
        initial_train_loss,
        final_train_loss,
        initial_validation_loss,
        validation_loss: last.0,
        initial_validation,
        validation: last.1,
        dropped_frames,
        checkpoint: None,
        seconds: 0.0,
    };
    finish_stage(config, ctx, stage, &model, &rng, &mut result, started)?;
    Ok((model, result))
}

/// Sequence models for every curriculum length. The first starts from a fresh
/// combiner on top of `base`; each later one starts from its predecessor.
pub fn train_curriculum<T: Scalar>(
    config: &TrainConfig,
    base: &AnclafModel<T>,
    train: &SequenceSet<'_>,
    validation: &SequenceSet<'_>,
    weights: &ClassWeights,
    ctx: &RunContext,
) -> Result<Vec<(AnclafModel<T>, StageResult)>, TrainError> {
    config.validate()?;
    let mut out: Vec<(AnclafModel<T>, StageResult)> = Vec::with_capacity(config.curriculum.len());
    for &n in &config.curriculum {
        let stage = stage_name_sequence(n);
        let start = match out.last() {
            None => {
                let init_seed = seed::mix(ctx.stage_seed(config.seed, &stage), 1);
                base.with_fresh_combiner(Variant::Sequence, n, init_seed)?
            }
            Some((prev, _)) => prev.with_seq_len(n)?,
        };
        out.push(train_sequence_stage(config, start, train, validation, weights, &stage, ctx)?);
    }
    Ok(out)
}

/// Attention fine-tuning of each sequence model. The widened models start out
/// computing exactly what their sequence counterparts compute.
pub fn train_attention<T: Scalar>(
    config: &TrainConfig,
    sequence_models: &[AnclafModel<T>],
    train: &SequenceSet<'_>,
    validation: &SequenceSet<'_>,
    weights: &ClassWeights,
    ctx: &RunContext,
) -> Result<Vec<(AnclafModel<T>, StageResult)>, TrainError> {
    config.validate()?;
    let mut out = Vec::with_capacity(sequence_models.len());
    for s in sequence_models {
        let n = s.arch.seq_len;
        let stage = stage_name_attention(n);
        let init_seed = seed::mix(ctx.stage_seed(config.seed, &stage), 1);
        let start = s.with_attention(config.attention_mode, init_seed)?;
        out.push(train_sequence_stage(config, start, train, validation, weights, &stage, ctx)?);
    }
    Ok(out)
}
