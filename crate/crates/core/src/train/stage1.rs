use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    diverged, finish_stage, guard_finite, owned_grads, stage_name_base, Adam, EpochLog, Predictions, RunContext,
    StageResult, TrainConfig, TrainError,
};
use crate::metrics::{
    adversarial_losses, affect_loss, class_weights_with, quadrant_cross_entropy, AffectLabel, ClassWeights,
};
use crate::model::AnclafModel;
use crate::scalar::Scalar;
use crate::seed;
use crate::synth::{Dataset, FoldAssignment, FrameRecord, SubjectData};
use crate::tensor::{Graph, NodeId};

use super::FoldInfo;

/// Frames evaluated per inference graph; results do not depend on it.
const EVAL_CHUNK: usize = 256;

/// Training and validation subjects of one run.
#[derive(Debug, Clone)]
pub struct Split<'a> {
    pub train: Vec<&'a SubjectData>,
    pub validation: Vec<&'a SubjectData>,
}

impl<'a> Split<'a> {
    pub fn new(dataset: &'a Dataset, train: &[u32], validation: &[u32]) -> Result<Self, TrainError> {
        let pick = |ids: &[u32]| -> Result<Vec<&'a SubjectData>, TrainError> {
            ids.iter()
                .map(|&id| {
                    let s = dataset.subject(id).ok_or(TrainError::UnknownSubject(id))?;
                    if s.frames.is_empty() {
                        return Err(TrainError::MissingFrames(id));
                    }
                    Ok(s)
                })
                .collect()
        };
        Ok(Self {
            train: pick(train)?,
            validation: pick(validation)?,
        })
    }

    pub fn from_fold(dataset: &'a Dataset, folds: &FoldAssignment, fold: usize) -> Result<(Self, FoldInfo), TrainError> {
        let info = FoldInfo {
            fold,
            k: folds.k,
            validation_subjects: folds.validation(fold).to_vec(),
            training_subjects: folds.training(fold),
        };
        Ok((Self::new(dataset, &info.training_subjects, &info.validation_subjects)?, info))
    }

    pub fn train_frames(&self) -> Vec<&'a FrameRecord> {
        self.train.iter().flat_map(|s| s.frames.iter()).collect()
    }

    pub fn validation_frames(&self) -> Vec<&'a FrameRecord> {
        self.validation.iter().flat_map(|s| s.frames.iter()).collect()
    }

    pub fn train_labels(&self) -> Vec<AffectLabel> {
        self.train_frames().iter().map(|f| f.label).collect()
    }
}

fn image_batch<T: Scalar>(g: &mut Graph<T>, frames: &[&FrameRecord]) -> Result<NodeId, TrainError> {
    let pixels = frames[0].image.len();
    let data: Vec<T> = frames.iter().flat_map(|f| f.image.iter().map(|&p| T::of(p))).collect();
    Ok(g.constant_from(&[frames.len(), pixels], data)?)
}

struct Stage1Losses {
    d: NodeId,
    g: NodeId,
    c: NodeId,
}

/// Builds the three stage-1 objectives on one graph.
///
/// D sees the real batch and a detached reconstruction of its distorted copy.
/// G is scored through D on the attached reconstruction. C reads clean-image
/// `zq` features; unless they are detached, its loss also trains G's encoder and D.
fn stage1_losses<T: Scalar, R: Rng>(
    model: &AnclafModel<T>,
    g: &mut Graph<T>,
    frames: &[&FrameRecord],
    config: &TrainConfig,
    weights: &ClassWeights,
    rng: &mut R,
) -> Result<Stage1Losses, TrainError> {
    let x = image_batch(g, frames)?;
    let quads: Vec<usize> = frames.iter().map(|f| f.quadrant).collect();
    let labels: Vec<AffectLabel> = frames.iter().map(|f| f.label).collect();

    let (rec, _) = model.generator_forward(g, x, Some((&config.distortions, rng)))?;
    let rec_fixed = g.detach(rec);
    let real = model.discriminator_forward(g, x)?;
    let fake_fixed = model.discriminator_forward(g, rec_fixed)?;
    let (adv_d, _) = adversarial_losses(g, real.p_real, fake_fixed.p_real, config.adversarial_form)?;
    let ce_real = quadrant_cross_entropy(g, real.quadrant_logits, &quads)?;
    let ce_fake = quadrant_cross_entropy(g, fake_fixed.quadrant_logits, &quads)?;
    let ce = g.add(ce_real, ce_fake)?;
    let ce = g.scale(ce, T::of(0.5 * config.lambda_q));
    let loss_d = g.add(adv_d, ce)?;

    let fake = model.discriminator_forward(g, rec)?;
    let (_, adv_g) = adversarial_losses(g, real.p_real, fake.p_real, config.adversarial_form)?;
    let rec_weight = config.reconstruction_weight();
    let loss_g = if rec_weight > 0.0 {
        let diff = g.sub(rec, x)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq)?;
        let weighted = g.scale(mse, T::of(rec_weight));
        g.add(adv_g, weighted)?
    } else {
        adv_g
    };

    let features = model.latent_features(g, x)?;
    let zq = if config.detach_stage1_features {
        g.detach(features.zq)
    } else {
        features.zq
    };
    let pred = model.combine_frame(g, zq)?;
    let loss_c = affect_loss(g, pred, &labels, weights)?;
    Ok(Stage1Losses {
        d: loss_d,
        g: loss_g,
        c: loss_c,
    })
}

fn total_of<T: Scalar>(g: &Graph<T>, l: &Stage1Losses) -> f64 {
    g.scalar_value(l.d).as_f64() + g.scalar_value(l.g).as_f64() + g.scalar_value(l.c).as_f64()
}

/// One simultaneous update of G, D and C. Returns the summed loss.
fn stage1_step<T: Scalar, R: Rng>(
    model: &mut AnclafModel<T>,
    adam: &mut Adam<T>,
    frames: &[&FrameRecord],
    config: &TrainConfig,
    weights: &ClassWeights,
    rng: &mut R,
    stage: &str,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let losses = stage1_losses(model, &mut g, frames, config, weights, rng)?;
    let total = total_of(&g, &losses);
    guard_finite(stage, "loss", total)?;
    // With attached features the affect loss also shapes G and D; otherwise the
    // added term has no gradient there.
    let objective_d = g.add(losses.d, losses.c)?;
    let objective_g = g.add(losses.g, losses.c)?;
    let grads_d = g.backward(objective_d)?;
    let grads_g = g.backward(objective_g)?;
    let grads_c = g.backward(losses.c)?;
    let grads = owned_grads(model, &g, &[("d.", &grads_d), ("g.", &grads_g), ("c.", &grads_c)]);
    adam.step(&mut model.params, &grads)
        .map_err(|e| diverged(stage, e.to_string()))?;
    Ok(total)
}

/// Mean summed stage-1 loss over `frames` in order, without updates. Distortions
/// are drawn from a stream seeded by `eval_seed`, so repeated calls agree.
pub fn stage1_objective<T: Scalar>(
    model: &AnclafModel<T>,
    frames: &[&FrameRecord],
    config: &TrainConfig,
    weights: &ClassWeights,
    eval_seed: u64,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(eval_seed);
    let (mut total, mut batches) = (0.0, 0usize);
    for chunk in frames.chunks(config.batch_size) {
        let mut g = Graph::inference();
        let l = stage1_losses(model, &mut g, chunk, config, weights, &mut rng)?;
        total += total_of(&g, &l);
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Frame-model predictions and D's quadrant guesses for every frame.
pub fn evaluate_frames<T: Scalar>(model: &AnclafModel<T>, frames: &[&FrameRecord]) -> Result<Predictions, TrainError> {
    let mut out = Predictions::default();
    for chunk in frames.chunks(EVAL_CHUNK) {
        let mut g = Graph::inference();
        let x = image_batch(&mut g, chunk)?;
        let (pred, features) = model.anclaf_forward(&mut g, x)?;
        out.push_rows(g.value(pred), g.value(features.q), chunk.iter().map(|f| f.label));
    }
    Ok(out)
}

/// Joint adversarial training of G, D and the frame combiner.
pub fn train_stage1<T: Scalar>(
    config: &TrainConfig,
    split: &Split<'_>,
    ctx: &RunContext,
) -> Result<(AnclafModel<T>, StageResult), TrainError> {
    config.validate()?;
    let started = Instant::now();
    let stage = stage_name_base();
    let stage_seed = ctx.stage_seed(config.seed, &stage);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed);
    let mut model = AnclafModel::<T>::init(config.architecture(), seed::mix(stage_seed, 1))?;

    let train = split.train_frames();
    let validation = split.validation_frames();
    if train.is_empty() {
        return Err(TrainError::Config("no training frames".into()));
    }
    let weights = class_weights_with(&split.train_labels(), config.class_weighting)?;
    let eval_seed = seed::mix(stage_seed, 2);
    let fold = ctx.fold.as_ref().map(|f| f.fold);
    let name = model.name();

    let initial_train_loss = stage1_objective(&model, &train, config, &weights, eval_seed)?;
    let initial = evaluate_frames(&model, &validation)?;
    let initial_validation_loss = initial.loss(&weights)?;
    let initial_validation = initial.report(&name, fold, 1)?;

    let mut adam = Adam::new(config.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut last = (initial_validation_loss, initial_validation.clone());
    for epoch in 1..=config.stage1_epoch_count() {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let frames: Vec<&FrameRecord> = chunk.iter().map(|&i| train[i]).collect();
            sum += stage1_step(&mut model, &mut adam, &frames, config, &weights, &mut rng, &stage)?;
            batches += 1;
        }
        let preds = evaluate_frames(&model, &validation)?;
        let val_loss = preds.loss(&weights)?;
        guard_finite(&stage, "validation loss", val_loss)?;
        let report = preds.report(&name, fold, 1)?;
        let log = EpochLog {
            epoch,
            loss: sum / batches as f64,
            val_loss,
            val_ccc: report.avg.ccc,
        };
        ctx.progress(&stage, &log);
        epochs.push(log);
        last = (val_loss, report);
    }

    let final_train_loss = stage1_objective(&model, &train, config, &weights, eval_seed)?;
    let mut result = StageResult {
        stage: stage.clone(),
        model: name,
        seq_len: 1,
        fold,
        epochs,
        initial_train_loss,
        final_train_loss,
        initial_validation_loss,
        validation_loss: last.0,
        initial_validation,
        validation: last.1,
        dropped_frames: 0,
        checkpoint: None,
        seconds: 0.0,
    };
    finish_stage(config, ctx, &stage, &model, &rng, &mut result, started)?;
    Ok((model, result))
}
