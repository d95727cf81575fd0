//! Two-stage training.
//!
//! Stage 1 trains G, D and the frame combiner jointly on images. Stage 2 trains
//! sequence combiners on cached `zq` features: a curriculum over increasing
//! window lengths, each stage starting from the previous one, then attention
//! fine-tuning of every curriculum model.
//!
//! All randomness comes from ChaCha8 streams derived from `(seed, fold, stage)`,
//! so a stage's result does not depend on which worker runs it.

mod adam;
mod cv;
mod sequence;
mod stage1;

pub use adam::{Adam, AdamSettings, NonFiniteGradient};
pub use cv::{
    stage_names,
    evaluate_checkpoint, run_cross_validation, run_fold, CrossValidationResult, EvalOutcome, FoldResult, StagePlan,
};
pub use sequence::{
    evaluate_sequences, extract_features, sequence_loss, train_attention, train_curriculum, train_sequence_stage,
    windows, FeatureCache, Predictions, SequenceSet, SubjectFeatures,
};
pub use stage1::{evaluate_frames, stage1_objective, train_stage1, Split};

use std::path::PathBuf;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionMode;
use crate::io::{save_checkpoint, CheckpointMeta, IoError, RngState};
use crate::metrics::{AdversarialForm, ClassWeighting, MetricError, MetricReport};
use crate::model::{AnclafModel, Architecture, ModelError};
use crate::nn::ParamId;
use crate::scalar::Scalar;
use crate::seed;
use crate::synth::{DataError, Distortion};
use crate::tensor::{Gradients, Graph, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("training diverged in stage {stage}: {reason}")]
    Diverged { stage: String, reason: String },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("subject {0} has no frames")]
    MissingFrames(u32),
    #[error("unknown subject {0}")]
    UnknownSubject(u32),
    #[error("worker thread panicked")]
    Worker,
}

impl From<crate::nn::NnError> for TrainError {
    fn from(e: crate::nn::NnError) -> Self {
        TrainError::Model(e.into())
    }
}

/// Hyperparameters for every stage. Unknown keys are rejected when read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Frames per batch in stage 1, windows per batch in stage 2.
    pub batch_size: usize,
    pub epochs_per_stage: usize,
    /// Overrides `epochs_per_stage` for stage 1 when set.
    pub stage1_epochs: Option<usize>,
    pub curriculum: Vec<usize>,
    pub lambda_rec: f64,
    pub use_reconstruction: bool,
    pub lambda_q: f64,
    /// Stop the stage-1 affect loss at the features, so it trains only C.
    pub detach_stage1_features: bool,
    pub freeze_gd_stage2: bool,
    pub attention_mode: AttentionMode,
    pub context_divide_by_count: bool,
    pub adversarial_form: AdversarialForm,
    pub class_weighting: ClassWeighting,
    pub hard_quadrant: bool,
    pub distortions: Vec<Distortion>,
    pub folds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            epochs_per_stage: 20,
            stage1_epochs: None,
            curriculum: vec![2, 4, 8, 16, 32],
            lambda_rec: 10.0,
            use_reconstruction: true,
            lambda_q: 1.0,
            detach_stage1_features: false,
            freeze_gd_stage2: true,
            attention_mode: AttentionMode::Concat,
            context_divide_by_count: true,
            adversarial_form: AdversarialForm::NonSaturating,
            class_weighting: ClassWeighting::InverseFrequency,
            hard_quadrant: false,
            distortions: Distortion::ALL.to_vec(),
            folds: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        // A zero learning rate is allowed: it gives a frozen run with the full pipeline.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        for (name, w) in [("lambda_rec", self.lambda_rec), ("lambda_q", self.lambda_q)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {w}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.curriculum.is_empty() || self.curriculum[0] == 0 {
            return bad("curriculum needs at least one positive length".into());
        }
        for w in self.curriculum.windows(2) {
            if w[1] <= w[0] || w[1] % w[0] != 0 {
                return bad(format!(
                    "curriculum must be strictly increasing with each length dividing the next: {:?}",
                    self.curriculum
                ));
            }
        }
        if self.distortions.is_empty() {
            return bad("distortions must name at least one kind".into());
        }
        if self.folds < 2 {
            return bad(format!("folds must be at least 2, got {}", self.folds));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamSettings {
        AdamSettings {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn stage1_epoch_count(&self) -> usize {
        self.stage1_epochs.unwrap_or(self.epochs_per_stage)
    }

    /// Frame-model architecture carrying this config's model switches.
    pub fn architecture(&self) -> Architecture {
        Architecture {
            attention_mode: self.attention_mode,
            context_divide_by_count: self.context_divide_by_count,
            hard_quadrant: self.hard_quadrant,
            ..Architecture::default()
        }
    }

    pub fn reconstruction_weight(&self) -> f64 {
        if self.use_reconstruction {
            self.lambda_rec
        } else {
            0.0
        }
    }
}

/// Which fold a run belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldInfo {
    pub fold: usize,
    pub k: usize,
    pub validation_subjects: Vec<u32>,
    pub training_subjects: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: f64,
    pub val_ccc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    /// `anclaf`, `anclaf-s-<n>` or `anclaf-sa-<n>`.
    pub stage: String,
    pub model: String,
    pub seq_len: usize,
    pub fold: Option<usize>,
    pub epochs: Vec<EpochLog>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_validation_loss: f64,
    pub validation_loss: f64,
    pub initial_validation: MetricReport,
    pub validation: MetricReport,
    /// Training frames in sequence tails shorter than the window.
    pub dropped_frames: usize,
    pub checkpoint: Option<PathBuf>,
    #[serde(skip)]
    pub seconds: f64,
}

/// Where and how a stage reports.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub out_dir: Option<PathBuf>,
    pub verbose: bool,
    /// Worker cap for fold-parallel runs; 0 means one.
    pub threads: usize,
    pub fold: Option<FoldInfo>,
}

impl RunContext {
    pub fn for_fold(&self, fold: FoldInfo) -> Self {
        Self {
            fold: Some(fold),
            ..self.clone()
        }
    }

    fn label(&self, stage: &str) -> String {
        match &self.fold {
            Some(f) => format!("fold{}/{stage}", f.fold),
            None => stage.to_string(),
        }
    }

    pub fn checkpoint_path(&self, stage: &str) -> Option<PathBuf> {
        let dir = self.out_dir.as_ref()?;
        Some(match &self.fold {
            Some(f) => dir.join(format!("fold{}", f.fold)).join(format!("{stage}.ckpt")),
            None => dir.join(format!("{stage}.ckpt")),
        })
    }

    fn progress(&self, stage: &str, log: &EpochLog) {
        if self.verbose {
            println!(
                "stage={} epoch={} loss={:.6} val_ccc={:.6}",
                self.label(stage),
                log.epoch,
                log.loss,
                log.val_ccc
            );
        }
    }

    fn stage_seed(&self, base: u64, stage: &str) -> u64 {
        let fold = self.fold.as_ref().map_or(u64::MAX, |f| f.fold as u64);
        seed::mix(seed::mix(base, fold), seed::tag(stage))
    }
}

pub fn stage_name_base() -> String {
    "anclaf".to_string()
}

pub fn stage_name_sequence(n: usize) -> String {
    format!("anclaf-s-{n}")
}

pub fn stage_name_attention(n: usize) -> String {
    format!("anclaf-sa-{n}")
}

/// Pairs every bound parameter with its gradient from the loss that owns it.
/// `owners` maps a parameter-name prefix to the gradient table of its loss; a
/// parameter without an owner or without a gradient is left alone.
fn owned_grads<'a, T: Scalar>(
    model: &AnclafModel<T>,
    g: &Graph<T>,
    owners: &[(&str, &'a Gradients<T>)],
) -> Vec<(ParamId, &'a [T])> {
    let mut out = Vec::new();
    for (pid, node) in g.bound_params() {
        let name = model.params.name(pid);
        if let Some((_, grads)) = owners.iter().find(|(prefix, _)| name.starts_with(prefix)) {
            if let Some(grad) = grads.get(node) {
                out.push((pid, grad));
            }
        }
    }
    out
}

fn diverged(stage: &str, reason: impl Into<String>) -> TrainError {
    TrainError::Diverged {
        stage: stage.to_string(),
        reason: reason.into(),
    }
}

fn guard_finite(stage: &str, what: &str, v: f64) -> Result<(), TrainError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(diverged(stage, format!("{what} is {v}")))
    }
}

fn rng_state(rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

/// Writes the stage checkpoint if the context has an output directory.
fn finish_stage<T: Scalar>(
    config: &TrainConfig,
    ctx: &RunContext,
    stage: &str,
    model: &AnclafModel<T>,
    rng: &ChaCha8Rng,
    result: &mut StageResult,
    started: Instant,
) -> Result<(), TrainError> {
    if !model.params.all_finite() {
        return Err(diverged(stage, "non-finite parameters"));
    }
    if let Some(path) = ctx.checkpoint_path(stage) {
        let meta = CheckpointMeta {
            stage: stage.to_string(),
            fold: ctx.fold.clone(),
            config: config.clone(),
            rng: Some(rng_state(rng)),
        };
        save_checkpoint(&path, model, &meta)?;
        result.checkpoint = Some(path);
    }
    result.seconds = started.elapsed().as_secs_f64();
    Ok(())
}
