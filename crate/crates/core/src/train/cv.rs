use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    evaluate_frames, evaluate_sequences, extract_features, stage_name_attention, stage_name_base, stage_name_sequence,
    train_attention, train_curriculum, train_stage1, FeatureCache, FoldInfo, Predictions, RunContext, SequenceSet,
    Split, StageResult, TrainConfig, TrainError,
};
use crate::io::{load_checkpoint, save_features, Checkpoint};
use crate::metrics::{aggregate_report, class_weights_with, MetricReport};
use crate::model::{AnclafModel, Variant};
use crate::scalar::Scalar;
use crate::synth::{split_folds, Dataset, FoldAssignment, SubjectData};

/// Which stages a run trains. Stages that are skipped but needed later are
/// loaded from the run's output directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StagePlan {
    pub base: bool,
    pub sequence: bool,
    pub attention: bool,
}

impl StagePlan {
    pub const ALL: StagePlan = StagePlan {
        base: true,
        sequence: true,
        attention: true,
    };

    /// `base`, `seq`, `attn` or `all`.
    pub fn parse(name: &str) -> Option<Self> {
        let only = |base, sequence, attention| StagePlan {
            base,
            sequence,
            attention,
        };
        match name {
            "base" => Some(only(true, false, false)),
            "seq" => Some(only(false, true, false)),
            "attn" => Some(only(false, false, true)),
            "all" => Some(Self::ALL),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub info: FoldInfo,
    pub stages: Vec<StageResult>,
}

impl FoldResult {
    pub fn stage(&self, name: &str) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationResult {
    pub folds: Vec<FoldResult>,
    /// Fold-averaged validation reports, one per trained model, in stage order.
    pub reports: Vec<MetricReport>,
}

impl CrossValidationResult {
    pub fn report(&self, model: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|r| r.model == model)
    }
}

fn load_stage<T: Scalar>(ctx: &RunContext, stage: &str) -> Result<AnclafModel<T>, TrainError> {
    let path = ctx
        .checkpoint_path(stage)
        .ok_or_else(|| TrainError::MissingCheckpoint(format!("{stage}.ckpt").into()))?;
    if !path.exists() {
        return Err(TrainError::MissingCheckpoint(path));
    }
    Ok(load_checkpoint::<T>(&path)?.model)
}

/// Every selected stage of one fold.
pub fn run_fold<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    folds: &FoldAssignment,
    fold: usize,
    plan: StagePlan,
    ctx: &RunContext,
) -> Result<FoldResult, TrainError> {
    config.validate()?;
    let (split, info) = Split::from_fold(dataset, folds, fold)?;
    let ctx = ctx.for_fold(info.clone());
    let mut stages = Vec::new();

    let needs_base = plan.sequence || plan.attention;
    let base: AnclafModel<T> = if plan.base {
        let (model, result) = train_stage1(config, &split, &ctx)?;
        stages.push(result);
        model
    } else if needs_base {
        load_stage(&ctx, &stage_name_base())?
    } else {
        return Ok(FoldResult { info, stages });
    };
    if !needs_base {
        return Ok(FoldResult { info, stages });
    }

    let weights = class_weights_with(&split.train_labels(), config.class_weighting)?;
    let train_cache = extract_features(&base, &split.train)?;
    let val_cache = extract_features(&base, &split.validation)?;
    if let Some(dir) = &ctx.out_dir {
        let all = FeatureCache {
            zq_dim: train_cache.zq_dim,
            subjects: train_cache.subjects.iter().chain(&val_cache.subjects).cloned().collect(),
        };
        save_features(&dir.join(format!("fold{fold}")).join("features.zq"), &all)?;
    }
    let live = !config.freeze_gd_stage2;
    let train_set = SequenceSet {
        features: &train_cache,
        images: live.then_some(&split.train[..]),
    };
    let val_set = SequenceSet {
        features: &val_cache,
        images: live.then_some(&split.validation[..]),
    };

    let sequence_models: Vec<AnclafModel<T>> = if plan.sequence {
        let trained = train_curriculum(config, &base, &train_set, &val_set, &weights, &ctx)?;
        trained
            .into_iter()
            .map(|(m, r)| {
                stages.push(r);
                m
            })
            .collect()
    } else {
        config
            .curriculum
            .iter()
            .map(|&n| load_stage(&ctx, &stage_name_sequence(n)))
            .collect::<Result<_, _>>()?
    };
    if plan.attention {
        for (_, r) in train_attention(config, &sequence_models, &train_set, &val_set, &weights, &ctx)? {
            stages.push(r);
        }
    }
    Ok(FoldResult { info, stages })
}

/// Subject-independent k-fold run of the selected stages. Folds run on up to
/// `ctx.threads` workers; results do not depend on the worker count.
pub fn run_cross_validation<T: Scalar>(
    config: &TrainConfig,
    dataset: &Dataset,
    plan: StagePlan,
    ctx: &RunContext,
) -> Result<CrossValidationResult, TrainError> {
    config.validate()?;
    let folds = split_folds(&dataset.subject_ids(), config.folds)?;
    let k = folds.k;
    let workers = ctx.threads.clamp(1, k);
    let mut results: Vec<Option<Result<FoldResult, TrainError>>> = (0..k).map(|_| None).collect();
    if workers == 1 {
        for (fold, slot) in results.iter_mut().enumerate() {
            *slot = Some(run_fold::<T>(config, dataset, &folds, fold, plan, ctx));
        }
    } else {
        let next = AtomicUsize::new(0);
        let shared = Mutex::new(&mut results);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let fold = next.fetch_add(1, Ordering::SeqCst);
                    if fold >= k {
                        break;
                    }
                    let r = run_fold::<T>(config, dataset, &folds, fold, plan, ctx);
                    shared.lock().expect("result table lock")[fold] = Some(r);
                });
            }
        });
    }
    let folds: Vec<FoldResult> = results
        .into_iter()
        .map(|r| r.ok_or(TrainError::Worker)?)
        .collect::<Result<_, _>>()?;

    let mut reports = Vec::new();
    for stage in &folds[0].stages {
        let per_fold: Vec<MetricReport> = folds
            .iter()
            .filter_map(|f| f.stage(&stage.stage).map(|s| s.validation.clone()))
            .collect();
        reports.push(aggregate_report(&per_fold)?);
    }
    Ok(CrossValidationResult { folds, reports })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricReport,
    pub predictions: Predictions,
    pub warnings: Vec<String>,
}

/// Re-evaluates a checkpoint on its own validation subjects, the same way the
/// trainer scored it. Without fold information every subject is used.
pub fn evaluate_checkpoint<T: Scalar>(checkpoint: &Checkpoint<T>, dataset: &Dataset) -> Result<EvalOutcome, TrainError> {
    let mut warnings = Vec::new();
    let wanted: Vec<u32> = match &checkpoint.meta.fold {
        Some(f) => f.validation_subjects.clone(),
        None => {
            warnings.push("checkpoint carries no fold; evaluating on every subject".to_string());
            dataset.subject_ids()
        }
    };
    let mut subjects: Vec<&SubjectData> = Vec::new();
    for id in &wanted {
        match dataset.subject(*id) {
            Some(s) => subjects.push(s),
            None => warnings.push(format!("fold mismatch: validation subject {id} is not in the data")),
        }
    }
    if subjects.is_empty() {
        return Err(TrainError::UnknownSubject(*wanted.first().unwrap_or(&0)));
    }
    let model = &checkpoint.model;
    let predictions = match model.arch.variant {
        Variant::Frame => {
            let frames: Vec<_> = subjects.iter().flat_map(|s| s.frames.iter()).collect();
            evaluate_frames(model, &frames)?
        }
        _ => {
            let cache = extract_features(model, &subjects)?;
            evaluate_sequences(model, &SequenceSet::cached(&cache))?
        }
    };
    let fold = checkpoint.meta.fold.as_ref().map(|f| f.fold);
    let report = predictions.report(&model.name(), fold, model.arch.seq_len)?;
    Ok(EvalOutcome {
        report,
        predictions,
        warnings,
    })
}

/// Stage names a full run produces for one fold, in order.
pub fn stage_names(config: &TrainConfig) -> Vec<String> {
    let mut out = vec![stage_name_base()];
    out.extend(config.curriculum.iter().map(|&n| stage_name_sequence(n)));
    out.extend(config.curriculum.iter().map(|&n| stage_name_attention(n)));
    out
}
