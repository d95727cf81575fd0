//! Deterministic synthetic face videos with known valence/arousal trajectories.
//!
//! Identity (face size, eye spacing, mouth width) is drawn once per subject and
//! never depends on affect. Affect drives two features only: eye openness
//! follows arousal, mouth curvature follows valence.

mod render;

pub use render::{eye_region, mouth_region, render_face, PixelBox, OPEN_EYE_THRESHOLD};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::AffectLabel;
use crate::model::quadrant_of;
use crate::seed::mix;

pub const GENERATOR_VERSION: &str = "anclaf-synth-1";
pub const FRAME_RATE: f64 = 50.0;
pub const IMAGE_SIDE: usize = 16;
pub const DEFAULT_SMOOTHNESS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DataError {
    #[error("smoothness must lie in (0, 1], got {0}")]
    Smoothness(f64),
    #[error("invalid size: {0}")]
    Size(String),
    #[error("no distortion kinds given")]
    NoDistortion,
    #[error("need at least {needed} subjects, have {have}")]
    TooFewSubjects { needed: usize, have: usize },
    #[error("image has {got} pixels, expected {expected}")]
    ImageSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub subject_id: u32,
    pub face_scale: f64,
    pub eye_spacing: f64,
    pub mouth_width: f64,
    pub rng_seed: u64,
}

impl SubjectSpec {
    pub const FACE_SCALE: (f64, f64) = (0.85, 1.0);
    pub const EYE_SPACING: (f64, f64) = (4.0, 5.5);
    pub const MOUTH_WIDTH: (f64, f64) = (4.0, 6.5);

    pub fn sample<R: Rng>(subject_id: u32, rng: &mut R) -> Self {
        let mut draw = |(lo, hi): (f64, f64)| rng.random_range(lo..hi);
        let face_scale = draw(Self::FACE_SCALE);
        let eye_spacing = draw(Self::EYE_SPACING);
        let mouth_width = draw(Self::MOUTH_WIDTH);
        Self {
            subject_id,
            face_scale,
            eye_spacing,
            mouth_width,
            rng_seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffectTrajectory {
    pub frames: Vec<AffectLabel>,
    pub fps: f64,
}

impl AffectTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Mean-reverting random walk per dimension:
/// `x ← clamp(x + s·(η − 0.1·x), −1, 1)` with `η ~ U(−0.25, 0.25)`.
pub fn gen_trajectory(seed: u64, length: usize, smoothness: f64) -> Result<AffectTrajectory, DataError> {
    if !(smoothness > 0.0 && smoothness <= 1.0) {
        return Err(DataError::Smoothness(smoothness));
    }
    if length == 0 {
        return Err(DataError::Size("trajectory length must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = rng.random_range(-0.5..0.5);
    let mut a = rng.random_range(-0.5..0.5);
    let mut frames = Vec::with_capacity(length);
    frames.push(AffectLabel::new(v, a));
    for _ in 1..length {
        let (ev, ea): (f64, f64) = (rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25));
        v = (v + smoothness * (ev - 0.1 * v)).clamp(-1.0, 1.0);
        a = (a + smoothness * (ea - 0.1 * a)).clamp(-1.0, 1.0);
        frames.push(AffectLabel::new(v, a));
    }
    Ok(AffectTrajectory { frames, fps: FRAME_RATE })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    GaussianNoise,
    OcclusionBlock,
    Blur,
}

impl Distortion {
    pub const ALL: [Distortion; 3] = [Distortion::GaussianNoise, Distortion::OcclusionBlock, Distortion::Blur];
}

pub const NOISE_SIGMA: f64 = 0.1;
pub const OCCLUSION_SIDE: usize = 4;

/// Applies one uniformly chosen distortion from `kinds` to a square image.
pub fn distort<R: Rng>(image: &[f64], side: usize, rng: &mut R, kinds: &[Distortion]) -> Result<Vec<f64>, DataError> {
    if kinds.is_empty() {
        return Err(DataError::NoDistortion);
    }
    if image.len() != side * side {
        return Err(DataError::ImageSize {
            expected: side * side,
            got: image.len(),
        });
    }
    let kind = kinds[rng.random_range(0..kinds.len())];
    Ok(match kind {
        Distortion::GaussianNoise => {
            let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
            image
                .iter()
                .map(|&p| (p + normal.sample(rng)).clamp(0.0, 1.0))
                .collect()
        }
        Distortion::OcclusionBlock => {
            let block = OCCLUSION_SIDE.min(side);
            let x0 = rng.random_range(0..=side - block);
            let y0 = rng.random_range(0..=side - block);
            let mut out = image.to_vec();
            for y in y0..y0 + block {
                out[y * side + x0..y * side + x0 + block].fill(0.0);
            }
            out
        }
        Distortion::Blur => {
            let mut out = vec![0.0; image.len()];
            for y in 0..side {
                for x in 0..side {
                    let (mut sum, mut count) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..=(y + 1).min(side - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(side - 1) {
                            sum += image[yy * side + xx];
                            count += 1.0;
                        }
                    }
                    out[y * side + x] = sum / count;
                }
            }
            out
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub subject_id: u32,
    pub frame_index: u32,
    /// Row-major grayscale in `[0, 1]`, quantized to multiples of 1/255.
    pub image: Vec<f64>,
    pub label: AffectLabel,
    pub quadrant: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub subject_id: u32,
    pub frames: usize,
    pub file: String,
    pub spec: Option<SubjectSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: String,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub fps: f64,
    pub smoothness: f64,
    pub total_frames: usize,
    pub subjects: Vec<SubjectEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub subject_id: u32,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.subjects.iter().map(|s| s.frames.len()).sum()
    }

    pub fn subject(&self, id: u32) -> Option<&SubjectData> {
        self.subjects.iter().find(|s| s.subject_id == id)
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        self.subjects.iter().map(|s| s.subject_id).collect()
    }

    pub fn frames(&self) -> impl Iterator<Item = &FrameRecord> {
        self.subjects.iter().flat_map(|s| s.frames.iter())
    }

    pub fn side(&self) -> usize {
        self.manifest.width
    }
}

pub fn subject_file_name(subject_id: u32) -> String {
    format!("subject_{subject_id:04}.bin")
}

pub fn quantize(p: f64) -> f64 {
    (p.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders every frame of one subject.
pub fn gen_subject(spec: &SubjectSpec, frames: usize, smoothness: f64) -> Result<SubjectData, DataError> {
    let traj = gen_trajectory(spec.rng_seed, frames, smoothness)?;
    let frames = traj
        .frames
        .iter()
        .enumerate()
        .map(|(i, &label)| FrameRecord {
            subject_id: spec.subject_id,
            frame_index: i as u32,
            image: render_face(spec, &label).into_iter().map(quantize).collect(),
            label,
            quadrant: quadrant_of(&label).expect("trajectory labels are finite"),
        })
        .collect();
    Ok(SubjectData {
        subject_id: spec.subject_id,
        frames,
    })
}

pub fn gen_dataset(n_subjects: usize, frames_per_subject: usize, seed: u64) -> Result<Dataset, DataError> {
    gen_dataset_with(n_subjects, frames_per_subject, seed, DEFAULT_SMOOTHNESS)
}

/// Subjects `0..n_subjects`, each with its own identity and trajectory stream.
pub fn gen_dataset_with(
    n_subjects: usize,
    frames_per_subject: usize,
    seed: u64,
    smoothness: f64,
) -> Result<Dataset, DataError> {
    if n_subjects < 5 {
        return Err(DataError::TooFewSubjects {
            needed: 5,
            have: n_subjects,
        });
    }
    if frames_per_subject == 0 {
        return Err(DataError::Size("frames per subject must be at least 1".into()));
    }
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut entries = Vec::with_capacity(n_subjects);
    for id in 0..n_subjects as u32 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id as u64));
        let spec = SubjectSpec::sample(id, &mut rng);
        subjects.push(gen_subject(&spec, frames_per_subject, smoothness)?);
        entries.push(SubjectEntry {
            subject_id: id,
            frames: frames_per_subject,
            file: subject_file_name(id),
            spec: Some(spec),
        });
    }
    Ok(Dataset {
        manifest: Manifest {
            generator_version: GENERATOR_VERSION.to_string(),
            seed,
            width: IMAGE_SIDE,
            height: IMAGE_SIDE,
            fps: FRAME_RATE,
            smoothness,
            total_frames: n_subjects * frames_per_subject,
            subjects: entries,
        },
        subjects,
    })
}

/// Subject-independent folds: subjects sorted by id are dealt round-robin, so
/// fold sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<Vec<u32>>,
}

impl FoldAssignment {
    pub fn validation(&self, fold: usize) -> &[u32] {
        &self.folds[fold]
    }

    pub fn training(&self, fold: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .folds
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != fold)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        ids.sort_unstable();
        ids
    }

    pub fn fold_of(&self, subject: u32) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&subject))
    }
}

pub fn split_folds(subject_ids: &[u32], k: usize) -> Result<FoldAssignment, DataError> {
    if k == 0 || subject_ids.len() < k {
        return Err(DataError::TooFewSubjects {
            needed: k.max(1),
            have: subject_ids.len(),
        });
    }
    let mut ids = subject_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < k {
        return Err(DataError::TooFewSubjects {
            needed: k,
            have: ids.len(),
        });
    }
    let mut folds = vec![Vec::new(); k];
    for (i, id) in ids.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    Ok(FoldAssignment { k, folds })
}
