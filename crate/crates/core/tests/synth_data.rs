use anclaf::metrics::{bin_of, ccc, AffectLabel};
use anclaf::synth::{
    distort, eye_region, gen_dataset, mouth_region, quantize, render_face, split_folds, Dataset, Distortion, FrameRecord,
    SubjectSpec, OPEN_EYE_THRESHOLD,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SIDE: usize = 16;

fn specs() -> Vec<SubjectSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    (0..20).map(|id| SubjectSpec::sample(id, &mut rng)).collect()
}

fn reference() -> Dataset {
    gen_dataset(40, 300, 7).unwrap()
}

#[test]
fn valence_changes_only_mouth_pixels() {
    for spec in specs() {
        for arousal in [-1.0, 0.0, 0.6] {
            let smile = render_face(&spec, &AffectLabel::new(1.0, arousal));
            let frown = render_face(&spec, &AffectLabel::new(-1.0, arousal));
            let mouth = mouth_region(&spec);
            let mut changed = 0;
            for (i, (a, b)) in smile.iter().zip(&frown).enumerate() {
                if a != b {
                    changed += 1;
                    assert!(mouth.contains(i % SIDE, i / SIDE), "pixel {i} outside {mouth:?}");
                }
            }
            assert!(changed > 0);
        }
    }
}

fn eye_max(spec: &SubjectSpec, image: &[f64]) -> f64 {
    let r = eye_region(spec);
    (r.y0..=r.y1)
        .flat_map(|y| (r.x0..=r.x1).map(move |x| image[y * SIDE + x]))
        .fold(f64::MIN, f64::max)
}

#[test]
fn closed_eyes_stay_below_the_open_threshold() {
    for spec in specs() {
        for valence in [-1.0, 0.0, 1.0] {
            let closed = render_face(&spec, &AffectLabel::new(valence, -1.0));
            let open = render_face(&spec, &AffectLabel::new(valence, 1.0));
            assert!(eye_max(&spec, &closed) < OPEN_EYE_THRESHOLD);
            assert!(eye_max(&spec, &open) > OPEN_EYE_THRESHOLD);
        }
    }
}

#[test]
fn rendering_is_a_pure_function() {
    let spec = specs().swap_remove(3);
    let l = AffectLabel::new(0.31, -0.47);
    assert_eq!(render_face(&spec, &l), render_face(&spec, &l));
}

#[test]
fn label_grid_renders_distinct_images() {
    let grid: Vec<f64> = (0..10).map(|i| -1.0 + 2.0 * i as f64 / 9.0).collect();
    for spec in specs().iter().take(5) {
        let mut images: Vec<Vec<u8>> = Vec::new();
        for &v in &grid {
            for &a in &grid {
                let img = render_face(spec, &AffectLabel::new(v, a));
                images.push(img.iter().map(|&p| (quantize(p) * 255.0) as u8).collect());
            }
        }
        let n = images.len();
        images.sort();
        images.dedup();
        assert_eq!(images.len(), n, "quantized images collide for {spec:?}");
    }
}

#[test]
fn reference_histogram_covers_the_central_bins() {
    let d = reference();
    assert_eq!(d.frame_count(), 12_000);
    for dim in 0..2 {
        let mut hist = [0usize; 10];
        for f in d.frames() {
            hist[bin_of(f.label.get(dim))] += 1;
        }
        assert!(hist[1..9].iter().all(|&c| c > 0), "dimension {dim}: {hist:?}");
    }
}

#[test]
fn distortion_keeps_labels() {
    let d = gen_dataset(5, 20, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for f in d.frames() {
        let mut copy = f.clone();
        copy.image = distort(&f.image, SIDE, &mut rng, &Distortion::ALL).unwrap();
        assert_eq!((copy.label, copy.quadrant), (f.label, f.quadrant));
        assert!(copy.image.iter().all(|p| (0.0..=1.0).contains(p)));
    }
}

/// Ridge fit on pixels of training subjects, scored on held-out subjects.
fn linear_ccc(d: &Dataset, shuffle: bool) -> f64 {
    let folds = split_folds(&d.subject_ids(), 5).unwrap();
    let train: Vec<_> = folds.training(0).into_iter().flat_map(|s| &d.subject(s).unwrap().frames).collect();
    let val: Vec<_> = folds.validation(0).iter().flat_map(|&s| &d.subject(s).unwrap().frames).collect();
    let design = |frames: &[&FrameRecord]| {
        DMatrix::from_fn(frames.len(), SIDE * SIDE + 1, |r, c| {
            if c == SIDE * SIDE {
                1.0
            } else {
                frames[r].image[c]
            }
        })
    };
    let x = design(&train);
    let gram = x.transpose() * &x + DMatrix::identity(x.ncols(), x.ncols()) * 1e-2;
    let chol = gram.cholesky().unwrap();
    let xv = design(&val);
    let mut labels: Vec<AffectLabel> = train.iter().map(|f| f.label).collect();
    if shuffle {
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(11));
    }
    let mut total = 0.0;
    for dim in 0..2 {
        let y = DVector::from_iterator(labels.len(), labels.iter().map(|l| l.get(dim)));
        let w = chol.solve(&(x.transpose() * y));
        let pred: Vec<f64> = (&xv * w).iter().copied().collect();
        let truth: Vec<f64> = val.iter().map(|f| f.label.get(dim)).collect();
        total += ccc(&pred, &truth).unwrap();
    }
    total / 2.0
}

#[test]
fn pixels_linearly_predict_labels_without_leakage() {
    let d = reference();
    let real = linear_ccc(&d, false);
    let shuffled = linear_ccc(&d, true);
    assert!(real >= 0.4, "linear CCC {real}");
    assert!(shuffled <= 0.1, "shuffled CCC {shuffled}");
}
