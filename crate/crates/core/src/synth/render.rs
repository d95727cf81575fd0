use super::{SubjectSpec, IMAGE_SIDE};
use crate::metrics::AffectLabel;

const SUPERSAMPLE: usize = 8;
const HEAD_CENTER: (f64, f64) = (8.0, 8.3);
const HEAD_RADII: (f64, f64) = (6.2, 7.4);
const EYE_OFFSET: f64 = 2.2;
const EYE_RADII: (f64, f64) = (1.5, 1.4);
const MOUTH_OFFSET: f64 = 3.0;
const MOUTH_BEND: f64 = 1.5;
const MOUTH_HALF_THICKNESS: f64 = 0.5;

const BACKGROUND: f64 = 0.0;
const SKIN: f64 = 0.5;
const EYE: f64 = 1.0;
const LIP: f64 = 0.1;

/// Eye-region maxima at or above this read as open eyes.
pub const OPEN_EYE_THRESHOLD: f64 = 0.75;

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelBox {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    fn around(xmin: f64, ymin: f64, xmax: f64, ymax: f64) -> Self {
        let clip = |v: f64| (v.max(0.0) as usize).min(IMAGE_SIDE - 1);
        Self {
            x0: clip(xmin.floor()),
            y0: clip(ymin.floor()),
            x1: clip(xmax.floor()),
            y1: clip(ymax.floor()),
        }
    }
}

struct Layout {
    eye_y: f64,
    eye_x: [f64; 2],
    mouth_y: f64,
    mouth_half: f64,
    head: (f64, f64),
}

fn layout(spec: &SubjectSpec) -> Layout {
    let (cx, cy) = HEAD_CENTER;
    Layout {
        eye_y: cy - EYE_OFFSET * spec.face_scale,
        eye_x: [cx - spec.eye_spacing / 2.0, cx + spec.eye_spacing / 2.0],
        mouth_y: cy + MOUTH_OFFSET * spec.face_scale,
        mouth_half: spec.mouth_width / 2.0,
        head: (HEAD_RADII.0 * spec.face_scale, HEAD_RADII.1 * spec.face_scale),
    }
}

/// Pixels any eye opening can touch, for this subject.
pub fn eye_region(spec: &SubjectSpec) -> PixelBox {
    let l = layout(spec);
    PixelBox::around(
        l.eye_x[0] - EYE_RADII.0,
        l.eye_y - EYE_RADII.1,
        l.eye_x[1] + EYE_RADII.0,
        l.eye_y + EYE_RADII.1,
    )
}

/// Pixels any mouth curvature can touch, for this subject.
pub fn mouth_region(spec: &SubjectSpec) -> PixelBox {
    let l = layout(spec);
    let pad = MOUTH_HALF_THICKNESS;
    PixelBox::around(
        HEAD_CENTER.0 - l.mouth_half - pad,
        l.mouth_y - MOUTH_BEND - pad,
        HEAD_CENTER.0 + l.mouth_half + pad,
        l.mouth_y + MOUTH_BEND + pad,
    )
}

fn intensity(l: &Layout, label: &AffectLabel, x: f64, y: f64) -> f64 {
    let (cx, cy) = HEAD_CENTER;
    let (hx, hy) = ((x - cx) / l.head.0, (y - cy) / l.head.1);
    if hx * hx + hy * hy > 1.0 {
        return BACKGROUND;
    }
    let openness = 0.5 * (1.0 + label.arousal);
    let ry = EYE_RADII.1 * openness;
    if ry > 0.0 {
        for ex in l.eye_x {
            let (dx, dy) = ((x - ex) / EYE_RADII.0, (y - l.eye_y) / ry);
            if dx * dx + dy * dy <= 1.0 {
                return EYE;
            }
        }
    }
    let u = (x - cx) / l.mouth_half;
    if u.abs() <= 1.0 {
        // Positive valence pulls the centre down relative to the corners: a smile.
        let curve = l.mouth_y + label.valence * MOUTH_BEND * (1.0 - u * u);
        if (y - curve).abs() <= MOUTH_HALF_THICKNESS {
            return LIP;
        }
    }
    SKIN
}

/// Anti-aliased `16 × 16` grayscale face, row-major, values in `[0, 1]`.
pub fn render_face(spec: &SubjectSpec, label: &AffectLabel) -> Vec<f64> {
    let l = layout(spec);
    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let mut out = Vec::with_capacity(IMAGE_SIDE * IMAGE_SIDE);
    for py in 0..IMAGE_SIDE {
        for px in 0..IMAGE_SIDE {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = px as f64 + (sx as f64 + 0.5) * step;
                    let y = py as f64 + (sy as f64 + 0.5) * step;
                    acc += intensity(&l, label, x, y);
                }
            }
            out.push(acc / norm);
        }
    }
    out
}
