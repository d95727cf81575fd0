use std::path::Path;

use super::{atomic_write, IoError};
use crate::model::{AnclafModel, Variant};
use crate::scalar::Scalar;
use crate::synth::SubjectData;
use crate::tensor::Graph;
use crate::train::{evaluate_frames, extract_features, TrainError};

/// Per-frame estimate of one subject's sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub subject_id: u32,
    pub frame_index: u32,
    pub v_true: f64,
    pub a_true: f64,
    pub v_pred: f64,
    pub a_pred: f64,
    pub quadrant_true: usize,
    pub quadrant_pred: usize,
    /// Alignment weights over the previous states, oldest first. Empty for
    /// models without attention and for the first frame.
    pub attention: Vec<f64>,
}

pub fn trace_header(attention_columns: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "subject_id",
        "frame_index",
        "v_true",
        "a_true",
        "v_pred",
        "a_pred",
        "quadrant_true",
        "quadrant_pred",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=attention_columns).map(|j| format!("att_w_{j}")));
    h
}

/// Runs a model over a subject's whole sequence. Sequence models carry their
/// state across all frames and attend over at most `n` previous states.
pub fn trace_subject<T: Scalar>(model: &AnclafModel<T>, subject: &SubjectData) -> Result<Vec<TraceRow>, TrainError> {
    let row = |i: usize, v: f64, a: f64, q: usize, attention: Vec<f64>| {
        let f = &subject.frames[i];
        TraceRow {
            subject_id: subject.subject_id,
            frame_index: f.frame_index,
            v_true: f.label.valence,
            a_true: f.label.arousal,
            v_pred: v,
            a_pred: a,
            quadrant_true: f.quadrant,
            quadrant_pred: q,
            attention,
        }
    };
    if model.arch.variant == Variant::Frame {
        let frames: Vec<_> = subject.frames.iter().collect();
        let p = evaluate_frames(model, &frames)?;
        return Ok((0..frames.len())
            .map(|i| row(i, p.preds[i].valence, p.preds[i].arousal, p.quadrant_pred[i], Vec::new()))
            .collect());
    }
    let cache = extract_features(model, &[subject])?;
    let mut g = Graph::inference();
    let inputs = (0..subject.frames.len())
        .map(|t| {
            let data = cache.row(0, t).iter().map(|&v| T::of(v)).collect();
            g.constant_from(&[1, cache.zq_dim], data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let out = model.run_sequence(&mut g, &inputs)?;
    Ok((0..subject.frames.len())
        .map(|t| {
            let p = g.value(out.predictions[t]);
            let attention = out.attention[t]
                .map(|w| g.value(w).iter().map(|v| v.as_f64()).collect())
                .unwrap_or_default();
            row(t, p[0].as_f64(), p[1].as_f64(), cache.quadrant_pred(0, t), attention)
        })
        .collect())
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with `attention_columns` weight columns; floats carry 17 significant digits.
pub fn write_trace(path: &Path, rows: &[TraceRow], attention_columns: usize) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(trace_header(attention_columns))?;
    for r in rows {
        if r.attention.len() > attention_columns {
            return Err(IoError::format(
                path,
                format!("row has {} weights for {attention_columns} columns", r.attention.len()),
            ));
        }
        let mut rec = vec![
            r.subject_id.to_string(),
            r.frame_index.to_string(),
            float(r.v_true),
            float(r.a_true),
            float(r.v_pred),
            float(r.a_pred),
            r.quadrant_true.to_string(),
            r.quadrant_pred.to_string(),
        ];
        rec.extend(r.attention.iter().map(|&v| float(v)));
        rec.resize(8 + attention_columns, String::new());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| IoError::format(path, e.to_string()))?;
    atomic_write(path, &bytes)
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>, IoError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let bad = |what: &str| IoError::format(path, format!("bad {what}"));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| bad("column count"));
        let num = |i: usize| -> Result<f64, IoError> { field(i)?.parse().map_err(|_| bad("float")) };
        let int = |i: usize| -> Result<u64, IoError> { field(i)?.parse().map_err(|_| bad("integer")) };
        let mut attention = Vec::new();
        for i in 8..rec.len() {
            if !field(i)?.is_empty() {
                attention.push(num(i)?);
            }
        }
        rows.push(TraceRow {
            subject_id: int(0)? as u32,
            frame_index: int(1)? as u32,
            v_true: num(2)?,
            a_true: num(3)?,
            v_pred: num(4)?,
            a_pred: num(5)?,
            quadrant_true: int(6)? as usize,
            quadrant_pred: int(7)? as usize,
            attention,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_lossless() {
        let rows = vec![
            TraceRow {
                subject_id: 3,
                frame_index: 0,
                v_true: 0.1,
                a_true: -1.0 / 3.0,
                v_pred: std::f64::consts::PI / 10.0,
                a_pred: 1e-300,
                quadrant_true: 3,
                quadrant_pred: 0,
                attention: vec![],
            },
            TraceRow {
                subject_id: 3,
                frame_index: 1,
                v_true: 0.2,
                a_true: 0.7,
                v_pred: -0.123456789012345678,
                a_pred: 0.5,
                quadrant_true: 0,
                quadrant_pred: 1,
                attention: vec![0.3, 0.7],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trace(&path, &rows, 2).unwrap();
        assert_eq!(read_trace(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(
            "subject_id,frame_index,v_true,a_true,v_pred,a_pred,quadrant_true,quadrant_pred,att_w_1,att_w_2\n"
        ));
    }
}
