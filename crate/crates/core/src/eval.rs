//! Clip-level inference by averaging over non-overlapping segments.

use rayon::prelude::*;

use crate::audio::AudioClip;
use crate::config::Averaging;
use crate::error::{Error, Result};
use crate::frontend::Frontend;
use crate::model::ModelParams;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct ClipPrediction {
    /// Class posteriors; non-negative and summing to one.
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Number of full segments, or 1 for a clip shorter than one segment.
pub fn segment_count(len: usize, segment_len: usize) -> usize {
    (len / segment_len).max(1)
}

/// The non-overlapping full segments of `samples`; a clip shorter than one
/// segment yields a single zero-padded segment.
pub fn clip_segments(samples: &[f32], segment_len: usize) -> Vec<Vec<f32>> {
    if samples.len() < segment_len {
        let mut padded = samples.to_vec();
        padded.resize(segment_len, 0.0);
        return vec![padded];
    }
    samples
        .chunks_exact(segment_len)
        .map(|c| c.to_vec())
        .collect()
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut out = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Combines per-segment probability vectors.
pub fn average_probabilities(per_segment: &[Vec<f64>]) -> ClipPrediction {
    let probabilities = mean_rows(per_segment);
    ClipPrediction {
        predicted: argmax(&probabilities),
        probabilities,
    }
}

/// Combines per-segment logits under `mode`.
pub fn combine_logits(per_segment: &[Vec<f64>], mode: Averaging) -> ClipPrediction {
    match mode {
        Averaging::Probabilities => {
            let probs: Vec<Vec<f64>> = per_segment.iter().map(|l| softmax(l)).collect();
            average_probabilities(&probs)
        }
        Averaging::Logits => {
            let probabilities = softmax(&mean_rows(per_segment));
            ClipPrediction {
                predicted: argmax(&probabilities),
                probabilities,
            }
        }
    }
}

/// Classifier logits of every segment of `clip`.
pub fn segment_logits<T: Scalar>(
    params: &ModelParams<T>,
    frontend: &Frontend<T>,
    clip: &AudioClip,
) -> Result<Vec<Vec<f64>>> {
    clip_segments(&clip.samples, frontend.segment_len())
        .iter()
        .map(|s| {
            let h = params.encode(&frontend.log_mel(s)?)?;
            Ok(params.classify(&h)?.data().iter().map(|v| v.as_f64()).collect())
        })
        .collect()
}

pub fn predict_clip<T: Scalar>(
    params: &ModelParams<T>,
    frontend: &Frontend<T>,
    clip: &AudioClip,
    mode: Averaging,
) -> Result<ClipPrediction> {
    if clip.is_empty() {
        return Err(Error::Metric(format!("clip `{}` is empty", clip.id)));
    }
    Ok(combine_logits(&segment_logits(params, frontend, clip)?, mode))
}

/// Predictions for every clip, in input order.
pub fn predict_all<T: Scalar>(
    params: &ModelParams<T>,
    frontend: &Frontend<T>,
    clips: &[&AudioClip],
    mode: Averaging,
) -> Result<Vec<ClipPrediction>> {
    clips
        .par_iter()
        .map(|c| predict_clip(params, frontend, c, mode))
        .collect()
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> Result<f64> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(Error::Metric(format!(
            "accuracy needs equal non-empty lists, got {} predictions and {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Clip-level accuracy of `params` on labeled clips.
pub fn evaluate<T: Scalar>(
    params: &ModelParams<T>,
    frontend: &Frontend<T>,
    labeled: &[(AudioClip, usize)],
    mode: Averaging,
) -> Result<(Vec<ClipPrediction>, f64)> {
    let clips: Vec<&AudioClip> = labeled.iter().map(|(c, _)| c).collect();
    let preds = predict_all(params, frontend, &clips, mode)?;
    let p: Vec<usize> = preds.iter().map(|x| x.predicted).collect();
    let l: Vec<usize> = labeled.iter().map(|x| x.1).collect();
    let acc = accuracy(&p, &l)?;
    Ok((preds, acc))
}
