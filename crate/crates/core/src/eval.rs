//! Accuracy metrics and the attention-overlap localization score.

use serde::{Deserialize, Serialize};
use sfda_tensor::{Real, Tensor};

use crate::adapt::INFERENCE_CHUNK;
use crate::data::{Dataset, SplitMode};
use crate::error::{Result, SfdaError};
use crate::model::{Mode, Model};

/// Open-set rule: a prediction whose top softmax probability falls below
/// this value is reported as "unknown".
pub const UNKNOWN_THRESHOLD: f64 = 0.5;

/// One evaluation, serialized as one JSON line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    #[serde(rename = "L_im")]
    pub l_im: Option<f64>,
    #[serde(rename = "L_sl")]
    pub l_sl: Option<f64>,
    #[serde(rename = "L_kd")]
    pub l_kd: Option<f64>,
    #[serde(rename = "L_tgt")]
    pub l_tgt: Option<f64>,
    #[serde(rename = "target_accuracy")]
    pub accuracy: f64,
    pub pseudo_label_accuracy: Option<f64>,
    pub attention_overlap: f64,
    /// Mean of the present entries of `per_class_accuracy`.
    pub balanced_accuracy: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Open-set only: accuracy on samples of unknown classes.
    pub unknown_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    /// `K` stands for "unknown" in open-set evaluation.
    pub predicted: usize,
    pub correct: bool,
    pub overlap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub record: MetricsRecord,
    pub samples: Vec<SampleOutcome>,
}

/// Index of the largest value, ties to the smallest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Scores predictions against labels. `k` is the classifier width; labels
/// `>= k` (and predictions equal to `k`) mean "unknown".
pub fn score(predicted: &[usize], labels: &[usize], k: usize, open_set: bool) -> Result<MetricsRecord> {
    if labels.is_empty() {
        return Err(SfdaError::Contract("cannot evaluate an empty set".into()));
    }
    if predicted.len() != labels.len() {
        return Err(SfdaError::Dimension(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    let mut hits = vec![0usize; k];
    let mut totals = vec![0usize; k];
    let (mut unk_hits, mut unk_total, mut correct) = (0usize, 0usize, 0usize);
    for (&p, &y) in predicted.iter().zip(labels) {
        let known = y < k;
        if !known && !open_set {
            return Err(SfdaError::Contract(format!(
                "label {} outside [0, {}) in a closed evaluation",
                y, k
            )));
        }
        let ok = if known { p == y } else { p >= k };
        correct += usize::from(ok);
        if known {
            totals[y] += 1;
            hits[y] += usize::from(ok);
        } else {
            unk_total += 1;
            unk_hits += usize::from(ok);
        }
    }
    let per_class: Vec<Option<f64>> = hits
        .iter()
        .zip(&totals)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let balanced = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MetricsRecord {
        accuracy: correct as f64 / labels.len() as f64,
        balanced_accuracy: balanced,
        per_class_accuracy: per_class,
        unknown_accuracy: (open_set && unk_total > 0).then(|| unk_hits as f64 / unk_total as f64),
        ..MetricsRecord::default()
    })
}

/// Per-token saliency from attention maps: the attention each token receives,
/// averaged over layers, heads and query rows. Sums to 1 per image.
pub fn attention_saliency<T: Real>(maps: &[Tensor<T>], image: usize) -> Result<Vec<f64>> {
    let first = maps
        .first()
        .ok_or_else(|| SfdaError::Contract("no attention maps".into()))?;
    let (heads, u) = match *first.shape() {
        [_, m, u, u2] if u == u2 => (m, u),
        ref s => {
            return Err(SfdaError::Dimension(format!(
                "attention maps must be B×m×u×u, got {:?}",
                s
            )))
        }
    };
    let mut sal = vec![0.0; u];
    for map in maps {
        if map.shape()[1..] != [heads, u, u] || image >= map.shape()[0] {
            return Err(SfdaError::Dimension(format!(
                "inconsistent attention map shape {:?}",
                map.shape()
            )));
        }
        let base = image * heads * u * u;
        let data = &map.data()[base..base + heads * u * u];
        for row in data.chunks_exact(u) {
            for (s, &a) in sal.iter_mut().zip(row) {
                *s += a.as_f64();
            }
        }
    }
    let rows = (maps.len() * heads * u) as f64;
    sal.iter_mut().for_each(|s| *s /= rows);
    Ok(sal)
}

/// Per-cell saliency of a CNN feature map (`B×h×w×d`): the L2 norm of each
/// cell's activation vector, normalized to sum 1 (uniform if all are zero).
pub fn feature_map_saliency<T: Real>(feature_map: &Tensor<T>, image: usize) -> Result<Vec<f64>> {
    let (h, w, d) = match *feature_map.shape() {
        [b, h, w, d] if image < b => (h, w, d),
        ref s => {
            return Err(SfdaError::Dimension(format!(
                "feature map must be B×h×w×d, got {:?}",
                s
            )))
        }
    };
    let base = image * h * w * d;
    let cells: Vec<f64> = feature_map.data()[base..base + h * w * d]
        .chunks_exact(d)
        .map(|c| c.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt())
        .collect();
    let total: f64 = cells.iter().sum();
    Ok(if total > 0.0 {
        cells.iter().map(|c| c / total).collect()
    } else {
        vec![1.0 / cells.len() as f64; cells.len()]
    })
}

/// Fraction of a token-grid saliency map (row-major `√u×√u`), upsampled to
/// the `side×side` mask by nearest neighbour, that lies inside the mask.
pub fn overlap_with_mask(saliency: &[f64], mask: &[u8], side: usize) -> Result<f64> {
    let u = saliency.len();
    let g = (u as f64).sqrt().round() as usize;
    if g == 0 || g * g != u || side % g != 0 || mask.len() != side * side {
        return Err(SfdaError::Dimension(format!(
            "{} tokens cannot be laid over a {}×{} mask",
            u, side, side
        )));
    }
    let cell = side / g;
    let total: f64 = saliency.iter().sum();
    if !(total > 0.0) {
        return Err(SfdaError::Contract("saliency has no mass".into()));
    }
    let mut inside = 0.0;
    for (t, &s) in saliency.iter().enumerate() {
        let (ty, tx) = (t / g, t % g);
        let mut hits = 0usize;
        for y in ty * cell..(ty + 1) * cell {
            hits += mask[y * side + tx * cell..y * side + (tx + 1) * cell]
                .iter()
                .filter(|&&m| m != 0)
                .count();
        }
        inside += s * hits as f64 / (cell * cell) as f64;
    }
    Ok(inside / total)
}

/// Mean overlap over a batch of attention maps and masks.
pub fn attention_overlap<T: Real>(maps: &[Tensor<T>], masks: &[&[u8]], side: usize) -> Result<f64> {
    if masks.is_empty() {
        return Err(SfdaError::Contract("no masks".into()));
    }
    let mut sum = 0.0;
    for (i, m) in masks.iter().enumerate() {
        sum += overlap_with_mask(&attention_saliency(maps, i)?, m, side)?;
    }
    Ok(sum / masks.len() as f64)
}

/// Accuracy, per-class accuracy and localization of `model` on `data`.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(SfdaError::Contract("cannot evaluate an empty set".into()));
    }
    let k = model.config().head.num_classes;
    if data.num_classes != k {
        return Err(SfdaError::Manifest(format!(
            "model predicts {} classes, data has {}",
            k, data.num_classes
        )));
    }
    let open_set = data.split.mode == SplitMode::Open;
    let all: Vec<usize> = (0..data.len()).collect();
    let mut predicted = Vec::with_capacity(data.len());
    let mut overlaps = Vec::with_capacity(data.len());
    for idx in all.chunks(INFERENCE_CHUNK) {
        let out = model.extract_features(&data.batch_images::<T>(idx), Mode::Eval)?;
        for (r, &i) in idx.iter().enumerate() {
            let row: Vec<f64> = out.logits.row(r).iter().map(|v| v.as_f64()).collect();
            let mut p = argmax(&row);
            if open_set {
                let max = row[p];
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                if 1.0 / z < UNKNOWN_THRESHOLD {
                    p = k;
                }
            }
            predicted.push(p);
            let sal = if out.attention.is_empty() {
                feature_map_saliency(&out.feature_map, r)?
            } else {
                attention_saliency(&out.attention, r)?
            };
            overlaps.push(overlap_with_mask(&sal, &data.samples[i].mask, data.image_side)?);
        }
    }
    let labels = data.labels();
    let mut record = score(&predicted, &labels, k, open_set)?;
    record.attention_overlap = overlaps.iter().sum::<f64>() / overlaps.len() as f64;
    let samples = predicted
        .iter()
        .zip(&labels)
        .zip(&overlaps)
        .map(|((&p, &y), &o)| SampleOutcome {
            predicted: p,
            correct: if y < k { p == y } else { p >= k },
            overlap: o,
        })
        .collect();
    Ok(Evaluation { record, samples })
}

/// Accuracy of samples above versus at-or-below the median overlap.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocusSplit {
    pub median_overlap: f64,
    pub focused_accuracy: f64,
    pub non_focused_accuracy: f64,
    pub focused_count: usize,
    pub non_focused_count: usize,
}

pub fn focus_split(samples: &[SampleOutcome]) -> Result<FocusSplit> {
    if samples.is_empty() {
        return Err(SfdaError::Contract("no samples to split".into()));
    }
    let mut o: Vec<f64> = samples.iter().map(|s| s.overlap).collect();
    o.sort_by(f64::total_cmp);
    let n = o.len();
    let median = if n % 2 == 1 {
        o[n / 2]
    } else {
        (o[n / 2 - 1] + o[n / 2]) / 2.0
    };
    let acc = |focused: bool| {
        let group: Vec<&SampleOutcome> = samples.iter().filter(|s| (s.overlap > median) == focused).collect();
        let hits = group.iter().filter(|s| s.correct).count();
        (
            if group.is_empty() {
                0.0
            } else {
                hits as f64 / group.len() as f64
            },
            group.len(),
        )
    };
    let ((fa, fc), (na, nc)) = (acc(true), acc(false));
    Ok(FocusSplit {
        median_overlap: median,
        focused_accuracy: fa,
        non_focused_accuracy: na,
        focused_count: fc,
        non_focused_count: nc,
    })
}
