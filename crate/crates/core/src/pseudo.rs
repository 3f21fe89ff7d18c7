//! Pseudo-labels from teacher features: probability-weighted centroids,
//! nearest-centroid assignment under cosine distance, one refinement round and
//! temperature-scaled soft labels.

use std::io::Write;
use std::path::Path;

use sfda_tensor::Tensor;

use crate::error::{Result, SfdaError};

/// Class weight below which a centroid is considered empty.
pub const EMPTY_WEIGHT: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Centroids {
    /// `K×d`.
    pub mu: Tensor<f64>,
    /// Samples assigned to each class; only meaningful for round 1.
    pub counts: Vec<usize>,
    /// Classes without a usable centroid. They are never assigned.
    pub empty: Vec<bool>,
    pub round: u8,
}

impl Centroids {
    pub fn num_classes(&self) -> usize {
        self.mu.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabels {
    pub hard: Vec<usize>,
    /// `N×K`, rows sum to 1.
    pub soft: Tensor<f64>,
    pub tau: f64,
}

fn dims(x: &Tensor<f64>, what: &str) -> Result<(usize, usize)> {
    match *x.shape() {
        [n, d] => Ok((n, d)),
        ref s => Err(SfdaError::Dimension(format!("{what} must be a matrix, got {:?}", s))),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `μ_k = Σ_i p_ik f_i / Σ_i p_ik`.
pub fn initial_centroids(features: &Tensor<f64>, probs: &Tensor<f64>) -> Result<Centroids> {
    let (n, d) = dims(features, "features")?;
    let (np, k) = dims(probs, "probabilities")?;
    if n == 0 || np != n {
        return Err(SfdaError::Dimension(format!(
            "{} feature rows, {} probability rows",
            n, np
        )));
    }
    let mut mu = vec![0.0; k * d];
    let mut weight = vec![0.0; k];
    for i in 0..n {
        let f = features.row(i);
        for (c, &p) in probs.row(i).iter().enumerate() {
            weight[c] += p;
            for (m, &x) in mu[c * d..(c + 1) * d].iter_mut().zip(f) {
                *m += p * x;
            }
        }
    }
    let mut empty = vec![false; k];
    for c in 0..k {
        if weight[c] < EMPTY_WEIGHT {
            empty[c] = true;
            mu[c * d..(c + 1) * d].iter_mut().for_each(|m| *m = 0.0);
        } else {
            mu[c * d..(c + 1) * d].iter_mut().for_each(|m| *m /= weight[c]);
        }
    }
    Ok(Centroids {
        mu: Tensor::new(vec![k, d], mu)?,
        counts: vec![0; k],
        empty,
        round: 0,
    })
}

/// Cosine similarity of every row against every usable centroid (`None` for empty ones).
fn similarities(features: &Tensor<f64>, c: &Centroids) -> Result<Vec<Vec<Option<f64>>>> {
    let (n, d) = dims(features, "features")?;
    if c.mu.shape()[1] != d {
        return Err(SfdaError::Dimension(format!(
            "features have width {}, centroids {}",
            d,
            c.mu.shape()[1]
        )));
    }
    if c.empty.iter().all(|&e| e) {
        return Err(SfdaError::Contract("every centroid is empty".into()));
    }
    let cnorm: Vec<f64> = (0..c.num_classes()).map(|k| norm(c.mu.row(k))).collect();
    (0..n)
        .map(|i| {
            let f = features.row(i);
            let fnorm = norm(f);
            if fnorm == 0.0 || !fnorm.is_finite() {
                return Err(SfdaError::Contract(format!(
                    "feature row {} has zero or non-finite norm",
                    i
                )));
            }
            Ok((0..c.num_classes())
                .map(|k| {
                    if c.empty[k] || cnorm[k] == 0.0 {
                        return None;
                    }
                    let dot: f64 = f.iter().zip(c.mu.row(k)).map(|(a, b)| a * b).sum();
                    Some(dot / (fnorm * cnorm[k]))
                })
                .collect())
        })
        .collect()
}

/// `argmin_k 1 − cos(f_i, μ_k)`, ties to the smallest `k`.
pub fn assign_nearest(features: &Tensor<f64>, centroids: &Centroids) -> Result<Vec<usize>> {
    Ok(similarities(features, centroids)?
        .into_iter()
        .map(|row| {
            let mut best: Option<(usize, f64)> = None;
            for (k, s) in row.into_iter().enumerate() {
                if let Some(s) = s {
                    let dist = 1.0 - s;
                    if best.is_none_or(|(_, b)| dist < b) {
                        best = Some((k, dist));
                    }
                }
            }
            best.expect("at least one centroid is usable").0
        })
        .collect())
}

/// One k-means step: class means of the current assignment, then reassignment.
/// A class with no members keeps its previous centroid.
pub fn refine_once(features: &Tensor<f64>, labels: &[usize], previous: &Centroids) -> Result<(Centroids, Vec<usize>)> {
    let (n, d) = dims(features, "features")?;
    let k = previous.num_classes();
    if labels.len() != n {
        return Err(SfdaError::Dimension(format!(
            "{} labels for {} features",
            labels.len(),
            n
        )));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= k) {
        return Err(SfdaError::Contract(format!("label {} outside [0, {})", y, k)));
    }
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        for (s, &x) in sums[y * d..(y + 1) * d].iter_mut().zip(features.row(i)) {
            *s += x;
        }
    }
    let mut mu = previous.mu.data().to_vec();
    let mut empty = previous.empty.clone();
    for c in 0..k {
        if counts[c] > 0 {
            for (m, s) in mu[c * d..(c + 1) * d].iter_mut().zip(&sums[c * d..(c + 1) * d]) {
                *m = s / counts[c] as f64;
            }
            empty[c] = false;
        }
    }
    let refined = Centroids {
        mu: Tensor::new(vec![k, d], mu)?,
        counts,
        empty,
        round: 1,
    };
    let relabeled = assign_nearest(features, &refined)?;
    Ok((refined, relabeled))
}

/// `softmax_k(cos(f_i, μ_k) / τ)`; empty classes get probability 0.
pub fn soft_labels(features: &Tensor<f64>, centroids: &Centroids, tau: f64) -> Result<Tensor<f64>> {
    if !(tau > 0.0) {
        return Err(SfdaError::Config(format!("temperature must be positive, got {}", tau)));
    }
    let k = centroids.num_classes();
    let sims = similarities(features, centroids)?;
    let mut out = Vec::with_capacity(sims.len() * k);
    for row in &sims {
        let max = row.iter().flatten().fold(f64::NEG_INFINITY, |a, &s| a.max(s / tau));
        let e: Vec<f64> = row.iter().map(|s| s.map_or(0.0, |s| (s / tau - max).exp())).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Ok(Tensor::new(vec![sims.len(), k], out)?)
}

/// Full labeling pass: weighted centroids, assignment, one refinement, soft labels.
pub fn pseudo_labels(features: &Tensor<f64>, probs: &Tensor<f64>, tau: f64) -> Result<(PseudoLabels, Centroids)> {
    let c0 = initial_centroids(features, probs)?;
    let y0 = assign_nearest(features, &c0)?;
    let (c1, hard) = refine_once(features, &y0, &c0)?;
    let soft = soft_labels(features, &c1, tau)?;
    Ok((PseudoLabels { hard, soft, tau }, c1))
}

/// Writes `sample_id,hard,soft_0..soft_{K-1}` rows.
pub fn write_labels_csv(path: &Path, labels: &PseudoLabels) -> Result<()> {
    let k = labels.soft.shape()[1];
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header: Vec<String> = ["sample_id".to_string(), "hard".to_string()]
        .into_iter()
        .chain((0..k).map(|c| format!("soft_{c}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for (i, &h) in labels.hard.iter().enumerate() {
        let soft: Vec<String> = labels.soft.row(i).iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{},{},{}", i, h, soft.join(","))?;
    }
    w.flush()?;
    Ok(())
}
