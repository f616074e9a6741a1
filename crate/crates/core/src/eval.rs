//! Pair-based verification evaluation: 10-fold cross-validated threshold
//! selection, ROC sweep, and the JSON report.

use crate::config::PairScorer;
use crate::data;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

pub const DEFAULT_FOLDS: usize = 10;

/// One evaluation pair: enroll on the first image, probe with the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairRecord {
    pub enroll: String,
    pub probe: String,
    pub label: bool,
    pub fold: usize,
}

/// A parsed pair list. Text format: one pair per line,
/// `enroll_path,probe_path,label[,fold]`; blank lines and `#` comments are
/// skipped; a missing fold is assigned round-robin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairList {
    pub records: Vec<PairRecord>,
    pub folds: usize,
}

impl PairList {
    pub fn parse(text: &str) -> Result<PairList> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            if parts.len() < 3 || parts.len() > 4 {
                return Err(Error::Data(format!(
                    "pair list line {}: expected enroll,probe,label[,fold], got '{line}'",
                    lineno + 1
                )));
            }
            let label = match parts[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Data(format!(
                        "pair list line {}: label must be 0 or 1, got '{other}'",
                        lineno + 1
                    )))
                }
            };
            let fold = if parts.len() == 4 {
                parts[3].parse().map_err(|_| {
                    Error::Data(format!(
                        "pair list line {}: bad fold '{}'",
                        lineno + 1,
                        parts[3]
                    ))
                })?
            } else {
                records.len() % DEFAULT_FOLDS
            };
            records.push(PairRecord {
                enroll: parts[0].to_string(),
                probe: parts[1].to_string(),
                label,
                fold,
            });
        }
        if records.is_empty() {
            return Err(Error::Data("pair list is empty".into()));
        }
        let folds = records.iter().map(|r| r.fold).max().unwrap() + 1;
        Ok(PairList { records, folds: folds.max(2) })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<PairList> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        PairList::parse(&text)
    }
}

/// One ROC sweep point.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub tar: f64,
    pub threshold: f64,
}

/// The full evaluation result, serialized as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub fold_threshold: Vec<f64>,
    pub roc: Vec<RocPoint>,
    pub auc: f64,
    /// (target FAR, achieved TAR) at FAR 1e-2 and 1e-3.
    pub tar_at_far: Vec<(f64, f64)>,
    pub pairs: usize,
    pub symmetric: bool,
}

fn accuracy_at(scores: &[f64], labels: &[bool], idx: &[usize], tau: f64) -> f64 {
    if idx.is_empty() {
        return 0.0;
    }
    let correct = idx
        .iter()
        .filter(|&&i| (scores[i] >= tau) == labels[i])
        .count();
    correct as f64 / idx.len() as f64
}

/// Best accept threshold over the index set: scanned over unique scores plus
/// one sentinel above the maximum (the reject-everything option). Ties go to
/// the lowest threshold, so selection is deterministic.
fn best_threshold(scores: &[f64], labels: &[bool], idx: &[usize]) -> (f64, f64) {
    let mut candidates: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).unwrap());
    candidates.dedup();
    let top = candidates.last().copied().unwrap_or(0.0) + 1.0;
    candidates.push(top);
    let mut best = (candidates[0], -1.0);
    for &tau in &candidates {
        let acc = accuracy_at(scores, labels, idx, tau);
        if acc > best.1 {
            best = (tau, acc);
        }
    }
    (best.0, best.1)
}

/// ROC sweep over unique score thresholds (descending), with the trapezoidal
/// AUC. Needs at least one positive and one negative label.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<(Vec<RocPoint>, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "roc_curve got {} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Contract(
            "roc_curve needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![RocPoint { far: 0.0, tar: 0.0, threshold: f64::INFINITY }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let tau = scores[order[i]];
        // consume the whole tie group so each threshold yields one point
        while i < order.len() && scores[order[i]] == tau {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            far: fp as f64 / neg as f64,
            tar: tp as f64 / pos as f64,
            threshold: tau,
        });
    }
    let auc = points
        .windows(2)
        .map(|w| 0.5 * (w[1].far - w[0].far) * (w[1].tar + w[0].tar))
        .sum();
    Ok((points, auc))
}

/// Highest TAR among ROC points with FAR at or below the target. A step
/// readout, not an interpolation, so it never overstates the operating point.
pub fn tar_at_far(points: &[RocPoint], target_far: f64) -> f64 {
    points
        .iter()
        .filter(|p| p.far <= target_far)
        .map(|p| p.tar)
        .fold(0.0, f64::max)
}

/// Core protocol on precomputed scores: per fold, pick the threshold that
/// maximizes accuracy on the other folds, then measure on the held-out fold.
pub fn evaluate_scores(
    scores: &[f64],
    labels: &[bool],
    folds: &[usize],
    n_folds: usize,
    symmetric: bool,
) -> Result<EvalReport> {
    if scores.len() != labels.len() || scores.len() != folds.len() {
        return Err(Error::Contract(
            "scores, labels, and folds must have equal length".into(),
        ));
    }
    if scores.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    if n_folds < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
    }
    let mut fold_accuracy = Vec::with_capacity(n_folds);
    let mut fold_threshold = Vec::with_capacity(n_folds);
    for f in 0..n_folds {
        let held: Vec<usize> = (0..scores.len()).filter(|&i| folds[i] == f).collect();
        let rest: Vec<usize> = (0..scores.len()).filter(|&i| folds[i] != f).collect();
        if held.is_empty() || rest.is_empty() {
            return Err(Error::Data(format!(
                "fold {f} leaves an empty selection or training side"
            )));
        }
        let (tau, _) = best_threshold(scores, labels, &rest);
        fold_threshold.push(tau);
        fold_accuracy.push(accuracy_at(scores, labels, &held, tau));
    }
    let mean = fold_accuracy.iter().sum::<f64>() / n_folds as f64;
    let var = fold_accuracy.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n_folds as f64;
    let (roc, auc) = roc_curve(scores, labels)?;
    let tars = [1e-2, 1e-3]
        .iter()
        .map(|&far| (far, tar_at_far(&roc, far)))
        .collect();
    Ok(EvalReport {
        fold_accuracy,
        mean_accuracy: mean,
        std_accuracy: var.sqrt(),
        fold_threshold,
        roc,
        auc,
        tar_at_far: tars,
        pairs: scores.len(),
        symmetric,
    })
}

fn score_one(scorer: &dyn PairScorer, enroll: &Tensor, probe: &Tensor, symmetric: bool) -> Result<f64> {
    let forward = scorer.score_pair(enroll, probe)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = scorer.score_pair(probe, enroll)?;
    Ok(0.5 * (forward + backward))
}

/// Evaluate in-memory (enroll, probe, label) tensor pairs with round-robin
/// fold assignment.
pub fn evaluate_tensor_pairs(
    scorer: &dyn PairScorer,
    pairs: &[(Tensor, Tensor, bool)],
    symmetric: bool,
) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no pairs to evaluate".into()));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    let mut labels = Vec::with_capacity(pairs.len());
    let mut folds = Vec::with_capacity(pairs.len());
    for (i, (enroll, probe, label)) in pairs.iter().enumerate() {
        scores.push(score_one(scorer, enroll, probe, symmetric)?);
        labels.push(*label);
        folds.push(i % DEFAULT_FOLDS);
    }
    evaluate_scores(&scores, &labels, &folds, DEFAULT_FOLDS, symmetric)
}

/// Evaluate a pair list of image files. Images load once each (paths repeat
/// across pairs) at the given resolution.
pub fn evaluate_pairs(
    scorer: &dyn PairScorer,
    pairs: &PairList,
    input_size: usize,
    symmetric: bool,
) -> Result<EvalReport> {
    let mut cache: HashMap<&str, Tensor> = HashMap::new();
    let mut scores = Vec::with_capacity(pairs.records.len());
    let mut labels = Vec::with_capacity(pairs.records.len());
    let mut folds = Vec::with_capacity(pairs.records.len());
    for r in &pairs.records {
        for p in [r.enroll.as_str(), r.probe.as_str()] {
            if !cache.contains_key(p) {
                let pixels = data::load_image(Path::new(p), input_size)
                    .map_err(|e| Error::Data(format!("pair image '{p}': {e}")))?;
                cache.insert(p, Tensor::from_vec(pixels, &[3, input_size, input_size]));
            }
        }
        let enroll = cache.get(r.enroll.as_str()).unwrap().clone();
        let probe = cache.get(r.probe.as_str()).unwrap().clone();
        scores.push(score_one(scorer, &enroll, &probe, symmetric)?);
        labels.push(r.label);
        folds.push(r.fold);
    }
    evaluate_scores(&scores, &labels, &folds, pairs.folds, symmetric)
}
