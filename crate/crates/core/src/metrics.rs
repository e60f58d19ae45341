//! Ranking and classification metrics, domain-transfer matrices and the
//! action-frequency analysis.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0}: empty input")]
    Empty(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

type Result<T> = std::result::Result<T, MetricsError>;

/// Indices sorted by descending score; equal scores keep ascending index order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Mean over positives of the precision at each positive's rank.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(MetricsError::Undefined("average precision with no positive labels".into()));
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(total / positives as f64)
}

/// Per-class AP (None where a class has no positives) and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub per_class: Vec<Option<f64>>,
    pub map: f64,
    pub skipped: Vec<usize>,
}

/// Macro mean of AP over classes with at least one positive. `scores` and
/// `labels` are row-major `N x K`.
pub fn mean_average_precision(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MapResult> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
    }
    let k = scores.first().ok_or(MetricsError::Empty("mean_average_precision"))?.len();
    if let Some(bad) = scores.iter().find(|r| r.len() != k) {
        return Err(MetricsError::LengthMismatch(bad.len(), k));
    }
    if let Some(bad) = labels.iter().find(|r| r.len() != k) {
        return Err(MetricsError::LengthMismatch(bad.len(), k));
    }
    let mut per_class = Vec::with_capacity(k);
    let mut skipped = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match average_precision(&s, &l) {
            Ok(ap) => per_class.push(Some(ap)),
            Err(MetricsError::Undefined(_)) => {
                per_class.push(None);
                skipped.push(c);
            }
            Err(e) => return Err(e),
        }
    }
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(MetricsError::Undefined("no class has a positive label".into()));
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    Ok(MapResult { per_class, map, skipped })
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::Empty("accuracy"));
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::Undefined("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricsError::Undefined("pearson with zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Cell `(i, j)` is `runner(i, j)`: trained on domain `i`, tested on `j`.
pub fn species_matrix<F>(domains: usize, mut runner: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(usize, usize) -> Result<f64>,
{
    (0..domains).map(|i| (0..domains).map(|j| runner(i, j)).collect()).collect()
}

/// Constant predictor of the most frequent training class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreqBaseline {
    pub class: usize,
}

impl FreqBaseline {
    pub fn accuracy(&self, truth: &[usize]) -> Result<f64> {
        accuracy(&vec![self.class; truth.len()], truth)
    }
}

pub fn freq_baseline(train_labels: &[usize], classes: usize) -> Result<FreqBaseline> {
    if train_labels.is_empty() {
        return Err(MetricsError::Empty("freq_baseline"));
    }
    let mut counts = vec![0.0; classes];
    for &l in train_labels {
        if l >= classes {
            return Err(MetricsError::LengthMismatch(l, classes));
        }
        counts[l] += 1.0;
    }
    Ok(FreqBaseline { class: argmax(&counts) })
}

/// Elementwise `model - baseline`.
pub fn gains(model: &[Vec<f64>], baseline: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if model.len() != baseline.len() {
        return Err(MetricsError::LengthMismatch(model.len(), baseline.len()));
    }
    model
        .iter()
        .zip(baseline)
        .map(|(a, b)| {
            if a.len() != b.len() {
                return Err(MetricsError::LengthMismatch(a.len(), b.len()));
            }
            Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
        })
        .collect()
}

/// Relative class frequencies of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile(pub Vec<f64>);

impl FrequencyProfile {
    pub fn from_counts(counts: &[usize]) -> Result<FrequencyProfile> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(MetricsError::Empty("frequency profile"));
        }
        Ok(FrequencyProfile(counts.iter().map(|&c| c as f64 / total as f64).collect()))
    }

    pub fn from_labels(labels: &[usize], classes: usize) -> Result<FrequencyProfile> {
        let mut counts = vec![0; classes];
        for &l in labels {
            *counts.get_mut(l).ok_or(MetricsError::LengthMismatch(l, classes))? += 1;
        }
        Self::from_counts(&counts)
    }
}

/// Off-diagonal `(profile correlation, accuracy)` pairs and their correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqCorrelation {
    /// `(i, j, pearson(profile_i, profile_j), matrix[i][j])` for every `i != j`.
    pub pairs: Vec<(usize, usize, f64, f64)>,
    /// `None` when either coordinate has zero variance.
    pub r: Option<f64>,
}

pub fn acc_vs_freqcorr(matrix: &[Vec<f64>], profiles: &[FrequencyProfile]) -> Result<FreqCorrelation> {
    if matrix.len() != profiles.len() {
        return Err(MetricsError::LengthMismatch(matrix.len(), profiles.len()));
    }
    let mut pairs = Vec::new();
    for i in 0..matrix.len() {
        for j in 0..matrix.len() {
            if i != j {
                let x = match pearson(&profiles[i].0, &profiles[j].0) {
                    Ok(r) => r,
                    // two flat profiles are identical distributions
                    Err(MetricsError::Undefined(_)) if profiles[i] == profiles[j] => 1.0,
                    Err(e) => return Err(e),
                };
                pairs.push((i, j, x, matrix[i][j]));
            }
        }
    }
    if pairs.len() < 2 {
        return Err(MetricsError::Undefined("fewer than two off-diagonal pairs".into()));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.2).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.3).collect();
    Ok(FreqCorrelation { pairs, r: pearson(&xs, &ys).ok() })
}

/// Accuracy and mAP restricted to one domain tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBreakdown {
    pub count: usize,
    pub accuracy: Option<f64>,
    pub map: Option<f64>,
}

/// Evaluation of one model on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub count: usize,
    pub per_class_ap: Vec<Option<f64>>,
    pub map: Option<f64>,
    /// Classes without positives, excluded from the mAP.
    pub skipped_classes: Vec<usize>,
    /// Top-1 accuracy; single-label runs only.
    pub accuracy: Option<f64>,
    pub positives_per_class: Vec<usize>,
    pub per_domain: BTreeMap<String, DomainBreakdown>,
}

impl EvalReport {
    /// `scores` are per-class probabilities `N x K`; `labels` the true label
    /// sets; `domains` one tag per item. Accuracy is reported when every item
    /// has exactly one label.
    pub fn new(scores: &[Vec<f64>], labels: &[Vec<usize>], domains: &[String]) -> Result<EvalReport> {
        if scores.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(scores.len(), labels.len()));
        }
        if domains.len() != labels.len() {
            return Err(MetricsError::LengthMismatch(domains.len(), labels.len()));
        }
        let k = scores.first().ok_or(MetricsError::Empty("evaluation"))?.len();
        let (m, acc, pos) = Self::core(scores, labels, k)?;
        let mut tags: Vec<&String> = domains.iter().collect();
        tags.sort();
        tags.dedup();
        let mut per_domain = BTreeMap::new();
        for tag in tags {
            let idx: Vec<usize> = (0..domains.len()).filter(|&i| &domains[i] == tag).collect();
            let s: Vec<Vec<f64>> = idx.iter().map(|&i| scores[i].clone()).collect();
            let l: Vec<Vec<usize>> = idx.iter().map(|&i| labels[i].clone()).collect();
            let (dm, da, _) = Self::core(&s, &l, k)?;
            per_domain.insert(tag.clone(), DomainBreakdown { count: idx.len(), accuracy: da, map: dm.map(|r| r.map) });
        }
        Ok(EvalReport {
            count: scores.len(),
            per_class_ap: m.as_ref().map_or(vec![None; k], |r| r.per_class.clone()),
            map: m.as_ref().map(|r| r.map),
            skipped_classes: m.map_or((0..k).collect(), |r| r.skipped),
            accuracy: acc,
            positives_per_class: pos,
            per_domain,
        })
    }

    #[allow(clippy::type_complexity)]
    fn core(scores: &[Vec<f64>], labels: &[Vec<usize>], k: usize) -> Result<(Option<MapResult>, Option<f64>, Vec<usize>)> {
        let onehot: Vec<Vec<bool>> = labels.iter().map(|ls| (0..k).map(|c| ls.contains(&c)).collect()).collect();
        let pos = (0..k).map(|c| onehot.iter().filter(|r| r[c]).count()).collect();
        let m = match mean_average_precision(scores, &onehot) {
            Ok(r) => Some(r),
            Err(MetricsError::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        let acc = if labels.iter().all(|l| l.len() == 1) {
            let pred: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
            let truth: Vec<usize> = labels.iter().map(|l| l[0]).collect();
            Some(accuracy(&pred, &truth)?)
        } else {
            None
        };
        Ok((m, acc, pos))
    }
}

/// Matrix as CSV with a header row of column names and a leading name column.
pub fn write_matrix_csv(path: &Path, names: &[String], matrix: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["train\\test".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (name, row) in names.iter().zip(matrix) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.3], &[true]).unwrap(), 1.0);
        assert!(matches!(average_precision(&[0.3, 0.2], &[false, false]), Err(MetricsError::Undefined(_))));
    }

    #[test]
    fn ties_break_by_index() {
        // equal scores: item 0 ranks before item 1
        assert_eq!(average_precision(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.5, 0.5], &[false, true]).unwrap(), 0.5);
    }

    #[test]
    fn map_skips_empty_classes() {
        let s = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.4]];
        let l = vec![vec![true, false, false], vec![false, true, false]];
        let r = mean_average_precision(&s, &l).unwrap();
        assert_eq!(r.map, 1.0);
        assert_eq!(r.skipped, vec![2]);
        let none = vec![vec![false; 3]; 2];
        assert!(mean_average_precision(&s, &none).is_err());
        let k1 = mean_average_precision(&[vec![0.9], vec![0.8], vec![0.7]], &[vec![true], vec![false], vec![true]]).unwrap();
        assert_eq!(k1.map, average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 0], &[1, 2]).unwrap(), 0.5);
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&x, &[2.0, 2.0, 2.0]).is_err());
    }

    #[test]
    fn baseline_examples() {
        let b = freq_baseline(&[4, 4, 1, 2], 5).unwrap();
        assert_eq!(b.class, 4);
        assert_eq!(freq_baseline(&[3, 1], 5).unwrap().class, 1);
        assert_eq!(b.accuracy(&[4, 0, 4, 4]).unwrap(), 0.75);
        let g = gains(&[vec![0.5, 0.4]], &[vec![0.2, 0.4]]).unwrap();
        assert!((g[0][0] - 0.3).abs() < 1e-12 && g[0][1] == 0.0);
    }

    #[test]
    fn freqcorr_pairs() {
        let p = FrequencyProfile::from_counts(&[1, 1, 2]).unwrap();
        let m = vec![vec![0.9, 0.5], vec![0.4, 0.8]];
        let fc = acc_vs_freqcorr(&m, &[p.clone(), p]).unwrap();
        assert_eq!(fc.pairs.len(), 2);
        assert!(fc.pairs.iter().all(|q| (q.2 - 1.0).abs() < 1e-12));
        let single = acc_vs_freqcorr(&[vec![1.0]], &[FrequencyProfile(vec![1.0])]);
        assert!(single.is_err());
    }

    #[test]
    fn matrix_shapes() {
        let m = species_matrix(3, |i, j| Ok((i * 3 + j) as f64)).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[1][2], 5.0);
        assert_eq!(species_matrix(1, |_, _| Ok(0.7)).unwrap(), vec![vec![0.7]]);
    }
}
