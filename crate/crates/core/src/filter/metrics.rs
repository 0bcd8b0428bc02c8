//! Detection metrics against planted-noise oracle labels.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{filter_topk, FilterError, Method, Oracle, QaKey, ScoreSet};

/// Area under the ROC curve of `scores` for separating `positive` from the
/// rest, via the Mann-Whitney rank statistic with ties counted as one half.
/// `None` when either class is empty.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "auroc: length mismatch");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub clean: Vec<u64>,
    pub corrupt: Vec<u64>,
}

impl Histogram {
    fn new(bins: usize) -> Self {
        Histogram { lo: 0.0, hi: 1.0, clean: vec![0; bins], corrupt: vec![0; bins] }
    }

    fn bin(&self, score: f64) -> usize {
        let bins = self.clean.len();
        let x = ((score - self.lo) / (self.hi - self.lo) * bins as f64).floor();
        (x.max(0.0) as usize).min(bins - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioMetrics {
    pub keep_ratio: f64,
    pub n_kept: usize,
    pub n_dropped: usize,
    /// Fraction of dropped QAs that are corrupt.
    pub precision: Option<f64>,
    /// Fraction of corrupt QAs that were dropped.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub method: Method,
    pub n: usize,
    pub n_corrupt: usize,
    /// Probability that a clean QA outscores a corrupt one.
    pub auroc: Option<f64>,
    pub at_ratio: Vec<RatioMetrics>,
    pub histogram: Histogram,
    pub note: String,
}

/// Scores a [`ScoreSet`] against oracle labels. Every scored QA must appear
/// in the oracle and vice versa.
pub fn eval_detection(
    scores: &ScoreSet,
    oracle: &Oracle,
    keep_ratios: &[f64],
) -> Result<DetectionMetrics, FilterError> {
    let truth: HashMap<QaKey, bool> = oracle.entries.iter().map(|e| (e.key(), e.corrupt)).collect();
    if truth.len() != scores.entries.len() {
        return Err(FilterError::Mismatch(format!(
            "oracle lists {} QAs, score set has {}",
            truth.len(),
            scores.entries.len()
        )));
    }
    let mut corrupt = Vec::with_capacity(scores.entries.len());
    for e in &scores.entries {
        match truth.get(&e.key()) {
            Some(&c) => corrupt.push(c),
            None => return Err(FilterError::Mismatch(format!("QA {}/{} missing from oracle", e.sample_id, e.qa_id))),
        }
    }
    let values: Vec<f64> = scores.entries.iter().map(|e| e.score).collect();
    let clean: Vec<bool> = corrupt.iter().map(|c| !c).collect();
    let n_corrupt = corrupt.iter().filter(|&&c| c).count();

    let mut at_ratio = Vec::with_capacity(keep_ratios.len());
    for &ratio in keep_ratios {
        let manifest = filter_topk(scores, ratio)?;
        let dropped: HashSet<&QaKey> = manifest.dropped.iter().collect();
        let hits = scores.entries.iter().zip(&corrupt).filter(|(e, &c)| c && dropped.contains(&e.key())).count();
        at_ratio.push(RatioMetrics {
            keep_ratio: ratio,
            n_kept: manifest.kept.len(),
            n_dropped: manifest.dropped.len(),
            precision: (!dropped.is_empty()).then(|| hits as f64 / dropped.len() as f64),
            recall: (n_corrupt > 0).then(|| hits as f64 / n_corrupt as f64),
        });
    }

    let mut histogram = Histogram::new(HISTOGRAM_BINS);
    for (&s, &c) in values.iter().zip(&corrupt) {
        let b = histogram.bin(s);
        if c {
            histogram.corrupt[b] += 1;
        } else {
            histogram.clean[b] += 1;
        }
    }

    Ok(DetectionMetrics {
        method: scores.method,
        n: values.len(),
        n_corrupt,
        auroc: auroc(&values, &clean),
        at_ratio,
        histogram,
        note: "computed against planted-noise oracle labels; corrupt QAs are the ones a filter should drop".into(),
    })
}
