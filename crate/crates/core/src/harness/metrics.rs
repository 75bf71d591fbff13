//! Classification metrics: rank-statistic AUC, accuracy and macro F1.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{CopaError, Result};

/// Binary AUC by the Mann–Whitney rank sum with mid-ranks for ties. `None`
/// when either class is absent.
pub fn auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels differ in length");
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
        let mid = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC. `probabilities[s][c]` scores class `c` for
/// sample `s`. Classes without both positives and negatives are skipped;
/// `None` if no class qualifies.
pub fn macro_auc(probabilities: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Option<f64> {
    if n_classes == 2 {
        let s: Vec<f64> = probabilities.iter().map(|p| p[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return auc(&s, &y);
    }
    let per: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let s: Vec<f64> = probabilities.iter().map(|p| p[c]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            auc(&s, &y)
        })
        .collect();
    (!per.is_empty()).then(|| per.iter().sum::<f64>() / per.len() as f64)
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Macro F1 over classes that occur in either the labels or the
/// predictions.
pub fn macro_f1(predicted: &[usize], labels: &[usize], n_classes: usize) -> f64 {
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fn_ = vec![0usize; n_classes];
    for (&p, &l) in predicted.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let scores: Vec<f64> = (0..n_classes)
        .filter(|&c| tp[c] + fp[c] + fn_[c] > 0)
        .map(|c| 2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64)
        .collect();
    if scores.is_empty() {
        0.0
    } else {
        scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Absent when the split lacks the classes to rank.
    pub auc: Option<f64>,
    pub acc: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn compute(probabilities: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Self {
        let predicted: Vec<usize> = probabilities.iter().map(|p| argmax(p)).collect();
        Self {
            auc: macro_auc(probabilities, labels, n_classes),
            acc: accuracy(&predicted, labels),
            f1: macro_f1(&predicted, labels, n_classes),
        }
    }
}

impl fmt::Display for ClassMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.auc {
            Some(a) => write!(f, "AUC {a:.3} ")?,
            None => write!(f, "AUC  n/a  ")?,
        }
        write!(f, "ACC {:.3} F1 {:.3}", self.acc, self.f1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub title: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub disease: ClassMetrics,
    /// ACC micro-averaged over (sample, concept) pairs; AUC and F1 are the
    /// per-concept values averaged over concepts.
    pub concept: ClassMetrics,
    pub per_concept: Vec<ConceptMetrics>,
}

impl MetricsReport {
    /// `disease_probs[s]` are class probabilities; `concept_probs[i][s]` are
    /// candidate probabilities of concept `i`.
    pub fn compute(
        disease_probs: &[Vec<f64>],
        disease_labels: &[usize],
        n_classes: usize,
        concept_titles: &[String],
        concept_probs: &[Vec<Vec<f64>>],
        concept_labels: &[Vec<usize>],
    ) -> Result<Self> {
        if disease_labels.is_empty() {
            return Err(CopaError::invalid("split", "cannot evaluate an empty split"));
        }
        let disease = ClassMetrics::compute(disease_probs, disease_labels, n_classes);
        let mut per_concept = Vec::with_capacity(concept_titles.len());
        let (mut hits, mut pairs) = (0usize, 0usize);
        for (i, title) in concept_titles.iter().enumerate() {
            let k = concept_probs[i].first().map_or(0, Vec::len);
            let labels: Vec<usize> = concept_labels.iter().map(|c| c[i]).collect();
            let m = ClassMetrics::compute(&concept_probs[i], &labels, k);
            hits += (m.acc * labels.len() as f64).round() as usize;
            pairs += labels.len();
            per_concept.push(ConceptMetrics {
                title: title.clone(),
                metrics: m,
            });
        }
        let aucs: Vec<f64> = per_concept.iter().filter_map(|c| c.metrics.auc).collect();
        let concept = ClassMetrics {
            auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
            acc: if pairs == 0 { 0.0 } else { hits as f64 / pairs as f64 },
            f1: if per_concept.is_empty() {
                0.0
            } else {
                per_concept.iter().map(|c| c.metrics.f1).sum::<f64>() / per_concept.len() as f64
            },
        };
        Ok(Self {
            samples: disease_labels.len(),
            disease,
            concept,
            per_concept,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "samples  {}", self.samples)?;
        writeln!(f, "disease  {}", self.disease)?;
        writeln!(f, "concept  {}", self.concept)?;
        for c in &self.per_concept {
            writeln!(f, "  {:<24} {}", c.title, c.metrics)?;
        }
        Ok(())
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Sample mean and standard deviation (n−1 denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}
