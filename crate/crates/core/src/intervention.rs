//! Test-time concept edits: force a candidate on (positive) or knock it out
//! (negative), then re-run fusion and diagnosis through the bottleneck.

use std::collections::BTreeSet;
use std::fmt;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{AlignmentScores, ConceptScores};
use crate::data::Sample;
use crate::diagnosis::Diagnosis;
use crate::encoder::Image;
use crate::error::{check_index, CopaError, Result};
use crate::model::{CopaModel, Prediction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditMode {
    Positive,
    Negative,
}

impl fmt::Display for EditMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EditMode::Positive => "positive",
            EditMode::Negative => "negative",
        })
    }
}

impl std::str::FromStr for EditMode {
    type Err = CopaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" | "pos" => Ok(EditMode::Positive),
            "negative" | "neg" => Ok(EditMode::Negative),
            other => Err(CopaError::invalid("mode", format!("{other:?} is not positive or negative"))),
        }
    }
}

/// How a negative edit redistributes the removed mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Renormalization {
    /// Mask the logit to `-∞` and re-apply softmax.
    #[default]
    Softmax,
    /// Divide surviving probabilities by their sum.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub concept: usize,
    pub mode: EditMode,
    /// Candidate forced on (positive) or removed (negative).
    pub candidate: usize,
}

/// Forces the probabilities to one-hot at `target`. Logits become `0` at
/// `target` and `-∞` elsewhere so that they stay consistent with the
/// probabilities.
pub fn apply_positive(scores: &ConceptScores, target: usize) -> Result<ConceptScores> {
    check_index("candidate", target, scores.k())?;
    let logits = Array1::from_shape_fn(scores.k(), |j| if j == target { 0.0 } else { f64::NEG_INFINITY });
    let probabilities = Array1::from_shape_fn(scores.k(), |j| if j == target { 1.0 } else { 0.0 });
    Ok(ConceptScores { logits, probabilities })
}

/// Removes `target` and renormalizes over the surviving candidates.
pub fn apply_negative(scores: &ConceptScores, target: usize, renorm: Renormalization) -> Result<ConceptScores> {
    let k = scores.k();
    check_index("candidate", target, k)?;
    if k < 2 {
        return Err(CopaError::Intervention(
            "a concept with one candidate cannot be renormalized after removal".into(),
        ));
    }
    let mut logits = scores.logits.clone();
    logits[target] = f64::NEG_INFINITY;
    match renorm {
        Renormalization::Softmax => Ok(ConceptScores::from_logits(logits)),
        Renormalization::Proportional => {
            let mut p = scores.probabilities.clone();
            p[target] = 0.0;
            let s = p.sum();
            if s > 0.0 && s.is_finite() {
                p /= s;
            } else {
                p.fill(1.0 / (k - 1) as f64);
                p[target] = 0.0;
            }
            Ok(ConceptScores {
                logits,
                probabilities: p,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TouchedConcept {
    pub spec: InterventionSpec,
    pub pre: ConceptScores,
    pub post: ConceptScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub touched: Vec<TouchedConcept>,
    /// Scores for every concept after editing.
    pub scores: AlignmentScores,
    pub pre_diagnosis: Diagnosis,
    pub post_diagnosis: Diagnosis,
    /// The predicted disease class changed.
    pub changed: bool,
}

/// Applies `specs` to an existing prediction and recomputes the diagnosis.
pub fn intervene(
    model: &CopaModel,
    prediction: &Prediction,
    specs: &[InterventionSpec],
    renorm: Renormalization,
) -> Result<InterventionResult> {
    let n = prediction.scores.len();
    let mut seen = BTreeSet::new();
    for s in specs {
        check_index("concept", s.concept, n)?;
        if !seen.insert(s.concept) {
            return Err(CopaError::Intervention(format!("concept {} edited twice", s.concept)));
        }
    }
    let mut scores = prediction.scores.clone();
    let mut touched = Vec::with_capacity(specs.len());
    for s in specs {
        let pre = &prediction.scores[s.concept];
        let post = match s.mode {
            EditMode::Positive => apply_positive(pre, s.candidate)?,
            EditMode::Negative => apply_negative(pre, s.candidate, renorm)?,
        };
        scores[s.concept] = post.clone();
        touched.push(TouchedConcept {
            spec: *s,
            pre: pre.clone(),
            post,
        });
    }
    let post_diagnosis = if specs.is_empty() {
        prediction.diagnosis.clone()
    } else {
        let probs: Vec<Array1<f64>> = scores.iter().map(|s| s.probabilities.clone()).collect();
        model.diagnose_from_probabilities(&probs)?
    };
    Ok(InterventionResult {
        changed: post_diagnosis.predicted != prediction.diagnosis.predicted,
        touched,
        scores,
        pre_diagnosis: prediction.diagnosis.clone(),
        post_diagnosis,
    })
}

pub fn intervene_and_predict(
    model: &CopaModel,
    image: &Image,
    specs: &[InterventionSpec],
    renorm: Renormalization,
) -> Result<InterventionResult> {
    let prediction = model.predict(image)?;
    intervene(model, &prediction, specs, renorm)
}

/// Sweep edits for one sample: positive mode picks wrongly predicted
/// concepts and forces the ground truth; negative mode picks correctly
/// predicted concepts and removes the ground truth. At most `n` concepts,
/// highest predicted-candidate confidence first, ties by concept index.
pub fn select_edits(prediction: &Prediction, concept_labels: &[usize], n: usize, mode: EditMode) -> Vec<InterventionSpec> {
    let mut eligible: Vec<(usize, f64)> = prediction
        .concepts
        .iter()
        .zip(concept_labels)
        .enumerate()
        .filter(|(_, (p, &gt))| (p.index == gt) == (mode == EditMode::Negative))
        .filter(|(i, _)| mode == EditMode::Positive || prediction.scores[*i].k() >= 2)
        .map(|(i, (p, _))| (i, p.confidence))
        .collect();
    eligible.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    eligible
        .into_iter()
        .take(n)
        .map(|(i, _)| InterventionSpec {
            concept: i,
            mode,
            candidate: concept_labels[i],
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub mode: EditMode,
    pub n: usize,
    pub renormalization: Renormalization,
    pub samples: usize,
    pub free_accuracy: f64,
    pub post_accuracy: f64,
    pub delta: f64,
    /// Samples that received at least one edit.
    pub edited_samples: usize,
    pub edits_applied: usize,
    /// `eligibility[e]` counts samples with exactly `e` edits applied.
    pub eligibility: Vec<usize>,
    /// Samples whose predicted class changed.
    pub flipped: usize,
    /// Post-edit probability vectors that broke a contract (should be 0).
    pub contract_violations: usize,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}-{}: acc {:.4} -> {:.4} (delta {:+.4}), {} of {} samples edited, {} flipped",
            self.mode, self.n, self.free_accuracy, self.post_accuracy, self.delta, self.edited_samples, self.samples, self.flipped
        )
    }
}

/// Checks that an edited probability vector is a distribution with the
/// expected value at the target.
pub fn contract_holds(spec: &InterventionSpec, post: &ConceptScores) -> bool {
    let p = &post.probabilities;
    let sum_ok = (p.sum() - 1.0).abs() <= 1e-6 && p.iter().all(|v| *v >= 0.0 && v.is_finite());
    let target_ok = match spec.mode {
        EditMode::Positive => p[spec.candidate] == 1.0,
        EditMode::Negative => p[spec.candidate] == 0.0,
    };
    sum_ok && target_ok
}

struct SampleOutcome {
    free_correct: bool,
    post_correct: bool,
    edits: usize,
    violations: usize,
}

pub fn intervention_sweep(
    model: &CopaModel,
    samples: &[Sample],
    n: usize,
    mode: EditMode,
    renorm: Renormalization,
) -> Result<SweepReport> {
    if n < 1 {
        return Err(CopaError::invalid("n", "must be at least 1"));
    }
    let outcomes = samples
        .par_iter()
        .map(|s| {
            let prediction = model.predict(&s.image)?;
            let specs = select_edits(&prediction, &s.concept_labels, n, mode);
            let result = intervene(model, &prediction, &specs, renorm)?;
            Ok(SampleOutcome {
                free_correct: prediction.diagnosis.predicted == s.disease_label,
                post_correct: result.post_diagnosis.predicted == s.disease_label,
                edits: specs.len(),
                violations: result.touched.iter().filter(|t| !contract_holds(&t.spec, &t.post)).count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = outcomes.len();
    let frac = |k: usize| if total == 0 { 0.0 } else { k as f64 / total as f64 };
    let free = frac(outcomes.iter().filter(|o| o.free_correct).count());
    let post = frac(outcomes.iter().filter(|o| o.post_correct).count());
    let mut eligibility = vec![0; n + 1];
    for o in &outcomes {
        eligibility[o.edits] += 1;
    }
    Ok(SweepReport {
        mode,
        n,
        renormalization: renorm,
        samples: total,
        free_accuracy: free,
        post_accuracy: post,
        delta: post - free,
        edited_samples: outcomes.iter().filter(|o| o.edits > 0).count(),
        edits_applied: outcomes.iter().map(|o| o.edits).sum(),
        eligibility,
        flipped: outcomes.iter().filter(|o| o.free_correct != o.post_correct).count(),
        contract_violations: outcomes.iter().map(|o| o.violations).sum(),
    })
}
