//! Text-side candidate embeddings, temperature-scaled cosine scoring, the
//! contrastive alignment loss and probability-weighted candidate fusion.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Var};
use crate::error::{check_index, CopaError, Result};
use crate::encoder::TextEncoder;
use crate::params::{Graph, ParamGroup, ParamId, ParamStore};
use crate::schema::ConceptSchema;

/// Initial temperature; `1/τ ≈ 14.29`.
pub const INITIAL_TEMPERATURE: f64 = 0.07;

/// Frozen unit-norm text embeddings, one `k_i × d` matrix per concept, rows
/// in schema candidate order.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEmbeddings {
    pub per_concept: Vec<Array2<f64>>,
    source: String,
}

impl CandidateEmbeddings {
    pub fn build(schema: &ConceptSchema, encoder: &dyn TextEncoder) -> Result<Self> {
        let d = encoder.dim();
        let mut per_concept = Vec::with_capacity(schema.n_concepts());
        for (i, c) in schema.concepts.iter().enumerate() {
            let mut t = Array2::zeros((c.k(), d));
            for j in 0..c.k() {
                let mut v = encoder.encode(&schema.render_prompt(i, j)?);
                let n = v.dot(&v).sqrt();
                if n == 0.0 || !n.is_finite() {
                    return Err(CopaError::invalid(
                        format!("concepts[{i}].candidates[{j}]"),
                        "text encoder returned a zero vector",
                    ));
                }
                v /= n;
                t.row_mut(j).assign(&v);
            }
            per_concept.push(t);
        }
        Ok(Self {
            per_concept,
            source: Self::source_key(schema, encoder),
        })
    }

    fn source_key(schema: &ConceptSchema, encoder: &dyn TextEncoder) -> String {
        format!("{}|{}", schema.hash(), encoder.fingerprint())
    }

    /// True if these embeddings were built from this schema and encoder.
    pub fn is_current(&self, schema: &ConceptSchema, encoder: &dyn TextEncoder) -> bool {
        self.source == Self::source_key(schema, encoder)
    }

    /// Returns `self` if still current, otherwise rebuilds.
    pub fn refresh(self, schema: &ConceptSchema, encoder: &dyn TextEncoder) -> Result<Self> {
        if self.is_current(schema, encoder) {
            Ok(self)
        } else {
            Self::build(schema, encoder)
        }
    }

    pub fn n_concepts(&self) -> usize {
        self.per_concept.len()
    }
}

/// Learnable temperature, parameterized as `τ = exp(log_τ)`.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_tau: ParamId,
}

impl Temperature {
    pub fn new(store: &mut ParamStore) -> Self {
        let log_tau = store.add(
            "alignment.log_tau",
            ParamGroup::Temperature,
            Array2::from_elem((1, 1), INITIAL_TEMPERATURE.ln()),
        );
        Self { log_tau }
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        store.value(self.log_tau)[[0, 0]].exp()
    }

    /// `1/τ` as a `1×1` node.
    pub fn inverse_var(&self, g: &mut Graph<'_>) -> Var {
        let lt = g.param(self.log_tau);
        let neg = g.tape.scale(lt, -1.0);
        g.tape.exp(neg)
    }
}

/// Alignment scores for one concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScores {
    /// `cos(Z^i, t_i^j) / τ`
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
}

impl ConceptScores {
    pub fn from_logits(logits: Array1<f64>) -> Self {
        let probabilities = softmax_rows(&logits.clone().insert_axis(Axis(0))).remove_axis(Axis(0));
        Self { logits, probabilities }
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    /// Argmax of the probabilities; ties resolve to the lowest index.
    pub fn predicted(&self) -> ConceptPrediction {
        let mut best = 0;
        for (j, &p) in self.probabilities.iter().enumerate() {
            if p > self.probabilities[best] {
                best = j;
            }
        }
        ConceptPrediction {
            index: best,
            confidence: self.probabilities[best],
        }
    }
}

/// Per-concept scores for one image.
pub type AlignmentScores = Vec<ConceptScores>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptPrediction {
    pub index: usize,
    pub confidence: f64,
}

/// Logits `cos(z, t_j)/τ` as a `1×k` node. Candidate rows are unit norm.
pub fn score_vars(g: &mut Graph<'_>, z_row: Var, candidates: Var, inv_tau: Var) -> Var {
    let zn = g.tape.normalize_rows(z_row);
    let cos = g.tape.matmul_t(zn, candidates);
    g.tape.mul_scalar(cos, inv_tau)
}

/// Mean over concepts of the cross-entropy of each concept's logits against
/// its ground-truth candidate.
pub fn contrastive_loss_vars(g: &mut Graph<'_>, logits: &[Var], gt: &[usize]) -> Result<Var> {
    if logits.len() != gt.len() || logits.is_empty() {
        return Err(CopaError::Shape(format!(
            "{} concept score rows for {} labels",
            logits.len(),
            gt.len()
        )));
    }
    let mut terms = Vec::with_capacity(logits.len());
    for (l, &t) in logits.iter().zip(gt) {
        check_index("ground-truth candidate", t, g.tape.shape(*l).1)?;
        terms.push(g.tape.cross_entropy(*l, t));
    }
    let total = g.tape.sum(&terms);
    Ok(g.tape.scale(total, 1.0 / logits.len() as f64))
}

/// `D_i = Σ_j p_j t_j` as a `1×d` node.
pub fn fuse_vars(g: &mut Graph<'_>, probabilities: Var, candidates: Var) -> Var {
    g.tape.matmul(probabilities, candidates)
}

/// Scores one concept embedding against its candidate matrix.
pub fn score(z: ArrayView1<'_, f64>, candidates: &Array2<f64>, tau: f64) -> Result<ConceptScores> {
    if candidates.nrows() < 2 {
        return Err(CopaError::Shape("scoring needs at least two candidates".into()));
    }
    if candidates.ncols() != z.len() {
        return Err(CopaError::Shape(format!(
            "embedding width {} != candidate width {}",
            z.len(),
            candidates.ncols()
        )));
    }
    let norm = z.dot(&z).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(CopaError::Shape("cosine similarity undefined for a zero vector".into()));
    }
    if !(tau > 0.0) {
        return Err(CopaError::invalid("tau", "temperature must be positive"));
    }
    let mut t = candidates.clone();
    for mut row in t.rows_mut() {
        let n = row.dot(&row).sqrt();
        row /= n;
    }
    let empty = ParamStore::new();
    let mut g = Graph::inference(&empty);
    let zv = g.tape.constant(z.to_owned().insert_axis(Axis(0)));
    let tv = g.tape.constant(t);
    let inv = g.tape.constant(Array2::from_elem((1, 1), 1.0 / tau));
    let logits = score_vars(&mut g, zv, tv, inv);
    Ok(ConceptScores::from_logits(g.value(logits).row(0).to_owned()))
}

/// Mean over concepts of `-log softmax(logits)[gt]`.
pub fn contrastive_loss(scores: &[ConceptScores], gt: &[usize]) -> Result<f64> {
    let empty = ParamStore::new();
    let mut g = Graph::inference(&empty);
    let logits: Vec<Var> = scores
        .iter()
        .map(|s| g.tape.constant(s.logits.clone().insert_axis(Axis(0))))
        .collect();
    let l = contrastive_loss_vars(&mut g, &logits, gt)?;
    Ok(g.tape.scalar(l))
}

/// Probability-weighted mixture of candidate embeddings.
pub fn fuse_candidates(probabilities: ArrayView1<'_, f64>, candidates: &Array2<f64>) -> Result<Array1<f64>> {
    if probabilities.len() != candidates.nrows() {
        return Err(CopaError::Shape(format!(
            "{} probabilities for {} candidates",
            probabilities.len(),
            candidates.nrows()
        )));
    }
    Ok(probabilities.dot(candidates))
}

pub fn predict_concepts(scores: &[ConceptScores]) -> Vec<ConceptPrediction> {
    scores.iter().map(ConceptScores::predicted).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{HashTextEncoder, DEFAULT_TEXT_SEED};
    use ndarray::array;

    #[test]
    fn candidate_matrix_shapes_and_norms() {
        let schema = ConceptSchema::synthetic();
        let enc = HashTextEncoder::new(16, DEFAULT_TEXT_SEED);
        let t = CandidateEmbeddings::build(&schema, &enc).unwrap();
        assert_eq!(t.per_concept[1].nrows(), 2);
        for m in &t.per_concept {
            for r in m.rows() {
                assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
            }
        }
        assert_eq!(t, CandidateEmbeddings::build(&schema, &enc).unwrap());
        assert!(t.is_current(&schema, &enc));
        let other = HashTextEncoder::new(16, 99);
        assert!(!t.is_current(&schema, &other));
        let rebuilt = t.refresh(&schema, &other).unwrap();
        assert!(rebuilt.is_current(&schema, &other));
    }

    #[test]
    fn aligned_embedding_scores() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let s = score(array![1.0, 0.0].view(), &t, 1.0).unwrap();
        assert_eq!(s.logits, array![1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((s.probabilities[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.probabilities[0] - 0.7311).abs() < 1e-4);
        assert!((s.probabilities[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn equidistant_candidates_are_uniform() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        let s = score(array![1.0, 1.0].view(), &t, 0.3).unwrap();
        assert!((s.probabilities[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_embedding_is_rejected() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(score(array![0.0, 0.0].view(), &t, 1.0).is_err());
    }

    #[test]
    fn logits_bounded_by_inverse_temperature() {
        let t = array![[1.0, 2.0, -1.0], [0.3, -0.2, 0.9], [-1.0, -2.0, 1.0]];
        let s = score(array![0.5, 1.0, -0.5].view(), &t, 0.07).unwrap();
        for l in s.logits.iter() {
            assert!(l.abs() <= 1.0 / 0.07 + 1e-9);
        }
        assert!((s.logits[2] + 1.0 / 0.07).abs() < 1e-9);
    }

    #[test]
    fn loss_of_uniform_binary_concept_is_ln2() {
        let s = ConceptScores::from_logits(array![0.3, 0.3]);
        let l = contrastive_loss(&[s], &[0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_for_dominant_ground_truth() {
        let s = ConceptScores::from_logits(array![80.0, 0.0]);
        assert!(contrastive_loss(&[s], &[0]).unwrap() < 1e-30);
    }

    #[test]
    fn two_concept_loss_matches_independent_softmax() {
        let a = ConceptScores::from_logits(array![1.0, 0.0]);
        let b = ConceptScores::from_logits(array![0.0, 0.0]);
        let l = contrastive_loss(&[a, b], &[0, 0]).unwrap();
        let e = std::f64::consts::E;
        let oracle = (-(e / (e + 1.0)).ln() - 0.5f64.ln()) / 2.0;
        assert!((l - oracle).abs() < 1e-12);
        assert!((l - 0.5032).abs() < 1e-4);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        let a = ConceptScores::from_logits(array![1.0, 0.0]);
        assert!(contrastive_loss(&[a.clone()], &[2]).is_err());
        assert!(contrastive_loss(&[a], &[0, 1]).is_err());
    }

    #[test]
    fn fusion_examples() {
        let t = array![[1.0, 0.0], [0.0, 1.0]];
        assert_eq!(fuse_candidates(array![0.0, 1.0].view(), &t).unwrap(), array![0.0, 1.0]);
        assert_eq!(fuse_candidates(array![0.5, 0.5].view(), &t).unwrap(), array![0.5, 0.5]);
        let d = fuse_candidates(array![0.7311, 0.2689].view(), &t).unwrap();
        assert!((d.dot(&d) - 0.6068).abs() < 1e-4);
        assert!(fuse_candidates(array![1.0].view(), &t).is_err());
    }

    #[test]
    fn prediction_tie_breaks_low() {
        let s = ConceptScores {
            logits: array![0.0, 0.0],
            probabilities: array![0.9, 0.1],
        };
        assert_eq!(s.predicted(), ConceptPrediction { index: 0, confidence: 0.9 });
        let s = ConceptScores {
            logits: array![0.0, 0.0],
            probabilities: array![0.5, 0.5],
        };
        assert_eq!(s.predicted().index, 0);
    }
}
