//! Gated aggregation of fused concept representations into class logits, and
//! the composite training objective.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Var};
use crate::error::{check_index, CopaError, Result};
use crate::params::{gaussian, Graph, ParamGroup, ParamId, ParamStore};

/// Default concept/diagnosis loss balance.
pub const DEFAULT_LAMBDA: f64 = 0.5;

/// Softmax gating over concepts followed by a single affine head.
#[derive(Debug, Clone)]
pub struct GatedHead {
    /// `1 × N` gating logits; `α = softmax(logits)`.
    pub gating_logits: ParamId,
    /// `d × C`
    pub head_weight: ParamId,
    /// `1 × C`
    pub head_bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct DiagnosisVars {
    pub alpha: Var,
    pub pooled: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub pooled: Array1<f64>,
    pub logits: Array1<f64>,
    pub probabilities: Array1<f64>,
    pub predicted: usize,
    pub alpha: Array1<f64>,
}

impl Diagnosis {
    pub fn from_parts(pooled: Array1<f64>, logits: Array1<f64>, alpha: Array1<f64>) -> Self {
        let probabilities = softmax_rows(&logits.clone().insert_axis(Axis(0))).remove_axis(Axis(0));
        let mut predicted = 0;
        for (c, &p) in probabilities.iter().enumerate() {
            if p > probabilities[predicted] {
                predicted = c;
            }
        }
        Self {
            pooled,
            logits,
            probabilities,
            predicted,
            alpha,
        }
    }

    pub fn confidence(&self) -> f64 {
        self.probabilities[self.predicted]
    }
}

impl GatedHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, n_concepts: usize, dim: usize, n_classes: usize) -> Self {
        Self {
            gating_logits: store.add("gating.logits", ParamGroup::Gating, Array2::zeros((1, n_concepts))),
            head_weight: store.add("head.weight", ParamGroup::Head, gaussian(rng, dim, n_classes, 0.02)),
            head_bias: store.add("head.bias", ParamGroup::Head, Array2::zeros((1, n_classes))),
        }
    }

    pub fn param_ids(&self) -> [ParamId; 3] {
        [self.gating_logits, self.head_weight, self.head_bias]
    }

    pub fn alpha(&self, store: &ParamStore) -> Array1<f64> {
        softmax_rows(store.value(self.gating_logits)).row(0).to_owned()
    }

    /// `pooled = Σ α_i D_i`, `ŷ = pooled · W + b`. `fused` holds one `1 × d`
    /// node per concept.
    pub fn forward(&self, g: &mut Graph<'_>, fused: &[Var]) -> Result<DiagnosisVars> {
        let logits = g.param(self.gating_logits);
        if g.tape.shape(logits).1 != fused.len() {
            return Err(CopaError::Shape(format!(
                "gating has {} concepts, {} fused vectors given",
                g.tape.shape(logits).1,
                fused.len()
            )));
        }
        let alpha = g.tape.softmax_rows(logits);
        let stacked = g.tape.concat_rows(fused);
        let pooled = g.tape.matmul(alpha, stacked);
        let (w, b) = (g.param(self.head_weight), g.param(self.head_bias));
        let out = g.tape.matmul(pooled, w);
        let out = g.tape.add_row(out, b);
        Ok(DiagnosisVars {
            alpha,
            pooled,
            logits: out,
        })
    }

    /// Materializes a [`Diagnosis`] from tape nodes.
    pub fn read(g: &Graph<'_>, vars: DiagnosisVars) -> Diagnosis {
        Diagnosis::from_parts(
            g.value(vars.pooled).row(0).to_owned(),
            g.value(vars.logits).row(0).to_owned(),
            g.value(vars.alpha).row(0).to_owned(),
        )
    }
}

/// Inference helper: gated aggregation with explicit parameters.
pub fn gated_aggregate(
    fused: &[Array1<f64>],
    gating_logits: &Array1<f64>,
    head_weight: &Array2<f64>,
    head_bias: &Array1<f64>,
) -> Result<Diagnosis> {
    if fused.is_empty() {
        return Err(CopaError::Shape("at least one concept is required".into()));
    }
    let d = fused[0].len();
    if fused.iter().any(|f| f.len() != d) || head_weight.nrows() != d || head_bias.len() != head_weight.ncols() {
        return Err(CopaError::Shape("inconsistent fused/head dimensions".into()));
    }
    let mut store = ParamStore::new();
    let head = GatedHead {
        gating_logits: store.add("gating.logits", ParamGroup::Gating, gating_logits.clone().insert_axis(Axis(0))),
        head_weight: store.add("head.weight", ParamGroup::Head, head_weight.clone()),
        head_bias: store.add("head.bias", ParamGroup::Head, head_bias.clone().insert_axis(Axis(0))),
    };
    let mut g = Graph::inference(&store);
    let vars: Vec<Var> = fused
        .iter()
        .map(|f| g.tape.constant(f.clone().insert_axis(Axis(0))))
        .collect();
    let out = head.forward(&mut g, &vars)?;
    Ok(GatedHead::read(&g, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA }
    }
}

impl LossConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(CopaError::invalid("lambda", format!("{lambda} is outside [0, 1]")));
        }
        Ok(Self { lambda })
    }
}

/// `λ·L_con + (1-λ)·CE(ŷ, y)` on the tape.
pub fn total_loss_vars(g: &mut Graph<'_>, l_con: Var, class_logits: Var, label: usize, lambda: f64) -> Result<Var> {
    LossConfig::new(lambda)?;
    check_index("disease label", label, g.tape.shape(class_logits).1)?;
    let ce = g.tape.cross_entropy(class_logits, label);
    let a = g.tape.scale(l_con, lambda);
    let b = g.tape.scale(ce, 1.0 - lambda);
    Ok(g.tape.sum(&[a, b]))
}

/// Cross-entropy of class logits against a label.
pub fn cross_entropy(class_logits: &Array1<f64>, label: usize) -> Result<f64> {
    check_index("disease label", label, class_logits.len())?;
    let max = class_logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + class_logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - class_logits[label])
}

pub fn total_loss(l_con: f64, class_logits: &Array1<f64>, label: usize, lambda: f64) -> Result<f64> {
    LossConfig::new(lambda)?;
    let ce = cross_entropy(class_logits, label)?;
    Ok(lambda * l_con + (1.0 - lambda) * ce)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn head_params() -> (Array2<f64>, Array1<f64>) {
        (array![[1.0, -1.0], [0.5, 2.0]], array![0.1, -0.1])
    }

    #[test]
    fn one_hot_gate_selects_first_concept() {
        let (w, b) = head_params();
        let fused = vec![array![1.0, 0.0], array![0.0, 1.0]];
        let d = gated_aggregate(&fused, &array![0.0, -1e9], &w, &b).unwrap();
        assert_eq!(d.pooled, fused[0]);
    }

    #[test]
    fn equal_inputs_pool_to_themselves() {
        let (w, b) = head_params();
        let fused = vec![array![0.3, -0.7]; 3];
        let d = gated_aggregate(&fused, &array![0.2, 1.5, -0.4], &w, &b).unwrap();
        for (a, e) in d.pooled.iter().zip(fused[0].iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_pool_example() {
        let (w, b) = head_params();
        let fused = vec![array![1.0, 0.0], array![0.0, 1.0]];
        // softmax([0, ln 3]) = (0.25, 0.75)
        let d = gated_aggregate(&fused, &array![0.0, 3f64.ln()], &w, &b).unwrap();
        assert!((d.pooled[0] - 0.25).abs() < 1e-12);
        assert!((d.pooled[1] - 0.75).abs() < 1e-12);
        assert!((d.alpha.sum() - 1.0).abs() < 1e-12);
        let expected = array![0.25 * 1.0 + 0.75 * 0.5 + 0.1, 0.25 * -1.0 + 0.75 * 2.0 - 0.1];
        for (a, e) in d.logits.iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gating_logit_shift_is_invisible() {
        let (w, b) = head_params();
        let fused = vec![array![1.0, 0.2], array![-0.3, 1.0]];
        let a = gated_aggregate(&fused, &array![0.4, -0.2], &w, &b).unwrap();
        let c = gated_aggregate(&fused, &array![10.4, 9.8], &w, &b).unwrap();
        for (x, y) in a.logits.iter().zip(c.logits.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_loss_endpoints() {
        let logits = array![0.2, -0.5];
        let ce = cross_entropy(&logits, 1).unwrap();
        assert_eq!(total_loss(0.8, &logits, 1, 1.0).unwrap(), 0.8);
        assert_eq!(total_loss(0.8, &logits, 1, 0.0).unwrap(), ce);
        let ln2 = 2f64.ln();
        let l = total_loss(ln2, &array![0.0, 0.0], 0, 0.5).unwrap();
        assert!((l - ln2).abs() < 1e-15);
        assert!(total_loss(0.1, &logits, 0, 1.5).is_err());
        assert!(total_loss(0.1, &logits, 0, -0.1).is_err());
        assert!(total_loss(0.1, &logits, 2, 0.5).is_err());
    }
}
