//! Concept-aware embedding generator: learnable concept anchors query a
//! depth's token map through single-head cross-attention, followed by a
//! residual feed-forward map and layer normalization. A per-concept linear
//! selector mixes the depth-wise embeddings into one embedding per concept.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, Var};
use crate::error::{CopaError, Result};
use crate::params::{gaussian, Graph, ParamGroup, ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct CegWeights {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl CegWeights {
    pub fn ids(&self) -> [ParamId; 6] {
        [
            self.fc1_weight,
            self.fc1_bias,
            self.fc2_weight,
            self.fc2_bias,
            self.ln_gamma,
            self.ln_beta,
        ]
    }
}

/// Anchors (one row per concept) plus the shared FFN/LN weights. When built
/// with `per_depth = true`, each depth gets its own FFN/LN while anchors stay
/// shared.
#[derive(Debug, Clone)]
pub struct ConceptEmbeddingGenerator {
    pub anchors: ParamId,
    pub weights: Vec<CegWeights>,
    /// Key width in the `1/sqrt(d_k)` scaling.
    pub key_dim: usize,
    pub ln_eps: f64,
}

/// CEG outputs at one depth, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct CegVars {
    /// `N × d` concept embeddings.
    pub z: Var,
    /// `N × m` attention rows over the key tokens.
    pub attention: Var,
}

/// Materialized CEG output at one depth.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerConceptEmbeddings {
    pub z: Array2<f64>,
    pub attention: Array2<f64>,
}

impl ConceptEmbeddingGenerator {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        n_concepts: usize,
        dim: usize,
        hidden: usize,
        n_weight_sets: usize,
        ln_eps: f64,
    ) -> Self {
        let anchors = store.add("ceg.anchors", ParamGroup::Anchors, gaussian(rng, n_concepts, dim, 1.0));
        let g = ParamGroup::Ceg;
        let weights = (0..n_weight_sets)
            .map(|s| {
                let prefix = if n_weight_sets == 1 {
                    "ceg".to_string()
                } else {
                    format!("ceg.depth{s}")
                };
                CegWeights {
                    fc1_weight: store.add(
                        format!("{prefix}.ffn.fc1.weight"),
                        g,
                        gaussian(rng, dim, hidden, 1.0 / (dim as f64).sqrt()),
                    ),
                    fc1_bias: store.add(format!("{prefix}.ffn.fc1.bias"), g, Array2::zeros((1, hidden))),
                    fc2_weight: store.add(
                        format!("{prefix}.ffn.fc2.weight"),
                        g,
                        gaussian(rng, hidden, dim, 1.0 / (hidden as f64).sqrt()),
                    ),
                    fc2_bias: store.add(format!("{prefix}.ffn.fc2.bias"), g, Array2::zeros((1, dim))),
                    ln_gamma: store.add(format!("{prefix}.ln.gamma"), g, Array2::ones((1, dim))),
                    ln_beta: store.add(format!("{prefix}.ln.beta"), g, Array2::zeros((1, dim))),
                }
            })
            .collect();
        Self {
            anchors,
            weights,
            key_dim: dim,
            ln_eps,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.anchors];
        for w in &self.weights {
            ids.extend(w.ids());
        }
        ids
    }

    fn weights_for(&self, depth: usize) -> &CegWeights {
        if self.weights.len() == 1 {
            &self.weights[0]
        } else {
            &self.weights[depth.min(self.weights.len() - 1)]
        }
    }

    /// `z = LN(FFN(softmax(q Kᵀ / sqrt(d_k)) V) + q)` for every anchor row,
    /// with keys and values both equal to `token_map`.
    pub fn forward(&self, g: &mut Graph<'_>, token_map: Var, depth: usize) -> Result<CegVars> {
        let q = g.param(self.anchors);
        let (m, width) = g.tape.shape(token_map);
        if m == 0 {
            return Err(CopaError::Shape("token map has no rows".into()));
        }
        if width != g.tape.shape(q).1 {
            return Err(CopaError::Shape(format!(
                "token width {width} != anchor width {}",
                g.tape.shape(q).1
            )));
        }
        let (zhat, attention) = cross_attend_vars(g, q, token_map, token_map, self.key_dim);
        let w = self.weights_for(depth);
        let (w1, b1, w2, b2) = (
            g.param(w.fc1_weight),
            g.param(w.fc1_bias),
            g.param(w.fc2_weight),
            g.param(w.fc2_bias),
        );
        let h = g.tape.matmul(zhat, w1);
        let h = g.tape.add_row(h, b1);
        let h = g.tape.gelu(h);
        let h = g.tape.matmul(h, w2);
        let h = g.tape.add_row(h, b2);
        let h = g.tape.add(h, q);
        let (gamma, beta) = (g.param(w.ln_gamma), g.param(w.ln_beta));
        let z = g.tape.layer_norm(h, gamma, beta, self.ln_eps);
        Ok(CegVars { z, attention })
    }
}

/// Single-head scaled dot-product cross-attention for a batch of query rows.
/// Returns `(output, attention)`.
pub fn cross_attend_vars(g: &mut Graph<'_>, q: Var, k: Var, v: Var, key_dim: usize) -> (Var, Var) {
    let logits = g.tape.matmul_t(q, k);
    let logits = g.tape.scale(logits, 1.0 / (key_dim as f64).sqrt());
    let attn = g.tape.softmax_rows(logits);
    (g.tape.matmul(attn, v), attn)
}

/// `softmax(q·Kᵀ / sqrt(d_k)) · V` for one query vector.
pub fn cross_attend(
    q: ArrayView1<'_, f64>,
    keys: ArrayView2<'_, f64>,
    values: ArrayView2<'_, f64>,
    key_dim: usize,
) -> Result<Array1<f64>> {
    let m = keys.nrows();
    if m == 0 {
        return Err(CopaError::Shape("cross_attend needs at least one key".into()));
    }
    if values.nrows() != m || keys.ncols() != q.len() {
        return Err(CopaError::Shape(format!(
            "q {}, keys {:?}, values {:?}",
            q.len(),
            keys.dim(),
            values.dim()
        )));
    }
    let empty = ParamStore::new();
    let mut g = Graph::inference(&empty);
    let qv = g.tape.constant(q.to_owned().insert_axis(ndarray::Axis(0)));
    let kv = g.tape.constant(keys.to_owned());
    let vv = g.tape.constant(values.to_owned());
    let (out, _) = cross_attend_vars(&mut g, qv, kv, vv, key_dim);
    Ok(g.value(out).row(0).to_owned())
}

/// Inference wrapper around [`ConceptEmbeddingGenerator::forward`].
pub fn ceg_forward(
    ceg: &ConceptEmbeddingGenerator,
    store: &ParamStore,
    token_map: &Array2<f64>,
    depth: usize,
) -> Result<LayerConceptEmbeddings> {
    let mut g = Graph::inference(store);
    let t = g.tape.constant(token_map.clone());
    let out = ceg.forward(&mut g, t, depth)?;
    Ok(LayerConceptEmbeddings {
        z: g.value(out.z).clone(),
        attention: g.value(out.attention).clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectorMode {
    /// One row of depth logits per concept.
    #[default]
    PerConcept,
    /// A single row shared by all concepts.
    Global,
}

/// Softmax-over-depth mixing of per-depth concept embeddings.
#[derive(Debug, Clone)]
pub struct LayerSelector {
    pub logits: ParamId,
    pub mode: SelectorMode,
    /// Depth indices (into the trace) that participate, in order.
    pub depths: Vec<usize>,
}

impl LayerSelector {
    pub fn new(store: &mut ParamStore, n_concepts: usize, depths: Vec<usize>, mode: SelectorMode) -> Self {
        let rows = match mode {
            SelectorMode::PerConcept => n_concepts,
            SelectorMode::Global => 1,
        };
        let logits = store.add("selector.logits", ParamGroup::Selector, Array2::zeros((rows, depths.len())));
        Self { logits, mode, depths }
    }

    /// `N × D` mixing weights (rows sum to one).
    pub fn mixing_weights(&self, store: &ParamStore, n_concepts: usize) -> Array2<f64> {
        let w = softmax_rows(store.value(self.logits));
        match self.mode {
            SelectorMode::PerConcept => w,
            SelectorMode::Global => {
                let row = w.row(0).to_owned();
                Array2::from_shape_fn((n_concepts, row.len()), |(_, j)| row[j])
            }
        }
    }

    /// `Z^i = Σ_l softmax(w_i)_l · z_l^i` over `self.depths`. `per_depth`
    /// holds one `N × d` node per entry of `self.depths`.
    pub fn aggregate(&self, g: &mut Graph<'_>, per_depth: &[Var]) -> Result<(Var, Var)> {
        if per_depth.len() != self.depths.len() || per_depth.is_empty() {
            return Err(CopaError::Shape(format!(
                "selector expects {} depths, got {}",
                self.depths.len(),
                per_depth.len()
            )));
        }
        let logits = g.param(self.logits);
        let weights = g.tape.softmax_rows(logits);
        let n = g.tape.shape(per_depth[0]).0;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let wi = match self.mode {
                SelectorMode::PerConcept => g.tape.slice_rows(weights, i, i + 1),
                SelectorMode::Global => weights,
            };
            let stacked: Vec<Var> = per_depth.iter().map(|z| g.tape.slice_rows(*z, i, i + 1)).collect();
            let stacked = g.tape.concat_rows(&stacked);
            rows.push(g.tape.matmul(wi, stacked));
        }
        Ok((g.tape.concat_rows(&rows), weights))
    }
}

/// Mixes per-depth embeddings with explicit selector logits (`N × D` or
/// `1 × D`). Inference helper for [`LayerSelector::aggregate`].
pub fn aggregate_layers(per_depth: &[Array2<f64>], logits: &Array2<f64>) -> Result<Array2<f64>> {
    if per_depth.is_empty() {
        return Err(CopaError::Shape("no depth entries".into()));
    }
    let n = per_depth[0].nrows();
    if logits.ncols() != per_depth.len() {
        return Err(CopaError::Shape(format!(
            "selector has {} depth columns, {} depths given",
            logits.ncols(),
            per_depth.len()
        )));
    }
    let mode = match logits.nrows() {
        1 if n != 1 => SelectorMode::Global,
        r if r == n => SelectorMode::PerConcept,
        r => return Err(CopaError::Shape(format!("selector has {r} rows for {n} concepts"))),
    };
    let mut store = ParamStore::new();
    let id = store.add("selector.logits", ParamGroup::Selector, logits.clone());
    let selector = LayerSelector {
        logits: id,
        mode,
        depths: (0..per_depth.len()).collect(),
    };
    let mut g = Graph::inference(&store);
    let vars: Vec<Var> = per_depth.iter().map(|z| g.tape.constant(z.clone())).collect();
    let (out, _) = selector.aggregate(&mut g, &vars)?;
    Ok(g.value(out).clone())
}
