//! The full concept-bottleneck pipeline: backbone with concept prompts,
//! multilayer concept embeddings, text alignment and gated diagnosis.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    contrastive_loss_vars, fuse_vars, score_vars, AlignmentScores, CandidateEmbeddings, ConceptPrediction,
    ConceptScores, Temperature,
};
use crate::autodiff::Var;
use crate::ceg::{CegVars, ConceptEmbeddingGenerator, LayerConceptEmbeddings, LayerSelector, SelectorMode};
use crate::diagnosis::{total_loss_vars, Diagnosis, DiagnosisVars, GatedHead};
use crate::encoder::{BackboneConfig, HashTextEncoder, Image, LayerTrace, TextEncoder, TraceVars, VisionBackbone, DEFAULT_TEXT_SEED};
use crate::error::{check_index, CopaError, Result};
use crate::params::{Graph, ParamGroup, ParamStore, Partition, TrainableMask};
use crate::schema::ConceptSchema;

/// Component toggles: multilayer aggregation, concept prompt tuning and the
/// frozen vision backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    pub mla: bool,
    pub cpt: bool,
    pub fvb: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            mla: true,
            cpt: true,
            fvb: true,
        }
    }
}

impl AblationFlags {
    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "on" } else { "off" };
        format!("MLA={} CPT={} FVB={}", mark(self.mla), mark(self.cpt), mark(self.fvb))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Hidden width of the CEG feed-forward map; defaults to `2·d`.
    #[serde(default)]
    pub ceg_hidden: Option<usize>,
    #[serde(default)]
    pub flags: AblationFlags,
    #[serde(default)]
    pub selector: SelectorMode,
    /// Whether the post-embedding token map (depth 0) joins the aggregation.
    #[serde(default)]
    pub include_depth0: bool,
    /// Separate CEG FFN/LN weights per depth (anchors stay shared).
    #[serde(default)]
    pub per_depth_ceg: bool,
    #[serde(default = "default_text_seed")]
    pub text_seed: u64,
}

fn default_text_seed() -> u64 {
    DEFAULT_TEXT_SEED
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            ceg_hidden: None,
            flags: AblationFlags::default(),
            selector: SelectorMode::PerConcept,
            include_depth0: false,
            per_depth_ceg: false,
            text_seed: DEFAULT_TEXT_SEED,
        }
    }
}

impl ModelConfig {
    pub fn ceg_hidden(&self) -> usize {
        self.ceg_hidden.unwrap_or(2 * self.backbone.dim)
    }

    /// Trace depths mixed by the selector.
    pub fn aggregated_depths(&self) -> Vec<usize> {
        let start = if self.include_depth0 { 0 } else { 1 };
        (start..=self.backbone.layers).collect()
    }
}

#[derive(Debug, Clone)]
pub struct CopaModel {
    pub config: ModelConfig,
    pub schema: ConceptSchema,
    pub store: ParamStore,
    pub backbone: VisionBackbone,
    pub ceg: ConceptEmbeddingGenerator,
    pub selector: LayerSelector,
    pub temperature: Temperature,
    pub head: GatedHead,
    pub candidates: CandidateEmbeddings,
}

/// Every intermediate node of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub trace: TraceVars,
    /// CEG outputs at depths `0..=L`.
    pub ceg: Vec<CegVars>,
    /// Aggregated `N × d` concept embeddings.
    pub concept_embeddings: Var,
    pub selector_weights: Option<Var>,
    pub concept_logits: Vec<Var>,
    pub concept_probabilities: Vec<Var>,
    pub fused: Vec<Var>,
    pub diagnosis: DiagnosisVars,
}

/// Inference output with explanation artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub diagnosis: Diagnosis,
    pub scores: AlignmentScores,
    pub concepts: Vec<ConceptPrediction>,
    /// Trace depths in the columns of `selector_weights`.
    pub selector_depths: Vec<usize>,
    /// Effective `N × D` depth mixing weights; one-hot on the last depth when
    /// multilayer aggregation is off.
    pub selector_weights: Array2<f64>,
    /// CEG attention (`N × m`) at each depth `0..=L`; column 0 is the class token.
    pub ceg_attention: Vec<Array2<f64>>,
    pub concept_embeddings: Array2<f64>,
}

/// Scalar loss pieces for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub concept: f64,
    pub diagnosis: f64,
}

impl CopaModel {
    /// Builds a randomly initialized model with the hash text encoder.
    pub fn new(config: ModelConfig, schema: ConceptSchema, seed: u64) -> Result<Self> {
        let encoder = HashTextEncoder::new(config.backbone.dim, config.text_seed);
        Self::with_text_encoder(config, schema, seed, &encoder)
    }

    pub fn with_text_encoder(
        config: ModelConfig,
        schema: ConceptSchema,
        seed: u64,
        encoder: &dyn TextEncoder,
    ) -> Result<Self> {
        config.backbone.validate()?;
        schema.validate()?;
        if encoder.dim() != config.backbone.dim {
            return Err(CopaError::invalid(
                "text_encoder",
                format!("width {} != backbone width {}", encoder.dim(), config.backbone.dim),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let n = schema.n_concepts();
        let d = config.backbone.dim;
        let backbone = VisionBackbone::new(config.backbone.clone(), &mut store, &mut rng)?;
        let weight_sets = if config.per_depth_ceg { config.backbone.layers + 1 } else { 1 };
        let ceg = ConceptEmbeddingGenerator::new(
            &mut store,
            &mut rng,
            n,
            d,
            config.ceg_hidden(),
            weight_sets,
            config.backbone.ln_eps,
        );
        let selector = LayerSelector::new(&mut store, n, config.aggregated_depths(), config.selector);
        let temperature = Temperature::new(&mut store);
        let head = GatedHead::new(&mut store, &mut rng, n, d, schema.n_classes());
        let candidates = CandidateEmbeddings::build(&schema, encoder)?;
        Ok(Self {
            config,
            schema,
            store,
            backbone,
            ceg,
            selector,
            temperature,
            head,
            candidates,
        })
    }

    /// Rebuilds the structural handles over an existing parameter store (used
    /// when loading checkpoints). Parameter names must match exactly.
    pub(crate) fn from_store(config: ModelConfig, schema: ConceptSchema, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, schema, 0)?;
        if model.store.len() != store.len() {
            return Err(CopaError::Checkpoint(format!(
                "expected {} parameters, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, fresh), (_, loaded)) in model.store.iter().zip(store.iter()) {
            if fresh.name != loaded.name || fresh.value.dim() != loaded.value.dim() || fresh.group != loaded.group {
                return Err(CopaError::Checkpoint(format!(
                    "parameter mismatch: expected {} {:?}, found {} {:?}",
                    fresh.name,
                    fresh.value.dim(),
                    loaded.name,
                    loaded.value.dim()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn n_concepts(&self) -> usize {
        self.schema.n_concepts()
    }

    pub fn flags(&self) -> AblationFlags {
        self.config.flags
    }

    pub fn set_flags(&mut self, flags: AblationFlags) {
        self.config.flags = flags;
    }

    /// Groups that receive gradient under the current flags.
    pub fn trainable_mask(&self) -> TrainableMask {
        TrainableMask::for_backbone(self.config.flags.fvb)
    }

    /// The frozen/trainable split of every named tensor, including the frozen
    /// text-side candidate embeddings.
    pub fn partition(&self) -> Partition {
        let mask = self.trainable_mask();
        let mut p = Partition {
            frozen: Default::default(),
            trainable: Default::default(),
        };
        for (_, param) in self.store.iter() {
            if mask.contains(param.group) {
                p.trainable.insert(param.name.clone());
            } else {
                p.frozen.insert(param.name.clone());
            }
        }
        for i in 0..self.candidates.n_concepts() {
            p.frozen.insert(format!("text_encoder.candidates.{i}"));
        }
        p
    }

    /// Freezes the backbone and returns the resulting partition.
    pub fn freeze_backbone(&mut self) -> Partition {
        self.config.flags.fvb = true;
        self.partition()
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    /// Builds the forward graph for one image.
    pub fn forward_graph<'a>(&'a self, g: &mut Graph<'a>, image: &Image) -> Result<ForwardVars> {
        let layers = self.config.backbone.layers;
        let mut cache: Vec<Option<CegVars>> = vec![None; layers + 1];
        let ceg = &self.ceg;
        let trace = if self.config.flags.cpt {
            let mut prompt = |g: &mut Graph<'_>, map: Var, depth: usize| -> Result<Var> {
                let out = ceg.forward(g, map, depth)?;
                cache[depth] = Some(out);
                Ok(out.z)
            };
            self.backbone.encode_with_prompts(g, image, Some(&mut prompt))?
        } else {
            self.backbone.encode_with_prompts(g, image, None)?
        };
        let mut ceg_out = Vec::with_capacity(layers + 1);
        for (depth, cached) in cache.into_iter().enumerate() {
            let out = match cached {
                Some(c) => c,
                None => ceg.forward(g, trace.token_maps[depth], depth)?,
            };
            ceg_out.push(out);
        }

        let (concept_embeddings, selector_weights) = if self.config.flags.mla {
            let per_depth: Vec<Var> = self.selector.depths.iter().map(|&d| ceg_out[d].z).collect();
            let (z, w) = self.selector.aggregate(g, &per_depth)?;
            (z, Some(w))
        } else {
            (ceg_out[layers].z, None)
        };
        for (i, row) in g.value(concept_embeddings).rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(CopaError::Shape(format!("concept {i} embedding has norm {norm}")));
            }
        }

        let inv_tau = self.temperature.inverse_var(g);
        let n = self.n_concepts();
        let mut concept_logits = Vec::with_capacity(n);
        let mut concept_probabilities = Vec::with_capacity(n);
        let mut fused = Vec::with_capacity(n);
        for (i, t) in self.candidates.per_concept.iter().enumerate() {
            let z = g.tape.slice_rows(concept_embeddings, i, i + 1);
            let tv = g.tape.borrowed(t, false);
            let logits = score_vars(g, z, tv, inv_tau);
            let probs = g.tape.softmax_rows(logits);
            fused.push(fuse_vars(g, probs, tv));
            concept_logits.push(logits);
            concept_probabilities.push(probs);
        }
        let diagnosis = self.head.forward(g, &fused)?;
        Ok(ForwardVars {
            trace,
            ceg: ceg_out,
            concept_embeddings,
            selector_weights,
            concept_logits,
            concept_probabilities,
            fused,
            diagnosis,
        })
    }

    /// Composite loss node for one labelled sample.
    pub fn loss_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        image: &Image,
        concept_labels: &[usize],
        disease_label: usize,
        lambda: f64,
    ) -> Result<(Var, ForwardVars, Var)> {
        if concept_labels.len() != self.n_concepts() {
            return Err(CopaError::Shape(format!(
                "{} concept labels for {} concepts",
                concept_labels.len(),
                self.n_concepts()
            )));
        }
        let fwd = self.forward_graph(g, image)?;
        let l_con = contrastive_loss_vars(g, &fwd.concept_logits, concept_labels)?;
        let loss = total_loss_vars(g, l_con, fwd.diagnosis.logits, disease_label, lambda)?;
        Ok((loss, fwd, l_con))
    }

    /// Scalar loss for one sample (no gradient).
    pub fn loss(&self, image: &Image, concept_labels: &[usize], disease_label: usize, lambda: f64) -> Result<LossParts> {
        let mut g = Graph::inference(&self.store);
        let (loss, fwd, l_con) = self.loss_graph(&mut g, image, concept_labels, disease_label, lambda)?;
        let ce = crate::diagnosis::cross_entropy(&g.value(fwd.diagnosis.logits).row(0).to_owned(), disease_label)?;
        Ok(LossParts {
            total: g.tape.scalar(loss),
            concept: g.tape.scalar(l_con),
            diagnosis: ce,
        })
    }

    pub fn predict(&self, image: &Image) -> Result<Prediction> {
        let mut g = Graph::inference(&self.store);
        let fwd = self.forward_graph(&mut g, image)?;
        Ok(self.read_prediction(&g, &fwd))
    }

    fn read_prediction(&self, g: &Graph<'_>, fwd: &ForwardVars) -> Prediction {
        let scores: AlignmentScores = fwd
            .concept_logits
            .iter()
            .zip(&fwd.concept_probabilities)
            .map(|(l, p)| ConceptScores {
                logits: g.value(*l).row(0).to_owned(),
                probabilities: g.value(*p).row(0).to_owned(),
            })
            .collect();
        let concepts = scores.iter().map(ConceptScores::predicted).collect();
        let n = self.n_concepts();
        let (selector_depths, selector_weights) = match fwd.selector_weights {
            Some(w) => {
                let w = g.value(w);
                let full = if w.nrows() == n {
                    w.clone()
                } else {
                    Array2::from_shape_fn((n, w.ncols()), |(_, j)| w[[0, j]])
                };
                (self.selector.depths.clone(), full)
            }
            None => (vec![self.config.backbone.layers], Array2::ones((n, 1))),
        };
        Prediction {
            diagnosis: GatedHead::read(g, fwd.diagnosis),
            scores,
            concepts,
            selector_depths,
            selector_weights,
            ceg_attention: fwd.ceg.iter().map(|c| g.value(c.attention).clone()).collect(),
            concept_embeddings: g.value(fwd.concept_embeddings).clone(),
        }
    }

    /// Token maps, prompts and CEG outputs for every depth.
    pub fn trace(&self, image: &Image) -> Result<(LayerTrace, Vec<LayerConceptEmbeddings>)> {
        let mut g = Graph::inference(&self.store);
        let fwd = self.forward_graph(&mut g, image)?;
        let trace = LayerTrace {
            token_maps: fwd.trace.token_maps.iter().map(|v| g.value(*v).clone()).collect(),
            prompts: fwd
                .trace
                .prompts
                .iter()
                .map(|p| p.map(|v| g.value(v).clone()))
                .collect(),
        };
        let ceg = fwd
            .ceg
            .iter()
            .map(|c| LayerConceptEmbeddings {
                z: g.value(c.z).clone(),
                attention: g.value(c.attention).clone(),
            })
            .collect();
        Ok((trace, ceg))
    }

    /// Re-runs fusion and diagnosis from explicit per-concept candidate
    /// probabilities (the concept bottleneck).
    pub fn diagnose_from_probabilities(&self, probabilities: &[Array1<f64>]) -> Result<Diagnosis> {
        if probabilities.len() != self.n_concepts() {
            return Err(CopaError::Shape(format!(
                "{} probability vectors for {} concepts",
                probabilities.len(),
                self.n_concepts()
            )));
        }
        let mut g = Graph::inference(&self.store);
        let mut fused = Vec::with_capacity(probabilities.len());
        for (i, (p, t)) in probabilities.iter().zip(&self.candidates.per_concept).enumerate() {
            if p.len() != t.nrows() {
                return Err(CopaError::Shape(format!(
                    "concept {i}: {} probabilities for {} candidates",
                    p.len(),
                    t.nrows()
                )));
            }
            let pv = g.tape.constant(p.clone().insert_axis(Axis(0)));
            let tv = g.tape.borrowed(t, false);
            fused.push(fuse_vars(&mut g, pv, tv));
        }
        let out = self.head.forward(&mut g, &fused)?;
        Ok(GatedHead::read(&g, out))
    }

    pub fn class_name(&self, index: usize) -> Result<&str> {
        check_index("disease class", index, self.schema.n_classes())?;
        Ok(&self.schema.disease_classes[index])
    }

    pub fn params_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.store
            .iter()
            .filter(|(_, p)| p.group == group)
            .map(|(_, p)| p.name.clone())
            .collect()
    }
}
