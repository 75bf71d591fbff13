//! Named parameter tensors and their trainable partition.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Grads, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The vision transformer weights θ.
    Backbone,
    Anchors,
    Ceg,
    Selector,
    Temperature,
    Gating,
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Backbone,
        ParamGroup::Anchors,
        ParamGroup::Ceg,
        ParamGroup::Selector,
        ParamGroup::Temperature,
        ParamGroup::Gating,
        ParamGroup::Head,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Anchors => "anchors",
            ParamGroup::Ceg => "ceg",
            ParamGroup::Selector => "selector",
            ParamGroup::Temperature => "temperature",
            ParamGroup::Gating => "gating",
            ParamGroup::Head => "head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Array2<f64>) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Parameter { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn element_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and the little-endian bytes of every value.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub(crate) fn from_parts(params: Vec<Parameter>) -> Self {
        Self { params }
    }
}

/// Which parameter groups receive gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableMask {
    groups: [bool; 7],
}

impl TrainableMask {
    pub fn none() -> Self {
        Self { groups: [false; 7] }
    }

    pub fn all() -> Self {
        Self { groups: [true; 7] }
    }

    /// Everything except the backbone when `freeze_backbone` is set.
    pub fn for_backbone(freeze_backbone: bool) -> Self {
        let mut m = Self::all();
        m.set(ParamGroup::Backbone, !freeze_backbone);
        m
    }

    pub fn set(&mut self, group: ParamGroup, trainable: bool) {
        self.groups[group as usize] = trainable;
    }

    pub fn contains(&self, group: ParamGroup) -> bool {
        self.groups[group as usize]
    }
}

/// The exact frozen/trainable split of named tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub frozen: BTreeSet<String>,
    pub trainable: BTreeSet<String>,
}

/// A tape bound to a parameter store. Parameters are bound lazily as
/// borrowed leaves.
pub struct Graph<'a> {
    pub tape: Tape<'a>,
    store: &'a ParamStore,
    mask: TrainableMask,
    bound: Vec<Option<Var>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mask: TrainableMask) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mask,
            bound: vec![None; store.len()],
        }
    }

    /// Graph with no trainable parameters, for inference.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, TrainableMask::none())
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.borrowed(&p.value, self.mask.contains(p.group));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        self.tape.value(v)
    }

    /// Runs backward from `loss` and returns gradients for every bound,
    /// trainable parameter.
    pub fn param_grads(&self, loss: Var) -> Vec<(ParamId, Array2<f64>)> {
        let mut grads: Grads = self.tape.backward(loss);
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !self.tape.requires_grad(v) {
                    return None;
                }
                grads.take(v).map(|g| (ParamId(i), g))
            })
            .collect()
    }
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}
