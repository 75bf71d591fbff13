//! Central-difference verification of the composite loss gradient.

use std::fmt;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::encoder::BackboneConfig;
use crate::error::Result;
use crate::harness::train::sample_gradients;
use crate::model::{AblationFlags, CopaModel, ModelConfig};
use crate::params::ParamGroup;
use crate::schema::{ConceptDef, ConceptSchema};

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub group: ParamGroup,
    pub elements: usize,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)` over the group.
    pub relative_error: f64,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub groups: Vec<GroupError>,
    pub max_relative_error: f64,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "epsilon {:e}", self.epsilon)?;
        for g in &self.groups {
            writeln!(
                f,
                "  {:<12} {:>6} elements  rel {:.3e}  max abs {:.3e}",
                g.group.name(),
                g.elements,
                g.relative_error,
                g.max_abs_diff
            )?;
        }
        write!(f, "max relative error {:.3e}", self.max_relative_error)
    }
}

/// Two concepts, eight-wide, two layers, 8×8 images.
pub fn tiny_config(flags: AblationFlags) -> (ModelConfig, ConceptSchema) {
    let config = ModelConfig {
        backbone: BackboneConfig {
            layers: 2,
            dim: 8,
            heads: 2,
            image_size: 8,
            patch_size: 4,
            ..BackboneConfig::default()
        },
        flags,
        ..ModelConfig::default()
    };
    let mut schema = ConceptSchema::synthetic();
    schema.concepts = vec![
        ConceptDef {
            title: "Color".into(),
            candidates: vec!["red".into(), "green".into(), "blue".into()],
        },
        ConceptDef {
            title: "Texture".into(),
            candidates: vec!["striped".into(), "solid".into()],
        },
    ];
    (config, schema)
}

pub fn tiny_sample() -> Sample {
    Sample {
        id: "gradcheck".into(),
        image: Array3::from_shape_fn((8, 8, 3), |(y, x, c)| ((y * 7 + x * 3 + c * 5) % 13) as f64 / 13.0),
        concept_labels: vec![2, 0],
        disease_label: 1,
        bbox: None,
    }
}

/// Compares analytic gradients of the composite loss with central
/// differences for every element of every trainable parameter.
pub fn gradcheck(model: &CopaModel, sample: &Sample, epsilon: f64, lambda: f64) -> Result<GradCheckReport> {
    let (_, analytic) = sample_gradients(model, sample, lambda)?;
    let mut probe = model.clone();
    let mut per_group: Vec<(ParamGroup, usize, f64, f64, f64, f64)> = Vec::new();
    for (id, grad) in &analytic {
        let group = model.store.get(*id).group;
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (idx, &a) in grad.indexed_iter() {
            let orig = probe.store.value(*id)[idx];
            probe.store.value_mut(*id)[idx] = orig + epsilon;
            let up = probe.loss(&sample.image, &sample.concept_labels, sample.disease_label, lambda)?.total;
            probe.store.value_mut(*id)[idx] = orig - epsilon;
            let down = probe.loss(&sample.image, &sample.concept_labels, sample.disease_label, lambda)?.total;
            probe.store.value_mut(*id)[idx] = orig;
            let n = (up - down) / (2.0 * epsilon);
            diff2 += (a - n) * (a - n);
            a2 += a * a;
            n2 += n * n;
            max_abs = max_abs.max((a - n).abs());
        }
        match per_group.iter_mut().find(|g| g.0 == group) {
            Some(g) => {
                g.1 += grad.len();
                g.2 += diff2;
                g.3 += a2;
                g.4 += n2;
                g.5 = g.5.max(max_abs);
            }
            None => per_group.push((group, grad.len(), diff2, a2, n2, max_abs)),
        }
    }
    let groups: Vec<GroupError> = per_group
        .into_iter()
        .map(|(group, elements, d2, a2, n2, max_abs_diff)| {
            let denom = a2.sqrt().max(n2.sqrt()).max(f64::MIN_POSITIVE);
            GroupError {
                group,
                elements,
                relative_error: d2.sqrt() / denom,
                max_abs_diff,
            }
        })
        .collect();
    let max_relative_error = groups.iter().map(|g| g.relative_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        groups,
        max_relative_error,
    })
}

/// Builds the tiny model with a few non-trivial gating/selector values and
/// runs [`gradcheck`].
pub fn gradcheck_tiny(flags: AblationFlags, epsilon: f64, seed: u64) -> Result<GradCheckReport> {
    let (config, schema) = tiny_config(flags);
    let mut model = CopaModel::new(config, schema, seed)?;
    // Move off the symmetric zero initialization so softmax Jacobians matter.
    for (name, values) in [("gating.logits", vec![0.3, -0.2]), ("selector.logits", vec![0.4, -0.1, 0.2, 0.5])] {
        if let Some(id) = model.store.find(name) {
            let p = model.store.value_mut(id);
            for (v, x) in p.iter_mut().zip(values.iter().cycle()) {
                *v = *x;
            }
        }
    }
    gradcheck(&model, &tiny_sample(), epsilon, crate::diagnosis::DEFAULT_LAMBDA)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_model_gradients_match() {
        let flags = AblationFlags {
            fvb: false,
            ..AblationFlags::default()
        };
        let r = gradcheck_tiny(flags, DEFAULT_EPSILON, 3).unwrap();
        assert!(r.max_relative_error < 1e-4, "{r}");
        assert!(r.groups.iter().any(|g| g.group == ParamGroup::Backbone));
    }

    #[test]
    fn frozen_backbone_is_excluded() {
        let r = gradcheck_tiny(AblationFlags::default(), DEFAULT_EPSILON, 4).unwrap();
        assert!(r.groups.iter().all(|g| g.group != ParamGroup::Backbone));
        for g in [ParamGroup::Anchors, ParamGroup::Ceg, ParamGroup::Selector, ParamGroup::Temperature, ParamGroup::Gating, ParamGroup::Head] {
            assert!(r.groups.iter().any(|e| e.group == g), "{g:?} missing");
        }
        assert!(r.max_relative_error < 1e-4, "{r}");
    }

    #[test]
    fn halving_epsilon_does_not_blow_up() {
        let a = gradcheck_tiny(AblationFlags::default(), 1e-4, 5).unwrap();
        let b = gradcheck_tiny(AblationFlags::default(), 5e-5, 5).unwrap();
        assert!(b.max_relative_error <= a.max_relative_error * 1.5 + 1e-9, "{a}\n{b}");
    }
}
