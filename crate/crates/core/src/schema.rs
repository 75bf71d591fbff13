//! Concept vocabulary: concept titles, candidate sets, the text template and
//! disease classes.
//!
//! Schema files are TOML:
//!
//! ```toml
//! modality_preamble = "This is a dermoscopic image"
//! template = "the {concept} of the lesion is {candidate}"
//! disease_classes = ["nevus", "melanoma"]
//!
//! [[concepts]]
//! title = "Pigment Network"
//! candidates = ["atypical", "typical"]
//! ```
//!
//! Candidate order is canonical: ground-truth indices refer to positions in
//! `candidates`.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_index, CopaError, Result};

pub const CONCEPT_PLACEHOLDER: &str = "{concept}";
pub const CANDIDATE_PLACEHOLDER: &str = "{candidate}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDef {
    pub title: String,
    pub candidates: Vec<String>,
}

impl ConceptDef {
    pub fn k(&self) -> usize {
        self.candidates.len()
    }

    pub fn candidate_index(&self, phrase: &str) -> Option<usize> {
        self.candidates.iter().position(|c| c == phrase)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSchema {
    #[serde(default)]
    pub modality_preamble: String,
    pub template: String,
    pub disease_classes: Vec<String>,
    pub concepts: Vec<ConceptDef>,
}

impl ConceptSchema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CopaError::io(path, e))?;
        Self::parse_with_origin(&text, &path.display().to_string())
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_origin(text, "<schema>")
    }

    fn parse_with_origin(text: &str, origin: &str) -> Result<Self> {
        let schema: ConceptSchema = toml::from_str(text).map_err(|e| CopaError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        schema.validate()?;
        Ok(schema)
    }

    /// The three-concept shape/color/texture vocabulary used by the
    /// synthetic generator.
    pub fn synthetic() -> Self {
        Self::parse(include_str!("../fixtures/synthetic_schema.toml"))
            .expect("bundled synthetic schema is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.concepts.is_empty() {
            return Err(CopaError::invalid("concepts", "at least one concept is required"));
        }
        let mut titles = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            if c.title.trim().is_empty() {
                return Err(CopaError::invalid(format!("concepts[{i}].title"), "empty title"));
            }
            if !titles.insert(c.title.as_str()) {
                return Err(CopaError::invalid(
                    format!("concepts[{i}].title"),
                    format!("duplicate concept title {:?}", c.title),
                ));
            }
            if c.candidates.len() < 2 {
                return Err(CopaError::invalid(
                    format!("concepts[{i}].candidates"),
                    format!("need at least 2 candidates, found {}", c.candidates.len()),
                ));
            }
            let mut seen = HashSet::new();
            for (j, cand) in c.candidates.iter().enumerate() {
                if !seen.insert(cand.as_str()) {
                    return Err(CopaError::invalid(
                        format!("concepts[{i}].candidates[{j}]"),
                        format!("duplicate candidate {cand:?}"),
                    ));
                }
            }
        }
        if self.disease_classes.len() < 2 {
            return Err(CopaError::invalid(
                "disease_classes",
                format!("need at least 2 classes, found {}", self.disease_classes.len()),
            ));
        }
        let mut seen = HashSet::new();
        for (j, name) in self.disease_classes.iter().enumerate() {
            if !seen.insert(name.as_str()) {
                return Err(CopaError::invalid(
                    format!("disease_classes[{j}]"),
                    format!("duplicate class {name:?}"),
                ));
            }
        }
        for ph in [CONCEPT_PLACEHOLDER, CANDIDATE_PLACEHOLDER] {
            let count = self.template.matches(ph).count();
            if count != 1 {
                return Err(CopaError::invalid(
                    "template",
                    format!("placeholder {ph} must appear exactly once, found {count}"),
                ));
            }
        }
        let stripped = self
            .template
            .replace(CONCEPT_PLACEHOLDER, "")
            .replace(CANDIDATE_PLACEHOLDER, "");
        if stripped.contains('{') || stripped.contains('}') {
            return Err(CopaError::invalid(
                "template",
                "only {concept} and {candidate} placeholders are allowed",
            ));
        }
        Ok(())
    }

    /// Number of concepts, N.
    pub fn n_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn n_classes(&self) -> usize {
        self.disease_classes.len()
    }

    /// Candidate-set sizes k_i.
    pub fn candidate_counts(&self) -> Vec<usize> {
        self.concepts.iter().map(ConceptDef::k).collect()
    }

    pub fn concept_index(&self, title: &str) -> Option<usize> {
        self.concepts.iter().position(|c| c.title == title)
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.disease_classes.iter().position(|c| c == name)
    }

    /// Text prompt for candidate `j` of concept `i` (both zero-based).
    /// Concept titles are lower-cased inside the template.
    pub fn render_prompt(&self, i: usize, j: usize) -> Result<String> {
        check_index("concept", i, self.concepts.len())?;
        let concept = &self.concepts[i];
        check_index("candidate", j, concept.candidates.len())?;
        let body = self
            .template
            .replace(CONCEPT_PLACEHOLDER, &concept.title.to_lowercase())
            .replace(CANDIDATE_PLACEHOLDER, &concept.candidates[j]);
        let preamble = self.modality_preamble.trim();
        Ok(if preamble.is_empty() {
            body
        } else {
            format!("{preamble}, {body}")
        })
    }

    /// Stable content hash, stored in checkpoints.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schema serializes")
    }
}
