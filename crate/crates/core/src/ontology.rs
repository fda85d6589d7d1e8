//! Component ontology, image references and manifest loading.
//!
//! An ontology is the list of target components the engine retrieves. Each
//! entry carries its state vocabulary and optional hints used when a VLM
//! reply needs a refined prompt. Attributes the detector was never trained
//! on are ordinary entries with `detector_known = false`.

use std::collections::HashSet;
use std::io::{BufRead, Read};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("malformed ontology document: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("ontology has no components")]
    Empty,
    #[error("component at index {index} has an empty id")]
    EmptyId { index: usize },
    #[error("duplicate component id \"{0}\"")]
    DuplicateId(String),
    #[error("component \"{id}\" lists state option \"{label}\" more than once")]
    DuplicateState { id: String, label: String },
    #[error("component \"{id}\" uses reserved state label \"{label}\"")]
    ReservedState { id: String, label: String },
    #[error("i/o error reading ontology: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {source}")]
    Syntax {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("manifest line {line}: empty image_id")]
    EmptyId { line: usize },
    #[error("manifest line {line}: duplicate image_id \"{id}\"")]
    DuplicateId { line: usize, id: String },
    #[error("i/o error reading manifest: {0}")]
    Io(#[from] std::io::Error),
}

/// State label for absent or undetermined components.
pub const STATE_NA: &str = "N/A";
/// State label for an existing component whose state query stayed ambiguous.
pub const STATE_UNKNOWN: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub id: String,
    pub display_name: String,
    pub detector_known: bool,
    #[serde(default)]
    pub state_options: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_hint: Option<String>,
}

impl ComponentSpec {
    pub fn new(id: impl Into<String>, display_name: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            display_name: display_name.into(),
            detector_known: true,
            state_options: Vec::new(),
            spatial_hint: None,
            feature_hint: None,
        }
    }

    /// Marks the component as unknown to the detector (zero-shot attribute).
    pub fn zero_shot(mut self) -> Self {
        self.detector_known = false;
        self
    }

    pub fn with_states<I, S>(mut self, states: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.state_options = states.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_spatial_hint(mut self, hint: impl Into<String>) -> Self {
        self.spatial_hint = Some(hint.into());
        self
    }

    pub fn with_feature_hint(mut self, hint: impl Into<String>) -> Self {
        self.feature_hint = Some(hint.into());
        self
    }

    pub fn has_states(&self) -> bool {
        !self.state_options.is_empty()
    }

    /// True when `state` is a legal value for a record of this component.
    pub fn accepts_state(&self, state: &str) -> bool {
        state == STATE_NA || state == STATE_UNKNOWN || self.state_options.iter().any(|s| s == state)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentOntology {
    pub version: String,
    pub components: Vec<ComponentSpec>,
}

impl ComponentOntology {
    /// Builds and validates an ontology.
    pub fn new(version: impl Into<String>, components: Vec<ComponentSpec>) -> Result<Self, OntologyError> {
        let ontology = Self {
            version: version.into(),
            components,
        };
        ontology.validate()?;
        Ok(ontology)
    }

    pub fn validate(&self) -> Result<(), OntologyError> {
        if self.components.is_empty() {
            return Err(OntologyError::Empty);
        }
        let mut seen = HashSet::new();
        for (index, c) in self.components.iter().enumerate() {
            if c.id.trim().is_empty() {
                return Err(OntologyError::EmptyId { index });
            }
            if !seen.insert(c.id.as_str()) {
                return Err(OntologyError::DuplicateId(c.id.clone()));
            }
            let mut labels = HashSet::new();
            for label in &c.state_options {
                if label == STATE_NA || label == STATE_UNKNOWN {
                    return Err(OntologyError::ReservedState {
                        id: c.id.clone(),
                        label: label.clone(),
                    });
                }
                if !labels.insert(label.as_str()) {
                    return Err(OntologyError::DuplicateState {
                        id: c.id.clone(),
                        label: label.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ComponentSpec> {
        self.components.iter().find(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.components.iter().map(|c| c.id.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ontology serializes")
    }
}

/// Parses and validates an ontology document.
pub fn load_ontology<R: Read>(reader: R) -> Result<ComponentOntology, OntologyError> {
    let ontology: ComponentOntology = serde_json::from_reader(reader)?;
    ontology.validate()?;
    Ok(ontology)
}

pub fn load_ontology_str(text: &str) -> Result<ComponentOntology, OntologyError> {
    load_ontology(text.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub uri: String,
}

impl ImageRef {
    pub fn new(image_id: impl Into<String>, uri: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            uri: uri.into(),
        }
    }
}

/// Reads a JSON Lines manifest of `{"image_id", "uri"}` entries. Blank lines
/// are skipped.
pub fn load_manifest<R: BufRead>(reader: R) -> Result<Vec<ImageRef>, ManifestError> {
    let mut images = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let image: ImageRef =
            serde_json::from_str(&line).map_err(|source| ManifestError::Syntax { line: lineno, source })?;
        if image.image_id.is_empty() {
            return Err(ManifestError::EmptyId { line: lineno });
        }
        if !seen.insert(image.image_id.clone()) {
            return Err(ManifestError::DuplicateId {
                line: lineno,
                id: image.image_id,
            });
        }
        images.push(image);
    }
    Ok(images)
}
