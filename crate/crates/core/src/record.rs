//! Fused per-image retrieval output.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::ontology::{ComponentOntology, STATE_NA, STATE_UNKNOWN};

/// Which modality decided a component's existence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Detector,
    #[serde(rename = "VLM")]
    Vlm,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Source::Detector => f.write_str("Detector"),
            Source::Vlm => f.write_str("VLM"),
        }
    }
}

/// One `(component, exists, state, confidence)` tuple plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRecord {
    pub component: String,
    pub exists: u8,
    pub state: String,
    pub confidence: f64,
    pub source: Source,
    pub retries_used: u32,
}

impl RetrievalRecord {
    pub fn absent(component: impl Into<String>, confidence: f64, source: Source, retries_used: u32) -> Self {
        Self {
            component: component.into(),
            exists: 0,
            state: STATE_NA.to_string(),
            confidence,
            source,
            retries_used,
        }
    }

    pub fn present(
        component: impl Into<String>,
        state: impl Into<String>,
        confidence: f64,
        source: Source,
        retries_used: u32,
    ) -> Self {
        Self {
            component: component.into(),
            exists: 1,
            state: state.into(),
            confidence,
            source,
            retries_used,
        }
    }

    pub fn exists(&self) -> bool {
        self.exists == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub records: Vec<RetrievalRecord>,
    /// Set when the image failed as a whole; every record is then a zero-confidence absence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ImageResult {
    pub fn new(image_id: impl Into<String>, records: Vec<RetrievalRecord>) -> Self {
        Self {
            image_id: image_id.into(),
            records,
            error: None,
        }
    }

    /// A result for an image whose backend calls failed before fusion.
    pub fn failed(image_id: impl Into<String>, ontology: &ComponentOntology, error: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            records: ontology
                .components
                .iter()
                .map(|c| RetrievalRecord::absent(c.id.clone(), 0.0, Source::Detector, 0))
                .collect(),
            error: Some(error.into()),
        }
    }

    pub fn is_failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn record(&self, component: &str) -> Option<&RetrievalRecord> {
        self.records.iter().find(|r| r.component == component)
    }

    /// Checks the record-level and per-image invariants against an ontology.
    pub fn check(&self, ontology: &ComponentOntology) -> Result<(), String> {
        if self.records.len() != ontology.len() {
            return Err(format!(
                "image {}: {} records for {} components",
                self.image_id,
                self.records.len(),
                ontology.len()
            ));
        }
        let mut seen = HashSet::new();
        for r in &self.records {
            let Some(spec) = ontology.get(&r.component) else {
                return Err(format!("image {}: unknown component {}", self.image_id, r.component));
            };
            if !seen.insert(r.component.as_str()) {
                return Err(format!("image {}: duplicate record for {}", self.image_id, r.component));
            }
            if r.exists > 1 {
                return Err(format!("image {}: exists={} for {}", self.image_id, r.exists, r.component));
            }
            if !(0.0..=1.0).contains(&r.confidence) {
                return Err(format!(
                    "image {}: confidence {} out of range for {}",
                    self.image_id, r.confidence, r.component
                ));
            }
            if r.exists == 0 && r.state != STATE_NA {
                return Err(format!(
                    "image {}: absent {} carries state {}",
                    self.image_id, r.component, r.state
                ));
            }
            if r.state != STATE_NA && r.state != STATE_UNKNOWN && !spec.state_options.contains(&r.state) {
                return Err(format!(
                    "image {}: state {} not an option of {}",
                    self.image_id, r.state, r.component
                ));
            }
        }
        Ok(())
    }
}
