//! Existence and state prompt rendering, plus the one-shot refinement used
//! when a reply comes back ambiguous.

use std::collections::HashMap;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::ComponentSpec;

pub const DEFAULT_EXISTENCE_TEMPLATE: &str = "Is there a {display_name} in this image? Answer only Yes or No.";
pub const DEFAULT_STATE_TEMPLATE: &str = "What is the state of the {display_name}? Choose from {options}.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Existence,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HintUsed {
    None,
    Spatial,
    Feature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptInstance {
    pub kind: PromptKind,
    pub component: String,
    pub text: String,
    pub optimized: bool,
    pub hint_used: HintUsed,
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("malformed template file: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("{kind:?} template is missing the {{display_name}} placeholder")]
    MissingDisplayName { kind: PromptKind },
    #[error("state template is missing the {{options}} placeholder")]
    MissingOptions,
}

/// Prompt templates with `{display_name}` and `{options}` placeholders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    existence: String,
    state: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            existence: DEFAULT_EXISTENCE_TEMPLATE.to_string(),
            state: DEFAULT_STATE_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplates {
    /// Reads an override file: a JSON map from kind (`"existence"`, `"state"`)
    /// to template. Kinds not mentioned keep their defaults.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, TemplateError> {
        let overrides: HashMap<PromptKind, String> = serde_json::from_reader(reader)?;
        let mut templates = Self::default();
        for (kind, template) in overrides {
            if !template.contains("{display_name}") {
                return Err(TemplateError::MissingDisplayName { kind });
            }
            match kind {
                PromptKind::Existence => templates.existence = template,
                PromptKind::State => {
                    if !template.contains("{options}") {
                        return Err(TemplateError::MissingOptions);
                    }
                    templates.state = template
                }
            }
        }
        Ok(templates)
    }

    pub fn existence(&self, component: &ComponentSpec) -> PromptInstance {
        PromptInstance {
            kind: PromptKind::Existence,
            component: component.id.clone(),
            text: self.existence.replace("{display_name}", &component.display_name),
            optimized: false,
            hint_used: HintUsed::None,
        }
    }

    /// # Panics
    ///
    /// If the component has no state options; callers gate on
    /// [`ComponentSpec::has_states`].
    pub fn state(&self, component: &ComponentSpec) -> PromptInstance {
        assert!(
            component.has_states(),
            "state prompt requested for {} which has no state options",
            component.id
        );
        PromptInstance {
            kind: PromptKind::State,
            component: component.id.clone(),
            text: self
                .state
                .replace("{display_name}", &component.display_name)
                .replace("{options}", &component.state_options.join(", ")),
            optimized: false,
            hint_used: HintUsed::None,
        }
    }
}

pub fn existence_prompt(component: &ComponentSpec) -> PromptInstance {
    PromptTemplates::default().existence(component)
}

pub fn state_prompt(component: &ComponentSpec) -> PromptInstance {
    PromptTemplates::default().state(component)
}

/// Refines a prompt once using the component's hints. A spatial hint wins
/// over a feature hint. Without hints the text is returned unchanged but the
/// instance is still marked as optimized.
///
/// # Panics
///
/// If `original` was already optimized.
pub fn optimize_prompt(original: &PromptInstance, component: &ComponentSpec) -> PromptInstance {
    assert!(!original.optimized, "prompt for {} already optimized", original.component);
    let (text, hint_used) = if let Some(spatial) = &component.spatial_hint {
        (format!("Focus on the {spatial} of the image. {}", original.text), HintUsed::Spatial)
    } else if let Some(feature) = &component.feature_hint {
        let text = match original.kind {
            PromptKind::Existence => format!("Look carefully. Is there a {feature}? Answer only Yes or No."),
            PromptKind::State => format!("Look carefully at the {feature}. {}", original.text),
        };
        (text, HintUsed::Feature)
    } else {
        (original.text.clone(), HintUsed::None)
    };
    PromptInstance {
        kind: original.kind,
        component: original.component.clone(),
        text,
        optimized: true,
        hint_used,
    }
}
