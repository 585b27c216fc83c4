//! Prompt templates that expand a class label into a sentence.

use crate::error::{Error, Result};

/// Text pattern with exactly one `{}` placeholder for the label.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pattern: String,
}

impl PromptTemplate {
    pub fn new(pattern: impl Into<String>) -> Result<Self> {
        let pattern = pattern.into();
        if pattern.matches("{}").count() != 1 {
            return Err(Error::invalid(
                "prompt_template",
                format!("pattern {:?} must contain exactly one {{}}", pattern),
            ));
        }
        Ok(PromptTemplate { pattern })
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    /// The three published template variants, weakest to strongest.
    pub fn standard_set() -> Vec<PromptTemplate> {
        vec![
            PromptTemplate::new("{}").unwrap(),
            PromptTemplate::new("a clip of {}").unwrap(),
            PromptTemplate::new("an audio clip of {}").unwrap(),
        ]
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate::new("an audio clip of {}").unwrap()
    }
}

/// Substitute the label into the template: underscores become spaces and
/// the result is lowercased.
pub fn apply_prompt(label: &str, template: &PromptTemplate) -> Result<String> {
    if label.is_empty() {
        return Err(Error::invalid("apply_prompt", "label must be non-empty"));
    }
    let clean = label.replace('_', " ");
    Ok(template.pattern.replace("{}", &clean).to_lowercase())
}
