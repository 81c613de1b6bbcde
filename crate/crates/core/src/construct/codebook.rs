use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN: &str = include_str!("../../assets/codebook_v1.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLevel {
    Instance,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCategory {
    pub name: String,
    pub description: String,
    pub level: ErrorLevel,
}

/// Catalog of vision error categories used to guide error identification.
///
/// The bundled list is a partial reconstruction and says so via `partial`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCodebook {
    pub version: String,
    #[serde(default)]
    pub partial: bool,
    pub categories: Vec<ErrorCategory>,
}

impl ErrorCodebook {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN).expect("bundled codebook is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cb: Self = serde_json::from_str(text)?;
        cb.validate()?;
        Ok(cb)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.categories.is_empty() {
            return Err(Error::contract("codebook has no categories"));
        }
        let mut seen = HashSet::new();
        for c in &self.categories {
            if c.name.trim().is_empty() {
                return Err(Error::contract("codebook category with empty name"));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::contract(format!("duplicate codebook category `{}`", c.name)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.categories.iter().any(|c| c.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&ErrorCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Text block listing the categories for a prompt.
    pub fn render(&self) -> String {
        self.categories
            .iter()
            .map(|c| {
                let level = match c.level {
                    ErrorLevel::Instance => "instance-level",
                    ErrorLevel::Image => "image-level",
                };
                format!("- {} ({level}): {}", c.name, c.description)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::CorruptionKind;

    #[test]
    fn builtin_covers_every_corruption_kind() {
        let cb = ErrorCodebook::builtin();
        for k in CorruptionKind::ALL {
            assert!(cb.contains(k.codebook_category()), "{k:?}");
        }
        assert!(cb.partial);
    }

    #[test]
    fn duplicates_and_empty_lists_are_rejected() {
        assert!(ErrorCodebook::from_json(r#"{"version":"x","categories":[]}"#).is_err());
        let dup = r#"{"version":"x","categories":[
            {"name":"a","description":"","level":"instance"},
            {"name":"a","description":"","level":"image"}]}"#;
        assert!(ErrorCodebook::from_json(dup).is_err());
    }
}
