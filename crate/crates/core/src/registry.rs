//! Semantic category registry.
//!
//! The registry file is a JSON list of `{id, name, color:[r,g,b]}` objects.
//! Ids must be contiguous from zero. Pixels carrying the ignore id are
//! unlabeled and take no part in encoding, rendering edits or scoring.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Mask value for unlabeled pixels.
pub const DEFAULT_IGNORE_ID: u8 = 255;

const RAILSEM19: &str = include_str!("../data/railsem19_registry.json");

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryRegistry {
    entries: Vec<Category>,
    ignore_id: u8,
}

impl CategoryRegistry {
    pub fn new(mut entries: Vec<Category>, ignore_id: u8) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Registry("no categories".into()));
        }
        entries.sort_by_key(|c| c.id);
        for (expected, c) in entries.iter().enumerate() {
            if usize::from(c.id) != expected {
                return Err(Error::Registry(format!(
                    "category ids must be contiguous from 0; expected {expected}, found {}",
                    c.id
                )));
            }
            if c.name.trim().is_empty() {
                return Err(Error::Registry(format!("category {} has an empty name", c.id)));
            }
        }
        for (i, a) in entries.iter().enumerate() {
            if entries[i + 1..].iter().any(|b| b.name == a.name) {
                return Err(Error::Registry(format!("duplicate name '{}'", a.name)));
            }
        }
        if usize::from(ignore_id) < entries.len() {
            return Err(Error::Registry(format!(
                "ignore id {ignore_id} collides with a category id"
            )));
        }
        Ok(Self { entries, ignore_id })
    }

    /// The 19-class RailSem19 label set.
    pub fn railsem19() -> Self {
        let entries: Vec<Category> =
            serde_json::from_str(RAILSEM19).expect("bundled registry is valid JSON");
        Self::new(entries, DEFAULT_IGNORE_ID).expect("bundled registry is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<Category> =
            serde_json::from_str(text).map_err(|e| Error::Registry(e.to_string()))?;
        Self::new(entries, DEFAULT_IGNORE_ID)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Registry(msg) => Error::Registry(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("registry serializes")
    }

    /// Content hash over entries and ignore id.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_json().as_bytes());
        h.update([self.ignore_id]);
        hex::encode(h.finalize())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ignore_id(&self) -> u8 {
        self.ignore_id
    }

    pub fn entries(&self) -> &[Category] {
        &self.entries
    }

    pub fn get(&self, id: u8) -> Option<&Category> {
        self.entries.get(usize::from(id))
    }

    pub fn contains(&self, id: u8) -> bool {
        usize::from(id) < self.entries.len()
    }

    pub fn name(&self, id: u8) -> &str {
        self.get(id).map_or("?", |c| c.name.as_str())
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.entries.iter().find(|c| c.name == name)
    }

    /// Resolves a category given either by name or by decimal id.
    pub fn resolve(&self, key: &str) -> Result<u8> {
        if let Some(c) = self.by_name(key) {
            return Ok(c.id);
        }
        match key.parse::<u8>() {
            Ok(id) if self.contains(id) => Ok(id),
            _ => Err(Error::UnknownCategory(key.to_string())),
        }
    }

    pub fn sky(&self) -> Option<u8> {
        self.by_name("sky").map(|c| c.id)
    }
}

impl Default for CategoryRegistry {
    fn default() -> Self {
        Self::railsem19()
    }
}
