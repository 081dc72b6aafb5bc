//! Object property schemas and per-dataset presets.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropertyKind {
    Categorical { num_classes: usize },
    Numeric { dims: usize },
}

impl PropertyKind {
    pub fn width(self) -> usize {
        match self {
            PropertyKind::Categorical { num_classes } => num_classes,
            PropertyKind::Numeric { dims } => dims,
        }
    }

    pub fn is_categorical(self) -> bool {
        matches!(self, PropertyKind::Categorical { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropertyEntry {
    pub name: String,
    #[serde(flatten)]
    pub kind: PropertyKind,
}

/// Ordered list of object properties. Declaration order is the canonical
/// order used for target layout and for deterministic matching.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<PropertyEntry>", into = "Vec<PropertyEntry>")]
pub struct PropertySchema {
    entries: Vec<PropertyEntry>,
    offsets: Vec<usize>,
}

impl PropertySchema {
    pub fn new(entries: Vec<PropertyEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate property name '{}'", e.name)));
            }
            match e.kind {
                PropertyKind::Categorical { num_classes } if num_classes < 2 => {
                    return Err(Error::Config(format!(
                        "categorical property '{}' needs at least 2 classes",
                        e.name
                    )))
                }
                PropertyKind::Numeric { dims: 0 } => {
                    return Err(Error::Config(format!("numeric property '{}' needs dims >= 1", e.name)))
                }
                _ => {}
            }
        }
        let mut offsets = Vec::with_capacity(entries.len());
        let mut acc = 0;
        for e in &entries {
            offsets.push(acc);
            acc += e.kind.width();
        }
        Ok(Self { entries, offsets })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[PropertyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total target width P.
    pub fn width(&self) -> usize {
        self.entries.iter().map(|e| e.kind.width()).sum()
    }

    /// Offset of entry `i` inside a target vector.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&PropertyEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// Resolves a set of property names to a per-entry inclusion mask.
    pub fn mask_for<'a, I>(&self, names: I) -> Result<Vec<bool>>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut mask = vec![false; self.len()];
        for n in names {
            let i = self
                .index_of(n)
                .ok_or_else(|| Error::Config(format!("unknown property '{n}'")))?;
            mask[i] = true;
        }
        Ok(mask)
    }

    /// Inclusion mask with every entry selected except `excluded`. Unknown
    /// names in `excluded` are ignored, since shift metadata may name
    /// properties (e.g. `material`) that a dataset does not have.
    pub fn mask_excluding<'a, I>(&self, excluded: I) -> Vec<bool>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut mask = vec![true; self.len()];
        for n in excluded {
            if let Some(i) = self.index_of(n) {
                mask[i] = false;
            }
        }
        mask
    }
}

impl TryFrom<Vec<PropertyEntry>> for PropertySchema {
    type Error = Error;

    fn try_from(entries: Vec<PropertyEntry>) -> Result<Self> {
        Self::new(entries)
    }
}

impl From<PropertySchema> for Vec<PropertyEntry> {
    fn from(s: PropertySchema) -> Self {
        s.entries
    }
}

fn cat(name: &str, num_classes: usize) -> PropertyEntry {
    PropertyEntry {
        name: name.into(),
        kind: PropertyKind::Categorical { num_classes },
    }
}

fn num(name: &str, dims: usize) -> PropertyEntry {
    PropertyEntry {
        name: name.into(),
        kind: PropertyKind::Numeric { dims },
    }
}

/// Property schemas of the standard multi-object benchmarks.
pub mod presets {
    use super::*;

    pub fn clevr() -> PropertySchema {
        PropertySchema::new(vec![
            cat("color", 8),
            cat("material", 2),
            cat("shape", 3),
            cat("size", 2),
            num("x", 1),
            num("y", 1),
        ])
        .unwrap()
    }

    pub fn multi_dsprites() -> PropertySchema {
        PropertySchema::new(vec![
            num("color", 3),
            num("scale", 1),
            cat("shape", 3),
            num("x", 1),
            num("y", 1),
        ])
        .unwrap()
    }

    pub fn shapestacks() -> PropertySchema {
        PropertySchema::new(vec![cat("shape", 3), cat("color", 6)]).unwrap()
    }

    pub fn tetrominoes() -> PropertySchema {
        PropertySchema::new(vec![cat("shape", 19), cat("color", 6), num("x", 1), num("y", 1)]).unwrap()
    }

    /// Objects Room carries masks only; it is usable by the metrics alone.
    pub fn objects_room() -> PropertySchema {
        PropertySchema::empty()
    }

    pub fn by_name(name: &str) -> Option<PropertySchema> {
        match name {
            "clevr" | "clevr6" => Some(clevr()),
            "multi_dsprites" | "synthetic" => Some(multi_dsprites()),
            "shapestacks" => Some(shapestacks()),
            "tetrominoes" => Some(tetrominoes()),
            "objects_room" => Some(objects_room()),
            _ => None,
        }
    }
}
