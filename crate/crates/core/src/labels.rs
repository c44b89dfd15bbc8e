use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label id of the background category.
pub const BACKGROUND: u8 = 0;
/// Sentinel label for pixels excluded from losses and evaluation.
pub const IGNORE: u8 = 255;

/// The twenty PASCAL VOC object categories in their canonical order.
pub const VOC_CATEGORIES: [&str; 20] = [
    "plane", "bike", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "table",
    "dog", "horse", "motor", "person", "plant", "sheep", "sofa", "train", "tv",
];

/// Ordered category names; category `i` (1-based) is `names[i - 1]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryTable {
    names: Vec<String>,
}

impl CategoryTable {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(Error::InvalidInput("category table is empty".into()));
        }
        if names.len() >= usize::from(IGNORE) {
            return Err(Error::InvalidInput(format!(
                "at most {} categories fit the 8-bit label space",
                IGNORE - 1
            )));
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if name.trim().is_empty() {
                return Err(Error::InvalidInput("empty category name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate category {name:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn voc() -> Self {
        Self::new(VOC_CATEGORIES).expect("static table is valid")
    }

    /// Number of object categories, L.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<u8> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| (i + 1) as u8)
    }

    pub fn name(&self, id: u8) -> Option<&str> {
        match id {
            BACKGROUND => Some("bkg"),
            IGNORE => None,
            _ => self.names.get(usize::from(id) - 1).map(String::as_str),
        }
    }

    pub fn is_valid_mask_label(&self, id: u8) -> bool {
        id == IGNORE || usize::from(id) <= self.names.len()
    }
}

/// Image-level labels y: a nonempty subset of the object categories.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet(BTreeSet<u8>);

impl LabelSet {
    pub fn new(ids: impl IntoIterator<Item = u8>, table: &CategoryTable) -> Result<Self> {
        let set: BTreeSet<u8> = ids.into_iter().collect();
        if set.is_empty() {
            return Err(Error::InvalidInput("label set is empty".into()));
        }
        for &id in &set {
            if id == BACKGROUND || id == IGNORE || usize::from(id) > table.len() {
                return Err(Error::InvalidInput(format!(
                    "label {id} is not an object category"
                )));
            }
        }
        Ok(Self(set))
    }

    pub fn single(id: u8, table: &CategoryTable) -> Result<Self> {
        Self::new([id], table)
    }

    pub fn contains(&self, id: u8) -> bool {
        self.0.contains(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.0.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// y ∪ {background}, ascending.
    pub fn with_background(&self) -> Vec<u8> {
        std::iter::once(BACKGROUND).chain(self.iter()).collect()
    }
}
