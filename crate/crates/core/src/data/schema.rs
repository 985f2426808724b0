use std::sync::Arc;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Token that [`Vocabulary::decode`] produces for the shared "unknown" slot.
pub const UNKNOWN_TOKEN: &str = "<unknown>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Numeric,
}

/// Value → dense index map of one field.
///
/// Retained values occupy `0..n` in first-appearance order. When the field
/// went through frequency thresholding, index `n` is the shared "unknown"
/// slot that also absorbs values never seen during fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    values: IndexMap<String, u32>,
    has_unknown: bool,
}

impl Vocabulary {
    pub fn new<I, S>(values: I, has_unknown: bool) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut map = IndexMap::new();
        for v in values {
            let next = map.len() as u32;
            map.entry(v.into()).or_insert(next);
        }
        Vocabulary {
            values: map,
            has_unknown,
        }
    }

    /// `C_j`: retained values plus the unknown slot when present.
    pub fn cardinality(&self) -> usize {
        self.values.len() + usize::from(self.has_unknown)
    }

    pub fn unknown(&self) -> Option<u32> {
        self.has_unknown.then_some(self.values.len() as u32)
    }

    pub fn retained(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.values.get(token).copied()
    }

    /// Index of `token`; missing or unseen tokens go to the unknown slot.
    pub fn encode(&self, token: Option<&str>) -> Result<u32> {
        token
            .and_then(|t| self.get(t))
            .or_else(|| self.unknown())
            .ok_or_else(|| Error::Data(format!("value {token:?} is not in a vocabulary without an unknown slot")))
    }

    pub fn decode(&self, index: u32) -> Option<&str> {
        match self.values.get_index(index as usize) {
            Some((k, _)) => Some(k.as_str()),
            None if Some(index) == self.unknown() => Some(UNKNOWN_TOKEN),
            None => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
    pub vocab: Vocabulary,
}

impl Field {
    pub fn cardinality(&self) -> usize {
        self.vocab.cardinality()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub fields: Vec<Field>,
}

impl FeatureSchema {
    pub fn new(fields: Vec<Field>) -> Result<Arc<Self>> {
        if fields.is_empty() {
            return Err(Error::Data("schema needs at least one field".into()));
        }
        if let Some(f) = fields.iter().find(|f| f.cardinality() == 0) {
            return Err(Error::Data(format!("field {} has an empty vocabulary", f.name)));
        }
        Ok(Arc::new(FeatureSchema { fields }))
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(Field::cardinality).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    /// Hex SHA-256 of the canonical JSON form; ties checkpoints to a schema.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_slot_follows_retained_values() {
        let v = Vocabulary::new(["a", "b"], true);
        assert_eq!(v.cardinality(), 3);
        assert_eq!(v.encode(Some("b")).unwrap(), 1);
        assert_eq!(v.encode(Some("zzz")).unwrap(), 2);
        assert_eq!(v.encode(None).unwrap(), 2);
        assert_eq!(v.decode(2), Some(UNKNOWN_TOKEN));
        assert_eq!(v.decode(3), None);
    }

    #[test]
    fn closed_vocabulary_rejects_unseen() {
        let v = Vocabulary::new(["x"], false);
        assert_eq!(v.cardinality(), 1);
        assert!(v.encode(Some("y")).is_err());
    }

    #[test]
    fn fingerprint_tracks_content() {
        let f = |n: &str| Field {
            name: n.into(),
            kind: FieldKind::Categorical,
            vocab: Vocabulary::new(["a"], true),
        };
        let a = FeatureSchema::new(vec![f("x")]).unwrap();
        let b = FeatureSchema::new(vec![f("x")]).unwrap();
        let c = FeatureSchema::new(vec![f("y")]).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint().len(), 64);
    }
}
