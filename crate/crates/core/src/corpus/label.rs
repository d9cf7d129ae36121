//! Chunk labels (`O`, `B-X`, `I-X`) and the ordered label set used as class ids.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Chunk prefix of a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Prefix {
    O,
    B,
    I,
}

/// A token label. `entity_type` is present iff the prefix is not `O`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label {
    prefix: Prefix,
    entity_type: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown label `{0}`")]
pub struct LabelParseError(pub String);

impl Label {
    pub fn outside() -> Self {
        Label { prefix: Prefix::O, entity_type: None }
    }

    pub fn begin(entity_type: impl Into<String>) -> Self {
        Label { prefix: Prefix::B, entity_type: Some(entity_type.into()) }
    }

    pub fn inside(entity_type: impl Into<String>) -> Self {
        Label { prefix: Prefix::I, entity_type: Some(entity_type.into()) }
    }

    pub fn prefix(&self) -> Prefix {
        self.prefix
    }

    pub fn entity_type(&self) -> Option<&str> {
        self.entity_type.as_deref()
    }

    pub fn is_outside(&self) -> bool {
        self.prefix == Prefix::O
    }

    /// `B-X` becomes `I-X`; other labels are returned unchanged.
    pub fn to_inside(&self) -> Label {
        match (&self.prefix, &self.entity_type) {
            (Prefix::B, Some(t)) => Label::inside(t.clone()),
            _ => self.clone(),
        }
    }

    /// `I-X` becomes `B-X`; other labels are returned unchanged.
    pub fn to_begin(&self) -> Label {
        match (&self.prefix, &self.entity_type) {
            (Prefix::I, Some(t)) => Label::begin(t.clone()),
            _ => self.clone(),
        }
    }
}

impl FromStr for Label {
    type Err = LabelParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "O" {
            return Ok(Label::outside());
        }
        let bad = || LabelParseError(s.to_string());
        let (prefix, ty) = s.split_once('-').ok_or_else(bad)?;
        if ty.is_empty() || ty.chars().any(char::is_whitespace) {
            return Err(bad());
        }
        match prefix {
            "B" => Ok(Label::begin(ty)),
            "I" => Ok(Label::inside(ty)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Label {
    type Error = LabelParseError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Label> for String {
    fn from(label: Label) -> String {
        label.to_string()
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.prefix, &self.entity_type) {
            (Prefix::B, Some(t)) => write!(f, "B-{t}"),
            (Prefix::I, Some(t)) => write!(f, "I-{t}"),
            _ => f.write_str("O"),
        }
    }
}

/// Ordered set of labels; the index of a label is its class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Label>", into = "Vec<Label>")]
pub struct LabelSet {
    labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LabelSetError {
    #[error("label set must contain O")]
    MissingOutside,
    #[error("duplicate label `{0}` in label set")]
    Duplicate(Label),
}

impl LabelSet {
    pub fn new(labels: Vec<Label>) -> Result<Self, LabelSetError> {
        if !labels.iter().any(Label::is_outside) {
            return Err(LabelSetError::MissingOutside);
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(LabelSetError::Duplicate(l.clone()));
            }
        }
        Ok(LabelSet { labels })
    }

    /// `O` followed by `B-T`, `I-T` for each type in iteration order;
    /// repeated types are skipped.
    pub fn from_types<I, S>(types: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut labels = vec![Label::outside()];
        for t in types {
            let begin = Label::begin(t.as_ref());
            if labels.contains(&begin) {
                continue;
            }
            labels.push(begin);
            labels.push(Label::inside(t.as_ref()));
        }
        LabelSet { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn get(&self, id: usize) -> Option<&Label> {
        self.labels.get(id)
    }

    pub fn id_of(&self, label: &Label) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn outside_id(&self) -> usize {
        self.labels.iter().position(Label::is_outside).expect("label set contains O")
    }
}

impl TryFrom<Vec<Label>> for LabelSet {
    type Error = LabelSetError;

    fn try_from(value: Vec<Label>) -> Result<Self, Self::Error> {
        LabelSet::new(value)
    }
}

impl From<LabelSet> for Vec<Label> {
    fn from(set: LabelSet) -> Vec<Label> {
        set.labels
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_display() {
        for s in ["O", "B-PER", "I-LOC", "B-DATE-X"] {
            assert_eq!(s.parse::<Label>().unwrap().to_string(), s);
        }
        let l: Label = "B-DATE-X".parse().unwrap();
        assert_eq!(l.entity_type(), Some("DATE-X"));
        for bad in ["", "B", "B-", "X-PER", "o", "E-PER", "B-A B"] {
            assert!(bad.parse::<Label>().is_err(), "{bad}");
        }
    }

    #[test]
    fn label_set_requires_outside() {
        assert_eq!(
            LabelSet::new(vec![Label::begin("PER")]).unwrap_err(),
            LabelSetError::MissingOutside
        );
        let set = LabelSet::from_types(["LOC", "PER"]);
        assert_eq!(set.len(), 5);
        assert_eq!(set.id_of(&Label::inside("PER")), Some(4));
        assert_eq!(set.outside_id(), 0);
        assert_eq!(LabelSet::from_types(["LOC", "PER", "LOC"]), set);
    }
}
