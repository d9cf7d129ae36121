//! IOB1 / IOB2 detection, conversion and validation.

use serde::{Deserialize, Serialize};

use super::label::{Label, Prefix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    Iob1,
    Iob2,
}

/// An `I-X` label that follows neither `B-X` nor `I-X`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub index: usize,
    pub label: Label,
    pub previous: Option<Label>,
}

fn continues(prev: Option<&Label>, label: &Label) -> bool {
    match prev {
        Some(p) => !p.is_outside() && p.entity_type() == label.entity_type(),
        None => false,
    }
}

/// Rewrite every `I-X` that opens a chunk as `B-X`.
///
/// Under IOB1 semantics `I-X` after `O`, after a different type, or at
/// sentence start opens a chunk, and `B-X` always opens one, so the chunk
/// set is unchanged.
pub fn to_iob2(labels: &[Label]) -> Vec<Label> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        let prev = i.checked_sub(1).map(|j| &labels[j]);
        if label.prefix() == Prefix::I && !continues(prev, label) {
            out.push(label.to_begin());
        } else {
            out.push(label.clone());
        }
    }
    out
}

pub fn validate_iob2(labels: &[Label]) -> Vec<Violation> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, label)| {
            let prev = i.checked_sub(1).map(|j| &labels[j]);
            (label.prefix() == Prefix::I && !continues(prev, label)).then(|| Violation {
                index: i,
                label: label.clone(),
                previous: prev.cloned(),
            })
        })
        .collect()
}

/// IOB1 if any chunk is opened by an `I-` label, IOB2 otherwise.
pub fn detect_scheme<'a, I>(sentences: I) -> TagScheme
where
    I: IntoIterator<Item = &'a [Label]>,
{
    for labels in sentences {
        if !validate_iob2(labels).is_empty() {
            return TagScheme::Iob1;
        }
    }
    TagScheme::Iob2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(s: &str) -> Vec<Label> {
        s.split_whitespace().map(|l| l.parse().unwrap()).collect()
    }

    #[test]
    fn conversion_examples() {
        assert_eq!(to_iob2(&labels("O I-PER I-PER")), labels("O B-PER I-PER"));
        assert_eq!(to_iob2(&labels("B-PER I-PER")), labels("B-PER I-PER"));
        assert_eq!(to_iob2(&labels("I-LOC B-LOC I-LOC")), labels("B-LOC B-LOC I-LOC"));
        assert_eq!(to_iob2(&labels("I-LOC I-PER")), labels("B-LOC B-PER"));
        assert!(to_iob2(&[]).is_empty());
    }

    #[test]
    fn validation_examples() {
        assert!(validate_iob2(&labels("O B-PER I-PER")).is_empty());
        let v = validate_iob2(&labels("O I-PER"));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].index, 1);
        let v = validate_iob2(&labels("B-PER I-ORG"));
        assert_eq!(v.iter().map(|v| v.index).collect::<Vec<_>>(), vec![1]);
        assert_eq!(validate_iob2(&labels("I-PER")).len(), 1);
    }

    #[test]
    fn detection() {
        let a = labels("O B-PER I-PER");
        let b = labels("I-LOC O");
        assert_eq!(detect_scheme([a.as_slice()]), TagScheme::Iob2);
        assert_eq!(detect_scheme([a.as_slice(), b.as_slice()]), TagScheme::Iob1);
    }
}
