//! BIO label space and the span codec.
//!
//! Label index 0 is always `O`; entity type `e` (in registry order) owns
//! `B-e` at `1 + 2e` and `I-e` at `2 + 2e`.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};

/// Index of the outside label in every [`LabelSet`].
pub const OUTSIDE: usize = 0;

/// Ordered registry of entity type names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySet {
    types: Vec<String>,
}

impl EntitySet {
    pub fn new<I, S>(types: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let types: Vec<String> = types.into_iter().map(Into::into).collect();
        if types.is_empty() {
            return Err(Error::validation("entity set must not be empty"));
        }
        let mut seen = HashSet::new();
        for name in &types {
            if name.is_empty() {
                return Err(Error::validation("entity type names must be non-empty"));
            }
            if name.contains(char::is_whitespace) {
                return Err(Error::validation(format!(
                    "entity type name {name:?} contains whitespace"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::validation(format!("duplicate entity type {name:?}")));
            }
        }
        Ok(Self { types })
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.types
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.types[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.types.iter().position(|t| t == name)
    }
}

/// Position of a label inside an entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bio {
    Begin,
    Inside,
}

/// The BIO label space built from an [`EntitySet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    entities: EntitySet,
    labels: Vec<String>,
    lookup: HashMap<String, usize>,
}

/// Builds `{O, B-e1, I-e1, B-e2, I-e2, ...}`.
pub fn build_label_set(entities: EntitySet) -> LabelSet {
    let mut labels = Vec::with_capacity(2 * entities.len() + 1);
    labels.push("O".to_string());
    for name in entities.names() {
        labels.push(format!("B-{name}"));
        labels.push(format!("I-{name}"));
    }
    let lookup = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    LabelSet {
        entities,
        labels,
        lookup,
    }
}

impl LabelSet {
    /// Convenience constructor from entity type names.
    pub fn from_entity_names<I, S>(types: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Ok(build_label_set(EntitySet::new(types)?))
    }

    /// Reconstructs a label set from its serialized ordered label list,
    /// rejecting lists that are not in canonical `O, B-x, I-x, ...` order.
    pub fn from_label_names(names: &[String]) -> Result<Self> {
        if names.first().map(String::as_str) != Some("O") {
            return Err(Error::validation("label list must start with O"));
        }
        if names.len() < 3 || names.len().is_multiple_of(2) {
            return Err(Error::validation(format!(
                "label list of size {} is not of the form 2|E|+1 with |E| >= 1",
                names.len()
            )));
        }
        let mut types = Vec::new();
        for pair in names[1..].chunks(2) {
            let b = pair[0]
                .strip_prefix("B-")
                .ok_or_else(|| Error::validation(format!("expected B- label, got {:?}", pair[0])))?;
            let i = pair[1]
                .strip_prefix("I-")
                .ok_or_else(|| Error::validation(format!("expected I- label, got {:?}", pair[1])))?;
            if b != i {
                return Err(Error::validation(format!(
                    "mismatched pair {:?} / {:?}",
                    pair[0], pair[1]
                )));
            }
            types.push(b.to_string());
        }
        Self::from_entity_names(types)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn entities(&self) -> &EntitySet {
        &self.entities
    }

    pub fn names(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn begin(&self, entity: usize) -> usize {
        1 + 2 * entity
    }

    pub fn inside(&self, entity: usize) -> usize {
        2 + 2 * entity
    }

    /// Entity type and BIO position of a label, or `None` for `O`.
    pub fn decompose(&self, label: usize) -> Option<(usize, Bio)> {
        if label == OUTSIDE {
            return None;
        }
        let entity = (label - 1) / 2;
        let bio = if (label - 1).is_multiple_of(2) {
            Bio::Begin
        } else {
            Bio::Inside
        };
        Some((entity, bio))
    }

    pub fn is_entity(&self, label: usize) -> bool {
        label != OUTSIDE
    }
}

/// A typed half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub entity: usize,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// Extracts maximal spans. An `I-x` not continuing an open `x` span opens a
/// new one.
pub fn labels_to_spans(seq: &[usize], labels: &LabelSet) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (t, &label) in seq.iter().enumerate() {
        match labels.decompose(label) {
            None => {
                if let Some((entity, start)) = open.take() {
                    spans.push(EntitySpan { entity, start, end: t });
                }
            }
            Some((entity, Bio::Begin)) => {
                if let Some((e, start)) = open.take() {
                    spans.push(EntitySpan { entity: e, start, end: t });
                }
                open = Some((entity, t));
            }
            Some((entity, Bio::Inside)) => match open {
                Some((e, _)) if e == entity => {}
                _ => {
                    if let Some((e, start)) = open.take() {
                        spans.push(EntitySpan { entity: e, start, end: t });
                    }
                    open = Some((entity, t));
                }
            },
        }
    }
    if let Some((entity, start)) = open {
        spans.push(EntitySpan {
            entity,
            start,
            end: seq.len(),
        });
    }
    spans
}

/// Renders spans as a BIO sequence of length `len`; uncovered tokens are `O`.
pub fn spans_to_labels(spans: &[EntitySpan], len: usize, labels: &LabelSet) -> Result<Vec<usize>> {
    let mut seq = vec![OUTSIDE; len];
    let mut covered = vec![false; len];
    for span in spans {
        if span.start >= span.end || span.end > len {
            return Err(Error::validation(format!(
                "span [{}, {}) out of bounds for length {len}",
                span.start, span.end
            )));
        }
        if span.entity >= labels.entities().len() {
            return Err(Error::validation(format!(
                "span entity index {} unknown",
                span.entity
            )));
        }
        for t in span.start..span.end {
            if covered[t] {
                return Err(Error::validation(format!(
                    "overlapping spans at token {t}"
                )));
            }
            covered[t] = true;
            seq[t] = if t == span.start {
                labels.begin(span.entity)
            } else {
                labels.inside(span.entity)
            };
        }
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn per_loc() -> LabelSet {
        LabelSet::from_entity_names(["PER", "LOC"]).unwrap()
    }

    #[test]
    fn per_loc_layout() {
        let ls = per_loc();
        assert_eq!(ls.names(), ["O", "B-PER", "I-PER", "B-LOC", "I-LOC"]);
        assert_eq!(ls.len(), 5);
        for (i, name) in ls.names().iter().enumerate() {
            assert_eq!(ls.index_of(name), Some(i));
        }
    }

    #[test]
    fn four_types_give_nine_labels() {
        let ls = LabelSet::from_entity_names(["PER", "LOC", "ORG", "MISC"]).unwrap();
        assert_eq!(ls.len(), 9);
    }

    #[test]
    fn rejects_bad_entity_sets() {
        assert!(EntitySet::new(Vec::<String>::new()).is_err());
        assert!(EntitySet::new(["PER", "PER"]).is_err());
        assert!(EntitySet::new(["PER", ""]).is_err());
    }

    #[test]
    fn label_names_round_trip() {
        let ls = per_loc();
        let back = LabelSet::from_label_names(ls.names()).unwrap();
        assert_eq!(back, ls);
        let bad: Vec<String> = ["O", "I-PER", "B-PER"].iter().map(|s| s.to_string()).collect();
        assert!(LabelSet::from_label_names(&bad).is_err());
    }

    #[test]
    fn canonical_span() {
        let ls = per_loc();
        let spans = labels_to_spans(&[0, 1, 2, 0], &ls);
        assert_eq!(spans, vec![EntitySpan { entity: 0, start: 1, end: 3 }]);
    }

    #[test]
    fn orphan_inside_opens_span() {
        let ls = per_loc();
        let spans = labels_to_spans(&[4, 4], &ls);
        assert_eq!(spans, vec![EntitySpan { entity: 1, start: 0, end: 2 }]);
        // I-LOC after I-PER switches type
        let spans = labels_to_spans(&[1, 2, 4], &ls);
        assert_eq!(
            spans,
            vec![
                EntitySpan { entity: 0, start: 0, end: 2 },
                EntitySpan { entity: 1, start: 2, end: 3 }
            ]
        );
    }

    #[test]
    fn spans_to_labels_basics() {
        let ls = per_loc();
        assert_eq!(spans_to_labels(&[], 3, &ls).unwrap(), vec![0, 0, 0]);
        let one = [EntitySpan { entity: 0, start: 0, end: 1 }];
        assert_eq!(spans_to_labels(&one, 2, &ls).unwrap(), vec![1, 0]);
        let overlap = [
            EntitySpan { entity: 0, start: 0, end: 2 },
            EntitySpan { entity: 1, start: 1, end: 3 },
        ];
        assert!(spans_to_labels(&overlap, 3, &ls).is_err());
        let oob = [EntitySpan { entity: 0, start: 2, end: 4 }];
        assert!(spans_to_labels(&oob, 3, &ls).is_err());
    }

    fn span_sets() -> impl Strategy<Value = (usize, usize, Vec<EntitySpan>)> {
        (1usize..5, 1usize..30).prop_flat_map(|(n_types, len)| {
            // (gap, length, type) triples laid out left to right
            proptest::collection::vec((0usize..4, 1usize..5, 0..n_types), 0..10).prop_map(
                move |pieces| {
                    let mut spans = Vec::new();
                    let mut cursor = 0;
                    for (gap, l, entity) in pieces {
                        let start = cursor + gap;
                        let end = start + l;
                        if end > len {
                            break;
                        }
                        spans.push(EntitySpan { entity, start, end });
                        cursor = end;
                    }
                    (n_types, len, spans)
                },
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn spans_round_trip((n_types, len, spans) in span_sets()) {
            let names: Vec<String> = (0..n_types).map(|i| format!("T{i}")).collect();
            let ls = LabelSet::from_entity_names(names).unwrap();
            let seq = spans_to_labels(&spans, len, &ls).unwrap();
            prop_assert_eq!(labels_to_spans(&seq, &ls), spans.clone());
            prop_assert_eq!(spans_to_labels(&labels_to_spans(&seq, &ls), len, &ls).unwrap(), seq);
        }

        #[test]
        fn size_law(n in 1usize..40) {
            let names: Vec<String> = (0..n).map(|i| format!("E{i}")).collect();
            prop_assert_eq!(LabelSet::from_entity_names(names).unwrap().len(), 2 * n + 1);
        }
    }
}
