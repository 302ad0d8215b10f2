use metapico_core::data::ner::{EntityType, Tag};
use metapico_core::{Error, Result};

/// Ordered BIO label set with its IOB2 transition constraint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TagScheme {
    labels: Vec<Tag>,
}

impl Default for TagScheme {
    fn default() -> Self {
        Self::iob2()
    }
}

impl TagScheme {
    /// `[O, B-PER, I-PER, B-LOC, I-LOC, B-ORG, I-ORG]`.
    pub fn iob2() -> Self {
        Self { labels: Tag::ALL.to_vec() }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Tag] {
        &self.labels
    }

    pub fn tag(&self, index: usize) -> Result<Tag> {
        self.labels
            .get(index)
            .copied()
            .ok_or_else(|| Error::Index(format!("label index {index} outside 0..{}", self.len())))
    }

    pub fn index(&self, tag: Tag) -> usize {
        self.labels.iter().position(|&t| t == tag).expect("scheme covers every tag")
    }

    pub fn indices(&self, tags: &[Tag]) -> Vec<usize> {
        tags.iter().map(|&t| self.index(t)).collect()
    }

    pub fn tags(&self, indices: &[usize]) -> Result<Vec<Tag>> {
        indices.iter().map(|&i| self.tag(i)).collect()
    }

    pub fn entity_types(&self) -> Vec<EntityType> {
        EntityType::ALL.to_vec()
    }

    /// Whether label `next` may follow `prev` (None = sentence start) in IOB2.
    pub fn allowed(&self, prev: Option<usize>, next: usize) -> bool {
        self.labels[next].may_follow(prev.map(|p| self.labels[p]))
    }
}
