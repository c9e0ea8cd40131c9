use serde::{Deserialize, Serialize};

/// How a unit index addresses an activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// One scalar position of the row-major activation.
    Scalar,
    /// One channel plane of an `h × w × l` activation.
    Channel,
}

/// Set of hidden units at a split; the mediator `V_k` of a concept.
///
/// Everything not in the set is the complement, which is never stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSet {
    indices: Vec<usize>,
    granularity: Granularity,
    split: usize,
}

impl UnitSet {
    pub fn new(indices: impl IntoIterator<Item = usize>, granularity: Granularity, split: usize) -> Self {
        let mut indices: Vec<usize> = indices.into_iter().collect();
        indices.sort_unstable();
        indices.dedup();
        Self {
            indices,
            granularity,
            split,
        }
    }

    pub fn empty(granularity: Granularity, split: usize) -> Self {
        Self::new(std::iter::empty(), granularity, split)
    }

    /// Every unit in `0..count`.
    pub fn all(count: usize, granularity: Granularity, split: usize) -> Self {
        Self::new(0..count, granularity, split)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }

    /// Units in `0..count` that are not in this set.
    pub fn complement(&self, count: usize) -> Self {
        Self::new(
            (0..count).filter(|i| !self.contains(*i)),
            self.granularity,
            self.split,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_sorts_and_dedups() {
        let u = UnitSet::new([5, 1, 5, 3], Granularity::Scalar, 2);
        assert_eq!(u.indices(), &[1, 3, 5]);
        assert!(u.contains(3));
        assert!(!u.contains(2));
    }

    #[test]
    fn complement_partitions_range() {
        let u = UnitSet::new([0, 2], Granularity::Channel, 5);
        let c = u.complement(4);
        assert_eq!(c.indices(), &[1, 3]);
        assert_eq!(c.split(), 5);
    }
}
