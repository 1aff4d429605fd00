use std::cell::Cell;
use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::ops::Bound;

use ordered_float::OrderedFloat;

thread_local! {
    static COMPARISONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of ordered-index key comparisons performed on this thread.
///
/// Used to check the logarithmic cost of sorted-set commands without relying
/// on wall-clock timing.
pub fn comparisons() -> u64 {
    COMPARISONS.with(Cell::get)
}

/// Position in the ordered index: score first, then member bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
struct IndexKey {
    score: OrderedFloat<f64>,
    member: Vec<u8>,
}

impl Ord for IndexKey {
    fn cmp(&self, other: &Self) -> Ordering {
        COMPARISONS.with(|c| c.set(c.get() + 1));
        self.score.cmp(&other.score).then_with(|| self.member.cmp(&other.member))
    }
}

impl PartialOrd for IndexKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    score: f64,
    /// Member is a rendering of its own score, so the pair costs one double.
    score_only: bool,
}

/// Members with scores, ordered by `(score, member)`.
///
/// A balanced ordered index gives logarithmic inserts and range starts; the
/// member map gives constant-time score lookups.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SortedSet {
    index: BTreeSet<IndexKey>,
    members: HashMap<Vec<u8>, Entry>,
}

impl SortedSet {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Inserts or re-scores `member`. Returns true if it was new.
    pub fn insert(&mut self, member: &[u8], score: f64, score_only: bool) -> bool {
        let entry = Entry { score, score_only };
        match self.members.insert(member.to_vec(), entry) {
            Some(old) => {
                if old.score != score {
                    self.index.remove(&IndexKey {
                        score: OrderedFloat(old.score),
                        member: member.to_vec(),
                    });
                    self.index.insert(IndexKey {
                        score: OrderedFloat(score),
                        member: member.to_vec(),
                    });
                }
                false
            }
            None => {
                self.index.insert(IndexKey {
                    score: OrderedFloat(score),
                    member: member.to_vec(),
                });
                true
            }
        }
    }

    pub fn score(&self, member: &[u8]) -> Option<f64> {
        self.members.get(member).map(|e| e.score)
    }

    pub fn remove(&mut self, member: &[u8]) -> bool {
        match self.members.remove(member) {
            Some(old) => {
                self.index.remove(&IndexKey {
                    score: OrderedFloat(old.score),
                    member: member.to_vec(),
                });
                true
            }
            None => false,
        }
    }

    /// Removes members with `min <= score <= max`.
    pub fn remove_range_by_score(&mut self, min: f64, max: f64) -> usize {
        let lower = Bound::Included(IndexKey {
            score: OrderedFloat(min),
            member: Vec::new(),
        });
        let upper = if max == f64::INFINITY {
            Bound::Unbounded
        } else {
            // Empty member sorts first, so this excludes exactly the scores above max.
            Bound::Excluded(IndexKey {
                score: OrderedFloat(max.next_up()),
                member: Vec::new(),
            })
        };
        let doomed: Vec<IndexKey> = self.index.range((lower, upper)).cloned().collect();
        for key in &doomed {
            self.index.remove(key);
            self.members.remove(&key.member);
        }
        doomed.len()
    }

    /// Ascending `(member, score)` pairs with ranks `start..=stop`.
    pub fn range(&self, start: usize, stop: usize) -> Vec<(Vec<u8>, f64)> {
        if start > stop {
            return Vec::new();
        }
        self.index
            .iter()
            .skip(start)
            .take(stop - start + 1)
            .map(|k| (k.member.clone(), k.score.0))
            .collect()
    }

    /// Descending `(member, score)` pairs with ranks `start..=stop`, rank 0
    /// being the highest score.
    pub fn rev_range(&self, start: usize, stop: usize) -> Vec<(Vec<u8>, f64)> {
        if start > stop {
            return Vec::new();
        }
        self.index
            .iter()
            .rev()
            .skip(start)
            .take(stop - start + 1)
            .map(|k| (k.member.clone(), k.score.0))
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[u8], f64)> {
        self.index.iter().map(|k| (k.member.as_slice(), k.score.0))
    }

    /// Logical bytes: 8 per score-only entry, 16 per (score, id) entry.
    pub fn logical_bytes(&self) -> u64 {
        self.members.values().map(|e| if e.score_only { 8 } else { 16 }).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(set: &SortedSet) -> Vec<f64> {
        set.iter().map(|(_, s)| s).collect()
    }

    #[test]
    fn iteration_orders_by_score_then_member() {
        let mut set = SortedSet::default();
        set.insert(b"c", 3.0, false);
        set.insert(b"a", 1.0, false);
        set.insert(b"b", 2.0, false);
        set.insert(b"a2", 2.0, false);
        assert_eq!(scores(&set), vec![1.0, 2.0, 2.0, 3.0]);
        let members: Vec<&[u8]> = set.iter().map(|(m, _)| m).collect();
        assert_eq!(members, vec![&b"a"[..], b"a2", b"b", b"c"]);
    }

    #[test]
    fn rescoring_moves_member() {
        let mut set = SortedSet::default();
        assert!(set.insert(b"a", 1.0, false));
        assert!(!set.insert(b"a", 5.0, false));
        set.insert(b"b", 2.0, false);
        assert_eq!(set.len(), 2);
        assert_eq!(set.rev_range(0, 0), vec![(b"a".to_vec(), 5.0)]);
    }

    #[test]
    fn range_removal_is_inclusive_at_both_ends() {
        let mut set = SortedSet::default();
        for (m, s) in [(&b"x"[..], 1.0), (b"y", 2.0), (b"z", 2.0), (b"w", 3.0)] {
            set.insert(m, s, false);
        }
        assert_eq!(set.remove_range_by_score(2.0, 2.0), 2);
        assert_eq!(scores(&set), vec![1.0, 3.0]);
        assert_eq!(set.remove_range_by_score(f64::NEG_INFINITY, f64::INFINITY), 2);
        assert!(set.is_empty());
    }

    #[test]
    fn accounting_distinguishes_score_only_members() {
        let mut set = SortedSet::default();
        set.insert(b"1", 1.0, true);
        set.insert(b"id", 1.0, false);
        assert_eq!(set.logical_bytes(), 24);
    }
}
