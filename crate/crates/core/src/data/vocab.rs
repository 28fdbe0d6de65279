use std::collections::HashMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type EntityId = usize;
pub type RelationId = usize;
pub type Timestamp = usize;

/// Prefix of every reciprocal relation's text.
pub const INVERSE_PREFIX: &str = "Inversed ";

/// Whether parsing may introduce labels missing from a vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VocabPolicy {
    Grow,
    Fixed,
}

/// Bijection between labels and dense ids, in first-seen order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for l in labels {
            let l = l.into();
            if v.index.contains_key(&l) {
                return Err(Error::Format(format!("duplicate vocabulary label `{l}`")));
            }
            v.insert(l);
        }
        Ok(v)
    }

    fn insert(&mut self, label: String) -> usize {
        let id = self.labels.len();
        self.index.insert(label.clone(), id);
        self.labels.push(label);
        id
    }

    pub fn get(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn resolve(
        &mut self,
        label: &str,
        policy: VocabPolicy,
        kind: &'static str,
    ) -> Result<usize> {
        match (self.get(label), policy) {
            (Some(id), _) => Ok(id),
            (None, VocabPolicy::Grow) => Ok(self.insert(label.to_owned())),
            (None, VocabPolicy::Fixed) => Err(Error::UnknownLabel {
                kind,
                label: label.to_owned(),
            }),
        }
    }

    pub fn label(&self, id: usize) -> &str {
        &self.labels[id]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keeps only the ids for which `keep` holds, renumbering densely.
    /// Returns the old → new id map.
    pub fn retain(&mut self, keep: impl Fn(usize) -> bool) -> Vec<Option<usize>> {
        let old = std::mem::take(&mut self.labels);
        self.index.clear();
        old.into_iter()
            .enumerate()
            .map(|(i, l)| keep(i).then(|| self.insert(l)))
            .collect()
    }
}

/// Relation texts plus the reciprocal pairing and the seen/unseen partition.
///
/// Base relations occupy `0..n_base`; once reciprocals are added, relation
/// `r + n_base` is the inverse of base relation `r`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationVocab {
    base: Vocab,
    reciprocals: bool,
    unseen: Vec<bool>,
}

impl RelationVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let base = Vocab::from_labels(labels)?;
        let unseen = vec![false; base.len()];
        Ok(Self {
            base,
            reciprocals: false,
            unseen,
        })
    }

    pub fn resolve(&mut self, label: &str, policy: VocabPolicy) -> Result<RelationId> {
        if let Some(id) = self.base.get(label) {
            return Ok(id);
        }
        if self.reciprocals && policy == VocabPolicy::Grow {
            return Err(Error::ReciprocalsPresent);
        }
        let id = self.base.resolve(label, policy, "relation")?;
        self.unseen.push(false);
        Ok(id)
    }

    /// Appends the inverse of every base relation.
    pub fn add_reciprocals(&mut self) -> Result<()> {
        if self.reciprocals {
            return Err(Error::ReciprocalsPresent);
        }
        self.reciprocals = true;
        Ok(())
    }

    pub fn has_reciprocals(&self) -> bool {
        self.reciprocals
    }

    pub fn n_base(&self) -> usize {
        self.base.len()
    }

    pub fn len(&self) -> usize {
        if self.reciprocals {
            2 * self.base.len()
        } else {
            self.base.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn is_reciprocal(&self, r: RelationId) -> bool {
        r >= self.base.len()
    }

    /// Base relation underlying `r`.
    pub fn base_of(&self, r: RelationId) -> RelationId {
        r % self.base.len().max(1)
    }

    /// The paired relation of `r`, or `None` before reciprocals exist.
    pub fn inverse(&self, r: RelationId) -> Option<RelationId> {
        let n = self.base.len();
        match (self.reciprocals, r < n) {
            (false, _) => None,
            (true, true) => Some(r + n),
            (true, false) => Some(r - n),
        }
    }

    pub fn text(&self, r: RelationId) -> String {
        let base = self.base.label(self.base_of(r));
        if self.is_reciprocal(r) {
            format!("{INVERSE_PREFIX}{base}")
        } else {
            base.to_owned()
        }
    }

    pub fn base_labels(&self) -> &[String] {
        self.base.labels()
    }

    pub fn get(&self, label: &str) -> Option<RelationId> {
        self.base.get(label)
    }

    /// Unseen status; shared by a relation and its inverse.
    pub fn is_unseen(&self, r: RelationId) -> bool {
        self.unseen[self.base_of(r)]
    }

    pub fn set_unseen(&mut self, base: RelationId, unseen: bool) {
        self.unseen[base] = unseen;
    }

    pub fn unseen_base(&self) -> impl Iterator<Item = RelationId> + '_ {
        (0..self.n_base()).filter(|&r| self.unseen[r])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeKind {
    Integer,
    Date,
}

pub(crate) fn is_time_label(label: &str) -> bool {
    time_key(label).is_some()
}

fn time_key(label: &str) -> Option<(TimeKind, i64)> {
    if let Ok(v) = label.parse::<i64>() {
        return Some((TimeKind::Integer, v));
    }
    NaiveDate::parse_from_str(label, "%Y-%m-%d").ok().map(|d| {
        (
            TimeKind::Date,
            i64::from(chrono::Datelike::num_days_from_ce(&d)),
        )
    })
}

/// Dense chronological timeline; index `i` is the `i`-th distinct time point.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Timeline {
    labels: Vec<String>,
    keys: Vec<i64>,
    kind: Option<TimeKind>,
    by_key: HashMap<i64, Timestamp>,
}

impl Timeline {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a timeline from labels that must already be strictly chronological.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tl = Self::new();
        for l in labels {
            let l = l.into();
            let key = tl.key_of(&l)?;
            if tl.keys.last().is_some_and(|&k| k >= key) {
                return Err(Error::Timestamp(format!(
                    "{l} (timeline not strictly increasing)"
                )));
            }
            tl.push(l, key);
        }
        Ok(tl)
    }

    /// Numeric time for `label`, fixing the timeline's kind on first use.
    fn key_of(&mut self, label: &str) -> Result<i64> {
        let (kind, key) = time_key(label).ok_or_else(|| Error::Timestamp(label.to_owned()))?;
        match self.kind {
            Some(k) if k != kind => Err(Error::Timestamp(format!(
                "{label} (mixes integer and date timestamps)"
            ))),
            _ => {
                self.kind = Some(kind);
                Ok(key)
            }
        }
    }

    fn push(&mut self, label: String, key: i64) {
        self.by_key.insert(key, self.labels.len());
        self.labels.push(label);
        self.keys.push(key);
    }

    /// Index of an existing time point.
    pub fn lookup(&self, label: &str) -> Option<Timestamp> {
        let (kind, key) = time_key(label)?;
        if self.kind.is_some_and(|k| k != kind) {
            return None;
        }
        self.by_key.get(&key).copied()
    }

    /// Registers new time points. Labels already present are ignored; new ones
    /// must all lie after the current end so existing indices stay valid.
    pub fn extend<'a>(&mut self, labels: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut fresh: Vec<(i64, &str)> = Vec::new();
        for l in labels {
            let key = self.key_of(l)?;
            if !self.by_key.contains_key(&key) {
                fresh.push((key, l));
            }
        }
        fresh.sort_by_key(|&(k, _)| k);
        fresh.dedup_by_key(|&mut (k, _)| k);
        if let (Some(&(first, label)), Some(&last)) = (fresh.first(), self.keys.last()) {
            if first < last {
                return Err(Error::Timestamp(format!(
                    "{label} (precedes existing timeline)"
                )));
            }
        }
        for (k, l) in fresh {
            self.push(l.to_owned(), k);
        }
        Ok(())
    }

    pub fn label(&self, t: Timestamp) -> &str {
        &self.labels[t]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Entity, relation and time vocabularies of one dataset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabularies {
    pub entities: Vocab,
    pub relations: RelationVocab,
    pub timeline: Timeline,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_texts_and_pairing() {
        let mut rv =
            RelationVocab::from_labels(["r0", "Reduce or stop military assistance"]).unwrap();
        assert_eq!(rv.inverse(0), None);
        rv.add_reciprocals().unwrap();
        assert_eq!(rv.len(), 4);
        assert_eq!(rv.text(3), "Inversed Reduce or stop military assistance");
        assert_eq!(rv.text(2), "Inversed r0");
        assert_eq!(rv.inverse(1), Some(3));
        assert_eq!(rv.inverse(3), Some(1));
        assert!(matches!(
            rv.add_reciprocals(),
            Err(Error::ReciprocalsPresent)
        ));
        assert!(matches!(
            rv.resolve("new", VocabPolicy::Grow),
            Err(Error::ReciprocalsPresent)
        ));
    }

    #[test]
    fn unseen_status_is_shared_with_inverse() {
        let mut rv = RelationVocab::from_labels(["a", "b", "c"]).unwrap();
        rv.add_reciprocals().unwrap();
        rv.set_unseen(1, true);
        for r in 0..rv.len() {
            assert_eq!(rv.is_unseen(r), rv.is_unseen(rv.inverse(r).unwrap()));
        }
        assert_eq!(rv.unseen_base().collect::<Vec<_>>(), vec![1]);
    }

    #[test]
    fn timeline_orders_chronologically() {
        let mut tl = Timeline::new();
        tl.extend(["2023-08-03", "2023-08-01", "2023-08-03", "2023-08-02"])
            .unwrap();
        assert_eq!(tl.labels(), &["2023-08-01", "2023-08-02", "2023-08-03"]);
        assert_eq!(tl.lookup("2023-08-02"), Some(1));
        assert!(tl.extend(["2023-07-01"]).is_err());
        tl.extend(["2023-09-01"]).unwrap();
        assert_eq!(tl.lookup("2023-09-01"), Some(3));
        assert!(tl.extend(["12"]).is_err());
        assert!(Timeline::new().extend(["yesterday"]).is_err());
    }

    #[test]
    fn integer_timeline_compresses_gaps() {
        let mut tl = Timeline::new();
        tl.extend(["100", "7", "24"]).unwrap();
        assert_eq!(tl.labels(), &["7", "24", "100"]);
        assert!(Timeline::from_labels(["3", "1"]).is_err());
    }

    #[test]
    fn retain_renumbers() {
        let mut v = Vocab::from_labels(["a", "b", "c", "d"]).unwrap();
        let map = v.retain(|i| i % 2 == 1);
        assert_eq!(map, vec![None, Some(0), None, Some(1)]);
        assert_eq!(v.get("d"), Some(1));
        assert_eq!(v.get("a"), None);
    }
}
