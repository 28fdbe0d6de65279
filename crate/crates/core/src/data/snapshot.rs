use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::vocab::{EntityId, RelationId, Timestamp};
use super::Quadruple;

/// A directed message edge `src → dst` labelled with a relation, where
/// reverse edges carry the reciprocal relation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub dst: EntityId,
    pub src: EntityId,
    pub rel: RelationId,
}

/// Relation sets between one ordered pair over consecutive time steps
/// `start, start + 1, ...`; each set is sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairHistory {
    pub start: Timestamp,
    pub steps: Vec<Vec<RelationId>>,
}

impl PairHistory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Per-timestamp grouping of a fact set with message adjacency and an
/// ordered-pair history index.
///
/// Every read records the latest timestamp touched, so callers can prove that
/// a computation never looked past a horizon.
#[derive(Debug)]
pub struct SnapshotIndex {
    n_base: usize,
    snapshots: Vec<Vec<Quadruple>>,
    incoming: Vec<Vec<Edge>>,
    pairs: HashMap<(EntityId, EntityId), Vec<(Timestamp, RelationId)>>,
    /// One past the latest timestamp read; zero when nothing was read.
    horizon: AtomicUsize,
}

/// Groups `facts` over a timeline of `n_timestamps` steps. `n_base` is the
/// number of base relations, used to label reverse edges.
pub fn build_snapshots(facts: &[Quadruple], n_timestamps: usize, n_base: usize) -> SnapshotIndex {
    let mut snapshots = vec![Vec::new(); n_timestamps];
    let mut incoming = vec![Vec::new(); n_timestamps];
    let mut pairs: HashMap<(EntityId, EntityId), Vec<(Timestamp, RelationId)>> = HashMap::new();
    for &q in facts {
        assert!(
            q.t < n_timestamps,
            "fact {q:?} outside a timeline of {n_timestamps}"
        );
        snapshots[q.t].push(q);
        incoming[q.t].push(Edge {
            dst: q.o,
            src: q.s,
            rel: q.r,
        });
        incoming[q.t].push(Edge {
            dst: q.s,
            src: q.o,
            rel: q.r + n_base,
        });
        pairs.entry((q.s, q.o)).or_default().push((q.t, q.r));
        pairs
            .entry((q.o, q.s))
            .or_default()
            .push((q.t, q.r + n_base));
    }
    for e in &mut incoming {
        e.sort_unstable();
        e.dedup();
    }
    for v in pairs.values_mut() {
        v.sort_unstable();
        v.dedup();
    }
    SnapshotIndex {
        n_base,
        snapshots,
        incoming,
        pairs,
        horizon: AtomicUsize::new(0),
    }
}

impl SnapshotIndex {
    fn touch(&self, t: Timestamp) {
        self.horizon.fetch_max(t + 1, Ordering::Relaxed);
    }

    pub fn n_timestamps(&self) -> usize {
        self.snapshots.len()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn snapshot(&self, t: Timestamp) -> &[Quadruple] {
        self.touch(t);
        &self.snapshots[t]
    }

    /// Message edges of snapshot `t`, sorted by destination.
    pub fn incoming(&self, t: Timestamp) -> &[Edge] {
        self.touch(t);
        &self.incoming[t]
    }

    pub fn num_facts(&self) -> usize {
        self.snapshots.iter().map(Vec::len).sum()
    }

    /// Relation sets between `s` and `o` on the most recent `min(t, max_len)`
    /// steps before `t`. A fact `(o, r, s)` contributes the inverse of `r`.
    pub fn pair_history(
        &self,
        s: EntityId,
        o: EntityId,
        t: Timestamp,
        max_len: usize,
    ) -> PairHistory {
        let t = t.min(self.n_timestamps());
        let start = t.saturating_sub(max_len.max(1));
        let mut steps = vec![Vec::new(); t - start];
        if t > 0 {
            self.touch(t - 1);
        }
        if let Some(events) = self.pairs.get(&(s, o)) {
            let from = events.partition_point(|&(ti, _)| ti < start);
            for &(ti, r) in events[from..].iter().take_while(|&&(ti, _)| ti < t) {
                steps[ti - start].push(r);
            }
        }
        PairHistory { start, steps }
    }

    /// Latest timestamp read since construction or the last reset.
    pub fn max_timestamp_read(&self) -> Option<Timestamp> {
        self.horizon.load(Ordering::Relaxed).checked_sub(1)
    }

    pub fn reset_access_log(&self) {
        self.horizon.store(0, Ordering::Relaxed);
    }
}
