//! Zero-shot dataset construction from a time-stamped fact list.
//!
//! Steps: cut the timeline at the split timestamp, drop evaluation facts whose
//! entities never occur before the cut, mark rare evaluation relations as
//! zero-shot, then partition the facts into train / valid / test.

use std::collections::HashSet;

use crate::data::{EntityId, Quadruple, RelationId, Timestamp, TkgDataset, Vocabularies};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitConfig {
    /// First evaluation timestamp.
    pub split_timestamp: Timestamp,
    pub freq_threshold: usize,
}

/// Splits facts into those strictly before `split_ts` and the rest.
pub fn temporal_split(
    facts: &[Quadruple],
    split_ts: Timestamp,
) -> Result<(Vec<Quadruple>, Vec<Quadruple>)> {
    let (train, eval): (Vec<_>, Vec<_>) = facts.iter().partition(|q| q.t < split_ts);
    if train.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if eval.is_empty() {
        return Err(Error::EmptySplit("eval"));
    }
    Ok((train, eval))
}

fn entities_of(facts: &[Quadruple]) -> HashSet<EntityId> {
    facts.iter().flat_map(|q| [q.s, q.o]).collect()
}

/// Keeps the evaluation facts whose subject and object both occur in `train`.
pub fn prune_unseen_entities(train: &[Quadruple], eval: &[Quadruple]) -> Vec<Quadruple> {
    let known = entities_of(train);
    eval.iter()
        .filter(|q| known.contains(&q.s) && known.contains(&q.o))
        .copied()
        .collect()
}

/// Occurrence count of each base relation.
pub fn relation_frequencies(facts: &[Quadruple], n_base: usize) -> Vec<usize> {
    let mut freq = vec![0; n_base];
    for q in facts {
        freq[q.r] += 1;
    }
    freq
}

/// Seen and zero-shot base relations.
///
/// A relation is zero-shot when its evaluation frequency is positive and below
/// `threshold`, or when it occurs in evaluation but never in training.
pub fn zero_shot_partition(
    train: &[Quadruple],
    eval: &[Quadruple],
    n_base: usize,
    threshold: usize,
) -> (Vec<RelationId>, Vec<RelationId>) {
    let freq = relation_frequencies(eval, n_base);
    let in_train: HashSet<RelationId> = train.iter().map(|q| q.r).collect();
    let (unseen, seen): (Vec<_>, Vec<_>) = (0..n_base).partition(|&r| {
        (freq[r] > 0 && freq[r] < threshold) || (freq[r] > 0 && !in_train.contains(&r))
    });
    if unseen.is_empty() {
        log::warn!("no relation falls below the frequency threshold {threshold}");
    }
    (seen, unseen)
}

/// Builds the dataset from a partition; entities that no longer occur in the
/// training facts are removed together with the evaluation facts using them.
pub fn finalize(
    mut vocab: Vocabularies,
    train: &[Quadruple],
    eval: &[Quadruple],
    unseen: &[RelationId],
    split_ts: Timestamp,
) -> Result<TkgDataset> {
    let unseen: HashSet<RelationId> = unseen.iter().copied().collect();
    for r in 0..vocab.relations.n_base() {
        vocab.relations.set_unseen(r, unseen.contains(&r));
    }
    let g_train: Vec<Quadruple> = train
        .iter()
        .filter(|q| !unseen.contains(&q.r))
        .copied()
        .collect();
    let eval = prune_unseen_entities(&g_train, eval);
    let (test, valid): (Vec<_>, Vec<_>) = eval.into_iter().partition(|q| unseen.contains(&q.r));

    let known = entities_of(&g_train);
    let map = vocab.entities.retain(|e| known.contains(&e));
    let remap = |facts: Vec<Quadruple>| -> Vec<Quadruple> {
        facts
            .into_iter()
            .map(|q| Quadruple {
                s: map[q.s].expect("kept entity"),
                o: map[q.o].expect("kept entity"),
                ..q
            })
            .collect()
    };
    let ds = TkgDataset {
        vocab,
        train: remap(g_train),
        valid: remap(valid),
        test: remap(test),
        eval_start: split_ts,
    };
    ds.validate()?;
    Ok(ds)
}

/// Runs the whole construction on a parsed fact list.
pub fn build_zero_shot(
    vocab: Vocabularies,
    facts: &[Quadruple],
    cfg: SplitConfig,
) -> Result<TkgDataset> {
    if cfg.freq_threshold == 0 {
        return Err(Error::Config(
            "frequency threshold must be at least 1".into(),
        ));
    }
    if cfg.split_timestamp == 0 || cfg.split_timestamp >= vocab.timeline.len() {
        return Err(Error::Split(format!(
            "split timestamp {} is not inside a timeline of {} steps",
            cfg.split_timestamp,
            vocab.timeline.len()
        )));
    }
    let (train, eval) = temporal_split(facts, cfg.split_timestamp)?;
    let eval = prune_unseen_entities(&train, &eval);
    let (_, unseen) =
        zero_shot_partition(&train, &eval, vocab.relations.n_base(), cfg.freq_threshold);
    finalize(vocab, &train, &eval, &unseen, cfg.split_timestamp)
}

/// Smallest timestamp leaving at least `fraction` of the facts before it.
pub fn split_timestamp_for_fraction(facts: &[Quadruple], fraction: f64) -> Timestamp {
    let mut times: Vec<Timestamp> = facts.iter().map(|q| q.t).collect();
    times.sort_unstable();
    let want = ((times.len() as f64) * fraction.clamp(0.0, 1.0)).ceil() as usize;
    match want {
        0 => 0,
        n => times[n.min(times.len()) - 1] + 1,
    }
}
