//! End-to-end helpers shared by the command line and the acceptance suite.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{
    build_snapshots, parse_quadruples, Quadruple, RelationId, RelationVocab, TkgDataset,
    VocabPolicy, Vocabularies,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, RankReport, SplitSelector};
use crate::forecaster::{fit, Model, TrainConfig, TrainLog};
use crate::numerics::{Tape, Tensor};
use crate::semantics::{mock_encode, TextStore};
use crate::split::{build_zero_shot, SplitConfig};
use crate::synth::{generate, PlantedTruth, SynthConfig};

/// Frequency threshold that separates held-out from regular relations on
/// the default synthetic benchmark.
pub const SYNTH_THRESHOLD: usize = 40;

/// Generates a synthetic graph and splits it at its planted horizon.
pub fn synth_dataset(cfg: &SynthConfig, threshold: usize) -> Result<(TkgDataset, PlantedTruth)> {
    let out = generate(cfg)?;
    let mut vocab = Vocabularies::default();
    let facts = parse_quadruples(out.quadruples.as_bytes(), &mut vocab, VocabPolicy::Grow)?;
    let split_timestamp = vocab
        .timeline
        .lookup(&out.planted.split_timestamp)
        .ok_or_else(|| {
            Error::Split(format!(
                "no facts at timestamp {}",
                out.planted.split_timestamp
            ))
        })?;
    let ds = build_zero_shot(
        vocab,
        &facts,
        SplitConfig {
            split_timestamp,
            freq_threshold: threshold,
        },
    )?;
    Ok((ds, out.planted))
}

/// Mock text matrices for every relation and its inverse.
pub fn mock_texts(relations: &RelationVocab, d_w: usize, seed: u64) -> Result<TextStore> {
    let n = 2 * relations.n_base();
    let matrices = (0..n)
        .map(|r| mock_encode(r, &relations.text(r), d_w, seed))
        .collect::<Result<Vec<_>>>()?;
    TextStore::new(d_w, matrices, n)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Text matrices replaced by frozen random ones.
    RandomText,
    /// History learner disabled.
    NoRhl,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::RandomText, Variant::NoRhl];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomText => "random-text",
            Variant::NoRhl => "no-rhl",
        }
    }

    pub fn apply(self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::RandomText => cfg.random_frozen_rel_emb = true,
            Variant::NoRhl => cfg.no_rhl = true,
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dataset: String,
    pub variant: Variant,
    pub zero_shot_mrr: f64,
    pub seen_mrr: f64,
    pub overall_mrr: f64,
    pub best_epoch: usize,
}

/// Trains and evaluates one configuration on both evaluation splits.
pub fn train_and_evaluate(
    ds: &TkgDataset,
    texts: &TextStore,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog, RankReport)> {
    let (model, log) = fit(ds, texts.clone(), cfg)?;
    let report = evaluate_split(&model, ds, SplitSelector::Both)?;
    Ok((model, log, report))
}

/// One row per variant, in [`Variant::ALL`] order.
pub fn ablate(
    name: &str,
    ds: &TkgDataset,
    texts: &TextStore,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    Variant::ALL
        .iter()
        .map(|&variant| {
            let (_, log, report) = train_and_evaluate(ds, texts, &variant.apply(cfg))?;
            let mrr = |m: &Option<crate::eval::BucketMetrics>| m.as_ref().map_or(0.0, |m| m.mrr);
            Ok(AblationRow {
                dataset: name.to_owned(),
                variant,
                zero_shot_mrr: mrr(&report.zero_shot),
                seen_mrr: mrr(&report.seen),
                overall_mrr: mrr(&report.overall),
                best_epoch: log.best_epoch,
            })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<16} {:<12} | {:>9} | {:>9} | {:>9}\n",
        "Dataset", "Variant", "Zero-Shot", "Seen", "Overall"
    );
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{:<16} {:<12} | {:>9.3} | {:>9.3} | {:>9.3}",
            r.dataset,
            r.variant.name(),
            r.zero_shot_mrr,
            r.seen_mrr,
            r.overall_mrr
        )
        .expect("write to string");
    }
    out
}

/// Relation map sending every relation to the same position in the next
/// planted cluster; inverses follow their base relation.
pub fn cluster_shift(relations: &RelationVocab, planted: &PlantedTruth) -> Result<Vec<RelationId>> {
    let n = relations.n_base();
    let cluster_of = |r: RelationId| {
        planted
            .relation_cluster
            .get(&relations.base_labels()[r])
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "relation `{}` is not planted",
                    relations.base_labels()[r]
                ))
            })
    };
    let clusters = (0..n).map(cluster_of).collect::<Result<Vec<_>>>()?;
    let n_clusters = clusters.iter().max().map_or(0, |c| c + 1);
    let mut members: Vec<Vec<RelationId>> = vec![Vec::new(); n_clusters];
    for (r, &c) in clusters.iter().enumerate() {
        members[c].push(r);
    }
    let mut map = vec![0; 2 * n];
    for (r, &c) in clusters.iter().enumerate() {
        let pos = members[c].iter().position(|&x| x == r).expect("member");
        let next = &members[(c + 1) % n_clusters];
        if next.is_empty() {
            return Err(Error::Config(format!(
                "cluster {} has no relations",
                (c + 1) % n_clusters
            )));
        }
        map[r] = next[pos % next.len()];
        map[r + n] = map[r] + n;
    }
    Ok(map)
}

/// Mean distance between predicted and encoded histories of each query's
/// entity pair, against the true and against relabelled histories.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryProximity {
    pub pairs: usize,
    pub true_distance: f64,
    pub relabelled_distance: f64,
}

/// Histories are read from `facts` strictly before each query's timestamp;
/// queries without any prior fact between their entities are skipped.
pub fn history_proximity(
    model: &Model,
    ds: &TkgDataset,
    queries: &[Quadruple],
    relabel: &[RelationId],
) -> Result<HistoryProximity> {
    let rhl = model
        .rhl()
        .ok_or_else(|| Error::Config("history learner is disabled".into()))?;
    let all: Vec<Quadruple> = ds.all_facts().copied().collect();
    let index = build_snapshots(&all, ds.num_timestamps(), ds.n_base());
    let mut tape = Tape::new();
    let relations = model.relation_reps(&mut tape)?;
    let relations = tape.value(relations).clone();
    let distance = |a: &Tensor, b: &Tensor| -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f64::from(x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let (mut pairs, mut near, mut far) = (0, 0.0, 0.0);
    for q in queries {
        let history = index.pair_history(q.s, q.o, q.t, model.cfg.max_history_len);
        if history.steps.iter().all(Vec::is_empty) {
            continue;
        }
        let mut shifted = history.clone();
        for step in &mut shifted.steps {
            for r in step.iter_mut() {
                *r = relabel[*r];
            }
            step.sort_unstable();
            step.dedup();
        }
        let mut tape = Tape::new();
        let rel = tape.constant(relations.clone());
        let query = tape.constant(Tensor::matrix(
            1,
            relations.cols(),
            relations.row(q.r).to_vec(),
        )?);
        let predicted = rhl.predict_history(&mut tape, &model.params, query)?;
        let real = rhl.encode_history(&mut tape, &model.params, rel, &[history], query)?;
        let fake = rhl.encode_history(&mut tape, &model.params, rel, &[shifted], query)?;
        near += distance(tape.value(predicted), tape.value(real));
        far += distance(tape.value(predicted), tape.value(fake));
        pairs += 1;
    }
    if pairs == 0 {
        return Err(Error::Config("no query has a prior history".into()));
    }
    Ok(HistoryProximity {
        pairs,
        true_distance: near / pairs as f64,
        relabelled_distance: far / pairs as f64,
    })
}
