//! Filtered ranking evaluation with zero-shot / seen / overall buckets.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    build_snapshots, EntityId, Quadruple, RelationId, SplitName, Timestamp, TkgDataset, TrueObjects,
};
use crate::error::{Error, Result};
use crate::forecaster::{Model, Prepared};
use crate::numerics::Tensor;
use crate::rng::component_rng;

/// Queries scored per parallel work item.
pub const EVAL_CHUNK: usize = 256;

/// Which evaluation split a query comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Valid,
    Test,
}

impl Origin {
    pub fn split(self) -> SplitName {
        match self {
            Origin::Valid => SplitName::Valid,
            Origin::Test => SplitName::Test,
        }
    }
}

/// Evaluation splits to include in a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSelector {
    Valid,
    Test,
    Both,
}

impl SplitSelector {
    pub fn origins(self) -> &'static [Origin] {
        match self {
            SplitSelector::Valid => &[Origin::Valid],
            SplitSelector::Test => &[Origin::Test],
            SplitSelector::Both => &[Origin::Valid, Origin::Test],
        }
    }
}

impl std::str::FromStr for SplitSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// An object-prediction query `(s, r, ?, t)` with its answer `o`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LpQuery {
    pub s: EntityId,
    pub r: RelationId,
    pub o: EntityId,
    pub t: Timestamp,
    pub origin: Origin,
    /// Converted from a subject-prediction query via the reciprocal relation.
    pub reciprocal: bool,
}

/// Both prediction directions of every fact, original first.
pub fn queries_of(facts: &[Quadruple], n_base: usize, origin: Origin) -> Vec<LpQuery> {
    facts
        .iter()
        .flat_map(|&q| {
            let inv = q.reciprocal(n_base);
            [
                LpQuery {
                    s: q.s,
                    r: q.r,
                    o: q.o,
                    t: q.t,
                    origin,
                    reciprocal: false,
                },
                LpQuery {
                    s: inv.s,
                    r: inv.r,
                    o: inv.o,
                    t: inv.t,
                    origin,
                    reciprocal: true,
                },
            ]
        })
        .collect()
}

/// Filtered rank of `answer`: one plus the unfiltered candidates scoring
/// higher, plus those tying with it (ties count against the answer).
/// `filtered` must not contain `answer`.
pub fn filtered_rank(scores: &[f32], answer: EntityId, filtered: &[EntityId]) -> Result<usize> {
    if filtered.contains(&answer) {
        return Err(Error::Internal(format!(
            "answer {answer} is in its own filter set"
        )));
    }
    let target = *scores.get(answer).ok_or_else(|| {
        Error::Internal(format!(
            "answer {answer} outside {} candidates",
            scores.len()
        ))
    })?;
    if target.is_nan() {
        return Err(Error::Numeric(format!("score of answer {answer} is NaN")));
    }
    let mut rank = 1;
    for (e, &v) in scores.iter().enumerate() {
        if e != answer && v >= target && !filtered.contains(&e) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Other true objects of the query, used as its filter set.
pub fn filter_set(truth: &TrueObjects, q: &LpQuery) -> Vec<EntityId> {
    truth
        .get(q.s, q.r, q.t)
        .iter()
        .copied()
        .filter(|&e| e != q.o)
        .collect()
}

/// Anything that scores every entity as the object of `(s, r)` queries.
pub trait Scorer: Sync {
    fn num_entities(&self) -> usize;

    /// One row of `num_entities` scores per query.
    fn score(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor>;
}

/// A trained model with its entity states fixed at the end of training.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub prepared: Prepared,
}

impl Scorer for ModelScorer<'_> {
    fn num_entities(&self) -> usize {
        self.model.n_entities()
    }

    fn score(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor> {
        self.model.score_prepared(&self.prepared, queries)
    }
}

/// Independent uniform scores, reproducible per `(seed, s, r)`.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    pub n_entities: usize,
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn num_entities(&self) -> usize {
        self.n_entities
    }

    fn score(&self, queries: &[(EntityId, RelationId)]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(queries.len() * self.n_entities);
        for &(s, r) in queries {
            let mut rng = component_rng(self.seed, &format!("random_scorer.{s}.{r}"));
            data.extend((0..self.n_entities).map(|_| rng.random::<f32>()));
        }
        Tensor::matrix(queries.len(), self.n_entities, data)
    }
}

/// Ranks every query; chunks are scored in parallel, results keep query order.
pub fn rank_queries(
    scorer: &dyn Scorer,
    queries: &[LpQuery],
    truth: &TrueObjects,
) -> Result<Vec<usize>> {
    let chunks: Vec<Result<Vec<usize>>> = queries
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let pairs: Vec<(EntityId, RelationId)> = chunk.iter().map(|q| (q.s, q.r)).collect();
            let scores = scorer.score(&pairs)?;
            if scores.rows() != chunk.len() || scores.cols() != scorer.num_entities() {
                return Err(Error::shape(
                    "score",
                    format!("{:?} for {} queries", scores.shape(), chunk.len()),
                ));
            }
            chunk
                .iter()
                .enumerate()
                .map(|(i, q)| filtered_rank(scores.row(i), q.o, &filter_set(truth, q)))
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(queries.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl BucketMetrics {
    /// `None` for an empty bucket.
    pub fn from_ranks(ranks: impl IntoIterator<Item = usize>) -> Option<Self> {
        let (mut n, mut rr, mut h1, mut h3, mut h10) = (0usize, 0.0, 0usize, 0usize, 0usize);
        for r in ranks {
            n += 1;
            rr += 1.0 / r as f64;
            h1 += usize::from(r <= 1);
            h3 += usize::from(r <= 3);
            h10 += usize::from(r <= 10);
        }
        (n > 0).then(|| {
            let f = n as f64;
            Self {
                count: n,
                mrr: rr / f,
                hits1: h1 as f64 / f,
                hits3: h3 as f64 / f,
                hits10: h10 as f64 / f,
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedQuery {
    #[serde(flatten)]
    pub query: LpQuery,
    pub rank: usize,
}

/// Ranks per query; zero-shot covers test queries, seen covers valid
/// queries and overall pools both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub zero_shot: Option<BucketMetrics>,
    pub seen: Option<BucketMetrics>,
    pub overall: Option<BucketMetrics>,
    pub ranks: Vec<RankedQuery>,
}

impl RankReport {
    pub fn new(queries: &[LpQuery], ranks: &[usize]) -> Self {
        let bucket = |o: Option<Origin>| {
            BucketMetrics::from_ranks(
                queries
                    .iter()
                    .zip(ranks)
                    .filter(|(q, _)| o.is_none_or(|o| q.origin == o))
                    .map(|(_, &r)| r),
            )
        };
        Self {
            zero_shot: bucket(Some(Origin::Test)),
            seen: bucket(Some(Origin::Valid)),
            overall: bucket(None),
            ranks: queries
                .iter()
                .zip(ranks)
                .map(|(&query, &rank)| RankedQuery { query, rank })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Aligned text table with one column per bucket.
    pub fn table(&self) -> String {
        let cols = [
            ("Zero-Shot Relations", &self.zero_shot),
            ("Seen Relations", &self.seen),
            ("Overall", &self.overall),
        ];
        let mut out = format!("{:<8}", "Metric");
        for (name, _) in &cols {
            write!(out, " | {name:>19}").expect("write to string");
        }
        out.push('\n');
        out.push_str(&"-".repeat(out.len() - 1));
        out.push('\n');
        let rows: [(&str, fn(&BucketMetrics) -> f64); 4] = [
            ("MRR", |m| m.mrr),
            ("Hits@1", |m| m.hits1),
            ("Hits@3", |m| m.hits3),
            ("Hits@10", |m| m.hits10),
        ];
        for (label, get) in rows {
            write!(out, "{label:<8}").expect("write to string");
            for (_, m) in &cols {
                match m {
                    Some(m) => write!(out, " | {:>19.3}", get(m)),
                    None => write!(out, " | {:>19}", "-"),
                }
                .expect("write to string");
            }
            out.push('\n');
        }
        write!(out, "{:<8}", "Queries").expect("write to string");
        for (_, m) in &cols {
            match m {
                Some(m) => write!(out, " | {:>19}", m.count),
                None => write!(out, " | {:>19}", "-"),
            }
            .expect("write to string");
        }
        out.push('\n');
        out
    }
}

/// Queries of the selected splits, in split order.
pub fn split_queries(ds: &TkgDataset, which: SplitSelector) -> Result<Vec<LpQuery>> {
    let mut out = Vec::new();
    for &origin in which.origins() {
        let facts = ds.split(origin.split());
        if facts.is_empty() {
            return Err(Error::EmptySplit(match origin {
                Origin::Valid => "valid",
                Origin::Test => "test",
            }));
        }
        out.extend(queries_of(facts, ds.n_base(), origin));
    }
    Ok(out)
}

/// Evaluates a model on the selected splits.
///
/// Entity states evolve only through the latest training snapshots. The
/// snapshot index covers every fact so that the access log proves no
/// evaluation-period fact was read.
pub fn evaluate_split(model: &Model, ds: &TkgDataset, which: SplitSelector) -> Result<RankReport> {
    let queries = split_queries(ds, which)?;
    let all: Vec<Quadruple> = ds.all_facts().copied().collect();
    let index = build_snapshots(&all, ds.num_timestamps(), ds.n_base());
    let end = ds.max_train_time().map_or(0, |t| t + 1);
    let prepared = model.prepare(&index, end)?;
    if let Some(t) = index.max_timestamp_read().filter(|&t| t >= ds.eval_start) {
        return Err(Error::Internal(format!(
            "evaluation read timestamp {t}, evaluation starts at {}",
            ds.eval_start
        )));
    }
    let truth = TrueObjects::new(ds.all_facts(), ds.n_base());
    let scorer = ModelScorer { model, prepared };
    let ranks = rank_queries(&scorer, &queries, &truth)?;
    Ok(RankReport::new(&queries, &ranks))
}
