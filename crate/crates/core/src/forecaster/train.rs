use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    EntityId, PairHistory, Quadruple, RelationId, SnapshotIndex, Timestamp, TkgDataset, TrueObjects,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, SplitSelector};
use crate::numerics::{Adam, Tape, Var};
use crate::rng::{component_rng, SplitMix64};
use crate::semantics::{random_frozen, TextStore};

use super::config::TrainConfig;
use super::model::Model;

pub const CLIP_NORM: f32 = 1.0;

/// Object-prediction training queries sharing one timestamp.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub t: Timestamp,
    pub queries: Vec<(EntityId, RelationId, EntityId)>,
}

/// Both directions of every fact, grouped by timestamp in time order and
/// split into chunks of at most `batch_size` queries.
pub fn make_batches(facts: &[Quadruple], n_base: usize, batch_size: usize) -> Vec<Batch> {
    let mut by_time: BTreeMap<Timestamp, Vec<(EntityId, RelationId, EntityId)>> = BTreeMap::new();
    for &q in facts {
        let inv = q.reciprocal(n_base);
        let slot = by_time.entry(q.t).or_default();
        slot.push((q.s, q.r, q.o));
        slot.push((inv.s, inv.r, inv.o));
    }
    let mut out = Vec::new();
    for (t, mut qs) in by_time {
        qs.sort_unstable();
        for chunk in qs.chunks(batch_size.max(1)) {
            out.push(Batch {
                t,
                queries: chunk.to_vec(),
            });
        }
    }
    out
}

/// Loss components of one batch; absent terms are disabled or undefined.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub tkgf: Var,
    pub hist: Option<Var>,
    pub rhl: Option<Var>,
}

impl LossTerms {
    /// `tkgf + hist + eta · rhl`.
    pub fn total(&self, tape: &mut Tape, eta: f64) -> Result<Var> {
        let mut total = self.tkgf;
        if let Some(h) = self.hist {
            total = tape.add(total, h)?;
        }
        if let Some(r) = self.rhl {
            let w = tape.scale(r, eta as f32);
            total = tape.add(total, w)?;
        }
        Ok(total)
    }
}

/// Read-only training context.
pub struct TrainContext<'a> {
    pub index: &'a SnapshotIndex,
    pub truth: &'a TrueObjects,
}

/// Records every loss term of `batch` on `tape`. `negatives` draws the
/// sampled candidates when the configuration asks for them.
pub fn batch_losses(
    model: &Model,
    tape: &mut Tape,
    ctx: &TrainContext<'_>,
    batch: &Batch,
    negatives: &mut SplitMix64,
) -> Result<LossTerms> {
    let n_entities = model.n_entities();
    let relations = model.relation_reps(tape)?;
    let entities = model.entity_reps(tape, relations, ctx.index, batch.t)?;
    let subjects: Vec<EntityId> = batch.queries.iter().map(|q| q.0).collect();
    let rels: Vec<RelationId> = batch.queries.iter().map(|q| q.1).collect();
    let objects: Vec<EntityId> = batch.queries.iter().map(|q| q.2).collect();
    let parts = model.query_parts(tape, relations, entities, &subjects, &rels)?;

    let m = model.cfg.negatives;
    let tkgf = if m == 0 {
        let scores = model.score_all(tape, &parts, entities)?;
        tape.cross_entropy(scores, &objects)?
    } else {
        let mut candidates = Vec::with_capacity(objects.len() * (m + 1));
        let mut owners = Vec::with_capacity(candidates.capacity());
        for (i, &o) in objects.iter().enumerate() {
            candidates.push(o);
            candidates.extend((0..m).map(|_| negatives.random_range(0..n_entities)));
            owners.extend(std::iter::repeat_n(i, m + 1));
        }
        let cand = tape.gather_rows(entities, &candidates)?;
        let q = tape.gather_rows(parts.combined, &owners)?;
        let flat = tape.row_dot(q, cand)?;
        let logits = tape.reshape(flat, &[objects.len(), m + 1])?;
        tape.cross_entropy(logits, &vec![0; objects.len()])?
    };

    let (Some(rhl), Some(probe), Some(predicted)) =
        (model.rhl(), parts.history_probe, parts.predicted_history)
    else {
        return Ok(LossTerms {
            tkgf,
            hist: None,
            rhl: None,
        });
    };
    let hist = if batch.t == 0 {
        None
    } else {
        let histories: Vec<PairHistory> = batch
            .queries
            .iter()
            .map(|&(s, _, o)| {
                ctx.index
                    .pair_history(s, o, batch.t, model.cfg.max_history_len)
            })
            .collect();
        let encoded = rhl.encode_history(
            tape,
            &model.params,
            relations,
            &histories,
            parts.relation_rows,
        )?;
        Some(rhl.history_loss(tape, predicted, encoded)?)
    };
    let rhl_scores = tape.matmul_t(probe, entities)?;
    let probs = tape.sigmoid(rhl_scores);
    let mut labels = vec![0.0f32; batch.queries.len() * n_entities];
    for (i, &(s, r, _)) in batch.queries.iter().enumerate() {
        for &o in ctx.truth.get(s, r, batch.t) {
            labels[i * n_entities + o] = 1.0;
        }
    }
    let rhl_loss = tape.bce(probs, &labels)?;
    Ok(LossTerms {
        tkgf,
        hist,
        rhl: Some(rhl_loss),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-batch losses.
    pub loss: f64,
    pub tkgf: f64,
    pub hist: f64,
    pub rhl: f64,
    pub valid_mrr: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_mrr: f64,
}

/// Trains a model and returns it with the parameters of the epoch with the
/// best validation MRR.
pub fn fit(ds: &TkgDataset, texts: TextStore, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    for (name, facts) in [("train", &ds.train), ("valid", &ds.valid)] {
        if facts.is_empty() {
            return Err(Error::EmptySplit(name));
        }
    }
    let texts = if cfg.random_frozen_rel_emb {
        random_frozen(&texts, cfg.seed)
    } else {
        texts
    };
    let mut model = Model::new(cfg.clone(), ds.num_entities(), ds.n_base(), texts)?;
    let index = ds.train_index();
    let truth = TrueObjects::new(&ds.train, ds.n_base());
    let ctx = TrainContext {
        index: &index,
        truth: &truth,
    };
    let mut batches = make_batches(&ds.train, ds.n_base(), cfg.batch_size);
    let mut order_rng = component_rng(cfg.seed, "train.order");
    let mut negative_rng = component_rng(cfg.seed, "train.negatives");
    let mut adam = Adam::new(cfg.learning_rate as f32);
    let (_, eta) = cfg.effective_gamma_eta();

    let mut log = TrainLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_mrr: 0.0,
    };
    let mut best = model.params.clone();
    for epoch in 1..=cfg.epochs {
        batches.shuffle(&mut order_rng);
        let mut sums = [0.0f64; 4];
        for batch in &batches {
            let mut tape = Tape::new();
            let terms = batch_losses(&model, &mut tape, &ctx, batch, &mut negative_rng)?;
            let total = terms.total(&mut tape, eta)?;
            let value = |v: Option<Var>| v.map_or(0.0, |v| f64::from(tape.value(v).item()));
            let parts = [
                value(Some(total)),
                value(Some(terms.tkgf)),
                value(terms.hist),
                value(terms.rhl),
            ];
            if parts.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, timestamp {}: total {}, tkgf {}, hist {}, rhl {}",
                    batch.t, parts[0], parts[1], parts[2], parts[3]
                )));
            }
            for (s, p) in sums.iter_mut().zip(parts) {
                *s += p;
            }
            model.params.zero_grad();
            tape.backward_into(total, &mut model.params)?;
            model.params.clip_grad_norm(CLIP_NORM);
            adam.step(&mut model.params);
        }
        let valid = evaluate_split(&model, ds, SplitSelector::Valid)?;
        let valid_mrr = valid.overall.map_or(0.0, |m| m.mrr);
        let n = batches.len().max(1) as f64;
        let entry = EpochLog {
            epoch,
            loss: sums[0] / n,
            tkgf: sums[1] / n,
            hist: sums[2] / n,
            rhl: sums[3] / n,
            valid_mrr,
            gamma: model.gamma_value(),
        };
        info!(
            "epoch {epoch}: loss {:.4} (tkgf {:.4}, hist {:.4}, rhl {:.4}), valid mrr {:.4}",
            entry.loss, entry.tkgf, entry.hist, entry.rhl, valid_mrr
        );
        if log.best_epoch == 0 || valid_mrr > log.best_valid_mrr {
            log.best_valid_mrr = valid_mrr;
            log.best_epoch = epoch;
            best = model.params.clone();
            debug!("new best validation mrr at epoch {epoch}");
        }
        log.epochs.push(entry);
    }
    model.params.load_values(&best)?;
    Ok((model, log))
}
