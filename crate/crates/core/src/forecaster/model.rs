use crate::data::{EntityId, RelationId, SnapshotIndex, Timestamp};
use crate::error::{Error, Result};
use crate::numerics::{count_params, GruCell, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rhl::Rhl;
use crate::semantics::{AlignmentNet, TextStore};

use super::config::{GammaMode, TrainConfig};

/// Entity table, message map and snapshot recurrence of the base forecaster.
#[derive(Clone, Debug)]
pub struct BaseModel {
    pub n_entities: usize,
    pub d: usize,
    pub window: usize,
    entities: ParamId,
    message: ParamId,
    recurrence: GruCell,
}

impl BaseModel {
    pub fn new(
        store: &mut ParamStore,
        n_entities: usize,
        d: usize,
        window: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            n_entities,
            d,
            window,
            entities: store.add_xavier("base.entities", n_entities, d, seed)?,
            message: store.add_xavier("base.message", d, 2 * d, seed)?,
            recurrence: GruCell::new(store, "base.gru", d, d, seed)?,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        [self.entities, self.message]
            .into_iter()
            .chain(self.recurrence.params())
    }

    /// Entity states after evolving through snapshots `[end − window, end)`.
    ///
    /// Each snapshot updates only the entities with incoming edges: the mean
    /// of `message · [relation ; source state]` over their edges drives one
    /// recurrence step.
    pub fn evolve(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        relations: Var,
        index: &SnapshotIndex,
        end: Timestamp,
    ) -> Result<Var> {
        let mut states = tape.param(store, self.entities);
        let message = tape.param(store, self.message);
        for tau in end.saturating_sub(self.window)..end.min(index.n_timestamps()) {
            let edges = index.incoming(tau);
            if edges.is_empty() {
                continue;
            }
            let mut targets: Vec<EntityId> = Vec::new();
            let mut seg = Vec::with_capacity(edges.len());
            for e in edges {
                if targets.last() != Some(&e.dst) {
                    targets.push(e.dst);
                }
                seg.push(targets.len() - 1);
            }
            let rel_rows: Vec<RelationId> = edges.iter().map(|e| e.rel).collect();
            let src_rows: Vec<EntityId> = edges.iter().map(|e| e.src).collect();
            let r = tape.gather_rows(relations, &rel_rows)?;
            let s = tape.gather_rows(states, &src_rows)?;
            let input = tape.concat(r, s)?;
            let msgs = tape.linear(input, message, None)?;
            let pooled = tape.segment_mean(msgs, &seg, targets.len())?;
            let prev = tape.gather_rows(states, &targets)?;
            let next = self.recurrence.step(tape, store, pooled, prev)?;
            states = tape.scatter_rows(states, &targets, next)?;
        }
        Ok(states)
    }
}

/// Query-side vectors of a batch. Scores are `combined · entityᵀ`, and the
/// history score alone is `history_probe · entityᵀ`.
#[derive(Clone, Copy, Debug)]
pub struct QueryParts {
    pub combined: Var,
    pub relation_rows: Var,
    pub history_probe: Option<Var>,
    pub predicted_history: Option<Var>,
}

/// The complete forecaster: frozen texts, alignment, base model and the
/// optional history learner.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: TrainConfig,
    pub params: ParamStore,
    texts: TextStore,
    align: AlignmentNet,
    base: BaseModel,
    rhl: Option<Rhl>,
    gamma: Option<ParamId>,
    n_base: usize,
}

impl Model {
    /// `texts` must cover all `2·n_base` relations, reciprocals included.
    pub fn new(
        cfg: TrainConfig,
        n_entities: usize,
        n_base: usize,
        texts: TextStore,
    ) -> Result<Self> {
        cfg.validate()?;
        if texts.len() != 2 * n_base {
            return Err(Error::Coverage {
                missing: (texts.len()..2 * n_base).collect(),
            });
        }
        let mut params = ParamStore::new();
        let seed = cfg.seed;
        let align = AlignmentNet::new(&mut params, texts.d_w(), cfg.dim, seed)?;
        let base = BaseModel::new(&mut params, n_entities, cfg.dim, cfg.window, seed)?;
        let (rhl, gamma) = if cfg.no_rhl {
            (None, None)
        } else {
            let rhl = Rhl::new(&mut params, cfg.dim, cfg.alpha, seed)?;
            let gamma = match cfg.gamma_mode {
                GammaMode::Learnable => {
                    Some(params.add("gamma", Tensor::vector(vec![cfg.gamma as f32]))?)
                }
                GammaMode::Fixed => None,
            };
            (Some(rhl), gamma)
        };
        Ok(Self {
            cfg,
            params,
            texts,
            align,
            base,
            rhl,
            gamma,
            n_base,
        })
    }

    pub fn texts(&self) -> &TextStore {
        &self.texts
    }

    pub fn rhl(&self) -> Option<&Rhl> {
        self.rhl.as_ref()
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn n_entities(&self) -> usize {
        self.base.n_entities
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn rhl_param_count(&self) -> usize {
        self.rhl
            .as_ref()
            .map_or(0, |r| count_params(&self.params, r.params()))
    }

    /// Current value of the history-score weight.
    pub fn gamma_value(&self) -> f64 {
        match (self.gamma, &self.rhl) {
            (_, None) => 0.0,
            (Some(id), _) => f64::from(self.params.value(id).item()),
            (None, _) => self.cfg.gamma,
        }
    }

    /// Aligned representation of every relation, row `r` for relation `r`.
    pub fn relation_reps(&self, tape: &mut Tape) -> Result<Var> {
        self.align.align_all(tape, &self.params, &self.texts)
    }

    pub fn entity_reps(
        &self,
        tape: &mut Tape,
        relations: Var,
        index: &SnapshotIndex,
        end: Timestamp,
    ) -> Result<Var> {
        self.base.evolve(tape, &self.params, relations, index, end)
    }

    /// Query vectors for `(subject, relation)` rows.
    pub fn query_parts(
        &self,
        tape: &mut Tape,
        relations: Var,
        entities: Var,
        subjects: &[EntityId],
        query_relations: &[RelationId],
    ) -> Result<QueryParts> {
        let h_s = tape.gather_rows(entities, subjects)?;
        let h_r = tape.gather_rows(relations, query_relations)?;
        let base = tape.mul(h_s, h_r)?;
        let Some(rhl) = &self.rhl else {
            return Ok(QueryParts {
                combined: base,
                relation_rows: h_r,
                history_probe: None,
                predicted_history: None,
            });
        };
        let (predicted, pattern) = rhl.patterns(tape, &self.params, h_r)?;
        let probe = rhl.score_probe(tape, &self.params, h_s, pattern)?;
        let weighted = match self.gamma {
            Some(id) => {
                let g = tape.param(&self.params, id);
                tape.scale_by(probe, g)?
            }
            None => tape.scale(probe, self.cfg.gamma as f32),
        };
        Ok(QueryParts {
            combined: tape.add(base, weighted)?,
            relation_rows: h_r,
            history_probe: Some(probe),
            predicted_history: Some(predicted),
        })
    }

    /// Total scores of every entity as the object of each query row.
    pub fn score_all(&self, tape: &mut Tape, parts: &QueryParts, entities: Var) -> Result<Var> {
        tape.matmul_t(parts.combined, entities)
    }

    /// Scores of `(s, r, ?)` queries against all entities, with entity states
    /// evolved up to (excluding) `end`.
    pub fn score_queries(
        &self,
        index: &SnapshotIndex,
        end: Timestamp,
        queries: &[(EntityId, RelationId)],
    ) -> Result<Tensor> {
        let prepared = self.prepare(index, end)?;
        self.score_prepared(&prepared, queries)
    }

    /// Relation and entity representations shared by many scoring calls.
    pub fn prepare(&self, index: &SnapshotIndex, end: Timestamp) -> Result<Prepared> {
        let mut tape = Tape::new();
        let rel = self.relation_reps(&mut tape)?;
        let ent = self.entity_reps(&mut tape, rel, index, end)?;
        Ok(Prepared {
            relations: tape.value(rel).clone(),
            entities: tape.value(ent).clone(),
        })
    }

    pub fn score_prepared(
        &self,
        prepared: &Prepared,
        queries: &[(EntityId, RelationId)],
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let rel = tape.constant(prepared.relations.clone());
        let ent = tape.constant(prepared.entities.clone());
        let (s, r): (Vec<_>, Vec<_>) = queries.iter().copied().unzip();
        let parts = self.query_parts(&mut tape, rel, ent, &s, &r)?;
        let scores = self.score_all(&mut tape, &parts, ent)?;
        Ok(tape.value(scores).clone())
    }
}

/// Representations computed once per evaluation.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub relations: Tensor,
    pub entities: Tensor,
}
