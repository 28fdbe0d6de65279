//! Relation history learner.
//!
//! For a query relation the learner predicts what the history between the
//! query's entities should look like, advances that prediction by one step of
//! the history recurrence, and matches the result against entity pairs with
//! a trilinear core tensor. During training the prediction is pulled towards
//! the recurrence's encoding of the real history.

use crate::data::{PairHistory, RelationId};
use crate::error::{Error, Result};
use crate::numerics::{GruCell, Mlp, MlpSpec, ParamId, ParamStore, Scalar, Tape, Var};

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Rhl {
    pub d: usize,
    /// Weight of the learned correction in the history prediction.
    pub alpha: f64,
    query_map: Mlp,
    recurrence: GruCell,
    empty_step: ParamId,
    predictor: Mlp,
    core: ParamId,
}

impl Rhl {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        d: usize,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            d,
            alpha,
            query_map: Mlp::new(store, "rhl.query", MlpSpec::two_layer(d, d, d), seed)?,
            recurrence: GruCell::new(store, "rhl.gru", d, d, seed)?,
            empty_step: store.add_uniform(
                "rhl.empty",
                &[d],
                (6.0 / (d + 1) as f64).sqrt(),
                seed,
            )?,
            predictor: Mlp::new(store, "rhl.predict", MlpSpec::two_layer(d, d, d), seed)?,
            core: store.add_uniform("rhl.core", &[d, d, d], 0.1, seed)?,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.query_map
            .params()
            .chain(self.recurrence.params())
            .chain([self.empty_step])
            .chain(self.predictor.params())
            .chain([self.core])
    }

    pub fn core(&self) -> ParamId {
        self.core
    }

    pub fn recurrence(&self) -> &GruCell {
        &self.recurrence
    }

    /// Projected queries used as attention probes by [`Rhl::aggregate`].
    pub fn probe<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
    ) -> Result<Var> {
        self.query_map.forward(tape, store, queries)
    }

    /// Attention pooling of each row's member relations against its probe;
    /// rows without members take the learned empty-step vector.
    pub fn aggregate<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        relations: Var,
        sets: &[Vec<RelationId>],
        probes: Var,
    ) -> Result<Var> {
        let empty = tape.param(store, self.empty_step);
        tape.attend(relations, probes, empty, sets)
    }

    /// Encodes equal-length histories, one per query row; the recurrence
    /// starts from the first step's aggregate.
    pub fn encode_history<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        relations: Var,
        histories: &[PairHistory],
        queries: Var,
    ) -> Result<Var> {
        let len = histories.first().map_or(0, PairHistory::len);
        if len == 0 {
            return Err(Error::shape("encode_history", "empty history"));
        }
        if histories.iter().any(|h| h.len() != len) {
            return Err(Error::shape("encode_history", "histories differ in length"));
        }
        let probes = self.probe(tape, store, queries)?;
        let mut state = None;
        for i in 0..len {
            let sets: Vec<Vec<RelationId>> = histories.iter().map(|h| h.steps[i].clone()).collect();
            let step = self.aggregate(tape, store, relations, &sets, probes)?;
            state = Some(match state {
                None => step,
                Some(h) => self.recurrence.step(tape, store, step, h)?,
            });
        }
        Ok(state.expect("non-empty history"))
    }

    /// History predicted from the query relation alone:
    /// `alpha · predictor(q) + q`.
    pub fn predict_history<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
    ) -> Result<Var> {
        let correction = self.predictor.forward(tape, store, queries)?;
        let correction = tape.scale(correction, F::of(self.alpha));
        tape.add(correction, queries)
    }

    pub fn history_loss<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        predicted: Var,
        encoded: Var,
    ) -> Result<Var> {
        tape.mse(predicted, encoded)
    }

    /// One more recurrence step from the predicted history with the query as input.
    pub fn pattern_step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
        predicted: Var,
    ) -> Result<Var> {
        self.recurrence.step(tape, store, queries, predicted)
    }

    /// Patterns for query rows: prediction followed by one recurrence step.
    pub fn patterns<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        queries: Var,
    ) -> Result<(Var, Var)> {
        let predicted = self.predict_history(tape, store, queries)?;
        let pattern = self.pattern_step(tape, store, queries, predicted)?;
        Ok((predicted, pattern))
    }

    /// Raw trilinear match score of each `(subject, pattern, object)` row.
    pub fn score<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        subjects: Var,
        patterns: Var,
        objects: Var,
    ) -> Result<Var> {
        let core = tape.param(store, self.core);
        tape.tucker3(core, subjects, patterns, objects)
    }

    /// Per-row vector `v` with `v · o` equal to [`Rhl::score`] for any object `o`.
    pub fn score_probe<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        subjects: Var,
        patterns: Var,
    ) -> Result<Var> {
        let core = tape.param(store, self.core);
        tape.tucker_project(core, subjects, patterns)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{random_uniform, Tensor};
    use crate::rng::component_rng;

    fn setup(d: usize) -> (ParamStore<f64>, Rhl) {
        let mut store = ParamStore::new();
        let rhl = Rhl::new(&mut store, d, DEFAULT_ALPHA, 11).unwrap();
        (store, rhl)
    }

    fn history(steps: Vec<Vec<usize>>) -> PairHistory {
        PairHistory { start: 0, steps }
    }

    #[test]
    fn aggregate_examples() {
        let (store, rhl) = setup(3);
        let mut r = component_rng(1, "agg");
        let rel_t = random_uniform::<f64>(&[4, 3], 1.0, &mut r);
        let query_t = random_uniform::<f64>(&[3], 1.0, &mut r);
        let mut t = Tape::new();
        let rels = t.input(rel_t.clone());
        let q = t.input(query_t.clone());
        let probe = rhl.probe(&mut t, &store, q).unwrap();

        let one = rhl
            .aggregate(&mut t, &store, rels, &[vec![2]], probe)
            .unwrap();
        assert_eq!(t.value(one).data(), rel_t.row(2));

        let empty = rhl
            .aggregate(&mut t, &store, rels, &[vec![]], probe)
            .unwrap();
        assert_eq!(t.value(empty).data(), store.value(rhl.empty_step).data());

        // duplicate rows weigh equally and return the shared vector
        let mut dup_t = rel_t.clone();
        let row0 = dup_t.row(0).to_vec();
        dup_t.row_mut(1).copy_from_slice(&row0);
        let dup = t.input(dup_t);
        let both = rhl
            .aggregate(&mut t, &store, dup, &[vec![0, 1]], probe)
            .unwrap();
        for (a, b) in t.value(both).data().iter().zip(&row0) {
            assert!((a - b).abs() < 1e-12);
        }

        let members = [0usize, 1, 3];
        let got = rhl
            .aggregate(&mut t, &store, rels, &[members.to_vec()], probe)
            .unwrap();
        let p = t.value(probe).data().to_vec();
        let logits: Vec<f64> = members
            .iter()
            .map(|&m| rel_t.row(m).iter().zip(&p).map(|(a, b)| a * b).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for k in 0..3 {
            let oracle: f64 = members
                .iter()
                .zip(&logits)
                .map(|(&m, l)| l.exp() / z * rel_t.row(m)[k])
                .sum();
            assert!((t.value(got).data()[k] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_history_cases() {
        let (store, rhl) = setup(3);
        let mut r = component_rng(2, "enc");
        let rel_t = random_uniform::<f64>(&[4, 3], 1.0, &mut r);
        let mut t = Tape::new();
        let rels = t.input(rel_t.clone());
        let q = t.input(random_uniform::<f64>(&[1, 3], 1.0, &mut r));

        let one = rhl
            .encode_history(&mut t, &store, rels, &[history(vec![vec![1]])], q)
            .unwrap();
        assert_eq!(t.value(one).data(), rel_t.row(1));

        let empty3 = history(vec![vec![], vec![], vec![]]);
        let got = rhl
            .encode_history(&mut t, &store, rels, &[empty3], q)
            .unwrap();
        let dummy = t.param(&store, rhl.empty_step);
        let dummy = t.gather_rows(dummy, &[0]).unwrap_or(dummy);
        let mut h = dummy;
        for _ in 0..2 {
            h = rhl.recurrence.step(&mut t, &store, dummy, h).unwrap();
        }
        assert_eq!(t.value(got).data(), t.value(h).data());

        let fwd = history(vec![vec![0], vec![1, 2], vec![], vec![3]]);
        let rev = history(fwd.steps.iter().rev().cloned().collect());
        let a = rhl.encode_history(&mut t, &store, rels, &[fwd], q).unwrap();
        let b = rhl.encode_history(&mut t, &store, rels, &[rev], q).unwrap();
        assert_ne!(t.value(a).data(), t.value(b).data());

        assert!(rhl
            .encode_history(&mut t, &store, rels, &[history(vec![])], q)
            .is_err());
    }

    #[test]
    fn prediction_scales_with_alpha() {
        let (store, mut rhl) = setup(3);
        let q_t = Tensor::vector(vec![0.3, -0.7, 0.1]);
        let eval = |rhl: &Rhl, store: &ParamStore<f64>| {
            let mut t = Tape::new();
            let q = t.input(q_t.clone());
            let p = rhl.predict_history(&mut t, store, q).unwrap();
            t.value(p)
                .data()
                .iter()
                .zip(q_t.data())
                .map(|(a, b)| a - b)
                .collect::<Vec<f64>>()
        };
        rhl.alpha = 0.0;
        assert!(eval(&rhl, &store).iter().all(|&x| x == 0.0));
        rhl.alpha = 0.1;
        let small = eval(&rhl, &store);
        rhl.alpha = 0.3;
        let big = eval(&rhl, &store);
        for (s, b) in small.iter().zip(&big) {
            assert!((3.0 * s - b).abs() < 1e-12);
        }
    }

    #[test]
    fn history_loss_arithmetic_and_reachability() {
        let (mut store, rhl) = setup(2);
        let mut t = Tape::new();
        let a = t.input(Tensor::vector(vec![1.0, 0.0]));
        let b = t.input(Tensor::vector(vec![0.0, 1.0]));
        let l = rhl.history_loss(&mut t, a, b).unwrap();
        assert_eq!(t.value(l).item(), 1.0);

        let mut t = Tape::new();
        let rels = t.input(Tensor::matrix(2, 2, vec![0.5, -0.2, 0.1, 0.9]).unwrap());
        let q = t.input(Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap());
        let enc = rhl
            .encode_history(
                &mut t,
                &store,
                rels,
                &[history(vec![vec![0, 1], vec![], vec![1]])],
                q,
            )
            .unwrap();
        let pred = rhl.predict_history(&mut t, &store, q).unwrap();
        let loss = rhl.history_loss(&mut t, pred, enc).unwrap();
        store.zero_grad();
        t.backward_into(loss, &mut store).unwrap();
        let touched = |ids: Vec<ParamId>| {
            ids.iter()
                .any(|&id| store.grad(id).data().iter().any(|&g| g != 0.0))
        };
        assert!(touched(rhl.predictor.params().collect()));
        assert!(touched(rhl.recurrence.params().collect()));
        assert!(touched(rhl.query_map.params().collect()));
        assert!(touched(vec![rhl.empty_step]));
    }

    #[test]
    fn pattern_step_delegates_to_recurrence() {
        let (mut store, rhl) = setup(3);
        let mut t = Tape::new();
        let q = t.input(Tensor::vector(vec![0.2, 0.1, -0.3]));
        let h = t.input(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let a = rhl.pattern_step(&mut t, &store, q, h).unwrap();
        let b = rhl.recurrence.step(&mut t, &store, q, h).unwrap();
        assert_eq!(t.value(a).data(), t.value(b).data());

        for id in rhl.recurrence.params().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut t = Tape::new();
        let q = t.input(Tensor::vector(vec![0.2, 0.1, -0.3]));
        let h = t.input(Tensor::vector(vec![0.5, -1.0, 2.0]));
        let p = rhl.pattern_step(&mut t, &store, q, h).unwrap();
        assert_eq!(t.value(p).data(), &[0.25, -0.5, 1.0]);
    }

    #[test]
    fn score_cases() {
        let (store, rhl) = setup(4);
        let mut r = component_rng(3, "score");
        let (a, b, c) = (
            random_uniform::<f64>(&[4], 1.0, &mut r),
            random_uniform::<f64>(&[4], 1.0, &mut r),
            random_uniform::<f64>(&[4], 1.0, &mut r),
        );
        let w = store.value(rhl.core).data().to_vec();
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    oracle += w[(i * 4 + j) * 4 + k] * a.data()[i] * b.data()[j] * c.data()[k];
                }
            }
        }
        let mut t = Tape::new();
        let (va, vb, vc) = (t.input(a.clone()), t.input(b), t.input(c));
        let s = rhl.score(&mut t, &store, va, vb, vc).unwrap();
        assert_eq!(t.value(s).item(), oracle);
        let zero = t.input(Tensor::zeros(&[4]));
        let s0 = rhl.score(&mut t, &store, va, zero, vc).unwrap();
        assert_eq!(t.value(s0).item(), 0.0);
    }
}
