use super::{TextMatrix, TextStore};
use crate::error::{Error, Result};
use crate::numerics::{GruCell, Mlp, MlpSpec, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Maps a relation's token rows into the model space and folds them with a
/// recurrent cell; the final state is the relation's representation.
#[derive(Clone, Debug)]
pub struct AlignmentNet {
    pub d_w: usize,
    pub d: usize,
    word_map: Mlp,
    fold: GruCell,
}

impl AlignmentNet {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        d_w: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        Ok(Self {
            d_w,
            d,
            word_map: Mlp::new(store, "align.word", MlpSpec::two_layer(d_w, d, d), seed)?,
            fold: GruCell::new(store, "align.fold", d, d, seed)?,
        })
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.word_map.params().chain(self.fold.params())
    }

    /// One output row per matrix, in input order.
    ///
    /// Token rows enter the tape as constants, so the matrices never receive
    /// gradients.
    pub fn align_batch<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        matrices: &[&TextMatrix],
    ) -> Result<Var> {
        if let Some(m) = matrices.iter().find(|m| m.d_w != self.d_w) {
            return Err(Error::shape(
                "align",
                format!(
                    "relation {} has width {}, network expects {}",
                    m.relation, m.d_w, self.d_w
                ),
            ));
        }
        if matrices.is_empty() {
            return Err(Error::shape("align", "no relations to align"));
        }
        let mut offsets = Vec::with_capacity(matrices.len());
        let mut values = Vec::new();
        for m in matrices {
            offsets.push(values.len() / self.d_w);
            values.extend(m.data.iter().map(|&v| F::of(f64::from(v))));
        }
        let total = values.len() / self.d_w;
        let tokens = tape.constant(Tensor::matrix(total, self.d_w, values)?);
        let mapped = self.word_map.forward(tape, store, tokens)?;

        let mut state = tape.gather_rows(mapped, &offsets)?;
        let longest = matrices.iter().map(|m| m.tokens()).max().unwrap_or(1);
        for l in 1..longest {
            let active: Vec<usize> = (0..matrices.len())
                .filter(|&i| matrices[i].tokens() > l)
                .collect();
            let rows: Vec<usize> = active.iter().map(|&i| offsets[i] + l).collect();
            let x = tape.gather_rows(mapped, &rows)?;
            let h = tape.gather_rows(state, &active)?;
            let next = self.fold.step(tape, store, x, h)?;
            state = tape.scatter_rows(state, &active, next)?;
        }
        Ok(state)
    }

    /// Representations of every relation in the store, row `r` for relation `r`.
    pub fn align_all<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        texts: &TextStore,
    ) -> Result<Var> {
        let all: Vec<&TextMatrix> = texts.matrices().iter().collect();
        self.align_batch(tape, store, &all)
    }
}
