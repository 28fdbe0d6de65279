//! Affine stacks and the gated recurrent unit built on the tape.

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Scalar;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply<F: Scalar>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Layer widths (input first) and activations of an [`Mlp`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    /// Two affine layers `input -> hidden -> output` with a tanh in between.
    pub fn two_layer(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            widths: vec![input, hidden, output],
            hidden: Activation::Tanh,
            output: Activation::Linear,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        spec: MlpSpec,
        seed: u64,
    ) -> Result<Self> {
        if spec.widths.len() < 2 || spec.widths.contains(&0) {
            return Err(Error::Config(format!(
                "{prefix}: bad MLP widths {:?}",
                spec.widths
            )));
        }
        let mut layers = Vec::with_capacity(spec.widths.len() - 1);
        for (i, pair) in spec.widths.windows(2).enumerate() {
            let w = store.add_xavier(&format!("{prefix}.{i}.w"), pair[1], pair[0], seed)?;
            let b = store.add_zeros(&format!("{prefix}.{i}.b"), &[pair[1]])?;
            layers.push((w, b));
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            h = tape.linear(h, w, Some(b))?;
            let act = if i == last {
                self.spec.output
            } else {
                self.spec.hidden
            };
            h = act.apply(tape, h);
        }
        Ok(h)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }
}

/// Gated recurrent unit with update gate `z`, reset gate `r` and candidate `ĥ`:
///
/// ```text
/// z  = σ(W_z x + U_z h + b_z)
/// r  = σ(W_r x + U_r h + b_r)
/// ĥ  = tanh(W_h x + U_h (r ⊙ h) + b_h)
/// h' = (1 − z) ⊙ h + z ⊙ ĥ
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub d_in: usize,
    pub d: usize,
    gates: [(ParamId, ParamId, ParamId); 3],
}

impl GruCell {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d_in: usize,
        d: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut gate = |g: &str| -> Result<(ParamId, ParamId, ParamId)> {
            Ok((
                store.add_xavier(&format!("{prefix}.w_{g}"), d, d_in, seed)?,
                store.add_xavier(&format!("{prefix}.u_{g}"), d, d, seed)?,
                store.add_zeros(&format!("{prefix}.b_{g}"), &[d])?,
            ))
        };
        let gates = [gate("z")?, gate("r")?, gate("h")?];
        Ok(Self { d_in, d, gates })
    }

    /// One recurrence step; `x` and `h` may be single vectors or batches of rows.
    pub fn step<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let (xs, hs) = (
            tape.value(x).shape().to_vec(),
            tape.value(h).shape().to_vec(),
        );
        if xs.last() != Some(&self.d_in)
            || hs.last() != Some(&self.d)
            || xs.len() != hs.len()
            || tape.value(x).rows() != tape.value(h).rows()
        {
            return Err(Error::shape(
                "gru_cell",
                format!("x {xs:?}, h {hs:?} for d_in={}, d={}", self.d_in, self.d),
            ));
        }
        let pre =
            |tape: &mut Tape<F>, (w, u, b): (ParamId, ParamId, ParamId), hin: Var| -> Result<Var> {
                let (w, u, b) = (
                    tape.param(store, w),
                    tape.param(store, u),
                    tape.param(store, b),
                );
                let wx = tape.linear(x, w, Some(b))?;
                let uh = tape.linear(hin, u, None)?;
                tape.add(wx, uh)
            };
        let z = pre(tape, self.gates[0], h)?;
        let z = tape.sigmoid(z);
        let r = pre(tape, self.gates[1], h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let cand = pre(tape, self.gates[2], rh)?;
        let cand = tape.tanh(cand);
        let delta = tape.sub(cand, h)?;
        let zd = tape.mul(z, delta)?;
        tape.add(h, zd)
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.gates.iter().flat_map(|&(w, u, b)| [w, u, b])
    }
}

/// Number of scalars held by the given parameters.
pub fn count_params<F: Scalar>(
    store: &ParamStore<F>,
    ids: impl IntoIterator<Item = ParamId>,
) -> usize {
    ids.into_iter().map(|id| store.value(id).len()).sum()
}
