//! Randomized finite-difference checks of every differentiable kernel and
//! of the composed history-prediction, pattern and scoring path.

use rand::Rng;

use crate::numerics::check::{check_gradients, CheckPrecision};
use crate::numerics::{
    random_uniform, GruCell, Mlp, MlpSpec, ParamStore, Scalar, Tape, Tensor, Var,
};
use crate::rhl::{Rhl, DEFAULT_ALPHA};
use crate::rng::{component_rng, SplitMix64 as Rng64};

/// Instances per case and precision.
pub const INSTANCES: usize = 100;

/// Named gradient-check cases; each draws one random instance and returns
/// its worst relative error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Elementwise,
    LinearAndRows,
    SoftmaxAndAttention,
    Tucker,
    Losses,
    GruAndMlp,
    HistoryPath,
}

impl Case {
    pub const ALL: [Case; 7] = [
        Case::Elementwise,
        Case::LinearAndRows,
        Case::SoftmaxAndAttention,
        Case::Tucker,
        Case::Losses,
        Case::GruAndMlp,
        Case::HistoryPath,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Case::Elementwise => "elementwise",
            Case::LinearAndRows => "linear-gather-scatter-segment-reshape",
            Case::SoftmaxAndAttention => "softmax-attention",
            Case::Tucker => "tucker",
            Case::Losses => "losses",
            Case::GruAndMlp => "gru-mlp",
            Case::HistoryPath => "history-prediction-pattern-score",
        }
    }

    fn instance<F: CheckPrecision>(self, r: &mut Rng64) -> f64 {
        match self {
            Case::Elementwise => elementwise::<F>(r),
            Case::LinearAndRows => linear_and_rows::<F>(r),
            Case::SoftmaxAndAttention => softmax_and_attention::<F>(r),
            Case::Tucker => tucker::<F>(r),
            Case::Losses => losses::<F>(r),
            Case::GruAndMlp => gru_and_mlp::<F>(r),
            Case::HistoryPath => history_path::<F>(r),
        }
    }

    /// Worst relative error over `instances` random instances.
    pub fn worst<F: CheckPrecision>(self, instances: usize) -> f64 {
        let mut r = component_rng(0xC0FFEE, self.name());
        (0..instances)
            .map(|_| self.instance::<F>(&mut r))
            .fold(0.0, f64::max)
    }
}

/// Reduces a tensor-valued output to a scalar with fixed random weights so
/// every output entry contributes to the checked gradient.
fn weigh<F: Scalar>(tape: &mut Tape<F>, out: Var, weights: &Tensor<F>) -> crate::Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

fn elementwise<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let a = random_uniform::<F>(&[2, 3], 1.0, r);
    let b = random_uniform::<F>(&[2, 3], 1.0, r);
    let s = random_uniform::<F>(&[1], 1.0, r);
    let w = random_uniform::<F>(&[2, 3], 1.0, r);
    let mut store = ParamStore::new();
    check_gradients(&[a, b, s], &mut store, F::of(F::STEP), |t, _, v| {
        let m = t.mul(v[0], v[1])?;
        let d = t.sub(m, v[1])?;
        let e = t.add(d, v[0])?;
        let e = t.scale_by(e, v[2])?;
        let e = t.scale(e, F::of(0.7));
        let sg = t.sigmoid(e);
        let th = t.tanh(v[0]);
        let c = t.concat(sg, th)?;
        let wide = t.constant(Tensor::full(&[2, 6], F::of(0.5)));
        let c = t.add(c, wide)?;
        let c = t.gather_rows(c, &[1, 0, 1])?;
        let c = t.mean(c);
        let out = t.scale_by(v[0], c)?;
        weigh(t, out, &w)
    })
    .expect("gradient check runs")
    .max_rel_err
}

fn linear_and_rows<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let x = random_uniform::<F>(&[3, 4], 1.0, r);
    let w = random_uniform::<F>(&[2, 4], 1.0, r);
    let b = random_uniform::<F>(&[2], 1.0, r);
    let base = random_uniform::<F>(&[5, 2], 1.0, r);
    let weights = random_uniform::<F>(&[2, 5], 1.0, r);
    let mut store = ParamStore::new();
    check_gradients(&[x, w, b, base], &mut store, F::of(F::STEP), |t, _, v| {
        let y = t.linear(v[0], v[1], Some(v[2]))?;
        let seg = t.segment_mean(y, &[1, 0, 1], 2)?;
        let out = t.scatter_rows(v[3], &[4, 0], seg)?;
        let out = t.reshape(out, &[2, 5])?;
        weigh(t, out, &weights)
    })
    .expect("gradient check runs")
    .max_rel_err
}

fn softmax_and_attention<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let keys = random_uniform::<F>(&[5, 3], 1.0, r);
    let queries = random_uniform::<F>(&[3, 3], 1.0, r);
    let dummy = random_uniform::<F>(&[3], 1.0, r);
    let logits = random_uniform::<F>(&[2, 4], 2.0, r);
    let w1 = random_uniform::<F>(&[3, 3], 1.0, r);
    let w2 = random_uniform::<F>(&[2, 4], 1.0, r);
    let sets = vec![vec![0, 2, 4], vec![], vec![1]];
    let mut store = ParamStore::new();
    check_gradients(
        &[keys, queries, dummy, logits],
        &mut store,
        F::of(F::STEP),
        |t, _, v| {
            let a = t.attend(v[0], v[1], v[2], &sets)?;
            let a = weigh(t, a, &w1)?;
            let s = t.softmax(v[3])?;
            let s = weigh(t, s, &w2)?;
            t.add(a, s)
        },
    )
    .expect("gradient check runs")
    .max_rel_err
}

fn tucker<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let d = 3;
    let core = random_uniform::<F>(&[d, d, d], 1.0, r);
    let a = random_uniform::<F>(&[2, d], 1.0, r);
    let b = random_uniform::<F>(&[2, d], 1.0, r);
    let c = random_uniform::<F>(&[2, d], 1.0, r);
    let w = random_uniform::<F>(&[2], 1.0, r);
    let w2 = random_uniform::<F>(&[2, d], 1.0, r);
    let mut store = ParamStore::new();
    check_gradients(&[core, a, b, c], &mut store, F::of(F::STEP), |t, _, v| {
        let s = t.tucker3(v[0], v[1], v[2], v[3])?;
        let s = weigh(t, s, &w)?;
        let p = t.tucker_project(v[0], v[1], v[2])?;
        let p = weigh(t, p, &w2)?;
        let dots = t.row_dot(v[1], v[3])?;
        let dots = t.sum(dots);
        let s = t.add(s, p)?;
        t.add(s, dots)
    })
    .expect("gradient check runs")
    .max_rel_err
}

fn losses<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let logits = random_uniform::<F>(&[3, 5], 2.0, r);
    let a = random_uniform::<F>(&[4], 1.0, r);
    let b = random_uniform::<F>(&[4], 1.0, r);
    let probs = Tensor::new(
        &[6],
        (0..6).map(|_| F::of(r.random_range(0.05..0.95))).collect(),
    )
    .unwrap();
    let labels: Vec<F> = (0..6)
        .map(|i| if i % 2 == 0 { F::one() } else { F::zero() })
        .collect();
    let targets = [
        r.random_range(0..5),
        r.random_range(0..5),
        r.random_range(0..5),
    ];
    let mut store = ParamStore::new();
    check_gradients(
        &[logits, a, b, probs],
        &mut store,
        F::of(F::STEP),
        |t, _, v| {
            let ce = t.cross_entropy(v[0], &targets)?;
            let mse = t.mse(v[1], v[2])?;
            let bce = t.bce(v[3], &labels)?;
            let s = t.add(ce, mse)?;
            t.add(s, bce)
        },
    )
    .expect("gradient check runs")
    .max_rel_err
}

fn gru_and_mlp<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let seed: u64 = r.random();
    let mut store = ParamStore::<F>::new();
    let gru = GruCell::new(&mut store, "gru", 3, 4, seed).unwrap();
    let mlp = Mlp::new(&mut store, "mlp", MlpSpec::two_layer(4, 5, 4), seed).unwrap();
    // nonzero biases so their gradients are exercised away from zero
    for id in store.ids().collect::<Vec<_>>() {
        let noise = random_uniform::<F>(store.value(id).shape(), 0.5, r);
        store.value_mut(id).add_assign(&noise);
    }
    let x = random_uniform::<F>(&[2, 3], 1.0, r);
    let h = random_uniform::<F>(&[2, 4], 1.0, r);
    let w = random_uniform::<F>(&[2, 4], 1.0, r);
    check_gradients(&[x, h], &mut store, F::of(F::STEP), |t, s, v| {
        let h1 = gru.step(t, s, v[0], v[1])?;
        let y = mlp.forward(t, s, h1)?;
        weigh(t, y, &w)
    })
    .expect("gradient check runs")
    .max_rel_err
}

fn history_path<F: CheckPrecision>(r: &mut Rng64) -> f64 {
    let seed: u64 = r.random();
    let mut store = ParamStore::<F>::new();
    let rhl = Rhl::new(&mut store, 3, DEFAULT_ALPHA, seed).expect("history learner");
    let q = random_uniform::<F>(&[2, 3], 1.0, r);
    let s = random_uniform::<F>(&[2, 3], 1.0, r);
    let o = random_uniform::<F>(&[2, 3], 1.0, r);
    let w = random_uniform::<F>(&[2], 1.0, r);
    check_gradients(&[q, s, o], &mut store, F::of(F::STEP), |t, st, v| {
        let (_, pattern) = rhl.patterns(t, st, v[0])?;
        let score = rhl.score(t, st, v[1], pattern, v[2])?;
        weigh(t, score, &w)
    })
    .expect("gradient check runs")
    .max_rel_err
}

#[cfg(test)]
mod tests {
    use super::*;

    macro_rules! suite {
        ($($name:ident => $case:expr),* $(,)?) => {
            $(
                #[test]
                fn $name() {
                    let single = $case.worst::<f32>(INSTANCES);
                    let double = $case.worst::<f64>(INSTANCES);
                    assert!(single <= <f32 as CheckPrecision>::TOL, "f32 worst {single:e}");
                    assert!(double <= <f64 as CheckPrecision>::TOL, "f64 worst {double:e}");
                }
            )*
        };
    }

    suite! {
        elementwise_ops => Case::Elementwise,
        linear_gather_scatter_segment_reshape => Case::LinearAndRows,
        softmax_attention => Case::SoftmaxAndAttention,
        tucker_ops => Case::Tucker,
        loss_ops => Case::Losses,
        gru_mlp => Case::GruAndMlp,
        history_path_ops => Case::HistoryPath,
    }
}
