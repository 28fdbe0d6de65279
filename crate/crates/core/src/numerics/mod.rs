//! Dense tensors with reverse-mode differentiation, covering the kernels the
//! forecaster needs: affine maps, the GRU cell, softmax and set attention,
//! the three-mode core-tensor product and the three loss primitives.

pub mod check;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;


pub use layers::{count_params, Activation, GruCell, Mlp, MlpSpec};
pub use params::{Adam, ParamId, ParamStore};
pub use tape::{Tape, Var, BCE_EPS};
pub use tensor::{Scalar, Tensor};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

/// Tensor of i.i.d. uniform values in `[-bound, bound]`.
pub fn random_uniform<F: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::new(shape, (0..n).map(|_| F::of(dist.sample(rng))).collect()).expect("shape")
}

/// Tensor of i.i.d. standard normal values.
pub fn random_normal<F: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<F> {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| F::of(StandardNormal.sample(rng))).collect(),
    )
    .expect("shape")
}
