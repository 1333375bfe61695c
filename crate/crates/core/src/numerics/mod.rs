//! Dense tensors, reverse-mode differentiation and stochastic primitives.

mod gradcheck;
mod gumbel;
mod init;
mod params;
mod rng;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradients, compare_gradients, compare_gradients_sampled, grad_check,
    grad_check_sampled, GradCheckReport, GRAD_CHECK_FLOOR,
};
pub use gumbel::{gumbel_softmax, hard_one_hot};
pub use init::{count_scalars, init_tensor, materialize, Init, ParamSpec};
pub use params::{ParamId, ParamStore};
pub use rng::{derive_seed, normal_tensor, rng_for, uniform_tensor, StdRng};
pub use tape::{same_padding, softmax_last, Gradients, Tape, Var, COSINE_EPS};
pub use tensor::{DType, Tensor};

use rand::Rng;

use crate::error::Result;

/// Inverted dropout: zeroes entries with probability `rate` and rescales the
/// survivors. A rate of zero returns `x` unchanged.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    rate: f64,
    rng: &mut R,
) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let mask: alloc::vec::Vec<f64> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
