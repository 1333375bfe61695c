use alloc::vec;

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// One-hot rows at the argmax of each row (first index wins ties).
pub fn hard_one_hot(t: &Tensor) -> Tensor {
    let (r, c) = t.rows_cols();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = t.row(i);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        out[i * c + best] = 1.0;
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Gumbel-softmax relaxation over the last axis.
///
/// With `hard`, the forward value is the exact one-hot of the perturbed
/// argmax while gradients follow the soft relaxation (straight-through).
pub fn gumbel_softmax<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    logits: Var,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Temperature(temperature));
    }
    let shape = tape.shape(logits).to_vec();
    let n: usize = shape.iter().product();
    let dist = Gumbel::new(0.0, 1.0).expect("unit gumbel");
    let noise: alloc::vec::Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    let noise = tape.constant(Tensor::new(shape, noise)?);
    let perturbed = tape.add(logits, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature)?;
    let soft = tape.softmax(scaled)?;
    if hard {
        let one_hot = hard_one_hot(tape.value(soft));
        tape.straight_through(soft, one_hot)
    } else {
        Ok(soft)
    }
}
