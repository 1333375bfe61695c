use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::rng::{normal_tensor, rng_for, uniform_tensor};
use super::{ParamStore, Tensor};
use crate::error::Result;

/// Initial value recipe for a parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    Uniform(f64),
    /// `1/sqrt(fan_in)`-scaled normal, fan-in taken from the first axis.
    LeCun,
    /// `[rows, k]` factor whose first column is all ones; remaining columns
    /// are drawn from `Normal(rest_std)` (zero when `rest_std == 0`).
    FirstColumnOnes {
        rest_std: f64,
    },
}

/// Name, shape and initializer of one parameter, without storage.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl ToString, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// FNV-1a, used to give every parameter its own random stream.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Draws a tensor for `spec`. Values depend only on `(seed, name)`, so
/// the same parameter gets identical values in every model variant.
pub fn init_tensor(spec: &ParamSpec, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, &[name_hash(&spec.name)]);
    match spec.init {
        Init::Zeros => Tensor::zeros(&spec.shape),
        Init::Ones => Tensor::full(&spec.shape, 1.0),
        Init::Normal(std) => normal_tensor(&spec.shape, std, &mut rng),
        Init::Uniform(b) => uniform_tensor(&spec.shape, b, &mut rng),
        Init::LeCun => {
            let fan_in = spec.shape.first().copied().unwrap_or(1).max(1);
            normal_tensor(&spec.shape, 1.0 / libm::sqrt(fan_in as f64), &mut rng)
        }
        Init::FirstColumnOnes { rest_std } => {
            let mut t = normal_tensor(&spec.shape, rest_std, &mut rng);
            let (rows, cols) = t.rows_cols();
            for r in 0..rows {
                t.data_mut()[r * cols] = 1.0;
            }
            t
        }
    }
}

pub fn materialize(specs: &[ParamSpec], seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for s in specs {
        store.insert(&s.name, init_tensor(s, seed))?;
    }
    Ok(store)
}

pub fn count_scalars(specs: &[ParamSpec]) -> usize {
    specs.iter().map(ParamSpec::numel).sum()
}
