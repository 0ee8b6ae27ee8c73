//! Small layer helpers shared by every network in the crate.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Registers `{name}.w` (`fan_in x fan_out`, N(0, gain^2 / fan_in)) and a zero `{name}.b`.
pub(crate) fn init_linear(
    set: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    gain: f64,
    rng: &mut impl Rng,
) {
    let std = gain / (fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let w = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
    set.insert(
        format!("{name}.w"),
        Tensor::new(vec![fan_in, fan_out], w).expect("consistent shape"),
    );
    set.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
}

pub(crate) fn linear(g: &mut Graph, set: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = g.param(set, &format!("{name}.w"))?;
    let b = g.param(set, &format!("{name}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Stacks equal-length rows into a `rows x width` tensor.
pub(crate) fn stack_rows<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    for r in rows {
        data.extend_from_slice(r);
        count += 1;
    }
    let width = data.len().checked_div(count).unwrap_or(0);
    Tensor::new(vec![count, width], data)
}

pub(crate) fn one_hot(indices: &[usize], classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[indices.len(), classes]);
    for (r, &i) in indices.iter().enumerate() {
        t.data_mut()[r * classes + i] = 1.0;
    }
    t
}
