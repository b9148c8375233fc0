//! Small fully connected networks used as scale, bias and residual-mean
//! functions. Applied to a `[rows, features]` matrix they act per row, so on
//! pixel-major image activations they are stacks of 1×1 convolutions.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::params::{Bound, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
}

/// `tanh` MLP with two hidden layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Hidden width used by coupling and residual-mean networks.
pub fn hidden_width(partition: usize) -> usize {
    (2 * partition).max(16)
}

impl Mlp {
    /// The output layer starts at zero so a fresh network outputs 0 for
    /// every input.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let sizes = [input, hidden, hidden, output];
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let last = i == sizes.len() - 2;
                let std = 1.0 / (fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        if last {
                            0.0
                        } else {
                            std * rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect();
                let weight = store.add(
                    format!("{prefix}.l{i}.w"),
                    Tensor::new(vec![fan_in, fan_out], data).expect("dense weight shape"),
                );
                let bias = store.add(format!("{prefix}.l{i}.b"), Tensor::zeros(&[fan_out]));
                Dense { weight, bias }
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let m = tape.matmul(h, p[layer.weight])?;
            h = tape.add_bias(m, p[layer.bias])?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h)?;
            }
        }
        Ok(h)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}
