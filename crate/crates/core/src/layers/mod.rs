//! Invertible building blocks and the dimension-reducing split.
//!
//! Every layer works on a rank-2 activation `[rows, width]`. Linear blocks
//! use one row per sample; convolutional blocks use one row per pixel with
//! channels as columns, so per-row operations act as 1×1 convolutions.

mod coupling;
mod downsample;
mod householder;
mod split;

pub use coupling::CouplingLayer;
pub use downsample::{downsample_chw, upsample_chw, DownsampleLayer};
pub use householder::HouseholderTransform;
pub use split::{ResidualMean, SplitLayer, SplitOutput};

use crate::error::Result;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Scale-network outputs are clamped to this range before exponentiation.
pub const LOG_SCALE_BOUND: f64 = 5.0;

pub trait FlowLayer {
    /// Maps `x` forward. The second value is the per-row `log|det J|` as a
    /// `[rows, 1]` column, or `None` when it is identically zero.
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Option<Var>)>;

    fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var>;
}

/// A bijective layer inside a block.
#[derive(Debug, Clone)]
pub enum Layer {
    Coupling(CouplingLayer),
    Householder(HouseholderTransform),
    Downsample(DownsampleLayer),
}

impl FlowLayer for Layer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        match self {
            Layer::Coupling(l) => l.forward(tape, p, x),
            Layer::Householder(l) => l.forward(tape, p, x),
            Layer::Downsample(l) => l.forward(tape, p, x),
        }
    }

    fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        match self {
            Layer::Coupling(l) => l.inverse(tape, p, y),
            Layer::Householder(l) => l.inverse(tape, p, y),
            Layer::Downsample(l) => l.inverse(tape, p, y),
        }
    }
}

fn as_rows(x: &Tensor) -> Result<Tensor> {
    Ok(match x.rank() {
        1 => x.reshape(&[1, x.len()])?,
        _ => x.clone(),
    })
}

fn restore_rank(like: &Tensor, y: Tensor) -> Result<Tensor> {
    Ok(if like.rank() == 1 {
        y.reshape(&[y.len()])?
    } else {
        y
    })
}

/// Untraced forward pass. A rank-1 input is treated as a single row. Returns
/// the output and the per-row log-determinants.
pub fn apply_forward(
    layer: &impl FlowLayer,
    params: &ParamStore,
    x: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    let rows = as_rows(x)?;
    let n = rows.shape()[0];
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let xv = tape.constant(rows);
    let (y, logdet) = layer.forward(&mut tape, &p, xv)?;
    let logdet = match logdet {
        Some(v) => tape.value(v).data().to_vec(),
        None => vec![0.0; n],
    };
    let y = tape.value(y).clone();
    Ok((restore_rank(x, y)?, logdet))
}

/// Untraced inverse pass; rank handling as in [`apply_forward`].
pub fn apply_inverse(layer: &impl FlowLayer, params: &ParamStore, y: &Tensor) -> Result<Tensor> {
    let rows = as_rows(y)?;
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let yv = tape.constant(rows);
    let x = layer.inverse(&mut tape, &p, yv)?;
    restore_rank(y, tape.value(x).clone())
}
