use rand::Rng;

use super::{FlowLayer, LOG_SCALE_BOUND};
use crate::error::{PieError, Result};
use crate::nn::{hidden_width, Mlp};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

/// Affine coupling with both halves transformed:
///
/// ```text
/// y1 = s1(x2) ⊙ x1 + b1(x2)
/// y2 = s2(y1) ⊙ x2 + b2(y1)
/// ```
///
/// Scales are `exp(clamp(ŝ, -5, 5))`, so `log|s|` is the clamped network
/// output and the log-determinant is `Σ ŝ1 + Σ ŝ2` per row.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    name: String,
    half: usize,
    s1: Mlp,
    b1: Mlp,
    s2: Mlp,
    b2: Mlp,
}

impl CouplingLayer {
    /// A freshly built coupling is the identity map (`s ≡ 1`, `b ≡ 0`).
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, width: usize, rng: &mut R) -> Result<Self> {
        if width == 0 || width % 2 != 0 {
            return Err(PieError::OddPartition(width));
        }
        let half = width / 2;
        let hidden = hidden_width(half);
        let mut net = |tag: &str, rng: &mut R| Mlp::new(store, &format!("{prefix}.{tag}"), half, hidden, half, rng);
        Ok(CouplingLayer {
            name: prefix.to_string(),
            half,
            s1: net("s1", rng),
            b1: net("b1", rng),
            s2: net("s2", rng),
            b2: net("b2", rng),
        })
    }

    pub fn width(&self) -> usize {
        2 * self.half
    }

    fn check_width(&self, tape: &Tape, x: Var) -> Result<()> {
        let (_, w) = tape.value(x).dims2("coupling")?;
        if w != self.width() {
            return Err(PieError::Tensor(crate::tensor::TensorError::ShapeMismatch {
                op: "coupling",
                left: tape.value(x).shape().to_vec(),
                right: vec![self.width()],
            }));
        }
        Ok(())
    }

    /// Clamped log-scale and scale from the network `net` applied to `cond`.
    fn scale(&self, tape: &mut Tape, p: &Bound, net: &Mlp, cond: Var) -> Result<(Var, Var)> {
        let raw = net.forward(tape, p, cond)?;
        let log_s = tape.clamp(raw, -LOG_SCALE_BOUND, LOG_SCALE_BOUND)?;
        let s = tape.exp(log_s)?;
        if tape.value(s).check_finite().is_err() {
            return Err(PieError::NonFiniteScale {
                layer: self.name.clone(),
            });
        }
        Ok((log_s, s))
    }

    fn check_invertible(&self, tape: &Tape, s: Var) -> Result<()> {
        if tape
            .value(s)
            .data()
            .iter()
            .any(|&v| !(v.abs() >= f64::MIN_POSITIVE) || !v.is_finite())
        {
            return Err(PieError::Singular {
                layer: self.name.clone(),
            });
        }
        Ok(())
    }
}

impl FlowLayer for CouplingLayer {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        self.check_width(tape, x)?;
        let h = self.half;
        let x1 = tape.slice_cols(x, 0, h)?;
        let x2 = tape.slice_cols(x, h, 2 * h)?;

        let (log_s1, s1) = self.scale(tape, p, &self.s1, x2)?;
        let b1 = self.b1.forward(tape, p, x2)?;
        let t = tape.mul(s1, x1)?;
        let y1 = tape.add(t, b1)?;

        let (log_s2, s2) = self.scale(tape, p, &self.s2, y1)?;
        let b2 = self.b2.forward(tape, p, y1)?;
        let t = tape.mul(s2, x2)?;
        let y2 = tape.add(t, b2)?;

        let y = tape.concat_cols(y1, y2)?;
        let log_s = tape.concat_cols(log_s1, log_s2)?;
        let logdet = tape.sum_rows(log_s)?;
        Ok((y, Some(logdet)))
    }

    fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        self.check_width(tape, y)?;
        let h = self.half;
        let y1 = tape.slice_cols(y, 0, h)?;
        let y2 = tape.slice_cols(y, h, 2 * h)?;

        let (_, s2) = self.scale(tape, p, &self.s2, y1)?;
        self.check_invertible(tape, s2)?;
        let b2 = self.b2.forward(tape, p, y1)?;
        let t = tape.sub(y2, b2)?;
        let x2 = tape.div(t, s2)?;

        let (_, s1) = self.scale(tape, p, &self.s1, x2)?;
        self.check_invertible(tape, s1)?;
        let b1 = self.b1.forward(tape, p, x2)?;
        let t = tape.sub(y1, b1)?;
        let x1 = tape.div(t, s1)?;

        Ok(tape.concat_cols(x1, x2)?)
    }
}
