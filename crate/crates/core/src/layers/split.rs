use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::nn::{hidden_width, Mlp};
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

/// Residual-mean function `g: z → r` used by a split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMean {
    /// `g ≡ 0`.
    #[default]
    Zero,
    /// Trainable two-hidden-layer network, initialised to output zero.
    Mlp,
}

/// Keeps the first `keep` columns as `z` and scores the remaining columns
/// `r` under `N(g(z), ε² I)`. The inverse reinstates `r = g(z)`.
#[derive(Debug, Clone)]
pub struct SplitLayer {
    keep: usize,
    residual: usize,
    epsilon_sq: f64,
    mean: Option<Mlp>,
}

pub struct SplitOutput {
    pub z: Var,
    pub r: Var,
    /// `g(z)`, shape of `r`.
    pub mean: Var,
    /// Per-row `log N(r | g(z), ε² I)`, shape `[rows, 1]`.
    pub log_prob: Var,
}

impl SplitLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        keep: usize,
        epsilon_sq: f64,
        mean: ResidualMean,
        rng: &mut R,
    ) -> Result<Self> {
        if keep == 0 || keep >= width {
            return Err(PieError::Architecture(format!(
                "split must keep between 1 and {} of {width} columns, got {keep}",
                width.saturating_sub(1)
            )));
        }
        if !(epsilon_sq > 0.0 && epsilon_sq.is_finite()) {
            return Err(PieError::Architecture(format!(
                "residual variance must be positive, got {epsilon_sq}"
            )));
        }
        let residual = width - keep;
        let mean = match mean {
            ResidualMean::Zero => None,
            ResidualMean::Mlp => Some(Mlp::new(
                store,
                &format!("{prefix}.g"),
                keep,
                hidden_width(keep),
                residual,
                rng,
            )),
        };
        Ok(SplitLayer {
            keep,
            residual,
            epsilon_sq,
            mean,
        })
    }

    pub fn keep(&self) -> usize {
        self.keep
    }

    pub fn residual_dim(&self) -> usize {
        self.residual
    }

    pub fn input_dim(&self) -> usize {
        self.keep + self.residual
    }

    pub fn epsilon_sq(&self) -> f64 {
        self.epsilon_sq
    }

    pub fn residual_mean_kind(&self) -> ResidualMean {
        if self.mean.is_some() {
            ResidualMean::Mlp
        } else {
            ResidualMean::Zero
        }
    }

    fn check_cols(&self, tape: &Tape, v: Var, expected: usize, op: &'static str) -> Result<usize> {
        let t = tape.value(v);
        let (rows, cols) = t.dims2(op)?;
        if cols != expected {
            return Err(TensorError::ShapeMismatch {
                op,
                left: t.shape().to_vec(),
                right: vec![rows, expected],
            }
            .into());
        }
        Ok(rows)
    }

    /// `g(z)` as a `[rows, residual]` variable.
    pub fn residual_mean(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let rows = self.check_cols(tape, z, self.keep, "split")?;
        match &self.mean {
            Some(net) => Ok(net.forward(tape, p, z)?),
            None => Ok(tape.constant(Tensor::zeros(&[rows, self.residual]))),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<SplitOutput> {
        self.check_cols(tape, x, self.input_dim(), "split")?;
        let z = tape.slice_cols(x, 0, self.keep)?;
        let r = tape.slice_cols(x, self.keep, self.input_dim())?;
        let mean = self.residual_mean(tape, p, z)?;
        let log_prob = gaussian_log_prob(tape, r, mean, self.epsilon_sq)?;
        Ok(SplitOutput { z, r, mean, log_prob })
    }

    /// `[z, g(z)]`.
    pub fn inverse(&self, tape: &mut Tape, p: &Bound, z: Var) -> Result<Var> {
        let mean = self.residual_mean(tape, p, z)?;
        Ok(tape.concat_cols(z, mean)?)
    }

    /// `[z, r]` with an explicit residual, the exact inverse of `forward`.
    pub fn inverse_with_residual(&self, tape: &mut Tape, z: Var, r: Var) -> Result<Var> {
        let rows = self.check_cols(tape, z, self.keep, "split")?;
        let rrows = self.check_cols(tape, r, self.residual, "split")?;
        if rows != rrows {
            return Err(TensorError::ShapeMismatch {
                op: "split",
                left: tape.value(z).shape().to_vec(),
                right: tape.value(r).shape().to_vec(),
            }
            .into());
        }
        Ok(tape.concat_cols(z, r)?)
    }

    /// Untraced split of a `[rows, width]` (or rank-1) tensor into `z`,
    /// `r` and the per-row residual log-density.
    pub fn split(&self, params: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor, Vec<f64>)> {
        let single = x.rank() == 1;
        let rows = if single { x.reshape(&[1, x.len()])? } else { x.clone() };
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let xv = tape.constant(rows);
        let out = self.forward(&mut tape, &p, xv)?;
        let mut z = tape.value(out.z).clone();
        let mut r = tape.value(out.r).clone();
        if single {
            z = z.reshape(&[z.len()])?;
            r = r.reshape(&[r.len()])?;
        }
        Ok((z, r, tape.value(out.log_prob).data().to_vec()))
    }

    /// Untraced `[z, g(z)]`.
    pub fn extend(&self, params: &ParamStore, z: &Tensor) -> Result<Tensor> {
        let single = z.rank() == 1;
        let rows = if single { z.reshape(&[1, z.len()])? } else { z.clone() };
        let mut tape = Tape::new();
        let p = params.bind(&mut tape);
        let zv = tape.constant(rows);
        let x = self.inverse(&mut tape, &p, zv)?;
        let x = tape.value(x).clone();
        Ok(if single { x.reshape(&[x.len()])? } else { x })
    }
}

/// Per-row `log N(r | mean, σ² I)` as a `[rows, 1]` column.
pub(crate) fn gaussian_log_prob(tape: &mut Tape, r: Var, mean: Var, variance: f64) -> Result<Var> {
    let m = tape.value(r).shape()[1] as f64;
    let diff = tape.sub(r, mean)?;
    let sq = tape.square(diff)?;
    let ss = tape.sum_rows(sq)?;
    let scaled = tape.mul_scalar(ss, -0.5 / variance)?;
    Ok(tape.add_scalar(scaled, -0.5 * m * (2.0 * PI * variance).ln())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_split(width: usize, keep: usize, eps: f64) -> (SplitLayer, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = SplitLayer::new(&mut store, "s", width, keep, eps, ResidualMean::Zero, &mut rng).unwrap();
        (s, store)
    }

    #[test]
    fn splits_coordinates() {
        let (s, store) = zero_split(4, 2, 1.0);
        let (z, r, _) = s.split(&store, &Tensor::vector(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0]);
        assert_eq!(r.data(), &[3.0, 4.0]);
    }

    #[test]
    fn unit_variance_zero_residual_density() {
        let (s, store) = zero_split(3, 1, 1.0);
        let (_, _, lp) = s.split(&store, &Tensor::vector(&[0.4, 0.0, 0.0])).unwrap();
        assert!((lp[0] + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp[0] + 1.8379).abs() < 1e-4);
    }

    #[test]
    fn tight_variance_density() {
        let (s, store) = zero_split(2, 1, 0.01);
        let (_, _, lp) = s.split(&store, &Tensor::vector(&[5.0, 0.1])).unwrap();
        let expect = -0.5 * (2.0 * PI * 0.01).ln() - 0.01 / 0.02;
        assert!((lp[0] - expect).abs() < 1e-12);
        assert!((lp[0] - 0.8836).abs() < 1e-4);
    }

    #[test]
    fn inverse_extends_with_zero() {
        let (s, store) = zero_split(4, 2, 1.0);
        let x = s.extend(&store, &Tensor::vector(&[1.0, 2.0])).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 0.0, 0.0]);
        let (z, _, _) = s.split(&store, &x).unwrap();
        assert_eq!(z.data(), &[1.0, 2.0]);
    }

    #[test]
    fn trainable_mean_matches_direct_evaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = SplitLayer::new(&mut store, "s", 5, 2, 0.1, ResidualMean::Mlp, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
        let z = Tensor::vector(&[0.3, -1.1]);
        let x = s.extend(&store, &z).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let zv = tape.constant(z.reshape(&[1, 2]).unwrap());
        let g = s.residual_mean(&mut tape, &p, zv).unwrap();
        assert_eq!(&x.data()[..2], z.data());
        assert_eq!(&x.data()[2..], tape.value(g).data());
        assert!(tape.value(g).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn rejects_bad_configuration() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SplitLayer::new(&mut store, "a", 4, 4, 1.0, ResidualMean::Zero, &mut rng).is_err());
        assert!(SplitLayer::new(&mut store, "b", 4, 2, 0.0, ResidualMean::Zero, &mut rng).is_err());
    }
}
