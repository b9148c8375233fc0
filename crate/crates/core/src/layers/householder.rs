use rand::Rng;
use rand_distr::StandardNormal;

use super::FlowLayer;
use crate::error::{PieError, Result};
use crate::params::{Bound, ParamStore};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{matmul, Tensor, TensorError};

/// Chain of Householder reflections `H(v) = I - 2 v vᵀ / vᵀv` acting on the
/// feature (or channel) axis. Orthogonal, so the inverse is the transpose
/// and the log-determinant is zero.
#[derive(Debug, Clone)]
pub struct HouseholderTransform {
    dim: usize,
    generators: Vec<ParamId>,
}

impl HouseholderTransform {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 || count == 0 {
            return Err(PieError::Architecture(format!(
                "householder transform needs dim > 0 and count > 0 (got {dim}, {count})"
            )));
        }
        let generators = (0..count)
            .map(|j| {
                let v = loop {
                    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                    if v.iter().map(|a| a * a).sum::<f64>().sqrt() > 1e-6 {
                        break v;
                    }
                };
                store.add(format!("{prefix}.v{j}"), Tensor::vector(&v))
            })
            .collect();
        Ok(HouseholderTransform { dim, generators })
    }

    /// Uses explicit generator vectors, applied in the given order.
    pub fn from_generators(store: &mut ParamStore, prefix: &str, generators: &[Tensor]) -> Result<Self> {
        let dim = generators.first().map(Tensor::len).unwrap_or(0);
        if dim == 0 || generators.iter().any(|g| g.len() != dim || g.rank() != 1) {
            return Err(PieError::Architecture("generators must be equal-length vectors".into()));
        }
        for g in generators {
            check_nonzero(g)?;
        }
        let generators = generators
            .iter()
            .enumerate()
            .map(|(j, g)| store.add(format!("{prefix}.v{j}"), g.clone()))
            .collect();
        Ok(HouseholderTransform { dim, generators })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn generators(&self) -> &[ParamId] {
        &self.generators
    }

    /// The explicit `dim × dim` matrix of the whole chain, acting on column
    /// vectors: `y = M x`.
    pub fn matrix(&self, params: &ParamStore) -> Result<Tensor> {
        let mut m = Tensor::eye(self.dim);
        for &id in &self.generators {
            let h = reflection_matrix(params.get(id))?;
            m = matmul(&h, &m)?;
        }
        Ok(m)
    }
}

fn check_nonzero(v: &Tensor) -> Result<()> {
    if v.data().iter().all(|&a| a == 0.0) {
        return Err(TensorError::Domain {
            op: "householder",
            detail: "reflection generator has zero or non-finite norm".into(),
        }
        .into());
    }
    Ok(())
}

/// `I - 2 v vᵀ / vᵀv` for a single generator.
pub fn reflection_matrix(v: &Tensor) -> Result<Tensor> {
    check_nonzero(v)?;
    let n = v.len();
    let d = v.data();
    let q: f64 = d.iter().map(|a| a * a).sum();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            data[i * n + j] = delta - 2.0 * d[i] * d[j] / q;
        }
    }
    Ok(Tensor::new(vec![n, n], data)?)
}

impl FlowLayer for HouseholderTransform {
    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<(Var, Option<Var>)> {
        let mut y = x;
        for &id in &self.generators {
            y = tape.householder(y, p[id])?;
        }
        Ok((y, None))
    }

    fn inverse(&self, tape: &mut Tape, p: &Bound, y: Var) -> Result<Var> {
        let mut x = y;
        for &id in self.generators.iter().rev() {
            x = tape.householder(x, p[id])?;
        }
        Ok(x)
    }
}
