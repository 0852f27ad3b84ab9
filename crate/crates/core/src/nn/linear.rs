use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::{Grads, Initializer, ParamId, ParamStore, Real};
use crate::error::{Error, Result};

/// Affine map `y = x Wᵀ + b` applied to each row of `x`. `W` is stored
/// `out_dim × in_dim`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `<prefix>.weight` (truncated normal) and `<prefix>.bias` (zeros).
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            vec![out_dim, in_dim],
            init.trunc_normal(out_dim * in_dim),
        )?;
        let bias = store.add(format!("{prefix}.bias"), vec![out_dim], vec![F::zero(); out_dim])?;
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<F: Real>(&self, store: &ParamStore<F>, x: ArrayView2<'_, F>) -> Result<Array2<F>> {
        if x.ncols() != self.in_dim {
            return Err(Error::Dimension(format!(
                "linear layer expects {} inputs, got {}",
                self.in_dim,
                x.ncols()
            )));
        }
        let mut y = x.dot(&store.matrix(self.weight).t());
        y += &store.vector(self.bias);
        Ok(y)
    }

    /// Accumulates `dW`, `db` and returns `dx`.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        x: ArrayView2<'_, F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        general_mat_mul(F::one(), &dy.t(), &x, F::one(), &mut grads.matrix_mut(self.weight));
        let db = dy.sum_axis(Axis(0));
        grads.vector_mut(self.bias).zip_mut_with(&db, |g, &d| *g += d);
        dy.dot(&store.matrix(self.weight))
    }
}
