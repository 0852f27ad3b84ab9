use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{Grads, ParamId, ParamStore, Real};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row normalization to zero mean and unit variance followed by an
/// elementwise affine map.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<F> {
    normalized: Array2<F>,
    inv_std: Array1<F>,
}

impl LayerNorm {
    /// Registers `<prefix>.gain` (ones) and `<prefix>.shift` (zeros).
    pub fn new<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("layer norm over {dim} features")));
        }
        let gain = store.add(format!("{prefix}.gain"), vec![dim], vec![F::one(); dim])?;
        let shift = store.add(format!("{prefix}.shift"), vec![dim], vec![F::zero(); dim])?;
        Ok(Self { gain, shift, dim })
    }

    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<'_, F>,
    ) -> Result<(Array2<F>, LayerNormCache<F>)> {
        if x.ncols() != self.dim {
            return Err(Error::Dimension(format!(
                "layer norm over {} features got {}",
                self.dim,
                x.ncols()
            )));
        }
        let n = F::of(self.dim as f64);
        let eps = F::of(LAYER_NORM_EPS);
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * inv);
            *s = inv;
        }
        let out = &normalized * &store.vector(self.gain) + store.vector(self.shift);
        Ok((out, LayerNormCache { normalized, inv_std }))
    }

    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &LayerNormCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> Array2<F> {
        let dgain = (&dy * &cache.normalized).sum_axis(Axis(0));
        grads.vector_mut(self.gain).zip_mut_with(&dgain, |g, &d| *g += d);
        let dshift = dy.sum_axis(Axis(0));
        grads.vector_mut(self.shift).zip_mut_with(&dshift, |g, &d| *g += d);

        let n = F::of(self.dim as f64);
        let dxhat = &dy * &store.vector(self.gain);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &inv) in dx
            .outer_iter_mut()
            .zip(dxhat.outer_iter())
            .zip(cache.normalized.outer_iter())
            .zip(cache.inv_std.iter())
        {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
            for ((o, &gi), &xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
                *o = inv * (gi - (sum_g + xi * sum_gx) / n);
            }
        }
        dx
    }
}
