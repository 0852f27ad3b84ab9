//! Differentiable building blocks.
//!
//! Parameters live in a flat [`ParamStore`] addressed by [`ParamId`]; layers
//! only hold ids. Gradients are accumulated into a separate [`Grads`] buffer of
//! the same layout, so several samples can be differentiated concurrently
//! against one immutable store and reduced afterwards in a fixed order.
//!
//! Every layer exposes `forward`, which returns its output together with the
//! activations it needs, and `backward`, which consumes those activations and
//! the upstream gradient, accumulates parameter gradients and returns the
//! gradient with respect to its input.

pub mod checkpoint;
pub mod layer_norm;
pub mod linear;
pub mod mlp;

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, LinalgScalar, ScalarOperand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub use layer_norm::{LayerNorm, LayerNormCache};
pub use linear::Linear;
pub use mlp::{Mlp, MlpCache, OutputActivation};

/// Floating point type the network can run in (`f32` for training, `f64`
/// for gradient checks).
pub trait Real:
    LinalgScalar
    + num_traits::Float
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    /// Hierarchical id such as `square.enc0.attn.wq.weight`.
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<F>,
}

impl<F> Param<F> {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
    by_name: HashMap<String, usize>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<F>) -> Result<ParamId> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` declares {shape:?} but holds {} values",
                values.len()
            )));
        }
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape, values });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn values(&self, id: ParamId) -> &[F] {
        &self.params[id.0].values
    }

    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, F> {
        let p = &self.params[id.0];
        ArrayView2::from_shape((p.shape[0], p.shape[1]), &p.values).expect("matrix parameter")
    }

    pub fn vector(&self, id: ParamId) -> ArrayView1<'_, F> {
        ArrayView1::from(&self.params[id.0].values[..])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Copy of the store converted to another precision.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    values: p.values.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Grads<F> {
    bufs: Vec<Vec<F>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Grads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            bufs: store.iter().map(|p| vec![F::zero(); p.len()]).collect(),
            shapes: store.iter().map(|p| p.shape.clone()).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.bufs[id.0]
    }

    pub fn matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, F> {
        let shape = &self.shapes[id.0];
        ArrayViewMut2::from_shape((shape[0], shape[1]), &mut self.bufs[id.0]).expect("matrix gradient")
    }

    pub fn vector_mut(&mut self, id: ParamId) -> ArrayViewMut1<'_, F> {
        ArrayViewMut1::from(&mut self.bufs[id.0][..])
    }

    pub fn iter(&self) -> impl Iterator<Item = &[F]> {
        self.bufs.iter().map(Vec::as_slice)
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        for buf in &mut self.bufs {
            for x in buf.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Seeded parameter initializer. Values are drawn in `f64` and then cast, so a
/// given seed yields the same model in every precision.
pub struct Initializer {
    rng: ChaCha8Rng,
    pub std: f64,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            std: 0.02,
        }
    }

    /// Normal(0, std) truncated to two standard deviations (resampled).
    pub fn trunc_normal<F: Real>(&mut self, n: usize) -> Vec<F> {
        (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break F::of(z * self.std);
                }
            })
            .collect()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// tanh approximation of GELU.
    Gelu,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "relu" => Ok(Self::Relu),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        }
    }

    pub fn apply<F: Real>(self, x: F) -> F {
        match self {
            Self::Gelu => {
                let c = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
                let inner = c * (x + F::of(0.044715) * x * x * x);
                F::of(0.5) * x * (F::one() + inner.tanh())
            }
            Self::Relu => x.max(F::zero()),
        }
    }

    pub fn derivative<F: Real>(self, x: F) -> F {
        match self {
            Self::Gelu => {
                let c = F::of(0.797_884_560_802_865_4);
                let a = F::of(0.044715);
                let inner = c * (x + a * x * x * x);
                let t = inner.tanh();
                let dinner = c * (F::one() + F::of(3.0) * a * x * x);
                F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
            }
            Self::Relu => {
                if x > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise softmax. `-inf` entries map to exactly zero; a row made only of
/// `-inf` is an error.
pub fn softmax_rows<F: Real>(m: ArrayView2<'_, F>) -> Result<Array2<F>> {
    let mut out = m.to_owned();
    for (row, mut r) in out.axis_iter_mut(Axis(0)).enumerate() {
        if r.iter().all(|&v| v == F::neg_infinity()) {
            return Err(Error::AllMaskedRow { row });
        }
        // NaN entries are skipped by `max` and then propagate through `exp`
        let max = r.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for v in r.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = F::one() / sum;
        r.mapv_inplace(|v| v * inv);
    }
    Ok(out)
}

/// Gradient of the logits given the softmax output `a` and the gradient of
/// the loss with respect to `a`.
pub fn softmax_rows_backward<F: Real>(a: ArrayView2<'_, F>, da: ArrayView2<'_, F>) -> Array2<F> {
    let mut ds = Array2::zeros(a.raw_dim());
    for ((a_row, da_row), mut ds_row) in a.outer_iter().zip(da.outer_iter()).zip(ds.outer_iter_mut()) {
        let dot: F = a_row.iter().zip(da_row.iter()).map(|(&p, &g)| p * g).sum();
        for ((d, &p), &g) in ds_row.iter_mut().zip(a_row.iter()).zip(da_row.iter()) {
            *d = p * (g - dot);
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(array![[0.0f64, 0.0]].view()).unwrap();
        assert_eq!(s, array![[0.5, 0.5]]);
    }

    #[test]
    fn softmax_masked_entry_is_exact_zero() {
        let s = softmax_rows(array![[f64::NEG_INFINITY, 0.0, 0.0]].view()).unwrap();
        assert_eq!(s[[0, 0]], 0.0);
        assert!((s[[0, 1]] - 0.5).abs() < 1e-15);
        assert!((s[[0, 2]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_scalar_oracle() {
        let s = softmax_rows(array![[1.0f64, 2.0, 3.0]].view()).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..3 {
            assert!((s[[0, j]] - e[j] / z).abs() < 1e-15);
        }
        // 0.09003057317038046, 0.24472847105479767, 0.6652409557748219
        assert!((s[[0, 0]] - 0.090_030_573_170_380_46).abs() < 1e-12);
        assert!((s[[0, 2]] - 0.665_240_955_774_821_9).abs() < 1e-12);
    }

    #[test]
    fn softmax_all_masked_row_is_an_error() {
        let m = array![[0.0f32, 1.0], [f32::NEG_INFINITY, f32::NEG_INFINITY]];
        assert!(matches!(softmax_rows(m.view()), Err(Error::AllMaskedRow { row: 1 })));
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let s = array![[0.3f64, -1.2, 0.8], [2.0, f64::NEG_INFINITY, -0.5]];
        let w = array![[0.7f64, -0.1, 0.4], [-0.9, 0.2, 1.5]];
        let f = |s: &Array2<f64>| (softmax_rows(s.view()).unwrap() * &w).sum();
        let a = softmax_rows(s.view()).unwrap();
        let ds = softmax_rows_backward(a.view(), w.view());
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                if !s[[i, j]].is_finite() {
                    assert_eq!(ds[[i, j]], 0.0);
                    continue;
                }
                let mut p = s.clone();
                p[[i, j]] += h;
                let mut m = s.clone();
                m[[i, j]] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!((fd - ds[[i, j]]).abs() < 1e-8, "{i},{j}: {fd} vs {}", ds[[i, j]]);
            }
        }
    }

    #[test]
    fn activation_derivatives_match_finite_differences() {
        for act in [Activation::Gelu, Activation::Relu] {
            for &x in &[-2.5f64, -0.7, 0.3, 1.1, 3.0] {
                let h = 1e-6;
                let fd = (act.apply(x + h) - act.apply(x - h)) / (2.0 * h);
                assert!((fd - act.derivative(x)).abs() < 1e-8, "{act:?} at {x}");
            }
        }
    }

    #[test]
    fn initializer_is_deterministic_and_truncated() {
        let a: Vec<f64> = Initializer::new(7).trunc_normal(1000);
        let b: Vec<f64> = Initializer::new(7).trunc_normal(1000);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.04));
        let c: Vec<f32> = Initializer::new(7).trunc_normal(1000);
        assert!(a.iter().zip(&c).all(|(x, y)| *x as f32 == *y));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", vec![1], vec![0.0]).unwrap();
        assert!(matches!(
            store.add("a", vec![1], vec![0.0]),
            Err(Error::DuplicateParam(_))
        ));
    }
}
