//! Multi-head self-attention with the token-to-self entries of the attention
//! matrix removed.

use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, softmax_rows_backward, Grads, Initializer, Linear, ParamStore, Real};
use crate::patching::{ImageTensor, PatchShape};

/// How the diagonal of the logit matrix is masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    /// Diagonal logits set to `-inf`: self weight is exactly zero.
    NegInf,
    /// Diagonal logits set to `0`: self weight is `1 / (1 + Σ_{j≠i} e^{S_ij})`.
    ZeroLogit,
}

impl MaskMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "neg_inf" => Ok(Self::NegInf),
            "zero_logit" => Ok(Self::ZeroLogit),
            other => Err(Error::Config(format!("unknown mask_mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::NegInf => "neg_inf",
            Self::ZeroLogit => "zero_logit",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mask_mode: MaskMode,
    pub diag_masked: bool,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = Self {
            embed_dim,
            num_heads,
            mask_mode: MaskMode::NegInf,
            diag_masked: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible into {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Per-head `n × n` row-stochastic attention matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<F> {
    pub heads: Vec<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub cfg: AttentionConfig,
}

#[derive(Debug, Clone)]
pub struct AttentionCache<F> {
    input: Array2<F>,
    /// Present when queries were computed from a separate input.
    query_input: Option<Array2<F>>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    pub weights: AttentionWeights<F>,
    concat: Array2<F>,
}

impl MultiHeadAttention {
    /// Registers `<prefix>.{wq,wk,wv,wo}.{weight,bias}`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        Ok(Self {
            wq: Linear::new(store, init, &format!("{prefix}.wq"), d, d)?,
            wk: Linear::new(store, init, &format!("{prefix}.wk"), d, d)?,
            wv: Linear::new(store, init, &format!("{prefix}.wv"), d, d)?,
            wo: Linear::new(store, init, &format!("{prefix}.wo"), d, d)?,
            cfg,
        })
    }

    /// Self-attention over the rows of `x`. Queries come from `query_input`
    /// when given, otherwise from `x`.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<'_, F>,
        query_input: Option<ArrayView2<'_, F>>,
    ) -> Result<(Array2<F>, AttentionCache<F>)> {
        let n = x.nrows();
        if self.cfg.diag_masked && n < 2 {
            return Err(Error::MaskedSingleton(n));
        }
        if let Some(qi) = &query_input {
            if qi.dim() != x.dim() {
                return Err(Error::Dimension(format!(
                    "query input {:?} vs tokens {:?}",
                    qi.dim(),
                    x.dim()
                )));
            }
        }
        let q = self.wq.forward(store, query_input.unwrap_or(x))?;
        let k = self.wk.forward(store, x)?;
        let v = self.wv.forward(store, x)?;
        let dk = self.cfg.head_dim();
        let scale = F::one() / F::of(dk as f64).sqrt();
        let mut concat = Array2::zeros((n, self.cfg.embed_dim));
        let mut heads = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut logits = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            if self.cfg.diag_masked {
                let fill = match self.cfg.mask_mode {
                    MaskMode::NegInf => F::neg_infinity(),
                    MaskMode::ZeroLogit => F::zero(),
                };
                logits.diag_mut().fill(fill);
            }
            let a = softmax_rows(logits.view())?;
            concat.slice_mut(cols).assign(&a.dot(&v.slice(cols)));
            heads.push(a);
        }
        let out = self.wo.forward(store, concat.view())?;
        Ok((
            out,
            AttentionCache {
                input: x.to_owned(),
                query_input: query_input.map(|qi| qi.to_owned()),
                q,
                k,
                v,
                weights: AttentionWeights { heads },
                concat,
            },
        ))
    }

    /// Returns the gradient for `x` and, if queries had their own input, the
    /// gradient for that input.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &AttentionCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> (Array2<F>, Option<Array2<F>>) {
        let dconcat = self.wo.backward(store, grads, cache.concat.view(), dy);
        let dk_dim = self.cfg.head_dim();
        let scale = F::one() / F::of(dk_dim as f64).sqrt();
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for (h, a) in cache.weights.heads.iter().enumerate() {
            let cols = s![.., h * dk_dim..(h + 1) * dk_dim];
            let dout = dconcat.slice(cols);
            let da = dout.dot(&cache.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let mut dlogits = softmax_rows_backward(a.view(), da.view());
            if self.cfg.diag_masked {
                // masked logits are constants
                dlogits.diag_mut().fill(F::zero());
            }
            dq.slice_mut(cols).assign(&(dlogits.dot(&cache.k.slice(cols)) * scale));
            dk.slice_mut(cols)
                .assign(&(dlogits.t().dot(&cache.q.slice(cols)) * scale));
        }
        let mut dx = self.wk.backward(store, grads, cache.input.view(), dk.view());
        dx += &self.wv.backward(store, grads, cache.input.view(), dv.view());
        match &cache.query_input {
            Some(qi) => {
                let dqi = self.wq.backward(store, grads, qi.view(), dq.view());
                (dx, Some(dqi))
            }
            None => {
                dx += &self.wq.backward(store, grads, cache.input.view(), dq.view());
                (dx, None)
            }
        }
    }
}

/// Masked multi-head self-attention over `tokens` (`n × d`).
pub fn masked_mhsa<F: Real>(
    store: &ParamStore<F>,
    attn: &MultiHeadAttention,
    tokens: ArrayView2<'_, F>,
) -> Result<(Array2<F>, AttentionWeights<F>)> {
    let (out, cache) = attn.forward(store, tokens, None)?;
    Ok((out, cache.weights))
}

/// Largest absolute change in the reconstruction of square patch
/// `patch_index` when that patch's pixels are replaced by uniform noise and
/// everything else is held fixed.
pub fn attention_leakage<F, R, M>(
    model_forward: M,
    img: &ImageTensor<F>,
    patch_side: usize,
    patch_index: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Real,
    R: Rng,
    M: Fn(&ImageTensor<F>) -> Result<ImageTensor<F>>,
{
    let (_, gc) = PatchShape::square(patch_side).grid(img.height, img.width)?;
    let (r, c) = (patch_index / gc, patch_index % gc);
    if r * patch_side >= img.height {
        return Err(Error::Dimension(format!("patch index {patch_index} out of range")));
    }
    let mut perturbed = img.clone();
    for ch in 0..img.channels {
        for y in r * patch_side..(r + 1) * patch_side {
            for x in c * patch_side..(c + 1) * patch_side {
                perturbed.set(ch, y, x, F::of(rng.random::<f64>()));
            }
        }
    }
    let base = model_forward(img)?;
    let moved = model_forward(&perturbed)?;
    let mut worst = 0.0f64;
    for ch in 0..img.channels {
        for y in r * patch_side..(r + 1) * patch_side {
            for x in c * patch_side..(c + 1) * patch_side {
                worst = worst.max((base.get(ch, y, x) - moved.get(ch, y, x)).abs().as_f64());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn setup(d: usize, heads: usize, mode: MaskMode, masked: bool, seed: u64) -> (ParamStore<f64>, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        init.std = 0.3;
        let mut cfg = AttentionConfig::new(d, heads).unwrap();
        cfg.mask_mode = mode;
        cfg.diag_masked = masked;
        let attn = MultiHeadAttention::new(&mut store, &mut init, "attn", cfg).unwrap();
        (store, attn)
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    #[test]
    fn two_tokens_attend_only_to_each_other() {
        let (store, attn) = setup(8, 2, MaskMode::NegInf, true, 0);
        let (_, w) = masked_mhsa(&store, &attn, tokens(2, 8, 1).view()).unwrap();
        for a in &w.heads {
            assert_eq!(a, &ndarray::array![[0.0, 1.0], [1.0, 0.0]]);
        }
    }

    #[test]
    fn identical_tokens_split_evenly() {
        let (store, attn) = setup(8, 2, MaskMode::NegInf, true, 2);
        let row = tokens(1, 8, 3);
        let x = Array2::from_shape_fn((3, 8), |(_, j)| row[[0, j]]);
        let (_, w) = masked_mhsa(&store, &attn, x.view()).unwrap();
        for a in &w.heads {
            for i in 0..3 {
                for j in 0..3 {
                    let expected = if i == j { 0.0 } else { 0.5 };
                    assert!((a[[i, j]] - expected).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_logit_keeps_residual_self_weight() {
        let (store, attn) = setup(8, 2, MaskMode::ZeroLogit, true, 4);
        let x = tokens(3, 8, 5);
        let (_, w) = masked_mhsa(&store, &attn, x.view()).unwrap();
        // scalar oracle from the projections
        let q = attn.wq.forward(&store, x.view()).unwrap();
        let k = attn.wk.forward(&store, x.view()).unwrap();
        for (h, a) in w.heads.iter().enumerate() {
            for i in 0..3 {
                let mut denom = 1.0;
                for j in 0..3 {
                    if j != i {
                        let mut dot = 0.0;
                        for t in 0..4 {
                            dot += q[[i, h * 4 + t]] * k[[j, h * 4 + t]];
                        }
                        denom += (dot / 2.0).exp();
                    }
                }
                assert!((a[[i, i]] - 1.0 / denom).abs() < 1e-12);
                assert!(a[[i, i]] > 0.0);
            }
        }
    }

    #[test]
    fn single_token_with_mask_is_an_error() {
        let (store, attn) = setup(4, 1, MaskMode::NegInf, true, 6);
        assert!(matches!(
            masked_mhsa(&store, &attn, tokens(1, 4, 0).view()),
            Err(Error::MaskedSingleton(1))
        ));
        let (store, attn) = setup(4, 1, MaskMode::NegInf, false, 6);
        assert!(masked_mhsa(&store, &attn, tokens(1, 4, 0).view()).is_ok());
    }

    #[test]
    fn heads_must_divide_embedding() {
        assert!(AttentionConfig::new(10, 4).is_err());
        assert_eq!(AttentionConfig::new(128, 4).unwrap().head_dim(), 32);
    }

    #[test]
    fn permutation_equivariance() {
        let (store, attn) = setup(8, 2, MaskMode::NegInf, true, 7);
        let x = tokens(5, 8, 8);
        let perm = [3, 0, 4, 1, 2];
        let px = Array2::from_shape_fn((5, 8), |(i, j)| x[[perm[i], j]]);
        let (y, _) = masked_mhsa(&store, &attn, x.view()).unwrap();
        let (py, _) = masked_mhsa(&store, &attn, px.view()).unwrap();
        for i in 0..5 {
            for j in 0..8 {
                assert!((py[[i, j]] - y[[perm[i], j]]).abs() < 1e-12);
            }
        }
    }

    fn check_backward(mode: MaskMode, masked: bool, separate_query: bool) {
        let (mut store, attn) = setup(6, 2, mode, masked, 9);
        let x = tokens(4, 6, 10);
        let qx = tokens(4, 6, 12);
        let w = tokens(4, 6, 11);
        let qi = separate_query.then(|| qx.view());
        let loss = |s: &ParamStore<f64>, x: &Array2<f64>, qx: &Array2<f64>| {
            let qi = separate_query.then(|| qx.view());
            (attn.forward(s, x.view(), qi).unwrap().0 * &w).sum()
        };
        let (_, cache) = attn.forward(&store, x.view(), qi).unwrap();
        let mut grads = Grads::zeros_like(&store);
        let (dx, dq) = attn.backward(&store, &mut grads, &cache, w.view());
        assert_eq!(dq.is_some(), separate_query);
        let h = 1e-5;
        for i in 0..4 {
            for j in 0..6 {
                let mut p = x.clone();
                p[[i, j]] += h;
                let mut m = x.clone();
                m[[i, j]] -= h;
                let fd = (loss(&store, &p, &qx) - loss(&store, &m, &qx)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "dx {fd} vs {}", dx[[i, j]]);
                if let Some(dq) = &dq {
                    let mut p = qx.clone();
                    p[[i, j]] += h;
                    let mut m = qx.clone();
                    m[[i, j]] -= h;
                    let fd = (loss(&store, &x, &p) - loss(&store, &x, &m)) / (2.0 * h);
                    assert!((fd - dq[[i, j]]).abs() < 1e-7, "dq {fd} vs {}", dq[[i, j]]);
                }
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for k in 0..store.get(id).len() {
                let orig = store.get(id).values[k];
                store.get_mut(id).values[k] = orig + h;
                let up = loss(&store, &x, &qx);
                store.get_mut(id).values[k] = orig - h;
                let down = loss(&store, &x, &qx);
                store.get_mut(id).values[k] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!(
                    (fd - grads.get(id)[k]).abs() < 1e-7,
                    "{} {fd} vs {}",
                    store.get(id).name,
                    grads.get(id)[k]
                );
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences_all_modes() {
        check_backward(MaskMode::NegInf, true, false);
        check_backward(MaskMode::ZeroLogit, true, false);
        check_backward(MaskMode::NegInf, false, false);
        check_backward(MaskMode::NegInf, true, true);
    }

    #[test]
    fn masked_logit_gradient_is_zero() {
        let (store, attn) = setup(6, 2, MaskMode::NegInf, true, 13);
        let x = tokens(5, 6, 14);
        let (_, cache) = attn.forward(&store, x.view(), None).unwrap();
        let da = tokens(5, 5, 15);
        for a in &cache.weights.heads {
            let ds = softmax_rows_backward(a.view(), da.view());
            for i in 0..5 {
                assert_eq!(ds[[i, i]], 0.0);
            }
            // finite difference: shifting a -inf logit changes nothing
            let mut logits = a.mapv(|p| p.ln());
            let base = softmax_rows(logits.view()).unwrap();
            logits[[2, 2]] += 1e-4;
            assert_eq!(softmax_rows(logits.view()).unwrap(), base);
        }
    }
}
