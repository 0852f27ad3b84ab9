//! Stack of transformer encoder blocks: masked attention and a feed-forward
//! network, each wrapped in a residual connection and layer normalization.

use ndarray::{Array2, ArrayView2};

use crate::attention::{AttentionCache, AttentionConfig, AttentionWeights, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{
    Activation, Grads, Initializer, LayerNorm, LayerNormCache, Mlp, MlpCache, OutputActivation, ParamStore, Real,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormPlacement {
    /// `x + f(norm(x))`
    PreNorm,
    /// `norm(x + f(x))`
    PostNorm,
}

impl NormPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Self::PreNorm),
            "post" => Ok(Self::PostNorm),
            other => Err(Error::Config(format!("unknown norm_placement `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::PreNorm => "pre",
            Self::PostNorm => "post",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionResidual {
    Standard,
    /// The skip connection around the attention sublayer is dropped.
    Disabled,
}

impl AttentionResidual {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "disabled" => Ok(Self::Disabled),
            other => Err(Error::Config(format!("unknown attention_residual `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Standard => "standard",
            Self::Disabled => "disabled",
        }
    }
}

/// Input the first block computes its attention queries from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuerySource {
    /// The token itself (standard self-attention).
    Tokens,
    /// The token's positional embedding only. Later blocks use their input.
    Position,
}

impl QuerySource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(Self::Tokens),
            "position" => Ok(Self::Position),
            other => Err(Error::Config(format!("unknown query_source `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tokens => "tokens",
            Self::Position => "position",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_blocks: usize,
    pub ffn_hidden: usize,
    pub norm_placement: NormPlacement,
    pub attention_residual: AttentionResidual,
    pub query_source: QuerySource,
    pub activation: Activation,
}

impl EncoderConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        if self.ffn_hidden < embed_dim {
            return Err(Error::Config(format!(
                "ffn_hidden {} is smaller than embed_dim {embed_dim}",
                self.ffn_hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    ln1: LayerNormCache<F>,
    /// Layer norm of the separate query input (pre-norm, position queries).
    ln1_query: Option<LayerNormCache<F>>,
    attn: AttentionCache<F>,
    ln2: LayerNormCache<F>,
    ffn: MlpCache<F>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub cfg: EncoderConfig,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<F> {
    blocks: Vec<BlockCache<F>>,
}

impl<F: Real> EncoderCache<F> {
    pub fn attention_weights(&self) -> Vec<AttentionWeights<F>> {
        self.blocks.iter().map(|b| b.attn.weights.clone()).collect()
    }
}

impl Encoder {
    /// Registers blocks as `<prefix>.enc{i}.{ln1,attn,ln2,ffn}`.
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        prefix: &str,
        cfg: EncoderConfig,
        attn_cfg: AttentionConfig,
    ) -> Result<Self> {
        cfg.validate(attn_cfg.embed_dim)?;
        let d = attn_cfg.embed_dim;
        let blocks = (0..cfg.num_blocks)
            .map(|i| {
                let p = format!("{prefix}.enc{i}");
                Ok(EncoderBlock {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), d)?,
                    attn: MultiHeadAttention::new(store, init, &format!("{p}.attn"), attn_cfg)?,
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), d)?,
                    ffn: Mlp::new(
                        store,
                        init,
                        &format!("{p}.ffn"),
                        &[d, cfg.ffn_hidden, d],
                        cfg.activation,
                        OutputActivation::Identity,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks, cfg })
    }

    /// `positions` is required when queries come from positional embeddings.
    pub fn forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: ArrayView2<'_, F>,
        positions: Option<ArrayView2<'_, F>>,
    ) -> Result<(Array2<F>, EncoderCache<F>)> {
        let mut h = x.to_owned();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let query_in = match (i, self.cfg.query_source) {
                (0, QuerySource::Position) => {
                    Some(positions.ok_or_else(|| Error::Config("position queries need the positional table".into()))?)
                }
                _ => None,
            };
            let (out, cache) = self.block_forward(store, block, h.view(), query_in)?;
            h = out;
            caches.push(cache);
        }
        Ok((h, EncoderCache { blocks: caches }))
    }

    fn block_forward<F: Real>(
        &self,
        store: &ParamStore<F>,
        block: &EncoderBlock,
        x: ArrayView2<'_, F>,
        query_in: Option<ArrayView2<'_, F>>,
    ) -> Result<(Array2<F>, BlockCache<F>)> {
        let residual = self.cfg.attention_residual == AttentionResidual::Standard;
        match self.cfg.norm_placement {
            NormPlacement::PreNorm => {
                let (a_in, ln1) = block.ln1.forward(store, x)?;
                let (q_norm, ln1_query) = match query_in {
                    Some(q) => {
                        let (qn, c) = block.ln1.forward(store, q)?;
                        (Some(qn), Some(c))
                    }
                    None => (None, None),
                };
                let (att, attn) = block
                    .attn
                    .forward(store, a_in.view(), q_norm.as_ref().map(|q| q.view()))?;
                let h = if residual { &x + &att } else { att };
                let (f_in, ln2) = block.ln2.forward(store, h.view())?;
                let (f, ffn) = block.ffn.forward(store, f_in.view())?;
                Ok((
                    h + f,
                    BlockCache {
                        ln1,
                        ln1_query,
                        attn,
                        ln2,
                        ffn,
                    },
                ))
            }
            NormPlacement::PostNorm => {
                let (att, attn) = block.attn.forward(store, x, query_in)?;
                let s = if residual { &x + &att } else { att };
                let (h, ln1) = block.ln1.forward(store, s.view())?;
                let (f, ffn) = block.ffn.forward(store, h.view())?;
                let (out, ln2) = block.ln2.forward(store, (&h + &f).view())?;
                Ok((
                    out,
                    BlockCache {
                        ln1,
                        ln1_query: None,
                        attn,
                        ln2,
                        ffn,
                    },
                ))
            }
        }
    }

    /// Returns the input gradient and, for position queries, the gradient
    /// with respect to the positional table through the query path.
    pub fn backward<F: Real>(
        &self,
        store: &ParamStore<F>,
        grads: &mut Grads<F>,
        cache: &EncoderCache<F>,
        dy: ArrayView2<'_, F>,
    ) -> (Array2<F>, Option<Array2<F>>) {
        let residual = self.cfg.attention_residual == AttentionResidual::Standard;
        let mut g = dy.to_owned();
        let mut dpos = None;
        for (block, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (dx, dq) = match self.cfg.norm_placement {
                NormPlacement::PreNorm => {
                    // out = h + ffn(ln2(h))
                    let df_in = block.ffn.backward(store, grads, &c.ffn, g.view());
                    let mut dh = block.ln2.backward(store, grads, &c.ln2, df_in.view());
                    dh += &g;
                    let (da_in, dq_norm) = block.attn.backward(store, grads, &c.attn, dh.view());
                    let mut dx = block.ln1.backward(store, grads, &c.ln1, da_in.view());
                    if residual {
                        dx += &dh;
                    }
                    let dq = dq_norm.map(|dqn| {
                        block.ln1.backward(
                            store,
                            grads,
                            c.ln1_query.as_ref().expect("query norm cache"),
                            dqn.view(),
                        )
                    });
                    (dx, dq)
                }
                NormPlacement::PostNorm => {
                    // out = ln2(h + ffn(h)), h = ln1(s)
                    let dsum = block.ln2.backward(store, grads, &c.ln2, g.view());
                    let mut dh = block.ffn.backward(store, grads, &c.ffn, dsum.view());
                    dh += &dsum;
                    let ds = block.ln1.backward(store, grads, &c.ln1, dh.view());
                    let (mut dx, dq) = block.attn.backward(store, grads, &c.attn, ds.view());
                    if residual {
                        dx += &ds;
                    }
                    (dx, dq)
                }
            };
            if dq.is_some() {
                dpos = dq;
            }
            g = dx;
        }
        (g, dpos)
    }
}
